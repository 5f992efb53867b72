//! Random pruning: the control baseline.
//!
//! Positions are removed uniformly at random with no regard for weight
//! values, which is exactly what makes it a useful lower bound — any signal a
//! real sparsification method claims must beat this. Unlike magnitude
//! pruning, random pruning never reactivates: once a position is pruned it
//! stays pruned, and the training loop freezes its gradient.

use crate::error::{Error, Result};
use crate::mask::SparsityMask;
use crate::rng::RngState;

/// Grow a random mask to the target sparsity: `floor(target * n)` total
/// zeros, the new ones drawn uniformly from the currently kept positions.
/// Errors if the target asks for fewer zeros than the mask already has,
/// since random pruning is irreversible by design.
pub fn random_prune_step(
    mask: &mut SparsityMask,
    target: f64,
    rng: &mut RngState,
) -> Result<()> {
    if !(0.0..=1.0).contains(&target) {
        return Err(Error::InvalidSparsityTarget {
            target,
            reason: "sparsity must lie in [0, 1]".into(),
        });
    }
    let n = mask.len();
    let want = (target * n as f64).floor() as usize;
    let have = mask.count_pruned();
    if want < have {
        return Err(Error::InvalidSparsityTarget {
            target,
            reason: format!("mask already has {have} of {n} pruned; random pruning cannot undo"),
        });
    }
    let extra = want - have;
    if extra == 0 {
        return Ok(());
    }
    // Partial Fisher-Yates over the kept positions: the first `extra`
    // entries after the partial shuffle are a uniform sample without
    // replacement.
    let mut kept = mask.kept_indices();
    for i in 0..extra {
        let j = i + rng.below(kept.len() - i);
        kept.swap(i, j);
        mask.prune(kept[i]);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn hits_the_exact_floor_count() {
        let mut rng = RngState::new(1);
        let mut mask = SparsityMask::ones(100);
        random_prune_step(&mut mask, 0.35, &mut rng).unwrap();
        assert_eq!(mask.count_pruned(), 35);
        random_prune_step(&mut mask, 0.357, &mut rng).unwrap();
        assert_eq!(mask.count_pruned(), 35); // floor(35.7)
    }

    #[test]
    fn growth_is_monotone_and_shrinking_is_rejected() {
        let mut rng = RngState::new(2);
        let mut mask = SparsityMask::ones(200);
        random_prune_step(&mut mask, 0.3, &mut rng).unwrap();
        let early: Vec<usize> = (0..200).filter(|&i| !mask.is_kept(i)).collect();
        random_prune_step(&mut mask, 0.6, &mut rng).unwrap();
        assert_eq!(mask.count_pruned(), 120);
        for i in early {
            assert!(!mask.is_kept(i), "previously pruned position {i} came back");
        }
        assert!(random_prune_step(&mut mask, 0.1, &mut rng).is_err());
        assert!(random_prune_step(&mut mask, 1.5, &mut rng).is_err());
    }

    #[test]
    fn identical_rng_states_give_identical_masks() {
        let mut a = SparsityMask::ones(500);
        let mut b = SparsityMask::ones(500);
        let mut ra = RngState::new(77).stream(4);
        let mut rb = RngState::new(77).stream(4);
        random_prune_step(&mut a, 0.5, &mut ra).unwrap();
        random_prune_step(&mut b, 0.5, &mut rb).unwrap();
        assert_eq!(a, b);
        assert_eq!(ra, rb);
    }

    #[test]
    fn positions_are_uniform_over_ten_bins() {
        // 10,000 positions pruned to 50%, bucketed into 10 bins of 1,000:
        // expected 500 prunes per bin. The chi-squared statistic with nine
        // degrees of freedom stays below 21.666 (the p = 0.01 critical
        // value) for a uniform sampler.
        let mut mask = SparsityMask::ones(10_000);
        let mut rng = RngState::new(42);
        random_prune_step(&mut mask, 0.5, &mut rng).unwrap();
        let mut bins = [0usize; 10];
        for i in 0..10_000 {
            if !mask.is_kept(i) {
                bins[i / 1000] += 1;
            }
        }
        let chi2: f64 = bins.iter().map(|&o| (o as f64 - 500.0).powi(2) / 500.0).sum();
        assert!(chi2 < 21.666, "chi-squared {chi2} exceeds the df=9, p=0.01 critical value");
    }

    proptest! {
        #[test]
        fn sequential_targets_nest(
            n in 10usize..400,
            t1 in 0.0f64..0.5,
            t2 in 0.5f64..1.0,
            seed in 0u64..500,
        ) {
            let mut rng = RngState::new(seed);
            let mut mask = SparsityMask::ones(n);
            random_prune_step(&mut mask, t1, &mut rng).unwrap();
            let first = mask.clone();
            random_prune_step(&mut mask, t2, &mut rng).unwrap();
            prop_assert_eq!(mask.count_pruned(), (t2 * n as f64).floor() as usize);
            for i in 0..n {
                if !first.is_kept(i) {
                    prop_assert!(!mask.is_kept(i));
                }
            }
        }
    }
}
