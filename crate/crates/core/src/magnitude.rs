//! Magnitude pruning: remove the smallest-magnitude weights.
//!
//! Each prune event re-ranks *all* weights of a layer — pruned ones included —
//! and keeps the largest by absolute value. Because masked weights can keep
//! receiving gradient (see [`crate::tape::MaskGradMode::Dense`]), a weight
//! that regrows past the cut can win its slot back at the next event.

use crate::error::{Error, Result};
use crate::mask::SparsityMask;
use crate::tensor::{Scalar, Tensor};

/// Prune a layer to the target sparsity: exactly `floor(target * n)` weights
/// are masked, chosen as the smallest in absolute value over all `n`
/// underlying weights, ties broken toward the lower flat index. The mask is
/// rebuilt from scratch, so previously pruned weights compete again.
pub fn magnitude_prune_step<S: Scalar>(
    weights: &Tensor<S>,
    mask: &mut SparsityMask,
    target: f64,
) -> Result<()> {
    if !(0.0..=1.0).contains(&target) {
        return Err(Error::InvalidSparsityTarget {
            target,
            reason: "sparsity must lie in [0, 1]".into(),
        });
    }
    let n = weights.numel();
    assert_eq!(mask.len(), n, "mask length does not match weight count");
    let k = (target * n as f64).floor() as usize;

    *mask = SparsityMask::ones(n);
    if k == 0 {
        return Ok(());
    }
    // Rank by (|w|, index). For nonnegative floats the IEEE bit pattern is
    // monotone in the value, so the f64 bits of |w| give a total order
    // without NaN panics, and the index makes every key unique — the k
    // smallest under this order are a deterministic set.
    let mut order: Vec<u32> = (0..n as u32).collect();
    let key = |i: u32| (weights.data()[i as usize].as_f64().abs().to_bits(), i);
    if k < n {
        order.select_nth_unstable_by_key(k - 1, |&i| key(i));
        order.truncate(k);
    }
    for &i in &order {
        mask.prune(i as usize);
    }
    Ok(())
}

/// Weights with the mask applied: pruned entries exactly zero. This is the
/// effective weight tensor used at evaluation time.
pub fn masked_values<S: Scalar>(weights: &Tensor<S>, mask: &SparsityMask) -> Tensor<S> {
    let mut out = weights.clone();
    mask.apply_to(out.data_mut());
    out
}
