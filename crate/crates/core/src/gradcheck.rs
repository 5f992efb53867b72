//! Finite-difference verification of tape gradients.
//!
//! Runs entirely in `f64`: central differences with step `h` have error
//! `O(h^2)` plus roundoff `O(eps/h)`, so at `h = 1e-5` a correct gradient
//! agrees to roughly eight significant digits, leaving a wide margin below
//! the acceptance tolerances. Checking the same graph code that training
//! uses is the point — the graph builders are generic over the scalar type,
//! so nothing is mocked here.
//!
//! Stochastic layers are handled by pinning their noise: the caller draws
//! the noise once, closes over it, and every finite-difference evaluation
//! replays the identical draw.

use crate::rng::RngState;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use std::fmt;

/// Result of checking one loss function against finite differences.
#[derive(Debug, Clone)]
pub struct GradCheckEntry {
    pub label: String,
    /// Worst relative error over all sampled coordinates.
    pub max_rel_err: f64,
    /// How many coordinates were actually compared.
    pub checked: usize,
}

/// A batch of gradient checks with a shared pass threshold.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.entries.iter().all(|e| e.max_rel_err < self.tolerance && e.checked > 0)
    }
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for e in &self.entries {
            let verdict = if e.max_rel_err < self.tolerance && e.checked > 0 { "ok" } else { "FAIL" };
            writeln!(
                f,
                "{:28} max rel err {:10.3e} over {:4} coords   [{verdict}]",
                e.label, e.max_rel_err, e.checked
            )?;
        }
        write!(f, "tolerance {:.1e}", self.tolerance)
    }
}

/// Compare tape gradients of `build` against central differences.
///
/// `build` receives a fresh tape and one var per entry of `params`, and must
/// return a scalar loss; it is invoked once for the analytic pass and twice
/// per sampled coordinate for the numeric one. `eligible(param, coord)`
/// filters which coordinates may be sampled (used to stay away from
/// non-differentiable boundaries); up to `samples` eligible coordinates are
/// checked per parameter.
pub fn check_gradients(
    label: &str,
    params: &[Tensor<f64>],
    mut build: impl FnMut(&mut Tape<f64>, &[Var]) -> Var,
    samples: usize,
    h: f64,
    eligible: impl Fn(usize, usize) -> bool,
    rng: &mut RngState,
) -> GradCheckEntry {
    // Analytic gradients.
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p)).collect();
    let loss = build(&mut tape, &vars);
    assert_eq!(tape.value(loss).numel(), 1, "gradcheck requires a scalar loss");
    tape.backward(loss).expect("gradcheck analytic backward");
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(params)
        .map(|(v, p)| tape.grad(*v).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; p.numel()]))
        .collect();

    let mut eval = |perturbed: &[Tensor<f64>]| -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = perturbed.iter().map(|p| tape.leaf(p)).collect();
        let loss = build(&mut tape, &vars);
        tape.value(loss).at(0)
    };

    let mut max_rel_err = 0.0f64;
    let mut checked = 0usize;
    let mut work: Vec<Tensor<f64>> = params.to_vec();
    for (pi, p) in params.iter().enumerate() {
        let candidates: Vec<usize> = (0..p.numel()).filter(|&c| eligible(pi, c)).collect();
        if candidates.is_empty() {
            continue;
        }
        let coords: Vec<usize> = if candidates.len() <= samples {
            candidates
        } else {
            // Sample without replacement via a partial shuffle.
            let mut pool = candidates;
            for i in 0..samples {
                let j = i + rng.below(pool.len() - i);
                pool.swap(i, j);
            }
            pool.truncate(samples);
            pool
        };
        for c in coords {
            let orig = work[pi].at(c);
            work[pi].data_mut()[c] = orig + h;
            let up = eval(&work);
            work[pi].data_mut()[c] = orig - h;
            let down = eval(&work);
            work[pi].data_mut()[c] = orig;
            let fd = (up - down) / (2.0 * h);
            let a = analytic[pi][c];
            let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-6);
            if rel > max_rel_err {
                max_rel_err = rel;
            }
            checked += 1;
        }
    }
    GradCheckEntry { label: label.to_string(), max_rel_err, checked }
}

/// The standard layer battery: one small two-layer classifier per
/// sparsification method, each checked end to end through the cross-entropy
/// loss. Stochastic draws are pinned (the identical noise replays on every
/// finite-difference evaluation) and the hard-concrete noise is constructed
/// so every gate sits strictly inside the open interval, away from the
/// clamp boundaries where the subgradient is legitimately zero.
pub fn standard_battery() -> GradCheckReport {
    let mut report = GradCheckReport { entries: Vec::new(), tolerance: 1e-4 };
    let mut rng = RngState::new(0x5eed);
    let samples = 8;
    let h = 1e-5;
    let all = |_: usize, _: usize| true;

    fn init(rng: &mut RngState, dims: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
        let mut t = Tensor::<f64>::zeros(dims);
        t.fill_uniform(rng, lo, hi);
        t
    }
    let x = init(&mut rng, &[5, 9], 0.0, 1.0);
    let labels: Vec<u32> = vec![0, 1, 2, 3, 0];
    let glorot = 0.4;
    let w1 = init(&mut rng, &[9, 7], -glorot, glorot);
    let b1 = init(&mut rng, &[7], -0.1, 0.1);
    let w2 = init(&mut rng, &[7, 4], -glorot, glorot);
    let b2 = init(&mut rng, &[4], -0.1, 0.1);

    let dense_tail = |tape: &mut Tape<f64>, hidden: Var, w2: Var, b2: Var, labels: &[u32]| {
        let h1 = tape.relu(hidden);
        let z2 = tape.matmul(h1, w2);
        let logits = tape.add_row_bias(z2, b2);
        tape.mean_cross_entropy(logits, labels)
    };

    {
        let params = [w1.clone(), b1.clone(), w2.clone(), b2.clone()];
        let x = x.clone();
        let labels = labels.clone();
        report.entries.push(check_gradients(
            "dense",
            &params,
            |tape, vars| {
                let xv = tape.constant(x.clone());
                let z1 = tape.matmul(xv, vars[0]);
                let z1 = tape.add_row_bias(z1, vars[1]);
                dense_tail(tape, z1, vars[2], vars[3], &labels)
            },
            samples,
            h,
            all,
            &mut rng,
        ));
    }

    {
        // Mask roughly a third of the first layer; gradients under the mask
        // must be exactly zero on both sides of the comparison.
        let mut mask = crate::mask::SparsityMask::ones(w1.numel());
        let mut mask_rng = rng.stream(7);
        for i in 0..w1.numel() {
            if mask_rng.next_open01() < 0.3 {
                mask.prune(i);
            }
        }
        let dense_mask: Vec<f64> = mask.to_dense();
        let params = [w1.clone(), b1.clone(), w2.clone(), b2.clone()];
        let x = x.clone();
        let labels = labels.clone();
        report.entries.push(check_gradients(
            "masked",
            &params,
            |tape, vars| {
                let wm = tape.mask_mul(vars[0], &dense_mask, crate::tape::MaskGradMode::Masked);
                let xv = tape.constant(x.clone());
                let z1 = tape.matmul(xv, wm);
                let z1 = tape.add_row_bias(z1, vars[1]);
                dense_tail(tape, z1, vars[2], vars[3], &labels)
            },
            samples,
            h,
            all,
            &mut rng,
        ));
    }

    {
        // Variational layer with pinned activation noise: the closure clones
        // the same stream state for every evaluation.
        let log_sigma2 = Tensor::<f64>::full(&[9, 7], -4.0);
        let params = [w1.clone(), log_sigma2, b1.clone(), w2.clone(), b2.clone()];
        let noise_rng = rng.stream(11);
        let x = x.clone();
        let labels = labels.clone();
        report.entries.push(check_gradients(
            "vd (pinned noise)",
            &params,
            |tape, vars| {
                let xv = tape.constant(x.clone());
                let mut noise = noise_rng.clone();
                let z1 = crate::vd::vd_dense_forward_train(tape, xv, vars[0], vars[1], &mut noise);
                let z1 = tape.add_row_bias(z1, vars[2]);
                let ce = dense_tail(tape, z1, vars[3], vars[4], &labels);
                let kl = crate::vd::vd_kl(tape, vars[0], vars[1]);
                let kl = tape.scale(kl, 1e-2);
                tape.add(ce, kl)
            },
            samples,
            h,
            all,
            &mut rng,
        ));
    }

    {
        // Hard-concrete gates with pinned uniform noise drawn from
        // (0.35, 0.65): with log-alpha near zero every pre-clamp gate lands
        // well inside (0, 1), so no finite-difference step crosses a clamp.
        let log_alpha = init(&mut rng, &[9, 7], -0.3, 0.3);
        let mut u = Tensor::<f64>::zeros(&[9, 7]);
        u.fill_uniform(&mut rng.stream(13), 0.35, 0.65);
        let (beta, gamma, zeta) =
            (crate::l0::DEFAULT_BETA, crate::l0::DEFAULT_GAMMA, crate::l0::DEFAULT_ZETA);
        let params = [w1.clone(), log_alpha, b1.clone(), w2.clone(), b2.clone()];
        let x = x.clone();
        let labels = labels.clone();
        report.entries.push(check_gradients(
            "hard-concrete (pinned noise)",
            &params,
            |tape, vars| {
                let z = crate::l0::hc_sample(tape, vars[1], beta, gamma, zeta, &u);
                let gated = tape.mul(vars[0], z);
                let xv = tape.constant(x.clone());
                let z1 = tape.matmul(xv, gated);
                let z1 = tape.add_row_bias(z1, vars[2]);
                let ce = dense_tail(tape, z1, vars[3], vars[4], &labels);
                let l0 = crate::l0::hc_expected_l0(tape, vars[1], beta, gamma, zeta);
                let l0 = tape.scale(l0, 1e-2);
                tape.add(ce, l0)
            },
            samples,
            h,
            all,
            &mut rng,
        ));
    }

    {
        // Convolution, pooling, and flatten in one stack.
        let xc = init(&mut rng, &[3, 1, 6, 6], 0.0, 1.0);
        let k = init(&mut rng, &[2, 1, 3, 3], -0.4, 0.4);
        let bc = init(&mut rng, &[2], -0.1, 0.1);
        let wf = init(&mut rng, &[8, 3], -0.4, 0.4);
        let bf = init(&mut rng, &[3], -0.1, 0.1);
        let labels = vec![0u32, 1, 2];
        let params = [k, bc, wf, bf];
        report.entries.push(check_gradients(
            "conv-pool",
            &params,
            |tape, vars| {
                let xv = tape.constant(xc.clone());
                let c = tape.conv2d(xv, vars[0], 1, 0);
                let c = tape.add_chan_bias(c, vars[1]);
                let c = tape.relu(c);
                let p = tape.maxpool2d(c, 2, 2);
                let f = tape.reshape(p, &[3, 8]);
                let z = tape.matmul(f, vars[2]);
                let logits = tape.add_row_bias(z, vars[3]);
                tape.mean_cross_entropy(logits, &labels)
            },
            samples,
            h,
            all,
            &mut rng,
        ));
    }

    report
}
