//! L0 regularization through hard-concrete gates.
//!
//! Every weight gets a stochastic gate `z in [0, 1]` built by stretching a
//! binary-concrete variable and clamping it back to the unit interval:
//!
//! ```text
//! s     = sigmoid((log u - log(1-u) + log_alpha) / beta)     u ~ U(0,1)
//! sbar  = s * (zeta - gamma) + gamma                         stretch
//! z     = clamp(sbar, 0, 1)                                  rectify
//! ```
//!
//! The stretch pushes probability mass onto the atoms {0, 1}, so gates can
//! close exactly while the path `z -> sbar -> s -> log_alpha` stays
//! differentiable wherever the clamp is inactive. The expected number of
//! open gates has the closed form `sigmoid(log_alpha - beta * log(-gamma/zeta))`,
//! which is the penalty training minimizes.
//!
//! At evaluation time the gate is deterministic:
//! `zhat = clamp(sigmoid(log_alpha) * (zeta - gamma) + gamma, 0, 1)`.
//! Train-time and test-time sparsity therefore need not agree — a gate can
//! close on many training samples yet stay (partially) open at eval. Reports
//! track both numbers separately.

use crate::error::{Error, Result};
use crate::mask::SparsityMask;
use crate::rng::RngState;
use crate::tape::{Tape, Var};
use crate::tensor::{Scalar, Tensor};

/// Default temperature.
pub const DEFAULT_BETA: f64 = 2.0 / 3.0;
/// Default lower stretch bound.
pub const DEFAULT_GAMMA: f64 = -0.1;
/// Default upper stretch bound.
pub const DEFAULT_ZETA: f64 = 1.1;

/// Per-layer hard-concrete gate parameters: one `log_alpha` per weight plus
/// the shared distribution constants.
#[derive(Clone, Debug)]
pub struct HardConcreteParams<S: Scalar = f32> {
    pub log_alpha: Tensor<S>,
    pub beta: f64,
    pub gamma: f64,
    pub zeta: f64,
}

impl<S: Scalar> HardConcreteParams<S> {
    pub fn new(log_alpha: Tensor<S>, beta: f64, gamma: f64, zeta: f64) -> Result<Self> {
        if !(beta > 0.0 && beta <= 1.0) {
            return Err(Error::InvalidGateParams {
                reason: format!("temperature beta = {beta} must lie in (0, 1]"),
            });
        }
        if gamma >= 0.0 {
            return Err(Error::InvalidGateParams {
                reason: format!("stretch lower bound gamma = {gamma} must be negative"),
            });
        }
        if zeta <= 1.0 {
            return Err(Error::InvalidGateParams {
                reason: format!("stretch upper bound zeta = {zeta} must exceed 1"),
            });
        }
        Ok(HardConcreteParams { log_alpha, beta, gamma, zeta })
    }

    /// Initialize all gates from a target dropout rate:
    /// `log_alpha = logit(1 - rate)`, e.g. 10% dropout gives 2.1972.
    pub fn from_dropout_rate(
        dims: &[usize],
        rate: f64,
        beta: f64,
        gamma: f64,
        zeta: f64,
    ) -> Result<Self> {
        if !(rate > 0.0 && rate < 1.0) {
            return Err(Error::InvalidGateParams {
                reason: format!("dropout rate {rate} must lie strictly inside (0, 1)"),
            });
        }
        let la = ((1.0 - rate) / rate).ln();
        Self::new(Tensor::full(dims, la), beta, gamma, zeta)
    }

    /// `-beta * log(-gamma/zeta)`, the shift inside the expected-L0 sigmoid.
    /// At the defaults this is 1.5985968485.
    pub fn l0_shift(&self) -> f64 {
        -self.beta * (-self.gamma / self.zeta).ln()
    }

    /// Expected number of open gates (the L0 penalty), as a plain number.
    pub fn expected_l0_value(&self) -> f64 {
        let shift = self.l0_shift();
        self.log_alpha.data().iter().map(|&la| sigmoid_f64(la.as_f64() + shift)).sum()
    }

    /// Deterministic evaluation-time gates:
    /// `clamp(sigmoid(log_alpha)(zeta-gamma)+gamma, 0, 1)`.
    pub fn test_gates(&self) -> Tensor<S> {
        let span = S::from_f64(self.zeta - self.gamma);
        let lo = S::from_f64(self.gamma);
        let data = self
            .log_alpha
            .data()
            .iter()
            .map(|&la| {
                let s = S::from_f64(sigmoid_f64(la.as_f64()));
                (s * span + lo).max(S::zero()).min(S::one())
            })
            .collect();
        Tensor::new(self.log_alpha.dims().to_vec(), data).expect("test gate size")
    }

    /// Mask of gates that are exactly closed at evaluation time
    /// (`zhat = 0`, equivalently `log_alpha <= logit(-gamma/(zeta-gamma))`).
    pub fn test_mask(&self) -> SparsityMask {
        let gates = self.test_gates();
        let mut mask = SparsityMask::ones(gates.numel());
        for (i, &g) in gates.data().iter().enumerate() {
            if g == S::zero() {
                mask.prune(i);
            }
        }
        mask
    }

    /// Exact probability that a sampled gate lands on the zero atom.
    pub fn prob_zero(&self, log_alpha: f64) -> f64 {
        // P(z = 0) = P(sbar <= 0) = P(s <= -gamma/(zeta-gamma)), and the
        // concrete CDF is P(s <= t) = sigmoid(beta * logit(t) - log_alpha).
        let t = -self.gamma / (self.zeta - self.gamma);
        sigmoid_f64(self.beta * logit(t) - log_alpha)
    }

    /// Exact probability that a sampled gate lands on the one atom.
    pub fn prob_one(&self, log_alpha: f64) -> f64 {
        let t = (1.0 - self.gamma) / (self.zeta - self.gamma);
        1.0 - sigmoid_f64(self.beta * logit(t) - log_alpha)
    }

    /// Draw one gate value without a tape (for Monte-Carlo estimation).
    pub fn sample_value(&self, log_alpha: f64, rng: &mut RngState) -> f64 {
        let u = rng.next_open01();
        let s = sigmoid_f64((logit(u) + log_alpha) / self.beta);
        (s * (self.zeta - self.gamma) + self.gamma).clamp(0.0, 1.0)
    }
}

#[inline]
fn sigmoid_f64(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Draw the uniform noise tensor for one training-mode gate sample. Kept
/// separate from [`hc_sample`] so gradient checks can pin the draw.
pub fn draw_gate_noise<S: Scalar>(dims: &[usize], rng: &mut RngState) -> Tensor<S> {
    Tensor::from_fn(dims, |_| rng.next_open01())
}

/// Differentiable gate sample on the tape from pinned uniform noise `u`.
/// Gradients reach `log_alpha` pathwise wherever the clamp is inactive; at
/// the boundaries the subgradient is zero.
pub fn hc_sample<S: Scalar>(
    tape: &mut Tape<S>,
    log_alpha: Var,
    beta: f64,
    gamma: f64,
    zeta: f64,
    u: &Tensor<S>,
) -> Var {
    assert_eq!(
        tape.value(log_alpha).dims(),
        u.dims(),
        "gate noise shape does not match log_alpha"
    );
    assert!(
        u.data().iter().all(|&v| v > S::zero() && v < S::one()),
        "gate noise must be drawn from the open interval (0, 1)"
    );
    let logit_u = Tensor::new(
        u.dims().to_vec(),
        u.data().iter().map(|&v| (v / (S::one() - v)).ln()).collect(),
    )
    .expect("logit noise size");
    let logit_u = tape.constant(logit_u);
    let shifted = tape.add(log_alpha, logit_u);
    let scaled = tape.scale(shifted, 1.0 / beta);
    let s = tape.sigmoid(scaled);
    let sbar = tape.affine(s, zeta - gamma, gamma);
    tape.clamp01(sbar)
}

/// Differentiable expected-L0 penalty:
/// `sum_j sigmoid(log_alpha_j - beta * log(-gamma/zeta))`.
pub fn hc_expected_l0<S: Scalar>(
    tape: &mut Tape<S>,
    log_alpha: Var,
    beta: f64,
    gamma: f64,
    zeta: f64,
) -> Var {
    let shift = -beta * (-gamma / zeta).ln();
    let shifted = tape.affine(log_alpha, 1.0, shift);
    let per_gate = tape.sigmoid(shifted);
    tape.sum(per_gate)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn defaults(log_alpha: Tensor<f64>) -> HardConcreteParams<f64> {
        HardConcreteParams::new(log_alpha, DEFAULT_BETA, DEFAULT_GAMMA, DEFAULT_ZETA).unwrap()
    }

    #[test]
    fn parameter_validation_enforces_the_legal_ranges() {
        let la = Tensor::<f64>::zeros(&[2]);
        assert!(HardConcreteParams::new(la.clone(), 0.0, -0.1, 1.1).is_err());
        assert!(HardConcreteParams::new(la.clone(), 1.5, -0.1, 1.1).is_err());
        assert!(HardConcreteParams::new(la.clone(), 0.5, 0.1, 1.1).is_err());
        assert!(HardConcreteParams::new(la.clone(), 0.5, -0.1, 0.9).is_err());
        assert!(HardConcreteParams::new(la, 0.5, -0.1, 1.1).is_ok());
    }

    #[test]
    fn dropout_rate_initialization_is_the_logit() {
        let g = HardConcreteParams::<f64>::from_dropout_rate(
            &[3],
            0.1,
            DEFAULT_BETA,
            DEFAULT_GAMMA,
            DEFAULT_ZETA,
        )
        .unwrap();
        // logit(0.9) = ln 9 = 2.1972...
        for &la in g.log_alpha.data() {
            assert!((la - 9.0f64.ln()).abs() < 1e-12);
        }
        assert!(HardConcreteParams::<f64>::from_dropout_rate(&[1], 0.0, 0.5, -0.1, 1.1).is_err());
    }

    #[test]
    fn expected_l0_matches_the_independent_evaluation() {
        // Independent arithmetic: sigmoid(2.197 + (2/3) ln 11)
        //   = sigmoid(3.7955968485) = 0.9780242920.
        let g = defaults(Tensor::full(&[1], 2.197));
        assert!((g.l0_shift() - 1.598_596_848_532_247).abs() < 1e-12);
        assert!((g.expected_l0_value() - 0.978_024_292_039_597_5).abs() < 1e-12);
        // And it is the complement of the exact zero-atom mass.
        assert!((g.expected_l0_value() + g.prob_zero(2.197) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn atom_probabilities_match_the_cdf_algebra() {
        let g = defaults(Tensor::zeros(&[1]));
        // At log alpha = 2.197 with the defaults.
        assert!((g.prob_zero(2.197) - 0.021_975_707_960_402_5).abs() < 1e-12);
        assert!((g.prob_one(2.197) - 0.645_290_887_531_749_3).abs() < 1e-12);
        // The interior mass is what remains.
        let interior = 1.0 - g.prob_zero(2.197) - g.prob_one(2.197);
        assert!(interior > 0.0 && interior < 1.0);
    }

    #[test]
    fn sampled_atoms_match_their_probabilities() {
        let g = defaults(Tensor::zeros(&[1]));
        let la = 2.197;
        let n = 100_000;
        let mut rng = RngState::new(91).stream(5);
        let (mut zeros, mut ones) = (0usize, 0usize);
        for _ in 0..n {
            let z = g.sample_value(la, &mut rng);
            assert!((0.0..=1.0).contains(&z));
            if z == 0.0 {
                zeros += 1;
            } else if z == 1.0 {
                ones += 1;
            }
        }
        let (p0, p1) = (g.prob_zero(la), g.prob_one(la));
        let se0 = (p0 * (1.0 - p0) / n as f64).sqrt();
        let se1 = (p1 * (1.0 - p1) / n as f64).sqrt();
        let f0 = zeros as f64 / n as f64;
        let f1 = ones as f64 / n as f64;
        assert!((f0 - p0).abs() < 3.0 * se0, "zero atom {f0} vs {p0} (se {se0})");
        assert!((f1 - p1).abs() < 3.0 * se1, "one atom {f1} vs {p1} (se {se1})");
    }

    #[test]
    fn expected_l0_matches_the_empirical_open_fraction() {
        let g = defaults(Tensor::zeros(&[1]));
        let la = 0.5;
        let n = 100_000;
        let mut rng = RngState::new(17).stream(8);
        let open = (0..n).filter(|_| g.sample_value(la, &mut rng) > 0.0).count();
        let p = 1.0 - g.prob_zero(la);
        let se = (p * (1.0 - p) / n as f64).sqrt();
        assert!((open as f64 / n as f64 - p).abs() < 3.0 * se);
    }

    #[test]
    fn median_noise_pins_the_documented_gate_value() {
        // u = 0.5 zeroes the logistic noise: log alpha = 0 gives s = 0.5 and
        // z = clamp(0.5 * 1.2 - 0.1) = 0.5.
        let mut tape = Tape::<f64>::new();
        let la = tape.leaf(&Tensor::zeros(&[1]));
        let u = Tensor::full(&[1], 0.5);
        let z = hc_sample(&mut tape, la, DEFAULT_BETA, DEFAULT_GAMMA, DEFAULT_ZETA, &u);
        assert!((tape.value(z).at(0) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn test_gates_follow_the_deterministic_formula() {
        let g = defaults(Tensor::new(vec![4], vec![2.197, 40.0, -2.3, -2.5]).unwrap());
        let gates = g.test_gates();
        // sigmoid(2.197) * 1.2 - 0.1 = 0.97998.
        assert!((gates.at(0) - 0.98).abs() < 1e-3);
        assert!((gates.at(0) - (sigmoid_f64(2.197) * 1.2 - 0.1)).abs() < 1e-12);
        assert_eq!(gates.at(1), 1.0, "saturated gate");
        // The closing boundary is logit(1/12) = -2.3979: -2.3 stays open,
        // -2.5 is closed.
        assert!(gates.at(2) > 0.0);
        assert_eq!(gates.at(3), 0.0);
        let mask = g.test_mask();
        assert_eq!(mask.count_pruned(), 1);
        assert!(!mask.is_kept(3));
    }

    #[test]
    fn train_test_sparsity_gap_band_exists() {
        // For log alpha in (-2.3979, 0], a sampled gate closes with
        // probability well above 2% while the deterministic gate stays open:
        // exactly the train/test sparsity divergence the reports track.
        let g = defaults(Tensor::zeros(&[1]));
        let mut la = -2.39;
        while la <= 0.0 {
            assert!(g.prob_zero(la) > 0.02, "P(z=0) at {la}");
            let zhat = (sigmoid_f64(la) * 1.2 - 0.1).clamp(0.0, 1.0);
            assert!(zhat > 0.0, "test gate must stay open at {la}");
            la += 0.2;
        }
    }

    #[test]
    fn expected_l0_is_strictly_increasing_in_log_alpha() {
        let mut last = -1.0;
        let mut la = -6.0;
        while la <= 6.0 {
            let g = defaults(Tensor::full(&[1], la));
            let v = g.expected_l0_value();
            assert!(v > last, "expected L0 must increase, failed at {la}");
            last = v;
            la += 0.3;
        }
    }

    #[test]
    fn tape_expected_l0_agrees_and_is_differentiable() {
        let la = Tensor::<f64>::new(vec![3], vec![-1.0, 0.5, 2.197]).unwrap();
        let g = defaults(la.clone());
        let mut tape = Tape::new();
        let lav = tape.leaf(&la);
        let l0 = hc_expected_l0(&mut tape, lav, DEFAULT_BETA, DEFAULT_GAMMA, DEFAULT_ZETA);
        assert!((tape.value(l0).at(0) - g.expected_l0_value()).abs() < 1e-12);
        tape.backward(l0).unwrap();
        let grad = tape.grad(lav).unwrap();
        assert!(grad.iter().all(|&d| d > 0.0), "monotone penalty needs positive gradients");
    }

    #[test]
    fn sampled_gates_stay_in_the_unit_interval_with_boundary_subgradients() {
        let la = Tensor::<f64>::new(vec![3], vec![-8.0, 0.0, 8.0]).unwrap();
        let mut tape = Tape::new();
        let lav = tape.leaf(&la);
        // Extreme noise pushes the first gate onto the 0 atom and the last
        // onto the 1 atom; the middle stays interior.
        let u = Tensor::new(vec![3], vec![0.01, 0.5, 0.99]).unwrap();
        let z = hc_sample(&mut tape, lav, DEFAULT_BETA, DEFAULT_GAMMA, DEFAULT_ZETA, &u);
        let zv = tape.value(z).data().to_vec();
        assert_eq!(zv[0], 0.0);
        assert!(zv[1] > 0.0 && zv[1] < 1.0);
        assert_eq!(zv[2], 1.0);
        let s = tape.sum(z);
        tape.backward(s).unwrap();
        let grad = tape.grad(lav).unwrap();
        assert_eq!(grad[0], 0.0, "closed gate gets the zero subgradient");
        assert!(grad[1] > 0.0, "interior gate keeps its pathwise gradient");
        assert_eq!(grad[2], 0.0, "saturated gate gets the zero subgradient");
    }
}
