//! Stochastic gradient descent with momentum, and Adam.
//!
//! The optimizer owns its moment buffers, keyed by parameter position, and
//! expects each parameter's gradient to be sitting in the tensor's grad slot
//! when [`Optimizer::step`] is called. Updates run in the tensor's scalar
//! type; the bias-correction coefficients are computed in `f64`.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Update rule and its hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum OptimizerKind {
    /// `v <- momentum * v + g; w <- w - lr * v`
    SgdMomentum { momentum: f64 },
    /// Adam with bias correction.
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

struct Slot<S: Scalar> {
    m: Vec<S>,
    /// Second-moment buffer; empty for SGD.
    v: Vec<S>,
}

/// Optimizer state across all parameters of a model.
pub struct Optimizer<S: Scalar = f32> {
    kind: OptimizerKind,
    step_count: u64,
    slots: Vec<Slot<S>>,
}

impl<S: Scalar> Optimizer<S> {
    pub fn new(kind: OptimizerKind) -> Self {
        Optimizer { kind, step_count: 0, slots: Vec::new() }
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    /// Number of completed steps; increases by exactly one per [`step`].
    ///
    /// [`step`]: Optimizer::step
    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// Apply one update to every parameter, consuming the gradients in their
    /// grad slots. Parameters must be passed in the same order every step;
    /// moment buffers are allocated on first use and shape-checked after.
    pub fn step(&mut self, lr: f64, params: &mut [&mut Tensor<S>]) -> Result<()> {
        if !lr.is_finite() || lr < 0.0 {
            return Err(Error::Optimizer { reason: format!("step size {lr} is not usable") });
        }
        if self.slots.is_empty() {
            let needs_v = matches!(self.kind, OptimizerKind::Adam { .. });
            self.slots = params
                .iter()
                .map(|p| Slot {
                    m: vec![S::zero(); p.numel()],
                    v: if needs_v { vec![S::zero(); p.numel()] } else { Vec::new() },
                })
                .collect();
        }
        if self.slots.len() != params.len() {
            return Err(Error::Optimizer {
                reason: format!(
                    "parameter count changed: optimizer tracks {}, got {}",
                    self.slots.len(),
                    params.len()
                ),
            });
        }
        self.step_count += 1;
        let t = self.step_count;

        for (idx, p) in params.iter_mut().enumerate() {
            let n = p.numel();
            let slot = &mut self.slots[idx];
            if slot.m.len() != n {
                return Err(Error::Optimizer {
                    reason: format!(
                        "parameter {idx} changed size: optimizer tracks {}, got {n}",
                        slot.m.len()
                    ),
                });
            }
            let grad = match p.grad() {
                Some(g) => g.to_vec(),
                None => {
                    return Err(Error::Optimizer {
                        reason: format!("parameter {idx} has no gradient"),
                    })
                }
            };
            match self.kind {
                OptimizerKind::SgdMomentum { momentum } => {
                    let mo = S::from_f64(momentum);
                    let lr_s = S::from_f64(lr);
                    for ((w, m), &g) in p.data_mut().iter_mut().zip(&mut slot.m).zip(&grad) {
                        *m = mo * *m + g;
                        *w -= lr_s * *m;
                    }
                }
                OptimizerKind::Adam { beta1, beta2, eps } => {
                    let b1 = S::from_f64(beta1);
                    let b2 = S::from_f64(beta2);
                    let one_m_b1 = S::from_f64(1.0 - beta1);
                    let one_m_b2 = S::from_f64(1.0 - beta2);
                    // Fold the bias corrections into one scalar so the inner
                    // loop is a fused multiply and a divide.
                    let corr1 = 1.0 - beta1.powi(t as i32);
                    let corr2 = 1.0 - beta2.powi(t as i32);
                    let alpha = S::from_f64(lr / corr1);
                    let corr2_sqrt = S::from_f64(1.0 / corr2.sqrt());
                    let eps_s = S::from_f64(eps);
                    for (((w, m), v), &g) in p
                        .data_mut()
                        .iter_mut()
                        .zip(&mut slot.m)
                        .zip(&mut slot.v)
                        .zip(&grad)
                    {
                        *m = b1 * *m + one_m_b1 * g;
                        *v = b2 * *v + one_m_b2 * g * g;
                        *w -= alpha * *m / (v.sqrt() * corr2_sqrt + eps_s);
                    }
                }
            }
            p.clear_grad();
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_param(value: f64) -> Tensor<f64> {
        Tensor::full(&[1], value)
    }

    #[test]
    fn sgd_momentum_accumulates_velocity() {
        // Constant unit gradient, lr 0.1, momentum 0.9: the first step moves
        // by 0.1, the second by 0.1 * (0.9 * 1 + 1) = 0.19.
        let mut opt = Optimizer::new(OptimizerKind::SgdMomentum { momentum: 0.9 });
        let mut w = one_param(1.0);
        w.set_grad(vec![1.0]);
        opt.step(0.1, &mut [&mut w]).unwrap();
        assert!((w.at(0) - 0.9).abs() < 1e-15);
        w.set_grad(vec![1.0]);
        opt.step(0.1, &mut [&mut w]).unwrap();
        assert!((w.at(0) - 0.71).abs() < 1e-15, "second delta must be 0.19, got {}", 0.9 - w.at(0));
    }

    #[test]
    fn adam_matches_reference_recurrence() {
        let (b1, b2, eps, lr) = (0.9, 0.999, 1e-8, 0.001);
        let mut opt = Optimizer::new(OptimizerKind::Adam { beta1: b1, beta2: b2, eps });
        let mut w = one_param(0.5);
        let grads = [0.3, -0.2, 0.7, 0.1, -0.4];

        // Independent reference implementation of the textbook update.
        let (mut rm, mut rv, mut rw) = (0.0f64, 0.0f64, 0.5f64);
        for (t, &g) in grads.iter().enumerate() {
            let t = (t + 1) as i32;
            rm = b1 * rm + (1.0 - b1) * g;
            rv = b2 * rv + (1.0 - b2) * g * g;
            let mhat = rm / (1.0 - b1.powi(t));
            let vhat = rv / (1.0 - b2.powi(t));
            rw -= lr * mhat / (vhat.sqrt() + eps);

            w.set_grad(vec![g]);
            opt.step(lr, &mut [&mut w]).unwrap();
            assert!((w.at(0) - rw).abs() < 1e-12, "step {t}: {} vs {rw}", w.at(0));
        }
        // First-step magnitude is close to lr regardless of gradient scale.
        let mut opt = Optimizer::new(OptimizerKind::Adam { beta1: b1, beta2: b2, eps });
        let mut w2 = one_param(0.0);
        w2.set_grad(vec![1e-3]);
        opt.step(lr, &mut [&mut w2]).unwrap();
        assert!((w2.at(0).abs() - lr).abs() < 1e-6);
    }

    #[test]
    fn step_count_is_monotone_and_updates_need_gradients() {
        let mut opt = Optimizer::new(OptimizerKind::SgdMomentum { momentum: 0.0 });
        let mut w = one_param(0.0);
        assert_eq!(opt.step_count(), 0);
        w.set_grad(vec![1.0]);
        opt.step(0.01, &mut [&mut w]).unwrap();
        assert_eq!(opt.step_count(), 1);
        // Gradient was consumed; stepping again without a new one fails.
        assert!(matches!(
            opt.step(0.01, &mut [&mut w]),
            Err(Error::Optimizer { .. })
        ));
    }

    #[test]
    fn rejects_bad_step_sizes_and_changed_shapes() {
        let mut opt = Optimizer::new(OptimizerKind::SgdMomentum { momentum: 0.9 });
        let mut w = one_param(0.0);
        w.set_grad(vec![1.0]);
        assert!(opt.step(f64::NAN, &mut [&mut w]).is_err());
        assert!(opt.step(-1.0, &mut [&mut w]).is_err());
        opt.step(0.1, &mut [&mut w]).unwrap();

        let mut bigger = Tensor::<f64>::zeros(&[3]);
        bigger.set_grad(vec![0.0; 3]);
        assert!(matches!(
            opt.step(0.1, &mut [&mut bigger]),
            Err(Error::Optimizer { .. })
        ));
    }
}
