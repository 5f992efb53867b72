//! Sparsity schedules, regularizer ramps, and layer budget allocation.
//!
//! Gradual pruning follows a cubic curve from an initial to a final sparsity:
//! fast early progress while the network can still absorb damage, slow
//! refinement near the end. Regularizer coefficients ramp with the same
//! family of shapes. Both are pure functions of the step index, so schedules
//! can be evaluated anywhere without threading state.

use crate::error::{Error, Result};

/// Gradual sparsity schedule for magnitude and random pruning.
///
/// Between `start_step` and `end_step` the target follows
/// `s_f + (s_i - s_f) * (1 - p)^3` with `p` the normalized progress; outside
/// that window it is flat. Prune events fire every `frequency` steps starting
/// at `start_step`, with a final event at `end_step` even when the window is
/// not a multiple of the frequency, so the final target is always reached.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PruningSchedule {
    pub start_step: u64,
    pub end_step: u64,
    pub frequency: u64,
    pub initial_sparsity: f64,
    pub final_sparsity: f64,
}

impl PruningSchedule {
    pub fn new(
        start_step: u64,
        end_step: u64,
        frequency: u64,
        initial_sparsity: f64,
        final_sparsity: f64,
    ) -> Result<Self> {
        if end_step <= start_step {
            return Err(Error::InvalidSchedule {
                reason: format!("end step {end_step} must come after start step {start_step}"),
            });
        }
        if frequency == 0 {
            return Err(Error::InvalidSchedule { reason: "frequency must be at least 1".into() });
        }
        if !(0.0..=1.0).contains(&initial_sparsity)
            || !(0.0..=1.0).contains(&final_sparsity)
            || initial_sparsity > final_sparsity
        {
            return Err(Error::InvalidSchedule {
                reason: format!(
                    "sparsity must satisfy 0 <= initial ({initial_sparsity}) <= final ({final_sparsity}) <= 1"
                ),
            });
        }
        Ok(PruningSchedule { start_step, end_step, frequency, initial_sparsity, final_sparsity })
    }

    /// Scheduled target sparsity at a step.
    pub fn sparsity_at(&self, step: u64) -> f64 {
        if step <= self.start_step {
            return self.initial_sparsity;
        }
        if step >= self.end_step {
            return self.final_sparsity;
        }
        let p = (step - self.start_step) as f64 / (self.end_step - self.start_step) as f64;
        let r = 1.0 - p;
        self.final_sparsity + (self.initial_sparsity - self.final_sparsity) * r * r * r
    }

    /// Whether a prune event fires at this step.
    pub fn is_event(&self, step: u64) -> bool {
        if step < self.start_step || step > self.end_step {
            return false;
        }
        step == self.end_step || (step - self.start_step) % self.frequency == 0
    }

    /// All event steps in order.
    pub fn events(&self) -> Vec<u64> {
        let mut out: Vec<u64> =
            (self.start_step..=self.end_step).step_by(self.frequency as usize).collect();
        if *out.last().unwrap() != self.end_step {
            out.push(self.end_step);
        }
        out
    }
}

/// Shape of a regularizer coefficient ramp.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RampShape {
    /// Full coefficient from step zero.
    Constant,
    /// Linear from 0 to the final coefficient across the window.
    Linear,
    /// Cubic ease-out: `1 - (1 - p)^3`, fast start then saturating.
    Cubic,
}

/// Regularizer coefficient as a function of the step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RampSchedule {
    pub shape: RampShape,
    pub start_step: u64,
    pub end_step: u64,
    pub final_value: f64,
}

impl RampSchedule {
    pub fn new(shape: RampShape, start_step: u64, end_step: u64, final_value: f64) -> Result<Self> {
        if final_value < 0.0 || !final_value.is_finite() {
            return Err(Error::InvalidSchedule {
                reason: format!("ramp final value {final_value} must be finite and nonnegative"),
            });
        }
        if shape != RampShape::Constant && end_step <= start_step {
            return Err(Error::InvalidSchedule {
                reason: format!(
                    "ramp window [{start_step}, {end_step}] must be nonempty for a non-constant shape"
                ),
            });
        }
        Ok(RampSchedule { shape, start_step, end_step, final_value })
    }

    /// Coefficient value at a step.
    pub fn value_at(&self, step: u64) -> f64 {
        match self.shape {
            RampShape::Constant => self.final_value,
            _ => {
                let p = if step <= self.start_step {
                    0.0
                } else if step >= self.end_step {
                    1.0
                } else {
                    (step - self.start_step) as f64 / (self.end_step - self.start_step) as f64
                };
                match self.shape {
                    RampShape::Linear => self.final_value * p,
                    RampShape::Cubic => {
                        let r = 1.0 - p;
                        self.final_value * (1.0 - r * r * r)
                    }
                    RampShape::Constant => unreachable!(),
                }
            }
        }
    }
}

/// Split a global sparsity target into per-layer fractions.
///
/// Overridden layers (pairs of layer index and fixed fraction) keep their
/// fraction; all remaining layers share one uniform fraction chosen so the
/// weighted mean over all weights equals the global target. Errors if the
/// overrides make that impossible.
pub fn allocate_layer_targets(
    global_target: f64,
    layer_sizes: &[usize],
    overrides: &[(usize, f64)],
) -> Result<Vec<f64>> {
    if !(0.0..=1.0).contains(&global_target) {
        return Err(Error::InvalidSparsityTarget {
            target: global_target,
            reason: "global target must lie in [0, 1]".into(),
        });
    }
    if layer_sizes.is_empty() || layer_sizes.iter().any(|&n| n == 0) {
        return Err(Error::InvalidSparsityTarget {
            target: global_target,
            reason: "layer sizes must be nonempty and positive".into(),
        });
    }
    let mut fractions: Vec<Option<f64>> = vec![None; layer_sizes.len()];
    for &(idx, f) in overrides {
        if idx >= layer_sizes.len() {
            return Err(Error::InvalidSparsityTarget {
                target: global_target,
                reason: format!("override index {idx} out of range for {} layers", layer_sizes.len()),
            });
        }
        if !(0.0..=1.0).contains(&f) {
            return Err(Error::InvalidSparsityTarget {
                target: f,
                reason: format!("override for layer {idx} must lie in [0, 1]"),
            });
        }
        if fractions[idx].replace(f).is_some() {
            return Err(Error::InvalidSparsityTarget {
                target: f,
                reason: format!("layer {idx} overridden twice"),
            });
        }
    }

    let total: f64 = layer_sizes.iter().map(|&n| n as f64).sum();
    let overridden_weights: f64 = fractions
        .iter()
        .zip(layer_sizes)
        .filter_map(|(f, &n)| f.map(|f| f * n as f64))
        .sum();
    let uniform_size: f64 = fractions
        .iter()
        .zip(layer_sizes)
        .filter(|(f, _)| f.is_none())
        .map(|(_, &n)| n as f64)
        .sum();

    if uniform_size == 0.0 {
        // Fully overridden: the overrides must already meet the target.
        if (overridden_weights - global_target * total).abs() >= 1.0 {
            return Err(Error::InvalidSparsityTarget {
                target: global_target,
                reason: format!(
                    "overrides fix {overridden_weights:.0} pruned weights but the target needs {:.0}",
                    global_target * total
                ),
            });
        }
        return Ok(fractions.into_iter().map(|f| f.unwrap()).collect());
    }

    let uniform = (global_target * total - overridden_weights) / uniform_size;
    if !(0.0..=1.0).contains(&uniform) {
        return Err(Error::InvalidSparsityTarget {
            target: global_target,
            reason: format!(
                "overrides leave an unsatisfiable uniform fraction {uniform:.4} for the remaining layers"
            ),
        });
    }
    Ok(fractions.into_iter().map(|f| f.unwrap_or(uniform)).collect())
}
