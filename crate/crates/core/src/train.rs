//! The training loop: cross-entropy plus a ramped regularizer, scheduled
//! prune events, and per-step accounting.
//!
//! One loop serves every method. The loss is always
//! `task + coefficient * regularizer` with the coefficient taken from the
//! ramp schedule (zero when the method has no regularizer), and the logged
//! components are kept in a form that lets tests recompute the total
//! bit-exactly. Non-finite losses abort with a diagnostic carrying the step
//! and both loss components, or — for harness sweeps where such failures are
//! expected occasionally — mark the record as failed and stop early.

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::magnitude::magnitude_prune_step;
use crate::models::{MethodState, Model};
use crate::optim::{Optimizer, OptimizerKind};
use crate::random_prune::random_prune_step;
use crate::rng::RngState;
use crate::schedule::{PruningSchedule, RampSchedule};
use crate::tape::{MaskGradMode, Tape};
use crate::tensor::Tensor;
use std::time::Instant;

/// Piecewise-constant learning-rate plan: optional linear warmup, then a
/// multiplicative drop at each boundary step. The whole pattern can be
/// restarted mid-run (tiling the decay cycle), with or without re-running
/// the warmup.
#[derive(Debug, Clone, PartialEq)]
pub struct LrPlan {
    pub base_lr: f64,
    pub warmup_steps: u64,
    /// Ascending step indices; reaching one multiplies the rate by
    /// `decay_factor` (cumulatively).
    pub boundaries: Vec<u64>,
    pub decay_factor: f64,
    pub total_steps: u64,
    /// Ascending steps at which the pattern starts over (drop count resets,
    /// boundaries count from here).
    pub restarts: Vec<u64>,
    /// Whether a restarted cycle re-runs the warmup or jumps straight to the
    /// base rate.
    pub restart_warmup: bool,
}

impl LrPlan {
    pub fn constant(lr: f64, total_steps: u64) -> Self {
        LrPlan {
            base_lr: lr,
            warmup_steps: 0,
            boundaries: Vec::new(),
            decay_factor: 1.0,
            total_steps,
            restarts: Vec::new(),
            restart_warmup: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr.is_finite() && self.base_lr > 0.0) {
            return Err(Error::Config {
                reason: format!("learning rate {} must be positive and finite", self.base_lr),
            });
        }
        for seq in [&self.boundaries, &self.restarts] {
            if seq.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::Config {
                    reason: "rate boundaries and restarts must be ascending".to_string(),
                });
            }
        }
        if self.restarts.first() == Some(&0) {
            return Err(Error::Config {
                reason: "a restart at step 0 is meaningless".to_string(),
            });
        }
        if !(self.decay_factor > 0.0 && self.decay_factor.is_finite()) {
            return Err(Error::Config {
                reason: format!("decay factor {} must be positive", self.decay_factor),
            });
        }
        Ok(())
    }

    pub fn lr_at(&self, step: u64) -> f64 {
        let (origin, first_cycle) = match self.restarts.iter().rev().find(|&&r| step >= r) {
            Some(&r) => (r, false),
            None => (0, true),
        };
        let local = step - origin;
        if (first_cycle || self.restart_warmup) && local < self.warmup_steps {
            return self.base_lr * (local + 1) as f64 / self.warmup_steps as f64;
        }
        let drops = self.boundaries.iter().filter(|&&b| local >= b).count();
        self.base_lr * self.decay_factor.powi(drops as i32)
    }
}

/// Which operation scheduled prune events apply.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PruneKind {
    Magnitude,
    Random,
}

/// Scheduled pruning: when events fire and what final fraction each weight
/// layer is driven to.
#[derive(Debug, Clone)]
pub struct PruneConfig {
    pub kind: PruneKind,
    pub schedule: PruningSchedule,
    /// Final sparsity per weight layer, in layer order.
    pub layer_targets: Vec<f64>,
}

/// Everything the loop needs beyond the model and data.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
    pub lr: LrPlan,
    /// L2 coefficient applied to weight matrices (not biases or posterior
    /// parameters) as a gradient term after backprop.
    pub weight_decay: f64,
    /// Multiplier on `weight_decay` for gated layers, preserving the dense
    /// model's initial length scale (the initial keep probability).
    pub l0_wd_scale: f64,
    /// Absolute regularizer coefficient per step; `None` means zero.
    pub reg_ramp: Option<RampSchedule>,
    pub prune: Option<PruneConfig>,
    /// Log-dropout-ratio cutoff for evaluation-time pruning of variational
    /// layers.
    pub vd_threshold: f64,
    /// Steps between retained step logs; 0 keeps only the final step.
    pub log_every: u64,
    /// Steps between held-out evaluations; 0 evaluates only at the end.
    pub eval_every: u64,
    pub eval_batch: usize,
    /// When false, a non-finite loss marks the record failed instead of
    /// returning an error.
    pub nan_is_fatal: bool,
    /// Harness mode: masks are fixed, masked weights must stay exactly zero,
    /// and prune events are forbidden.
    pub frozen_masks: bool,
}

impl TrainConfig {
    /// A plain constant-rate configuration most tests start from.
    pub fn basic(lr: f64, steps: u64, batch_size: usize) -> Self {
        TrainConfig {
            batch_size,
            optimizer: OptimizerKind::Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8 },
            lr: LrPlan::constant(lr, steps),
            weight_decay: 0.0,
            l0_wd_scale: 1.0,
            reg_ramp: None,
            prune: None,
            vd_threshold: crate::vd::DEFAULT_LOG_ALPHA_THRESHOLD,
            log_every: 100,
            eval_every: 0,
            eval_batch: 500,
            nan_is_fatal: true,
            frozen_masks: false,
        }
    }
}

/// One retained step of training telemetry. `total_loss` always equals
/// `task_loss + coefficient * reg_value` recomputed in the training
/// precision.
#[derive(Debug, Clone, PartialEq)]
pub struct StepLog {
    pub step: u64,
    pub total_loss: f64,
    pub task_loss: f64,
    pub reg_value: f64,
    pub coefficient: f64,
    pub lr: f64,
    pub batch_accuracy: f64,
    /// Expected training-time sparsity at this step.
    pub sparsity: f64,
    pub per_layer_sparsity: Vec<f64>,
    pub elapsed_s: f64,
}

/// One held-out evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalLog {
    pub step: u64,
    pub accuracy: f64,
    pub avg_loss: f64,
    pub sparsity: f64,
}

/// Weights and biases exactly as initialized, captured before step zero.
#[derive(Debug, Clone)]
pub struct InitSnapshot {
    pub layers: Vec<(String, Tensor<f32>, Tensor<f32>)>,
}

impl InitSnapshot {
    pub fn of(model: &Model<f32>) -> Self {
        InitSnapshot {
            layers: model
                .layers
                .iter()
                .map(|l| (l.name.clone(), l.w.clone(), l.b.clone()))
                .collect(),
        }
    }
}

/// The full outcome of one training run.
#[derive(Debug, Clone)]
pub struct TrainingRecord {
    pub steps_run: u64,
    pub step_logs: Vec<StepLog>,
    pub eval_logs: Vec<EvalLog>,
    /// Final held-out accuracy; NaN when no evaluation data was given or the
    /// run failed.
    pub final_accuracy: f64,
    pub final_avg_loss: f64,
    pub final_eval_sparsity: f64,
    pub final_train_sparsity: f64,
    pub per_layer_sparsity: Vec<f64>,
    pub wall_clock_s: f64,
    /// Set when the run aborted on a non-finite loss in tolerant mode.
    pub failure: Option<String>,
    pub init: InitSnapshot,
}

impl TrainingRecord {
    /// Recompute every logged total from its components in the training
    /// precision; true iff all match bit-exactly.
    pub fn loss_composition_holds(&self) -> bool {
        self.step_logs.iter().all(|s| {
            let total =
                s.task_loss as f32 + (s.reg_value as f32) * (s.coefficient as f32);
            f64::from(total) == s.total_loss
        })
    }
}

/// Accuracy and mean loss of the deterministic evaluation graph over `data`,
/// visited in fixed order.
pub fn evaluate(
    model: &Model<f32>,
    data: &Dataset,
    batch: usize,
    vd_threshold: f64,
) -> (f64, f64) {
    let n = data.len();
    assert!(n > 0 && batch > 0, "evaluation needs data and a batch size");
    let mut correct = 0usize;
    let mut loss_sum = 0.0f64;
    let mut i = 0usize;
    while i < n {
        let take = batch.min(n - i);
        let idx: Vec<usize> = (i..i + take).collect();
        let (x, labels) = data.batch(&idx);
        let mut tape = Tape::new();
        let logits = model.forward_eval(&mut tape, &x, vd_threshold);
        let ce = tape.mean_cross_entropy(logits, &labels);
        loss_sum += tape.value(ce).at(0) * take as f64;
        correct += count_correct(tape.value(logits).data(), &labels);
        i += take;
    }
    (correct as f64 / n as f64, loss_sum / n as f64)
}

fn count_correct(logits: &[f32], labels: &[u32]) -> usize {
    let classes = logits.len() / labels.len();
    labels
        .iter()
        .enumerate()
        .filter(|(r, &label)| {
            let row = &logits[r * classes..(r + 1) * classes];
            let mut best = 0usize;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best == label as usize
        })
        .count()
}

fn validate(model: &Model<f32>, cfg: &TrainConfig, n_train: usize) -> Result<()> {
    cfg.lr.validate()?;
    if cfg.batch_size == 0 || cfg.batch_size > n_train {
        return Err(Error::Config {
            reason: format!("batch size {} must be in 1..={n_train}", cfg.batch_size),
        });
    }
    if let Some(pc) = &cfg.prune {
        if cfg.frozen_masks {
            return Err(Error::Plan {
                reason: "prune events cannot fire while masks are frozen".to_string(),
            });
        }
        if pc.layer_targets.len() != model.layers.len() {
            return Err(Error::Config {
                reason: format!(
                    "{} layer targets for {} weight layers",
                    pc.layer_targets.len(),
                    model.layers.len()
                ),
            });
        }
        if let Some(bad) = pc.layer_targets.iter().find(|t| !(0.0..=1.0).contains(*t)) {
            return Err(Error::InvalidSparsityTarget {
                target: *bad,
                reason: "layer target outside [0, 1]".to_string(),
            });
        }
        let masked = model
            .layers
            .iter()
            .all(|l| matches!(l.method, MethodState::Masked { .. }));
        if !masked {
            return Err(Error::Plan {
                reason: "prune schedule requires masked layers on every weight layer".to_string(),
            });
        }
    }
    if cfg.frozen_masks {
        for layer in &model.layers {
            match &layer.method {
                MethodState::Masked { grad_mode: MaskGradMode::Masked, .. } => {}
                MethodState::Masked { .. } => {
                    return Err(Error::Plan {
                        reason: format!(
                            "frozen run requires masked gradients on {}",
                            layer.name
                        ),
                    })
                }
                _ => {
                    return Err(Error::Plan {
                        reason: format!("frozen run requires a mask on {}", layer.name),
                    })
                }
            }
        }
    }
    Ok(())
}

/// Check the freeze contract: every pruned coordinate holds exactly zero.
fn frozen_weights_are_zero(model: &Model<f32>) -> Result<()> {
    for layer in &model.layers {
        if let MethodState::Masked { mask, .. } = &layer.method {
            for (i, &v) in layer.w.data().iter().enumerate() {
                if !mask.is_kept(i) && v != 0.0 {
                    return Err(Error::Plan {
                        reason: format!(
                            "frozen weight {i} of {} drifted to {v}",
                            layer.name
                        ),
                    });
                }
            }
        }
    }
    Ok(())
}

fn fire_prune_event(
    model: &mut Model<f32>,
    pc: &PruneConfig,
    step: u64,
    prune_streams: &mut [RngState],
) -> Result<()> {
    let now = pc.schedule.sparsity_at(step);
    let finalv = pc.schedule.final_sparsity;
    for (li, layer) in model.layers.iter_mut().enumerate() {
        let target = if finalv == 0.0 { 0.0 } else { pc.layer_targets[li] * now / finalv };
        if let MethodState::Masked { mask, .. } = &mut layer.method {
            match pc.kind {
                PruneKind::Magnitude => magnitude_prune_step(&layer.w, mask, target)?,
                PruneKind::Random => random_prune_step(mask, target, &mut prune_streams[li])?,
            }
        }
    }
    Ok(())
}

/// Run the loop for `cfg.lr.total_steps` optimizer steps. Data order is
/// shuffled per epoch from a substream of `rng`; stochastic layers draw from
/// per-layer substreams; evaluation order is fixed.
pub fn train(
    model: &mut Model<f32>,
    train_data: &Dataset,
    test_data: Option<&Dataset>,
    cfg: &TrainConfig,
    rng: &RngState,
) -> Result<TrainingRecord> {
    validate(model, cfg, train_data.len())?;
    let started = Instant::now();
    let init = InitSnapshot::of(model);
    let layer_count = model.layers.len();
    let mut shuffle_rng = rng.stream(101);
    let mut noise: Vec<RngState> =
        (0..layer_count).map(|i| rng.stream(200 + i as u64)).collect();
    let mut prune_streams: Vec<RngState> =
        (0..layer_count).map(|i| rng.stream(300 + i as u64)).collect();
    let mut optimizer = Optimizer::new(cfg.optimizer);

    let n = train_data.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut cursor = n; // trigger a shuffle before the first batch
    let total = cfg.lr.total_steps;
    let mut step_logs = Vec::new();
    let mut eval_logs = Vec::new();
    let mut failure: Option<String> = None;

    for step in 0..total {
        if cursor >= n {
            shuffle_rng.shuffle(&mut order);
            cursor = 0;
        }
        let take = cfg.batch_size.min(n - cursor);
        let idx = &order[cursor..cursor + take];
        cursor += take;
        let (x, labels) = train_data.batch(idx);

        let mut tape = Tape::new();
        let graph = model.forward_train(&mut tape, &x, &mut noise)?;
        let task = tape.mean_cross_entropy(graph.logits, &labels);
        let coefficient =
            cfg.reg_ramp.as_ref().map(|r| r.value_at(step)).unwrap_or(0.0);
        let (loss, reg_value) = match graph.regularizer {
            Some(reg) => {
                let scaled = tape.scale(reg, coefficient);
                (tape.add(task, scaled), tape.value(reg).at(0))
            }
            None => (task, 0.0),
        };
        let task_loss = tape.value(task).at(0);
        let total_loss = tape.value(loss).at(0);

        if !total_loss.is_finite() {
            let diag = format!(
                "non-finite loss at step {step}: task {task_loss}, regularizer {reg_value} \
                 at coefficient {coefficient}"
            );
            if cfg.nan_is_fatal {
                return Err(Error::NanLoss {
                    step,
                    task_loss,
                    reg_value,
                    coefficient,
                });
            }
            failure = Some(diag);
            break;
        }
        if let Err(e) = tape.backward(loss) {
            if cfg.nan_is_fatal {
                return Err(e);
            }
            failure = Some(format!("backward failed at step {step}: {e}"));
            break;
        }
        let batch_accuracy =
            count_correct(tape.value(graph.logits).data(), &labels) as f64 / labels.len() as f64;
        model.absorb_grads(&tape, &graph);

        if cfg.weight_decay > 0.0 {
            for layer in &mut model.layers {
                let scale = match layer.method {
                    MethodState::L0 { .. } => cfg.weight_decay * cfg.l0_wd_scale,
                    _ => cfg.weight_decay,
                };
                let w = &mut layer.w;
                let mut grad = w.grad().expect("absorbed weight gradient").to_vec();
                for (g, &v) in grad.iter_mut().zip(w.data()) {
                    *g += (scale as f32) * v;
                }
                w.set_grad(grad);
            }
        }

        let lr = cfg.lr.lr_at(step);
        let mut params = model.trainable_params_mut();
        optimizer.step(lr, &mut params)?;

        if let Some(pc) = &cfg.prune {
            if pc.schedule.is_event(step) {
                fire_prune_event(model, pc, step, &mut prune_streams)?;
            }
        }

        let last = step + 1 == total;
        let log_now = last || (cfg.log_every > 0 && step % cfg.log_every == 0);
        if log_now {
            if cfg.frozen_masks {
                frozen_weights_are_zero(model)?;
            }
            let report = model.eval_sparsity(cfg.vd_threshold);
            step_logs.push(StepLog {
                step,
                total_loss,
                task_loss,
                reg_value,
                coefficient,
                lr,
                batch_accuracy,
                sparsity: model.train_sparsity(cfg.vd_threshold),
                per_layer_sparsity: report.per_layer,
                elapsed_s: started.elapsed().as_secs_f64(),
            });
        }
        if let Some(test) = test_data {
            if !last && cfg.eval_every > 0 && (step + 1) % cfg.eval_every == 0 {
                let (accuracy, avg_loss) =
                    evaluate(model, test, cfg.eval_batch, cfg.vd_threshold);
                eval_logs.push(EvalLog {
                    step,
                    accuracy,
                    avg_loss,
                    sparsity: model.eval_sparsity(cfg.vd_threshold).global,
                });
            }
        }
    }

    let steps_run = failure
        .as_ref()
        .map(|_| step_logs.last().map(|s| s.step + 1).unwrap_or(0))
        .unwrap_or(total);
    let (final_accuracy, final_avg_loss) = match (&failure, test_data) {
        (None, Some(test)) => evaluate(model, test, cfg.eval_batch, cfg.vd_threshold),
        _ => (f64::NAN, f64::NAN),
    };
    let report = model.eval_sparsity(cfg.vd_threshold);
    if let (None, Some(_)) = (&failure, test_data) {
        eval_logs.push(EvalLog {
            step: total.saturating_sub(1),
            accuracy: final_accuracy,
            avg_loss: final_avg_loss,
            sparsity: report.global,
        });
    }
    Ok(TrainingRecord {
        steps_run,
        step_logs,
        eval_logs,
        final_accuracy,
        final_avg_loss,
        final_eval_sparsity: report.global,
        final_train_sparsity: model.train_sparsity(cfg.vd_threshold),
        per_layer_sparsity: report.per_layer,
        wall_clock_s: started.elapsed().as_secs_f64(),
        failure,
        init,
    })
}
