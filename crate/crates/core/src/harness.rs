//! Retraining protocols over learned masks: lottery-ticket rewinding to the
//! original initialization, and training sparse architectures from scratch
//! with a standard or doubled step budget.
//!
//! A finished pruning run is first `capture`d into an immutable pair of
//! snapshots (the pre-step-0 weights and the final masks). A variant run
//! then rebuilds the model, installs one of three initializations
//! (the captured original, a fresh standard draw, or a fresh draw with the
//! variance scaled up by the fraction of surviving weights), freezes the
//! masks, and trains with the base configuration inherited verbatim except
//! for the learning-rate scheme. Scratch-b doubles the step budget; its four
//! rate schemes differ in *where* the extra steps go.

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::mask::SparsityMask;
use crate::models::{MethodConfig, MethodState, Model, ModelSpec};
use crate::rng::RngState;
use crate::tape::MaskGradMode;
use crate::tensor::Tensor;
use crate::train::{train, InitSnapshot, LrPlan, TrainConfig, TrainingRecord};

/// The three retraining protocols.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    /// Rewind to the captured initialization and retrain with the standard
    /// budget.
    Lottery,
    /// Fresh initialization, standard budget ("scratch-e": same epochs).
    ScratchE,
    /// Fresh initialization, doubled budget ("scratch-b": 2x steps).
    ScratchB,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::Lottery => "lottery",
            Variant::ScratchE => "scratch-e",
            Variant::ScratchB => "scratch-b",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "lottery" => Ok(Variant::Lottery),
            "scratch-e" => Ok(Variant::ScratchE),
            "scratch-b" => Ok(Variant::ScratchB),
            other => Err(Error::Plan { reason: format!("unknown variant `{other}`") }),
        }
    }
}

/// How a variant run obtains its starting weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReinitKind {
    /// Reuse the captured pre-training weights bit-exactly.
    OriginalInit,
    /// A fresh draw from the standard initializer.
    FreshStandard,
    /// A fresh draw with per-layer variance multiplied by
    /// total weights / nonzero weights, so each surviving unit sees the same
    /// input variance as in the dense model.
    FreshNnzScaled,
}

impl ReinitKind {
    pub fn name(self) -> &'static str {
        match self {
            ReinitKind::OriginalInit => "original-init",
            ReinitKind::FreshStandard => "fresh-standard",
            ReinitKind::FreshNnzScaled => "fresh-nnz-scaled",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "original-init" => Ok(ReinitKind::OriginalInit),
            "fresh-standard" => Ok(ReinitKind::FreshStandard),
            "fresh-nnz-scaled" => Ok(ReinitKind::FreshNnzScaled),
            other => Err(Error::Plan { reason: format!("unknown reinit `{other}`") }),
        }
    }
}

/// How a doubled budget reshapes the learning-rate plan. `Standard` keeps
/// the base plan (and budget) unchanged; every other scheme doubles
/// `total_steps`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LrScheme {
    /// The base plan as-is.
    Standard,
    /// Every rate region (warmup included) lasts twice as many steps.
    ScaledRegions,
    /// Boundaries unchanged; the final low-rate region absorbs all extra
    /// steps.
    ExtendedFinal,
    /// The whole decay cycle runs twice, warmup included.
    RepeatedDecay,
    /// The decay cycle runs twice but the second pass skips the warmup.
    RepeatedDecayNoWarmup,
}

impl LrScheme {
    pub fn name(self) -> &'static str {
        match self {
            LrScheme::Standard => "standard",
            LrScheme::ScaledRegions => "scaled-regions",
            LrScheme::ExtendedFinal => "extended-final",
            LrScheme::RepeatedDecay => "repeated-decay",
            LrScheme::RepeatedDecayNoWarmup => "repeated-decay-no-warmup",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "standard" => Ok(LrScheme::Standard),
            "scaled-regions" => Ok(LrScheme::ScaledRegions),
            "extended-final" => Ok(LrScheme::ExtendedFinal),
            "repeated-decay" => Ok(LrScheme::RepeatedDecay),
            "repeated-decay-no-warmup" => Ok(LrScheme::RepeatedDecayNoWarmup),
            other => Err(Error::Plan { reason: format!("unknown lr scheme `{other}`") }),
        }
    }

    /// Whether applying this scheme doubles the step budget.
    pub fn doubles_steps(self) -> bool {
        !matches!(self, LrScheme::Standard)
    }

    /// Derive the variant plan from the base run's plan.
    pub fn apply(self, base: &LrPlan) -> LrPlan {
        match self {
            LrScheme::Standard => base.clone(),
            LrScheme::ScaledRegions => LrPlan {
                warmup_steps: base.warmup_steps * 2,
                boundaries: base.boundaries.iter().map(|b| b * 2).collect(),
                total_steps: base.total_steps * 2,
                restarts: Vec::new(),
                ..base.clone()
            },
            LrScheme::ExtendedFinal => LrPlan {
                total_steps: base.total_steps * 2,
                restarts: Vec::new(),
                ..base.clone()
            },
            LrScheme::RepeatedDecay | LrScheme::RepeatedDecayNoWarmup => LrPlan {
                total_steps: base.total_steps * 2,
                restarts: vec![base.total_steps],
                restart_warmup: matches!(self, LrScheme::RepeatedDecay),
                ..base.clone()
            },
        }
    }
}

/// A full retraining experiment: which protocol, how to re-initialize, how
/// to reshape the rate plan, and how many independent runs.
#[derive(Debug, Clone)]
pub struct ExperimentPlan {
    /// Identifier of the base run the masks came from (checkpoint path or
    /// run tag); informational.
    pub base_run: String,
    pub variant: Variant,
    pub reinit: ReinitKind,
    pub lr_scheme: LrScheme,
    /// Independent replicas per seed.
    pub replicas: u32,
    pub seeds: Vec<u64>,
}

impl ExperimentPlan {
    /// A short label for tables: `variant/reinit` (plus the scheme when it
    /// is not the default).
    pub fn label(&self) -> String {
        if self.lr_scheme == LrScheme::Standard {
            format!("{}/{}", self.variant.name(), self.reinit.name())
        } else {
            format!("{}/{}/{}", self.variant.name(), self.reinit.name(), self.lr_scheme.name())
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.replicas == 0 || self.seeds.is_empty() {
            return Err(Error::Plan {
                reason: "an experiment needs at least one replica and one seed".to_string(),
            });
        }
        match self.variant {
            Variant::Lottery => {
                if self.reinit != ReinitKind::OriginalInit {
                    return Err(Error::Plan {
                        reason: "the lottery variant rewinds to the original initialization; \
                                 pick a scratch variant for fresh draws"
                            .to_string(),
                    });
                }
                if self.lr_scheme != LrScheme::Standard {
                    return Err(Error::Plan {
                        reason: "the lottery variant keeps the standard rate plan".to_string(),
                    });
                }
            }
            Variant::ScratchE => {
                if self.reinit == ReinitKind::OriginalInit {
                    return Err(Error::Plan {
                        reason: "scratch variants re-initialize; use lottery to reuse the \
                                 original weights"
                            .to_string(),
                    });
                }
                if self.lr_scheme != LrScheme::Standard {
                    return Err(Error::Plan {
                        reason: "scratch-e keeps the standard step budget and rate plan"
                            .to_string(),
                    });
                }
            }
            Variant::ScratchB => {
                if self.reinit == ReinitKind::OriginalInit {
                    return Err(Error::Plan {
                        reason: "scratch variants re-initialize; use lottery to reuse the \
                                 original weights"
                            .to_string(),
                    });
                }
                if !self.lr_scheme.doubles_steps() {
                    return Err(Error::Plan {
                        reason: "scratch-b doubles the step budget; pick one of the doubled \
                                 rate schemes"
                            .to_string(),
                    });
                }
            }
        }
        Ok(())
    }
}

/// The final masks of a pruning run, immutable once captured.
#[derive(Debug, Clone)]
pub struct MaskSnapshot {
    masks: Vec<(String, SparsityMask)>,
    source: String,
    source_sparsity: f64,
}

impl MaskSnapshot {
    pub fn masks(&self) -> &[(String, SparsityMask)] {
        &self.masks
    }

    pub fn source(&self) -> &str {
        &self.source
    }

    /// Weighted global sparsity of the captured masks.
    pub fn source_sparsity(&self) -> f64 {
        self.source_sparsity
    }
}

/// Freeze a finished pruning run into its two reusable artifacts: the
/// pre-step-0 weights and the final per-layer keep masks. Works for any
/// method whose evaluation state determines a mask; errors when some layer
/// has none (a dense run has nothing to capture).
pub fn capture(
    record: &TrainingRecord,
    model: &Model<f32>,
    vd_threshold: f64,
    source: impl Into<String>,
) -> Result<(InitSnapshot, MaskSnapshot)> {
    let mut masks = Vec::with_capacity(model.layers.len());
    let mut kept = 0usize;
    let mut total = 0usize;
    for (wi, layer) in model.layers.iter().enumerate() {
        let mask = model.eval_keep_mask(wi, vd_threshold).ok_or_else(|| Error::Missing {
            what: format!("a sparsity mask on layer {} (dense runs have none)", layer.name),
        })?;
        kept += mask.count_kept();
        total += mask.len();
        masks.push((layer.name.clone(), mask));
    }
    let snapshot = MaskSnapshot {
        masks,
        source: source.into(),
        source_sparsity: 1.0 - kept as f64 / total as f64,
    };
    Ok((record.init.clone(), snapshot))
}

/// Fresh weights whose per-layer variance is multiplied by
/// total / nonzero, drawn from the same per-layer streams as the standard
/// initializer (so a dense mask reproduces it bit-exactly).
pub fn reinit_nnz_scaled(
    spec: &ModelSpec,
    masks: &MaskSnapshot,
    rng: &RngState,
) -> Result<Vec<Tensor<f32>>> {
    let infos = spec.weight_info()?;
    check_mask_shapes(&infos.iter().map(|i| (i.name.clone(), i.dims.clone())).collect::<Vec<_>>(), masks)?;
    let mut out = Vec::with_capacity(infos.len());
    for (i, info) in infos.iter().enumerate() {
        let mask = &masks.masks[i].1;
        let nnz = mask.count_kept();
        if nnz == 0 {
            return Err(Error::Plan {
                reason: format!(
                    "layer {} is fully masked; a variance scale for zero survivors is undefined",
                    info.name
                ),
            });
        }
        let scale = (mask.len() as f64 / nnz as f64).sqrt();
        let limit = (6.0 / (info.fan_in + info.fan_out) as f64).sqrt() * scale;
        let mut stream = rng.stream(i as u64);
        let mut w = Tensor::<f32>::zeros(&info.dims);
        w.fill_uniform(&mut stream, -limit, limit);
        out.push(w);
    }
    Ok(out)
}

fn check_mask_shapes(infos: &[(String, Vec<usize>)], masks: &MaskSnapshot) -> Result<()> {
    if infos.len() != masks.masks.len() {
        return Err(Error::Plan {
            reason: format!(
                "mask snapshot has {} layers, the model has {}",
                masks.masks.len(),
                infos.len()
            ),
        });
    }
    for ((name, dims), (mname, mask)) in infos.iter().zip(&masks.masks) {
        let numel: usize = dims.iter().product();
        if name != mname || numel != mask.len() {
            return Err(Error::Plan {
                reason: format!(
                    "mask `{mname}` ({} entries) does not match layer `{name}` ({numel} weights)",
                    mask.len()
                ),
            });
        }
    }
    Ok(())
}

/// One retraining run: rebuild the model with frozen masks, install the
/// plan's initialization, and train with the base configuration inherited
/// verbatim except for the rate plan (reshaped by the scheme), disabled
/// pruning, and tolerant NaN handling (a diverged replica is recorded, not
/// fatal). Returns the record and the trained model.
pub fn run_variant(
    plan: &ExperimentPlan,
    spec: ModelSpec,
    masks: &MaskSnapshot,
    init: Option<&InitSnapshot>,
    base_cfg: &TrainConfig,
    train_data: &Dataset,
    test_data: Option<&Dataset>,
    seed: u64,
) -> Result<(TrainingRecord, Model<f32>)> {
    plan.validate()?;
    let rng = RngState::new(seed);
    let mut model = Model::<f32>::build(
        spec.clone(),
        &MethodConfig::Masked { grad_mode: MaskGradMode::Masked },
        &rng,
    )?;
    let infos: Vec<(String, Vec<usize>)> = model
        .layers
        .iter()
        .map(|l| (l.name.clone(), l.w.dims().to_vec()))
        .collect();
    check_mask_shapes(&infos, masks)?;

    match plan.reinit {
        ReinitKind::OriginalInit => {
            let snapshot = init.ok_or_else(|| Error::Missing {
                what: "the captured initialization (required by original-init)".to_string(),
            })?;
            if snapshot.layers.len() != model.layers.len() {
                return Err(Error::Plan {
                    reason: format!(
                        "captured initialization has {} layers, the model has {}",
                        snapshot.layers.len(),
                        model.layers.len()
                    ),
                });
            }
            for (layer, (name, w, b)) in model.layers.iter_mut().zip(&snapshot.layers) {
                if layer.name != *name || layer.w.dims() != w.dims() {
                    return Err(Error::Plan {
                        reason: format!(
                            "captured layer `{name}` does not match model layer `{}`",
                            layer.name
                        ),
                    });
                }
                layer.w = w.clone();
                layer.b = b.clone();
            }
        }
        ReinitKind::FreshStandard => {}
        ReinitKind::FreshNnzScaled => {
            let weights = reinit_nnz_scaled(&spec, masks, &rng)?;
            for (layer, w) in model.layers.iter_mut().zip(weights) {
                layer.w = w;
            }
        }
    }

    for (layer, (_, mask)) in model.layers.iter_mut().zip(masks.masks()) {
        mask.apply_to(layer.w.data_mut());
        if let MethodState::Masked { mask: slot, .. } = &mut layer.method {
            *slot = mask.clone();
        }
    }

    let mut cfg = base_cfg.clone();
    cfg.lr = plan.lr_scheme.apply(&base_cfg.lr);
    cfg.prune = None;
    cfg.frozen_masks = true;
    cfg.nan_is_fatal = false;
    let record = train(&mut model, train_data, test_data, &cfg, &rng)?;
    Ok((record, model))
}

/// One line of the variant-versus-baseline table.
#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonRow {
    pub variant: String,
    pub sparsity: f64,
    pub replicas: usize,
    /// Replicas whose final accuracy was not finite (diverged runs).
    pub failed: usize,
    pub mean_accuracy: f64,
    pub min_accuracy: f64,
    pub max_accuracy: f64,
    pub baseline_accuracy: f64,
    /// `baseline_accuracy - mean_accuracy`; positive favors the baseline.
    pub gap: f64,
}

/// Aggregate variant records against pruned-during-training baselines.
/// `records` carries (variant label, sparsity level, final accuracy) per
/// replica; `baselines` carries (sparsity level, final accuracy). Rows come
/// out sorted by label then sparsity, one per (label, level) pair. Levels
/// are matched exactly, so callers must key both sides by the same
/// configured target.
pub fn compare(records: &[(String, f64, f64)], baselines: &[(f64, f64)]) -> Result<Vec<ComparisonRow>> {
    let mut keys: Vec<(String, f64)> = Vec::new();
    for (label, level, _) in records {
        if !keys.iter().any(|(l, s)| l == label && s == level) {
            keys.push((label.clone(), *level));
        }
    }
    keys.sort_by(|a, b| a.0.cmp(&b.0).then(a.1.total_cmp(&b.1)));
    let mut rows = Vec::with_capacity(keys.len());
    for (label, level) in keys {
        let baseline_accuracy = baselines
            .iter()
            .find(|(s, _)| *s == level)
            .map(|(_, a)| *a)
            .ok_or_else(|| Error::Plan {
                reason: format!("no baseline at sparsity level {level}"),
            })?;
        let accs: Vec<f64> = records
            .iter()
            .filter(|(l, s, _)| *l == label && *s == level)
            .map(|(_, _, a)| *a)
            .collect();
        let finite: Vec<f64> = accs.iter().copied().filter(|a| a.is_finite()).collect();
        let (mean, min, max) = if finite.is_empty() {
            (f64::NAN, f64::NAN, f64::NAN)
        } else {
            let mean = finite.iter().sum::<f64>() / finite.len() as f64;
            let min = finite.iter().copied().fold(f64::INFINITY, f64::min);
            let max = finite.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            (mean, min, max)
        };
        rows.push(ComparisonRow {
            variant: label,
            sparsity: level,
            replicas: accs.len(),
            failed: accs.len() - finite.len(),
            mean_accuracy: mean,
            min_accuracy: min,
            max_accuracy: max,
            baseline_accuracy,
            gap: baseline_accuracy - mean,
        });
    }
    Ok(rows)
}

/// Render comparison rows as an aligned text table.
pub fn comparison_table(rows: &[ComparisonRow]) -> String {
    let mut out = String::from(
        "variant                                  sparsity  n  failed     mean      min      max  baseline      gap\n",
    );
    for r in rows {
        out.push_str(&format!(
            "{:<40} {:>8.4} {:>2} {:>7} {:>8.4} {:>8.4} {:>8.4} {:>9.4} {:>+8.4}\n",
            r.variant,
            r.sparsity,
            r.replicas,
            r.failed,
            r.mean_accuracy,
            r.min_accuracy,
            r.max_accuracy,
            r.baseline_accuracy,
            r.gap,
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synthetic_classification;
    use crate::random_prune::random_prune_step;
    use crate::train::{PruneConfig, PruneKind};
    use crate::schedule::PruningSchedule;

    fn base_plan() -> LrPlan {
        LrPlan {
            base_lr: 1.0,
            warmup_steps: 4,
            boundaries: vec![10, 20],
            decay_factor: 0.1,
            total_steps: 30,
            restarts: Vec::new(),
            restart_warmup: true,
        }
    }

    fn plan(variant: Variant, reinit: ReinitKind, scheme: LrScheme) -> ExperimentPlan {
        ExperimentPlan {
            base_run: "base".to_string(),
            variant,
            reinit,
            lr_scheme: scheme,
            replicas: 1,
            seeds: vec![7],
        }
    }

    /// A short masked pruning run whose artifacts the harness tests reuse.
    fn base_pruning_run(seed: u64) -> (Dataset, TrainingRecord, Model<f32>, TrainConfig) {
        let data = synthetic_classification(96, 10, 33);
        let rng = RngState::new(seed);
        let mut model = Model::<f32>::build(
            ModelSpec::lenet300(),
            &MethodConfig::Masked { grad_mode: MaskGradMode::Masked },
            &rng,
        )
        .unwrap();
        let mut cfg = TrainConfig::basic(1e-3, 20, 16);
        cfg.prune = Some(PruneConfig {
            kind: PruneKind::Random,
            schedule: PruningSchedule::new(2, 14, 4, 0.0, 0.5).unwrap(),
            layer_targets: vec![0.5, 0.5, 0.5],
        });
        cfg.log_every = 5;
        let record = train(&mut model, &data, None, &cfg, &rng).unwrap();
        (data, record, model, cfg)
    }

    #[test]
    fn rate_schemes_reshape_the_plan_as_described() {
        let base = base_plan();
        assert_eq!(LrScheme::Standard.apply(&base), base);

        let scaled = LrScheme::ScaledRegions.apply(&base);
        assert_eq!(scaled.total_steps, 60);
        assert_eq!(scaled.warmup_steps, 8);
        assert_eq!(scaled.boundaries, vec![20, 40]);
        // Each region holds the same level for twice as long.
        assert_eq!(scaled.lr_at(9), 1.0);
        assert_eq!(scaled.lr_at(19), 1.0);
        assert!((scaled.lr_at(20) - 0.1).abs() < 1e-12);
        assert!((scaled.lr_at(39) - 0.1).abs() < 1e-12);
        assert!((scaled.lr_at(40) - 0.01).abs() < 1e-12);

        let extended = LrScheme::ExtendedFinal.apply(&base);
        assert_eq!(extended.total_steps, 60);
        assert_eq!(extended.boundaries, base.boundaries);
        assert!((extended.lr_at(59) - 0.01).abs() < 1e-12, "final region absorbs the extra steps");

        let repeated = LrScheme::RepeatedDecay.apply(&base);
        assert_eq!(repeated.total_steps, 60);
        for s in 0..30 {
            assert_eq!(repeated.lr_at(30 + s), base.lr_at(s), "cycle tiles exactly at step {s}");
        }

        let no_warmup = LrScheme::RepeatedDecayNoWarmup.apply(&base);
        assert_eq!(no_warmup.lr_at(30), 1.0, "second cycle skips the warmup");
        for s in base.warmup_steps..30 {
            assert_eq!(no_warmup.lr_at(30 + s), base.lr_at(s));
        }
    }

    #[test]
    fn plans_enforce_the_variant_pairings() {
        assert!(plan(Variant::Lottery, ReinitKind::OriginalInit, LrScheme::Standard)
            .validate()
            .is_ok());
        assert!(plan(Variant::Lottery, ReinitKind::FreshStandard, LrScheme::Standard)
            .validate()
            .is_err());
        assert!(plan(Variant::Lottery, ReinitKind::OriginalInit, LrScheme::RepeatedDecay)
            .validate()
            .is_err());
        assert!(plan(Variant::ScratchE, ReinitKind::FreshStandard, LrScheme::Standard)
            .validate()
            .is_ok());
        assert!(plan(Variant::ScratchE, ReinitKind::OriginalInit, LrScheme::Standard)
            .validate()
            .is_err());
        assert!(plan(Variant::ScratchE, ReinitKind::FreshStandard, LrScheme::ScaledRegions)
            .validate()
            .is_err());
        assert!(plan(Variant::ScratchB, ReinitKind::FreshNnzScaled, LrScheme::ScaledRegions)
            .validate()
            .is_ok());
        assert!(plan(Variant::ScratchB, ReinitKind::FreshStandard, LrScheme::Standard)
            .validate()
            .is_err());
        let mut bad = plan(Variant::ScratchE, ReinitKind::FreshStandard, LrScheme::Standard);
        bad.replicas = 0;
        assert!(bad.validate().is_err());
        let mut bad = plan(Variant::ScratchE, ReinitKind::FreshStandard, LrScheme::Standard);
        bad.seeds.clear();
        assert!(bad.validate().is_err());
    }

    #[test]
    fn capture_freezes_init_and_masks_deterministically() {
        let (_, record, model, _) = base_pruning_run(7);
        let (init_a, masks_a) = capture(&record, &model, 3.0, "run-a").unwrap();
        let (init_b, masks_b) = capture(&record, &model, 3.0, "run-a").unwrap();
        assert_eq!(masks_a.source_sparsity(), record.final_eval_sparsity);
        for ((_, ma), (_, mb)) in masks_a.masks().iter().zip(masks_b.masks()) {
            assert_eq!(ma.to_bytes(), mb.to_bytes());
        }
        for ((na, wa, ba), (nb, wb, bb)) in init_a.layers.iter().zip(&init_b.layers) {
            assert_eq!(na, nb);
            assert_eq!(wa.data(), wb.data());
            assert_eq!(ba.data(), bb.data());
        }
        // The captured init is the record's own snapshot.
        for ((_, w, _), (_, rw, _)) in init_a.layers.iter().zip(&record.init.layers) {
            assert_eq!(w.data(), rw.data());
        }

        let rng = RngState::new(1);
        let dense =
            Model::<f32>::build(ModelSpec::lenet300(), &MethodConfig::Dense, &rng).unwrap();
        assert!(capture(&record, &dense, 3.0, "dense").is_err(), "dense runs have no masks");
    }

    #[test]
    fn lottery_at_zero_steps_is_the_masked_original_init() {
        let (data, record, model, cfg) = base_pruning_run(7);
        let (init, masks) = capture(&record, &model, 3.0, "base").unwrap();
        let mut zero_cfg = cfg.clone();
        zero_cfg.lr = LrPlan::constant(1e-3, 0);
        let p = plan(Variant::Lottery, ReinitKind::OriginalInit, LrScheme::Standard);
        let (rec, retrained) =
            run_variant(&p, ModelSpec::lenet300(), &masks, Some(&init), &zero_cfg, &data, None, 7)
                .unwrap();
        assert_eq!(rec.steps_run, 0);
        for (layer, ((_, w0, _), (_, mask))) in
            retrained.layers.iter().zip(init.layers.iter().zip(masks.masks()))
        {
            let mut expected = w0.clone();
            mask.apply_to(expected.data_mut());
            assert_eq!(layer.w.data(), expected.data(), "{} must be init ⊙ mask", layer.name);
        }
        // Seed equal to the base run's seed: the fresh build reproduces the
        // captured init bit-exactly before masking.
        let fresh = Model::<f32>::build(
            ModelSpec::lenet300(),
            &MethodConfig::Masked { grad_mode: MaskGradMode::Masked },
            &RngState::new(7),
        )
        .unwrap();
        for (layer, (_, w0, _)) in fresh.layers.iter().zip(&init.layers) {
            assert_eq!(layer.w.data(), w0.data());
        }
    }

    #[test]
    fn nnz_scaled_reinit_matches_the_standard_draw_on_dense_masks() {
        let spec = ModelSpec::lenet300();
        let rng = RngState::new(21);
        let sizes: Vec<usize> = spec.weight_info().unwrap().iter().map(|i| i.dims.iter().product()).collect();
        let names: Vec<String> = spec.weight_info().unwrap().iter().map(|i| i.name.clone()).collect();
        let dense_masks = MaskSnapshot {
            masks: names.iter().cloned().zip(sizes.iter().map(|&n| SparsityMask::ones(n))).collect(),
            source: "dense".to_string(),
            source_sparsity: 0.0,
        };
        let drawn = reinit_nnz_scaled(&spec, &dense_masks, &rng).unwrap();
        let standard = Model::<f32>::build(spec.clone(), &MethodConfig::Dense, &rng).unwrap();
        for (w, layer) in drawn.iter().zip(&standard.layers) {
            assert_eq!(w.data(), layer.w.data(), "scale 1 must reproduce the standard init");
        }

        let zero_masks = MaskSnapshot {
            masks: names.iter().cloned().zip(sizes.iter().map(|&n| SparsityMask::zeros(n))).collect(),
            source: "zero".to_string(),
            source_sparsity: 1.0,
        };
        assert!(reinit_nnz_scaled(&spec, &zero_masks, &rng).is_err());
    }

    #[test]
    fn nnz_scaled_reinit_hits_the_target_variance_within_five_percent() {
        let spec = ModelSpec::lenet300();
        let infos = spec.weight_info().unwrap();
        let rng = RngState::new(77);
        // 90% sparsity on the first layer: variance scale 235200/23520 = 10.
        let mut first = SparsityMask::ones(235_200);
        let mut prune_rng = RngState::new(5);
        random_prune_step(&mut first, 0.9, &mut prune_rng).unwrap();
        let masks = MaskSnapshot {
            masks: vec![
                (infos[0].name.clone(), first),
                (infos[1].name.clone(), SparsityMask::ones(30_000)),
                (infos[2].name.clone(), SparsityMask::ones(1_000)),
            ],
            source: "sparse".to_string(),
            source_sparsity: 0.0,
        };
        let drawn = reinit_nnz_scaled(&spec, &masks, &rng).unwrap();
        let w = &drawn[0];
        let n = w.numel() as f64;
        let mean = w.sum_f64() / n;
        let var = w.data().iter().map(|&v| (f64::from(v) - mean).powi(2)).sum::<f64>() / n;
        let limit_sq = 6.0 / (infos[0].fan_in + infos[0].fan_out) as f64;
        let target = limit_sq * 10.0 / 3.0; // uniform(-L√10, L√10) variance
        assert!(
            (var - target).abs() / target < 0.05,
            "empirical variance {var} vs target {target}"
        );
    }

    #[test]
    fn scratch_b_runs_exactly_twice_the_steps_with_frozen_masks() {
        let (data, record, model, cfg) = base_pruning_run(9);
        let (init, masks) = capture(&record, &model, 3.0, "base").unwrap();
        let e_plan = plan(Variant::ScratchE, ReinitKind::FreshStandard, LrScheme::Standard);
        let b_plan = plan(Variant::ScratchB, ReinitKind::FreshNnzScaled, LrScheme::ScaledRegions);
        let (rec_e, model_e) =
            run_variant(&e_plan, ModelSpec::lenet300(), &masks, None, &cfg, &data, None, 11)
                .unwrap();
        let (rec_b, model_b) =
            run_variant(&b_plan, ModelSpec::lenet300(), &masks, Some(&init), &cfg, &data, None, 11)
                .unwrap();
        assert_eq!(rec_e.steps_run, cfg.lr.total_steps);
        assert_eq!(rec_b.steps_run, 2 * cfg.lr.total_steps, "scratch-b doubles the budget");
        for m in [&model_e, &model_b] {
            for (layer, (_, mask)) in m.layers.iter().zip(masks.masks()) {
                for (i, &v) in layer.w.data().iter().enumerate() {
                    if !mask.is_kept(i) {
                        assert_eq!(v, 0.0, "masked weight drifted in {}", layer.name);
                    }
                }
            }
        }
        // Fresh-standard and nnz-scaled draws differ on sparse layers.
        assert!(model_e.layers[0]
            .w
            .data()
            .iter()
            .zip(model_b.layers[0].w.data())
            .any(|(a, b)| a != b));
        // The sparsity level carried over from the masks.
        assert_eq!(rec_e.final_eval_sparsity, record.final_eval_sparsity);
    }

    #[test]
    fn comparison_rows_aggregate_per_variant_and_level() {
        let records = vec![
            ("lottery/original-init".to_string(), 0.9, 0.97),
            ("lottery/original-init".to_string(), 0.9, 0.95),
            ("lottery/original-init".to_string(), 0.5, 0.99),
            ("scratch-e/fresh-standard".to_string(), 0.9, f64::NAN),
            ("scratch-e/fresh-standard".to_string(), 0.9, 0.90),
        ];
        let baselines = vec![(0.9, 0.98), (0.5, 0.99)];
        let rows = compare(&records, &baselines).unwrap();
        assert_eq!(rows.len(), 3, "one row per (variant, level)");
        let lot9 = rows.iter().find(|r| r.variant.starts_with("lottery") && r.sparsity == 0.9).unwrap();
        assert_eq!(lot9.replicas, 2);
        assert_eq!(lot9.failed, 0);
        assert!((lot9.mean_accuracy - 0.96).abs() < 1e-12);
        assert_eq!(lot9.min_accuracy, 0.95);
        assert_eq!(lot9.max_accuracy, 0.97);
        assert!((lot9.gap - 0.02).abs() < 1e-12);
        let lot5 = rows.iter().find(|r| r.sparsity == 0.5).unwrap();
        assert_eq!(lot5.gap, 0.0, "identical accuracy means zero gap");
        let scr = rows.iter().find(|r| r.variant.starts_with("scratch")).unwrap();
        assert_eq!(scr.failed, 1, "non-finite replicas are counted, not averaged");
        assert_eq!(scr.mean_accuracy, 0.90);

        assert!(compare(&[("v".to_string(), 0.7, 0.9)], &baselines).is_err(), "missing baseline level");
        let table = comparison_table(&rows);
        assert!(table.lines().count() == 4 && table.contains("gap"));
    }
}
