//! Assembles complete runs from a resolved [`Config`]: datasets, model,
//! training plan, execution, and artifact output. Both the command-line
//! binary and the verification suite drive training through this module so
//! that a configuration file is the single description of a run.

use std::path::Path;

use crate::config::Config;
use crate::data::{load_mnist_split, synthetic_classification, Dataset};
use crate::error::{Error, Result};
use crate::harness::{self, ComparisonRow, ExperimentPlan, MaskSnapshot};
use crate::tape::MaskGradMode;
use crate::models::{MethodConfig, MethodKind, Model, ModelSpec};
use crate::optim::OptimizerKind;
use crate::report::SweepRow;
use crate::rng::RngState;
use crate::schedule::{allocate_layer_targets, PruningSchedule, RampSchedule, RampShape};
use crate::train::{
    train, InitSnapshot, LrPlan, PruneConfig, PruneKind, TrainConfig, TrainingRecord,
};

/// Environment variable consulted for the dataset directory when
/// `data.dir` is left empty.
pub const DATA_DIR_ENV: &str = "SPARSEKIT_DATA";

/// Everything a finished run produces: the trained model, the full
/// training record, and the one-line summary destined for a sweep CSV.
pub struct RunOutput {
    pub model: Model<f32>,
    pub record: TrainingRecord,
    pub row: SweepRow,
}

/// Model architecture named by the `model` key.
pub fn model_spec(cfg: &Config) -> Result<ModelSpec> {
    ModelSpec::by_name(cfg.get("model"))
}

/// Sparsification method and its build-time parameters from the `method`,
/// `vd.*`, and `l0.*` keys.
pub fn method_config(cfg: &Config) -> Result<(MethodKind, MethodConfig)> {
    let kind = MethodKind::parse(cfg.get("method"))?;
    let mc = match kind {
        MethodKind::None => MethodConfig::Dense,
        MethodKind::Magnitude | MethodKind::Random => {
            MethodConfig::Masked { grad_mode: MaskGradMode::Masked }
        }
        MethodKind::Vd => MethodConfig::Vd { log_sigma2_init: cfg.get_f64("vd.log_sigma2_init")? },
        MethodKind::L0 => MethodConfig::L0 {
            droprate_init: cfg.get_f64("l0.droprate_init")?,
            beta: cfg.get_f64("l0.beta")?,
            gamma: cfg.get_f64("l0.gamma")?,
            zeta: cfg.get_f64("l0.zeta")?,
        },
    };
    Ok((kind, mc))
}

/// Load the train and held-out splits named by the `data.*` keys.
///
/// Synthetic data generates `data.synthetic_n` training examples plus a
/// held-out quarter (at least one example per class) from a stream derived
/// from the run seed, so different seeds see different draws. MNIST reads
/// IDX files from `data.dir`, falling back to the `SPARSEKIT_DATA`
/// environment variable when the key is empty. `data.train_limit` truncates
/// the training split when positive.
pub fn load_data(cfg: &Config) -> Result<(Dataset, Dataset)> {
    let limit = cfg.get_usize("data.train_limit")?;
    let (train, test) = match cfg.get("data.source") {
        "synthetic" => {
            let n = cfg.get_usize("data.synthetic_n")?;
            let classes = cfg.get_usize("data.synthetic_classes")?;
            if n == 0 || classes == 0 {
                return Err(Error::Config {
                    reason: "data.synthetic_n and data.synthetic_classes must be positive".into(),
                });
            }
            let held_out = (n / 4).max(classes);
            let seed = cfg.get_u64("seed")? ^ 0xDA7A_5EED;
            let all = synthetic_classification(n + held_out, classes, seed);
            all.split_at(n)
        }
        "mnist" => {
            let configured = cfg.get("data.dir");
            let dir = if configured.is_empty() {
                std::env::var(DATA_DIR_ENV).map_err(|_| Error::Config {
                    reason: format!(
                        "data.source = mnist needs data.dir or the {DATA_DIR_ENV} environment variable"
                    ),
                })?
            } else {
                configured.to_string()
            };
            let dir = Path::new(&dir);
            (load_mnist_split(dir, true)?, load_mnist_split(dir, false)?)
        }
        other => {
            return Err(Error::Config { reason: format!("unknown data.source `{other}`") });
        }
    };
    let train = if limit > 0 { train.truncated(limit) } else { train };
    Ok((train, test))
}

/// Total optimizer steps for a run: `run.epochs` passes over the training
/// split when positive (partial final batches count as a step), otherwise
/// `run.steps` verbatim.
pub fn resolve_steps(cfg: &Config, n_train: usize) -> Result<u64> {
    let epochs = cfg.get_u64("run.epochs")?;
    if epochs == 0 {
        return cfg.get_u64("run.steps");
    }
    let batch = cfg.get_usize("run.batch_size")?;
    if batch == 0 {
        return Err(Error::Config { reason: "run.batch_size must be positive".into() });
    }
    let per_epoch = n_train.div_ceil(batch) as u64;
    Ok(epochs * per_epoch)
}

/// Build the full training plan from a configuration.
///
/// Schedule windows given as `0` resolve against the run length: pruning
/// ends at three quarters of the run and the regularizer ramp ends at the
/// midpoint. When `reg.per_example` is set the regularizer coefficient is
/// divided by the training-set size, matching objectives stated per
/// example rather than per dataset.
pub fn train_config(
    cfg: &Config,
    kind: MethodKind,
    n_train: usize,
    layer_sizes: &[usize],
) -> Result<TrainConfig> {
    let steps = resolve_steps(cfg, n_train)?;
    let batch_size = cfg.get_usize("run.batch_size")?;

    let optimizer = match cfg.get("train.optimizer") {
        "adam" => OptimizerKind::Adam {
            beta1: cfg.get_f64("train.adam_beta1")?,
            beta2: cfg.get_f64("train.adam_beta2")?,
            eps: cfg.get_f64("train.adam_eps")?,
        },
        "sgd" => OptimizerKind::SgdMomentum { momentum: cfg.get_f64("train.momentum")? },
        other => {
            return Err(Error::Config { reason: format!("unknown train.optimizer `{other}`") });
        }
    };

    let lr = LrPlan {
        base_lr: cfg.get_f64("train.lr")?,
        warmup_steps: cfg.get_u64("train.warmup_steps")?,
        boundaries: cfg.get_u64_list("train.lr_drop_steps")?,
        decay_factor: cfg.get_f64("train.lr_drop_factor")?,
        total_steps: steps,
        restarts: Vec::new(),
        restart_warmup: false,
    };
    lr.validate()?;

    let prune = match kind {
        MethodKind::Magnitude | MethodKind::Random => {
            let start = cfg.get_u64("prune.start_step")?;
            let mut end = cfg.get_u64("prune.end_step")?;
            if end == 0 {
                end = steps * 3 / 4;
            }
            let schedule = PruningSchedule::new(
                start,
                end,
                cfg.get_u64("prune.frequency")?,
                cfg.get_f64("prune.initial_sparsity")?,
                cfg.get_f64("prune.final_sparsity")?,
            )?;
            let overrides = cfg.get_override_list("prune.overrides")?;
            let layer_targets =
                allocate_layer_targets(schedule.final_sparsity, layer_sizes, &overrides)?;
            let prune_kind = match kind {
                MethodKind::Magnitude => PruneKind::Magnitude,
                _ => PruneKind::Random,
            };
            Some(PruneConfig { kind: prune_kind, schedule, layer_targets })
        }
        _ => None,
    };

    let reg_ramp = match kind {
        MethodKind::Vd | MethodKind::L0 => {
            let mut scale = cfg.get_f64("reg.scale")?;
            if cfg.get_bool("reg.per_example")? {
                scale /= n_train as f64;
            }
            if scale > 0.0 {
                let shape = match cfg.get("reg.shape") {
                    "constant" => RampShape::Constant,
                    "linear" => RampShape::Linear,
                    "cubic" => RampShape::Cubic,
                    other => {
                        return Err(Error::Config {
                            reason: format!("unknown reg.shape `{other}`"),
                        });
                    }
                };
                let start = cfg.get_u64("reg.start_step")?;
                let mut end = cfg.get_u64("reg.end_step")?;
                if end == 0 {
                    end = steps / 2;
                }
                Some(RampSchedule::new(shape, start, end, scale)?)
            } else {
                None
            }
        }
        _ => None,
    };

    let l0_wd_scale = match kind {
        MethodKind::L0 => 1.0 - cfg.get_f64("l0.droprate_init")?,
        _ => 1.0,
    };

    Ok(TrainConfig {
        batch_size,
        optimizer,
        lr,
        weight_decay: cfg.get_f64("train.weight_decay")?,
        l0_wd_scale,
        reg_ramp,
        prune,
        vd_threshold: cfg.get_f64("vd.threshold")?,
        log_every: cfg.get_u64("run.log_every")?,
        eval_every: cfg.get_u64("run.eval_every")?,
        eval_batch: cfg.get_usize("eval.batch_size")?,
        nan_is_fatal: false,
        frozen_masks: false,
    })
}

/// Execute one run described by a configuration and summarize it.
///
/// The model build and the training loop both derive their randomness from
/// the `seed` key, so a configuration replays bit-identically. A run whose
/// loss diverges is returned with `record.failure` set rather than as an
/// error; its summary row carries the NaN accuracy of the aborted run.
pub fn run_one(cfg: &Config) -> Result<RunOutput> {
    let spec = model_spec(cfg)?;
    let (kind, method) = method_config(cfg)?;
    let (train_data, test_data) = load_data(cfg)?;
    let seed = cfg.get_u64("seed")?;

    let mut model = Model::build(spec, &method, &RngState::new(seed))?;
    let tc = train_config(cfg, kind, train_data.len(), &model.layer_sizes())?;
    let record = train(&mut model, &train_data, Some(&test_data), &tc, &RngState::new(seed))?;

    let target_sparsity = match &tc.prune {
        Some(p) => p.schedule.final_sparsity,
        None => f64::NAN,
    };
    let threshold = match kind {
        MethodKind::Vd => tc.vd_threshold,
        _ => f64::NAN,
    };
    let reg_coefficient = tc.reg_ramp.map_or(0.0, |r| r.final_value);

    let row = SweepRow {
        method: kind.name().to_string(),
        target_sparsity,
        train_sparsity: record.final_train_sparsity,
        test_sparsity: record.final_eval_sparsity,
        test_accuracy: record.final_accuracy,
        reg_coefficient,
        threshold,
        seed,
        steps: record.steps_run,
        wall_clock_s: record.wall_clock_s,
        config_hash: cfg.hash(),
    };

    Ok(RunOutput { model, record, row })
}

/// Outcome of a configuration-grid sweep.
pub struct GridOutcome {
    /// Every clean row belonging to the grid, freshly run or already on
    /// disk, in grid order.
    pub rows: Vec<SweepRow>,
    /// Runs executed by this call.
    pub ran: usize,
    /// Grid points skipped because their (config hash, seed) key was
    /// already in the CSV.
    pub skipped: usize,
    /// Descriptions of runs that diverged; no row is kept for these.
    pub failures: Vec<String>,
}

/// Expand a configuration's comma lists into a grid and run every point.
///
/// With a CSV path the sweep is resumable: rows already present (keyed by
/// configuration hash and seed) are not re-run, and clean new rows are
/// appended as they finish. With an artifact directory each run also
/// writes its full artifacts under `run-<hash>-s<seed>/`. `on_done` fires
/// after each executed run with (index, total, row or failure).
pub fn run_grid(
    base: &Config,
    csv: Option<&Path>,
    artifact_dir: Option<&Path>,
    on_done: &mut dyn FnMut(usize, usize, std::result::Result<&SweepRow, &str>),
) -> Result<GridOutcome> {
    let grid = base.expand();
    let total = grid.len();

    let mut existing: Vec<SweepRow> = Vec::new();
    if let Some(path) = csv {
        if path.exists() {
            existing = crate::report::read_sweep_rows(path)?;
        }
    }

    let mut outcome = GridOutcome { rows: Vec::new(), ran: 0, skipped: 0, failures: Vec::new() };
    for (i, cfg) in grid.iter().enumerate() {
        let hash = cfg.hash();
        let seed = cfg.get_u64("seed")?;
        if let Some(row) = existing.iter().find(|r| r.config_hash == hash && r.seed == seed) {
            outcome.rows.push(row.clone());
            outcome.skipped += 1;
            continue;
        }

        let out = run_one(cfg)?;
        outcome.ran += 1;
        if let Some(f) = &out.record.failure {
            let desc = format!("run {:016x} seed {seed}: {f}", hash);
            on_done(i, total, Err(&desc));
            outcome.failures.push(desc);
            continue;
        }

        if let Some(dir) = artifact_dir {
            let sub = dir.join(format!("run-{hash:016x}-s{seed}"));
            save_run(&sub, cfg, &out)?;
        }
        if let Some(path) = csv {
            crate::report::append_sweep_row(path, &out.row)?;
        }
        on_done(i, total, Ok(&out.row));
        outcome.rows.push(out.row);
    }
    Ok(outcome)
}

/// One retrained variant inside a harness comparison.
pub struct HarnessRun {
    pub label: String,
    pub seed: u64,
    pub accuracy: f64,
    pub sparsity: f64,
    pub failure: Option<String>,
}

/// A pruned base run compared against retrained variants of its masks.
pub struct HarnessOutput {
    pub base: RunOutput,
    pub runs: Vec<HarnessRun>,
    pub rows: Vec<ComparisonRow>,
    pub table: String,
}

/// Seed for the `replica`-th repeat of a configured seed. Replicas beyond
/// the first perturb the seed by a fixed odd stride so repeats are
/// deterministic but decorrelated.
pub fn replica_seed(seed: u64, replica: u32) -> u64 {
    seed.wrapping_add(u64::from(replica).wrapping_mul(1_000_003))
}

/// Run the pruned base configuration, freeze its masks, and retrain each
/// planned variant against them.
///
/// Every variant trains on the same data with the base run's plan (its
/// rate schedule reshaped per the variant), and is compared against the
/// base run's accuracy at the mask sparsity level. The base run must
/// finish cleanly; variant failures are carried into the comparison as
/// failed replicas rather than aborting the others.
pub fn run_harness(cfg: &Config, plans: &[ExperimentPlan]) -> Result<HarnessOutput> {
    for plan in plans {
        plan.validate()?;
    }
    let base = run_one(cfg)?;
    if let Some(f) = &base.record.failure {
        return Err(Error::Plan { reason: format!("base run failed: {f}") });
    }

    let vd_threshold = cfg.get_f64("vd.threshold")?;
    let (init, masks) = harness::capture(&base.record, &base.model, vd_threshold, "base run")?;

    let spec = model_spec(cfg)?;
    let (kind, _) = method_config(cfg)?;
    let (train_data, test_data) = load_data(cfg)?;
    let base_tc = train_config(cfg, kind, train_data.len(), &base.model.layer_sizes())?;

    let level = base.record.final_eval_sparsity;
    let mut runs = Vec::new();
    let mut records = Vec::new();
    for plan in plans {
        for &seed in &plan.seeds {
            for replica in 0..plan.replicas {
                let s = replica_seed(seed, replica);
                let (record, _) = run_variant(
                    plan,
                    spec.clone(),
                    &masks,
                    Some(&init),
                    &base_tc,
                    &train_data,
                    Some(&test_data),
                    s,
                )?;
                runs.push(HarnessRun {
                    label: plan.label(),
                    seed: s,
                    accuracy: record.final_accuracy,
                    sparsity: record.final_eval_sparsity,
                    failure: record.failure.clone(),
                });
                records.push((plan.label(), level, record.final_accuracy));
            }
        }
    }

    let rows = harness::compare(&records, &[(level, base.record.final_accuracy)])?;
    let table = harness::comparison_table(&rows);
    Ok(HarnessOutput { base, runs, rows, table })
}

/// Human-readable summary of a finished run, as written to `result.txt`
/// and echoed on standard output.
pub fn result_text(out: &RunOutput) -> String {
    use std::fmt::Write;
    let r = &out.record;
    let mut s = String::new();
    let _ = writeln!(s, "method            {}", out.row.method);
    let _ = writeln!(s, "steps             {}", r.steps_run);
    let _ = writeln!(s, "test accuracy     {:.4}", r.final_accuracy);
    let _ = writeln!(s, "test sparsity     {:.4}", r.final_eval_sparsity);
    let _ = writeln!(s, "train sparsity    {:.4}", r.final_train_sparsity);
    for (layer, sp) in out.model.layers.iter().zip(&r.per_layer_sparsity) {
        let _ = writeln!(s, "  {:<16}{sp:.4}", layer.name);
    }
    let _ = writeln!(s, "wall clock        {:.1}s", r.wall_clock_s);
    let _ = writeln!(s, "config hash       {:016x}", out.row.config_hash);
    match &r.failure {
        Some(f) => {
            let _ = writeln!(s, "status            FAILED: {f}");
        }
        None => {
            let _ = writeln!(s, "status            ok");
        }
    }
    s
}

/// Write a run's artifacts into a directory: the resolved configuration
/// (`config.used.cfg`), a text summary (`result.txt`), step and evaluation
/// telemetry (`metrics.csv`, `evals.csv`), the trained model with its
/// initialization (`checkpoint.sprs`), and the summary row appended to
/// `sweep.csv` keyed by configuration hash and seed.
pub fn save_run(dir: &Path, cfg: &Config, out: &RunOutput) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let write = |name: &str, contents: &str| -> Result<()> {
        let path = dir.join(name);
        std::fs::write(&path, contents).map_err(|e| Error::io(&path, e))
    };

    write("config.used.cfg", &cfg.to_text())?;
    write("result.txt", &result_text(out))?;

    let mut metrics = String::from(
        "step,total_loss,task_loss,reg_value,coefficient,lr,batch_accuracy,sparsity\n",
    );
    for s in &out.record.step_logs {
        use std::fmt::Write;
        let _ = writeln!(
            metrics,
            "{},{},{},{},{},{},{},{}",
            s.step,
            s.total_loss,
            s.task_loss,
            s.reg_value,
            s.coefficient,
            s.lr,
            s.batch_accuracy,
            s.sparsity
        );
    }
    write("metrics.csv", &metrics)?;

    let mut evals = String::from("step,accuracy,avg_loss,sparsity\n");
    for e in &out.record.eval_logs {
        use std::fmt::Write;
        let _ = writeln!(evals, "{},{},{},{}", e.step, e.accuracy, e.avg_loss, e.sparsity);
    }
    write("evals.csv", &evals)?;

    let ck = crate::checkpoint::model_to_checkpoint(&out.model, Some(&out.record.init))?;
    ck.save(&dir.join("checkpoint.sprs"))?;

    crate::report::append_sweep_row(&dir.join("sweep.csv"), &out.row)?;
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn run_variant(
    plan: &ExperimentPlan,
    spec: ModelSpec,
    masks: &MaskSnapshot,
    init: Option<&InitSnapshot>,
    base_cfg: &TrainConfig,
    train_data: &Dataset,
    test_data: Option<&Dataset>,
    seed: u64,
) -> Result<(TrainingRecord, Model<f32>)> {
    harness::run_variant(plan, spec, masks, init, base_cfg, train_data, test_data, seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::{LrScheme, ReinitKind, Variant};

    fn base_cfg(pairs: &[(&str, &str)]) -> Config {
        let mut cfg = Config::default();
        for (k, v) in pairs {
            cfg.set(k, v).expect("valid test key");
        }
        cfg
    }

    #[test]
    fn epochs_override_the_step_count() {
        let cfg = base_cfg(&[("run.epochs", "3"), ("run.batch_size", "100")]);
        // 250 examples at batch 100 = 3 steps per epoch, partial batch included.
        assert_eq!(resolve_steps(&cfg, 250).unwrap(), 9);
        let cfg = base_cfg(&[("run.steps", "123")]);
        assert_eq!(resolve_steps(&cfg, 250).unwrap(), 123);
    }

    #[test]
    fn schedule_windows_resolve_against_the_run_length() {
        let cfg = base_cfg(&[
            ("method", "magnitude"),
            ("run.steps", "1000"),
            ("prune.frequency", "50"),
        ]);
        let tc = train_config(&cfg, MethodKind::Magnitude, 10_000, &[100, 50]).unwrap();
        let prune = tc.prune.expect("magnitude runs prune");
        assert_eq!(prune.schedule.end_step, 750);
        assert_eq!(prune.layer_targets.len(), 2);

        let cfg = base_cfg(&[
            ("method", "vd"),
            ("run.steps", "1000"),
            ("reg.shape", "linear"),
            ("reg.scale", "2.0"),
            ("reg.per_example", "true"),
        ]);
        let tc = train_config(&cfg, MethodKind::Vd, 500, &[100]).unwrap();
        let ramp = tc.reg_ramp.expect("scaled ramp present");
        assert_eq!(ramp.end_step, 500);
        assert!((ramp.final_value - 2.0 / 500.0).abs() < 1e-15);
        assert!(tc.prune.is_none());
    }

    #[test]
    fn per_layer_targets_honor_overrides() {
        let cfg = base_cfg(&[
            ("method", "magnitude"),
            ("run.steps", "400"),
            ("prune.final_sparsity", "0.5"),
            ("prune.overrides", "1:0.0"),
        ]);
        let tc = train_config(&cfg, MethodKind::Magnitude, 1_000, &[300, 100]).unwrap();
        let targets = tc.prune.unwrap().layer_targets;
        assert_eq!(targets[1], 0.0);
        // All 200 pruned weights come from the first layer: 200/300.
        assert!((targets[0] - 200.0 / 300.0).abs() < 1e-12);
    }

    #[test]
    fn one_configured_run_trains_and_summarizes_itself() {
        let cfg = base_cfg(&[
            ("run.steps", "40"),
            ("run.batch_size", "32"),
            ("data.synthetic_n", "128"),
            ("data.synthetic_classes", "4"),
            ("seed", "7"),
        ]);
        let out = run_one(&cfg).expect("dense run succeeds");
        assert!(out.record.failure.is_none());
        assert_eq!(out.record.steps_run, 40);
        assert_eq!(out.row.method, "none");
        assert_eq!(out.row.seed, 7);
        assert_eq!(out.row.config_hash, cfg.hash());
        assert!(out.row.target_sparsity.is_nan());
        assert!(out.row.test_accuracy > 0.5, "accuracy {}", out.row.test_accuracy);
        assert_eq!(out.row.test_sparsity, 0.0);
    }

    #[test]
    fn identical_configurations_replay_identical_rows() {
        let cfg = base_cfg(&[
            ("method", "magnitude"),
            ("run.steps", "30"),
            ("run.batch_size", "25"),
            ("data.synthetic_n", "100"),
            ("prune.frequency", "5"),
            ("prune.final_sparsity", "0.5"),
        ]);
        let a = run_one(&cfg).unwrap();
        let b = run_one(&cfg).unwrap();
        assert_eq!(a.row.test_accuracy, b.row.test_accuracy);
        assert_eq!(a.row.train_sparsity, b.row.train_sparsity);
        assert_eq!(a.row.wall_clock_s == b.row.wall_clock_s, false, "clock should differ");
        let line_a = a.row.to_line();
        let line_b = b.row.to_line();
        // Everything but the wall-clock column matches.
        let strip = |s: &str| {
            let mut cols: Vec<&str> = s.split(',').collect();
            cols.remove(9);
            cols.join(",")
        };
        assert_eq!(strip(&line_a), strip(&line_b));
    }

    #[test]
    fn data_loading_respects_limits_and_rejects_unset_mnist_dirs() {
        let cfg = base_cfg(&[("data.synthetic_n", "64"), ("data.train_limit", "48")]);
        let (train, test) = load_data(&cfg).unwrap();
        assert_eq!(train.len(), 48);
        assert_eq!(test.len(), 16);

        let cfg = base_cfg(&[("data.source", "mnist"), ("data.dir", "/nonexistent/mnist")]);
        assert!(load_data(&cfg).is_err());
    }

    #[test]
    fn grids_expand_run_and_resume_from_their_csv() {
        let cfg = base_cfg(&[
            ("run.steps", "15"),
            ("run.batch_size", "16"),
            ("data.synthetic_n", "64"),
            ("seed", "0,1"),
            ("train.lr", "0.001,0.002"),
        ]);
        let dir = tempfile::tempdir().unwrap();
        let csv = dir.path().join("sweep.csv");
        let mut done = 0;
        let out = run_grid(&cfg, Some(&csv), None, &mut |_, total, r| {
            assert_eq!(total, 4);
            assert!(r.is_ok());
            done += 1;
        })
        .unwrap();
        assert_eq!(done, 4);
        assert_eq!(out.ran, 4);
        assert_eq!(out.skipped, 0);
        assert_eq!(out.rows.len(), 4);
        // seed precedes train.lr in the key table, so lr varies fastest.
        assert_eq!(out.rows[0].seed, 0);
        assert_eq!(out.rows[1].seed, 0);
        assert_eq!(out.rows[2].seed, 1);
        assert_ne!(out.rows[0].config_hash, out.rows[1].config_hash);

        // A second invocation re-runs nothing.
        let again = run_grid(&cfg, Some(&csv), None, &mut |_, _, _| panic!("must not run")).unwrap();
        assert_eq!(again.ran, 0);
        assert_eq!(again.skipped, 4);
        assert_eq!(again.rows.len(), 4);

        // Widening the grid runs only the new points.
        let wider = base_cfg(&[
            ("run.steps", "15"),
            ("run.batch_size", "16"),
            ("data.synthetic_n", "64"),
            ("seed", "0,1,2"),
            ("train.lr", "0.001,0.002"),
        ]);
        let third = run_grid(&wider, Some(&csv), None, &mut |_, _, _| ()).unwrap();
        assert_eq!(third.ran, 2);
        assert_eq!(third.skipped, 4);
    }

    #[test]
    fn saved_runs_round_trip_their_artifacts() {
        let cfg = base_cfg(&[
            ("run.steps", "20"),
            ("run.batch_size", "16"),
            ("data.synthetic_n", "64"),
            ("run.log_every", "5"),
        ]);
        let out = run_one(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_run(dir.path(), &cfg, &out).unwrap();

        for name in ["config.used.cfg", "result.txt", "metrics.csv", "evals.csv", "checkpoint.sprs", "sweep.csv"] {
            assert!(dir.path().join(name).exists(), "missing {name}");
        }

        // The stored configuration reparses to the same hash.
        let reloaded = Config::load(&dir.path().join("config.used.cfg")).unwrap();
        assert_eq!(reloaded.hash(), cfg.hash());

        // The sweep row survives the CSV and stays unique per (hash, seed).
        let rows = crate::report::read_sweep_rows(&dir.path().join("sweep.csv")).unwrap();
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0].test_accuracy, out.row.test_accuracy);
        save_run(dir.path(), &cfg, &out).unwrap();
        let rows = crate::report::read_sweep_rows(&dir.path().join("sweep.csv")).unwrap();
        assert_eq!(rows.len(), 1, "identical run must not append a second row");

        // The checkpoint restores bit-identical weights.
        let ck = crate::checkpoint::Checkpoint::load(&dir.path().join("checkpoint.sprs")).unwrap();
        let restored = ck.tensor("layer0.w").unwrap();
        assert_eq!(restored.data(), out.model.layers[0].w.data());
        assert!(ck.get("init.layer0.w").is_some(), "initial weights stored");
    }

    #[test]
    fn harness_compares_variants_against_the_pruned_base() {
        let cfg = base_cfg(&[
            ("method", "magnitude"),
            ("run.steps", "40"),
            ("run.batch_size", "32"),
            ("data.synthetic_n", "128"),
            ("data.synthetic_classes", "4"),
            ("prune.frequency", "5"),
            ("prune.final_sparsity", "0.5"),
            ("run.log_every", "10"),
        ]);
        let plans = vec![
            ExperimentPlan {
                base_run: "base".into(),
                variant: Variant::Lottery,
                reinit: ReinitKind::OriginalInit,
                lr_scheme: LrScheme::Standard,
                replicas: 2,
                seeds: vec![11],
            },
            ExperimentPlan {
                base_run: "base".into(),
                variant: Variant::ScratchE,
                reinit: ReinitKind::FreshStandard,
                lr_scheme: LrScheme::Standard,
                replicas: 1,
                seeds: vec![11],
            },
        ];
        let out = run_harness(&cfg, &plans).expect("harness completes");
        assert_eq!(out.runs.len(), 3);
        assert_eq!(out.rows.len(), 2);
        for row in &out.rows {
            assert_eq!(row.baseline_accuracy, out.base.record.final_accuracy);
            assert_eq!(row.sparsity, out.base.record.final_eval_sparsity);
        }
        let lottery = out.rows.iter().find(|r| r.variant.starts_with("lottery")).unwrap();
        assert_eq!(lottery.replicas, 2);
        assert!(out.table.contains("lottery"));
        // Distinct replica seeds produced distinct runs.
        assert_ne!(out.runs[0].seed, out.runs[1].seed);
    }
}
