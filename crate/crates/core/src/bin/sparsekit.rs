//! Command-line front end: one-off training runs, grid sweeps, mask
//! retraining comparisons, report emission, the reproduction suite, and
//! gradient checks. Exit code 0 on success, 1 on validation errors
//! (flags, configuration, missing inputs), 2 on runtime failures
//! (diverged runs, failed reproduction gates, I/O mid-run).

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use sparsekit::checkpoint::Checkpoint;
use sparsekit::config::Config;
use sparsekit::gradcheck;
use sparsekit::harness::{ExperimentPlan, LrScheme, ReinitKind, Variant};
use sparsekit::models::ModelSpec;
use sparsekit::report;
use sparsekit::runner::{self, HarnessOutput};
use sparsekit::verify::{self, CheckResult};
use sparsekit::Error;

#[derive(Parser)]
#[command(
    name = "sparsekit",
    version,
    about = "Desk-scale neural-network sparsification toolkit"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one configured run and write its artifacts.
    Train(RunArgs),
    /// Expand comma lists in the configuration into a grid and run it.
    Sweep(RunArgs),
    /// Retrain the pruned masks of a run from its original initialization.
    Lottery(LotteryArgs),
    /// Retrain the pruned masks of a run from fresh initializations.
    Scratch(ScratchArgs),
    /// Emit CSV reports from sweep results or checkpoints.
    Report(ReportArgs),
    /// Train the reference MNIST configurations and check published targets.
    Verify(VerifyArgs),
    /// Finite-difference checks of every layer kind's gradients.
    Gradcheck,
}

#[derive(Args)]
struct RunArgs {
    /// Configuration file of `key = value` lines (defaults apply when omitted).
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Override one key, e.g. --set train.lr=0.01 (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Directory for run artifacts (config, metrics, checkpoint, sweep rows).
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Shorthand for --set seed=N.
    #[arg(long, value_name = "N")]
    seed: Option<u64>,
}

#[derive(Args)]
struct LotteryArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Seeds for the retraining runs (the base run keeps the config seed).
    #[arg(long, value_delimiter = ',', value_name = "N,N,...")]
    seeds: Vec<u64>,
    /// Repeats per seed.
    #[arg(long, default_value_t = 1)]
    replicas: u32,
}

#[derive(Args)]
struct ScratchArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Seeds for the retraining runs (the base run keeps the config seed).
    #[arg(long, value_delimiter = ',', value_name = "N,N,...")]
    seeds: Vec<u64>,
    /// Repeats per seed.
    #[arg(long, default_value_t = 1)]
    replicas: u32,
    /// scratch-e (equal budget) or scratch-b (doubled budget).
    #[arg(long, default_value = "scratch-e")]
    variant: String,
    /// fresh-standard or fresh-nnz-scaled initialization.
    #[arg(long, default_value = "fresh-standard")]
    reinit: String,
    /// Rate plan for the doubled budget: scaled-regions, extended-final,
    /// repeated-decay, or repeated-decay-no-warmup (scratch-b only).
    #[arg(long, default_value = "scaled-regions")]
    scheme: String,
}

#[derive(Args)]
struct ReportArgs {
    /// Pareto frontier (sparsity/accuracy CSV) from a sweep CSV.
    #[arg(long, value_name = "SWEEP_CSV")]
    frontier: Option<PathBuf>,
    /// Keep only rows of this method before the frontier.
    #[arg(long, value_name = "NAME")]
    method: Option<String>,
    /// Per-layer sparsity table from a checkpoint.
    #[arg(long, value_name = "CHECKPOINT")]
    distribution: Option<PathBuf>,
    /// Forward-pass FLOP report from a checkpoint.
    #[arg(long, value_name = "CHECKPOINT")]
    flops: Option<PathBuf>,
    /// Print every config key with its default and documentation.
    #[arg(long)]
    defaults: bool,
    /// Architecture the FLOP checkpoint belongs to.
    #[arg(long, default_value = "lenet300")]
    model: String,
    /// Pruning threshold for variational layers in checkpoints.
    #[arg(long, default_value_t = 3.0)]
    threshold: f64,
    /// Also write the emitted CSV to this file.
    #[arg(long, value_name = "FILE")]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct VerifyArgs {
    /// Which suites to run: vd, dominance, lenet5 (repeatable).
    /// Default: vd and dominance.
    #[arg(long = "only", value_name = "SUITE")]
    only: Vec<String>,
    /// Dataset directory (otherwise data.dir or SPARSEKIT_DATA).
    #[arg(long, value_name = "DIR")]
    data: Option<PathBuf>,
    /// Override one key in the underlying runs (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Directory for artifacts of the verification runs.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
}

/// A failure tagged with the exit code it maps to.
enum Failure {
    Validation(Error),
    Runtime(Error),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Validation(_) => 1,
            Failure::Runtime(_) => 2,
        }
    }

    fn error(&self) -> &Error {
        match self {
            Failure::Validation(e) | Failure::Runtime(e) => e,
        }
    }
}

trait Tagged<T> {
    fn validation(self) -> Result<T, Failure>;
    fn runtime(self) -> Result<T, Failure>;
}

impl<T> Tagged<T> for sparsekit::Result<T> {
    fn validation(self) -> Result<T, Failure> {
        self.map_err(Failure::Validation)
    }

    fn runtime(self) -> Result<T, Failure> {
        self.map_err(Failure::Runtime)
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version requests are successes; anything else is a
            // validation error.
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => {
                    ExitCode::SUCCESS
                }
                _ => ExitCode::from(1),
            };
        }
    };

    let result = match cli.command {
        Command::Train(args) => cmd_train(args),
        Command::Sweep(args) => cmd_sweep(args),
        Command::Lottery(args) => cmd_harness(args.run, plan_for_lottery(args.seeds, args.replicas)),
        Command::Scratch(args) => cmd_scratch(args),
        Command::Report(args) => cmd_report(args),
        Command::Verify(args) => cmd_verify(args),
        Command::Gradcheck => cmd_gradcheck(),
    };

    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.error());
            ExitCode::from(f.code())
        }
    }
}

/// Resolve the configuration from `--config`, `--set`, and `--seed`.
fn load_config(args: &RunArgs) -> Result<Config, Failure> {
    let mut cfg = match &args.config {
        Some(path) => Config::load(path).validation()?,
        None => Config::default(),
    };
    cfg.apply_overrides(&args.set).validation()?;
    if let Some(seed) = args.seed {
        cfg.set("seed", &seed.to_string()).validation()?;
    }
    Ok(cfg)
}

fn cmd_train(args: RunArgs) -> Result<(), Failure> {
    let cfg = load_config(&args)?;
    // Reject grid lists up front: train runs exactly one configuration.
    if cfg.expand().len() > 1 {
        return Err(Failure::Validation(Error::Config {
            reason: "configuration contains comma lists; use `sweep` for grids".into(),
        }));
    }
    let out = runner::run_one(&cfg).runtime()?;
    if let Some(dir) = &args.out {
        runner::save_run(dir, &cfg, &out).runtime()?;
    }
    print!("{}", runner::result_text(&out));
    if let Some(dir) = &args.out {
        println!("artifacts: {}", dir.display());
    }
    match &out.record.failure {
        Some(f) => Err(Failure::Runtime(Error::Plan { reason: format!("run failed: {f}") })),
        None => Ok(()),
    }
}

fn cmd_sweep(args: RunArgs) -> Result<(), Failure> {
    let cfg = load_config(&args)?;
    let csv = args.out.as_ref().map(|d| d.join("sweep.csv"));
    if let Some(dir) = &args.out {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e)).validation()?;
    }
    println!("{}", report::SWEEP_HEADER);
    let outcome = runner::run_grid(
        &cfg,
        csv.as_deref(),
        args.out.as_deref(),
        &mut |i, total, r| match r {
            Ok(row) => println!("{}  # run {}/{total}", row.to_line(), i + 1),
            Err(desc) => eprintln!("# run {}/{total} failed: {desc}", i + 1),
        },
    )
    .runtime()?;
    eprintln!(
        "# {} run(s): {} executed, {} resumed, {} failed",
        outcome.rows.len() + outcome.failures.len(),
        outcome.ran,
        outcome.skipped,
        outcome.failures.len()
    );
    if outcome.failures.is_empty() {
        Ok(())
    } else {
        Err(Failure::Runtime(Error::Plan {
            reason: format!("{} run(s) diverged", outcome.failures.len()),
        }))
    }
}

fn plan_for_lottery(seeds: Vec<u64>, replicas: u32) -> ExperimentPlan {
    ExperimentPlan {
        base_run: "base".into(),
        variant: Variant::Lottery,
        reinit: ReinitKind::OriginalInit,
        lr_scheme: LrScheme::Standard,
        replicas,
        seeds,
    }
}

fn cmd_scratch(args: ScratchArgs) -> Result<(), Failure> {
    let variant = Variant::parse(&args.variant).validation()?;
    if variant == Variant::Lottery {
        return Err(Failure::Validation(Error::Plan {
            reason: "the lottery variant has its own subcommand".into(),
        }));
    }
    let reinit = ReinitKind::parse(&args.reinit).validation()?;
    let lr_scheme = match variant {
        Variant::ScratchB => LrScheme::parse(&args.scheme).validation()?,
        _ => LrScheme::Standard,
    };
    let plan = ExperimentPlan {
        base_run: "base".into(),
        variant,
        reinit,
        lr_scheme,
        replicas: args.replicas,
        seeds: args.seeds,
    };
    cmd_harness(args.run, plan)
}

fn cmd_harness(args: RunArgs, mut plan: ExperimentPlan) -> Result<(), Failure> {
    let cfg = load_config(&args)?;
    if cfg.expand().len() > 1 {
        return Err(Failure::Validation(Error::Config {
            reason: "configuration contains comma lists; retraining uses one base run".into(),
        }));
    }
    if plan.seeds.is_empty() {
        plan.seeds = vec![cfg.get_u64("seed").validation()?];
    }
    plan.validate().validation()?;

    let HarnessOutput { base, runs, rows: _, table } =
        runner::run_harness(&cfg, &[plan]).runtime()?;

    println!("base run:");
    print!("{}", runner::result_text(&base));
    println!();
    print!("{table}");

    if let Some(dir) = &args.out {
        runner::save_run(dir, &cfg, &base).runtime()?;
        let mut lines = String::from("variant,seed,accuracy,sparsity,status\n");
        for r in &runs {
            use std::fmt::Write;
            let status = r.failure.as_deref().unwrap_or("ok");
            let _ = writeln!(
                lines,
                "{},{},{},{},{status}",
                r.label, r.seed, r.accuracy, r.sparsity
            );
        }
        let path = dir.join("variants.csv");
        std::fs::write(&path, lines).map_err(|e| Error::io(&path, e)).runtime()?;
        let path = dir.join("comparison.txt");
        std::fs::write(&path, &table).map_err(|e| Error::io(&path, e)).runtime()?;
        println!("artifacts: {}", dir.display());
    }

    let failed: Vec<&str> =
        runs.iter().filter_map(|r| r.failure.as_deref()).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::Runtime(Error::Plan {
            reason: format!("{} retraining run(s) diverged", failed.len()),
        }))
    }
}

fn emit(text: &str, out: Option<&Path>) -> Result<(), Failure> {
    print!("{text}");
    if let Some(path) = out {
        std::fs::write(path, text).map_err(|e| Error::io(path, e)).runtime()?;
    }
    Ok(())
}

fn cmd_report(args: ReportArgs) -> Result<(), Failure> {
    let chosen = [
        args.frontier.is_some(),
        args.distribution.is_some(),
        args.flops.is_some(),
        args.defaults,
    ];
    if chosen.iter().filter(|c| **c).count() != 1 {
        return Err(Failure::Validation(Error::Config {
            reason: "pass exactly one of --frontier, --distribution, --flops, --defaults".into(),
        }));
    }

    if args.defaults {
        return emit(&Config::documented_defaults(), args.out.as_deref());
    }

    if let Some(path) = &args.frontier {
        let mut rows = report::read_sweep_rows(path).validation()?;
        if let Some(method) = &args.method {
            rows.retain(|r| &r.method == method);
        }
        let frontier = report::pareto_frontier(&rows).validation()?;
        let csv = report::frontier_csv(&frontier).validation()?;
        return emit(&csv, args.out.as_deref());
    }

    if let Some(path) = &args.distribution {
        let ck = Checkpoint::load(path).validation()?;
        let csv = report::distribution_csv(&ck, args.threshold);
        return emit(&csv, args.out.as_deref());
    }

    let path = args.flops.as_ref().expect("checked above");
    let ck = Checkpoint::load(path).validation()?;
    let spec = ModelSpec::by_name(&args.model).validation()?;
    let text = report::checkpoint_flops(&ck, &spec, args.threshold).validation()?;
    emit(&text, args.out.as_deref())
}

fn cmd_verify(args: VerifyArgs) -> Result<(), Failure> {
    let suites: Vec<String> = if args.only.is_empty() {
        vec!["vd".into(), "dominance".into()]
    } else {
        args.only.clone()
    };
    for s in &suites {
        if !matches!(s.as_str(), "vd" | "dominance" | "lenet5") {
            return Err(Failure::Validation(Error::Config {
                reason: format!("unknown suite `{s}` (expected vd, dominance, or lenet5)"),
            }));
        }
    }

    let mut overrides = args.set.clone();
    if let Some(dir) = &args.data {
        overrides.push(format!("data.dir={}", dir.display()));
    }

    println!("published reference results (sparsity % / accuracy %):");
    for (model, t, sp, acc) in verify::PUBLISHED_VD {
        println!("  {model:<9} threshold {t:<4} {sp:>6.2} / {acc:>6.2}");
    }
    println!();

    let mut checks: Vec<CheckResult> = Vec::new();

    if suites.iter().any(|s| s == "vd") {
        println!("training lenet300 with variational dropout...");
        let dir = args.out.as_ref().map(|d| d.join("vd-lenet300"));
        let v = verify::verify_vd("lenet300", &overrides, dir.as_deref()).runtime()?;
        println!("  finished in {:.0}s", v.out.record.wall_clock_s);
        for (t, s, a) in &v.sweep {
            println!("  threshold {t:<4} sparsity {:>7.4}  accuracy {:>7.4}", s, a);
        }
        print!("{}", verify::render(&v.checks));
        println!();
        checks.extend(v.checks);
    }

    if suites.iter().any(|s| s == "lenet5") {
        println!("training lenet5 with variational dropout (extended check)...");
        let dir = args.out.as_ref().map(|d| d.join("vd-lenet5"));
        let v = verify::verify_vd("lenet5", &overrides, dir.as_deref()).runtime()?;
        println!("  finished in {:.0}s", v.out.record.wall_clock_s);
        for (t, s, a) in &v.sweep {
            println!("  threshold {t:<4} sparsity {:>7.4}  accuracy {:>7.4}", s, a);
        }
        print!("{}", verify::render(&v.checks));
        println!();
        checks.extend(v.checks);
    }

    if suites.iter().any(|s| s == "dominance") {
        println!("running the magnitude-versus-random grid...");
        let v = verify::verify_dominance(&overrides, args.out.as_deref(), &mut |i, total, r| {
            match r {
                Ok(row) => println!(
                    "  [{}/{total}] {} target {:.2} seed {} -> accuracy {:.4}",
                    i + 1,
                    row.method,
                    row.target_sparsity,
                    row.seed,
                    row.test_accuracy
                ),
                Err(desc) => eprintln!("  [{}/{total}] failed: {desc}", i + 1),
            }
        })
        .runtime()?;
        print!("{}", verify::render(&v.checks));
        println!();
        checks.extend(v.checks);
    }

    let failed = checks.iter().filter(|c| !c.pass).count();
    if failed == 0 {
        println!("all {} check(s) passed", checks.len());
        Ok(())
    } else {
        Err(Failure::Runtime(Error::Plan {
            reason: format!("{failed} of {} verification check(s) failed", checks.len()),
        }))
    }
}

fn cmd_gradcheck() -> Result<(), Failure> {
    let start = std::time::Instant::now();
    let report = gradcheck::standard_battery();
    println!("{report}");
    println!("elapsed: {:.2}s", start.elapsed().as_secs_f64());
    if report.passed() {
        Ok(())
    } else {
        Err(Failure::Runtime(Error::Plan {
            reason: "gradient checks exceeded tolerance".into(),
        }))
    }
}
