//! Result accounting: FLOP counts, the sweep CSV, Pareto frontiers, and
//! per-layer sparsity tables.
//!
//! FLOP convention: one multiply-accumulate counts as 2 FLOPs; only weight
//! multiplies count (biases and activations excluded). Every emitted report
//! that mentions FLOPs states the convention in a leading `#` line. The
//! sweep CSV itself carries no comments — a fixed header, then one row per
//! completed run, uniquely keyed by (config hash, seed).

use crate::checkpoint::{Checkpoint, Record};
use crate::error::{Error, Result};
use crate::l0::HardConcreteParams;
use crate::models::{MethodState, Model, ModelSpec};
use crate::vd::vd_prune;
use std::fmt::Write as _;
use std::path::Path;

pub const FLOP_CONVENTION: &str = "# convention: one multiply-accumulate = 2 FLOPs; biases and activations excluded";

/// Forward-pass FLOPs for per-layer effective nonzero weight counts
/// (fractional counts appear when gates contribute expectations):
/// `sum over layers of 2 * effective * spatial`. Exact whenever the inputs
/// are integral.
pub fn count_flops(spec: &ModelSpec, effective: &[f64]) -> Result<f64> {
    let infos = spec.weight_info()?;
    if infos.len() != effective.len() {
        return Err(Error::Config {
            reason: format!(
                "{} effective counts for {} weight layers",
                effective.len(),
                infos.len()
            ),
        });
    }
    for (info, &e) in infos.iter().zip(effective) {
        let numel: usize = info.dims.iter().product();
        if !(0.0..=numel as f64).contains(&e) {
            return Err(Error::Config {
                reason: format!(
                    "effective count {e} for layer {} outside [0, {numel}]",
                    info.name
                ),
            });
        }
    }
    Ok(infos
        .iter()
        .zip(effective)
        .map(|(info, &e)| 2.0 * e * info.spatial as f64)
        .sum())
}

/// Per-layer effective multiply counts of a model. Evaluation-time counts
/// are nonzeros after pruning/thresholding/test-gating; training-time counts
/// replace gate layers with their expected number of open gates, and noise
/// methods touch every weight.
pub fn effective_weight_counts(model: &Model<f32>, train_time: bool, vd_threshold: f64) -> Vec<f64> {
    model
        .layers
        .iter()
        .enumerate()
        .map(|(wi, layer)| {
            let n = layer.w.numel() as f64;
            match &layer.method {
                MethodState::Dense => n,
                MethodState::Masked { mask, .. } => mask.count_kept() as f64,
                MethodState::Vd { log_sigma2 } => {
                    if train_time {
                        n
                    } else {
                        vd_prune(&layer.w, log_sigma2, vd_threshold).count_kept() as f64
                    }
                }
                MethodState::L0 { gates } => {
                    if train_time {
                        gates.expected_l0_value()
                    } else {
                        let _ = wi;
                        gates.test_mask().count_kept() as f64
                    }
                }
            }
        })
        .collect()
}

// ---- sweep CSV ----------------------------------------------------------------

pub const SWEEP_HEADER: &str = "method,target_sparsity,train_sparsity,test_sparsity,test_accuracy,reg_coefficient,threshold,seed,steps,wall_clock_s,config_hash";

/// One completed run in the sweep log.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub method: String,
    pub target_sparsity: f64,
    pub train_sparsity: f64,
    pub test_sparsity: f64,
    pub test_accuracy: f64,
    pub reg_coefficient: f64,
    pub threshold: f64,
    pub seed: u64,
    pub steps: u64,
    pub wall_clock_s: f64,
    /// FNV-1a 64 fingerprint of the resolved config, rendered as 16 hex
    /// digits. Together with `seed` it uniquely keys the row.
    pub config_hash: u64,
}

impl SweepRow {
    pub fn to_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{:016x}",
            self.method,
            fmt_f64(self.target_sparsity),
            fmt_f64(self.train_sparsity),
            fmt_f64(self.test_sparsity),
            fmt_f64(self.test_accuracy),
            fmt_f64(self.reg_coefficient),
            fmt_f64(self.threshold),
            self.seed,
            self.steps,
            fmt_f64(self.wall_clock_s),
            self.config_hash,
        )
    }

    pub fn parse_line(line: &str, origin: &Path) -> Result<Self> {
        let fail = |reason: String| Error::DataFormat { path: origin.to_path_buf(), reason };
        let fields: Vec<&str> = line.split(',').collect();
        let want = SWEEP_HEADER.split(',').count();
        if fields.len() != want {
            return Err(fail(format!(
                "sweep row has {} fields, expected {want}: `{line}`",
                fields.len()
            )));
        }
        let f = |i: usize| -> Result<f64> {
            fields[i]
                .parse()
                .map_err(|_| fail(format!("field {} `{}` is not a number", i + 1, fields[i])))
        };
        Ok(SweepRow {
            method: fields[0].to_string(),
            target_sparsity: f(1)?,
            train_sparsity: f(2)?,
            test_sparsity: f(3)?,
            test_accuracy: f(4)?,
            reg_coefficient: f(5)?,
            threshold: f(6)?,
            seed: fields[7]
                .parse()
                .map_err(|_| fail(format!("seed `{}` is not an integer", fields[7])))?,
            steps: fields[8]
                .parse()
                .map_err(|_| fail(format!("steps `{}` is not an integer", fields[8])))?,
            wall_clock_s: f(9)?,
            config_hash: u64::from_str_radix(fields[10], 16)
                .map_err(|_| fail(format!("config hash `{}` is not hex", fields[10])))?,
        })
    }
}

/// Render floats compactly but losslessly (shortest representation that
/// round-trips).
fn fmt_f64(v: f64) -> String {
    let mut s = format!("{v}");
    if s.parse::<f64>() != Ok(v) {
        s = format!("{v:?}");
    }
    s
}

/// Append a row to the sweep CSV, writing the header first when the file is
/// new. Returns false (and appends nothing) when a row with the same
/// (config hash, seed) key is already present, keeping the log uniquely
/// keyed and safely resumable.
pub fn append_sweep_row(path: &Path, row: &SweepRow) -> Result<bool> {
    let existing = if path.exists() { read_sweep_rows(path)? } else { Vec::new() };
    if existing
        .iter()
        .any(|r| r.config_hash == row.config_hash && r.seed == row.seed)
    {
        return Ok(false);
    }
    let mut text = if existing.is_empty() {
        format!("{SWEEP_HEADER}\n")
    } else {
        String::new()
    };
    text.push_str(&row.to_line());
    text.push('\n');
    use std::io::Write as _;
    let mut file = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    file.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))?;
    Ok(true)
}

/// Read every row of a sweep CSV, validating the header.
pub fn read_sweep_rows(path: &Path) -> Result<Vec<SweepRow>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == SWEEP_HEADER => {}
        Some(h) => {
            return Err(Error::DataFormat {
                path: path.to_path_buf(),
                reason: format!("unexpected sweep header `{h}`"),
            })
        }
        None => return Ok(Vec::new()),
    }
    lines
        .filter(|l| !l.trim().is_empty())
        .map(|l| SweepRow::parse_line(l, path))
        .collect()
}

// ---- Pareto frontier ------------------------------------------------------------

/// The rows not dominated in (test sparsity, test accuracy): a row is
/// dominated when some other row is at least as sparse AND at least as
/// accurate, strictly better in one. All rows must share a method (one
/// frontier per technique); the result is sorted by sparsity, duplicates
/// collapsed. Empty input gives an empty frontier.
pub fn pareto_frontier(rows: &[SweepRow]) -> Result<Vec<SweepRow>> {
    if let Some(first) = rows.first() {
        if let Some(stray) = rows.iter().find(|r| r.method != first.method) {
            return Err(Error::Config {
                reason: format!(
                    "frontier rows mix methods `{}` and `{}`; filter first",
                    first.method, stray.method
                ),
            });
        }
    }
    let mut frontier: Vec<SweepRow> = rows
        .iter()
        .filter(|r| {
            !rows.iter().any(|other| {
                other.test_sparsity >= r.test_sparsity
                    && other.test_accuracy >= r.test_accuracy
                    && (other.test_sparsity > r.test_sparsity
                        || other.test_accuracy > r.test_accuracy)
            })
        })
        .cloned()
        .collect();
    frontier.sort_by(|a, b| {
        a.test_sparsity
            .total_cmp(&b.test_sparsity)
            .then(a.test_accuracy.total_cmp(&b.test_accuracy))
    });
    frontier.dedup_by(|a, b| {
        a.test_sparsity == b.test_sparsity && a.test_accuracy == b.test_accuracy
    });
    Ok(frontier)
}

/// Frontier rows as a plottable (sparsity, accuracy) CSV series.
pub fn frontier_csv(rows: &[SweepRow]) -> Result<String> {
    let frontier = pareto_frontier(rows)?;
    let mut out = String::from("test_sparsity,test_accuracy\n");
    for r in &frontier {
        writeln!(out, "{},{}", fmt_f64(r.test_sparsity), fmt_f64(r.test_accuracy))
            .expect("string write");
    }
    Ok(out)
}

// ---- sparsity distribution -------------------------------------------------------

/// One weight layer in the distribution table.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerRow {
    pub name: String,
    pub size: usize,
    pub nonzeros: usize,
    pub sparsity: f64,
}

/// Per-layer sparsity of a checkpoint, plus the exact weighted global
/// fraction. Layers are identified by their `{name}.w` records; the nonzero
/// count prefers an explicit mask, then a variational threshold, then a
/// test-time gate, and finally falls back to counting exact zeros in the
/// weights themselves (so a maskless dense checkpoint reports its genuine
/// zero fraction). `init.*` records are ignored.
pub fn sparsity_distribution(ck: &Checkpoint, vd_threshold: f64) -> (Vec<LayerRow>, f64) {
    let mut rows = Vec::new();
    let mut kept = 0usize;
    let mut total = 0usize;
    for (record_name, record) in ck.records() {
        let Some(layer) = record_name.strip_suffix(".w") else { continue };
        if layer.starts_with("init.") {
            continue;
        }
        let Record::Tensor(w) = record else { continue };
        let size = w.numel();
        let nonzeros = if let Some(mask) = ck.mask(&format!("{layer}.mask")) {
            mask.count_kept()
        } else if let Some(log_sigma2) = ck.tensor(&format!("{layer}.log_sigma2")) {
            vd_prune(w, log_sigma2, vd_threshold).count_kept()
        } else if let Some(log_alpha) = ck.tensor(&format!("{layer}.log_alpha")) {
            HardConcreteParams::new(
                log_alpha.clone(),
                crate::l0::DEFAULT_BETA,
                crate::l0::DEFAULT_GAMMA,
                crate::l0::DEFAULT_ZETA,
            )
            .map(|g| g.test_mask().count_kept())
            .unwrap_or_else(|_| w.data().iter().filter(|&&v| v != 0.0).count())
        } else {
            w.data().iter().filter(|&&v| v != 0.0).count()
        };
        rows.push(LayerRow {
            name: layer.to_string(),
            size,
            nonzeros,
            sparsity: (size - nonzeros) as f64 / size as f64,
        });
        kept += nonzeros;
        total += size;
    }
    // One division from integer sums, so the figure recomputes exactly from
    // the size/nonzeros columns.
    let global = if total == 0 { 0.0 } else { (total - kept) as f64 / total as f64 };
    (rows, global)
}

/// The distribution table as CSV with a trailing global row.
pub fn distribution_csv(ck: &Checkpoint, vd_threshold: f64) -> String {
    let (rows, global) = sparsity_distribution(ck, vd_threshold);
    let mut out = String::from("layer,size,nonzeros,sparsity\n");
    let mut size = 0usize;
    let mut nnz = 0usize;
    for r in &rows {
        writeln!(out, "{},{},{},{}", r.name, r.size, r.nonzeros, fmt_f64(r.sparsity))
            .expect("string write");
        size += r.size;
        nnz += r.nonzeros;
    }
    writeln!(out, "(global),{size},{nnz},{}", fmt_f64(global)).expect("string write");
    out
}

/// Per-layer FLOP report for a model, convention line included.
pub fn flops_report(model: &Model<f32>, vd_threshold: f64) -> Result<String> {
    let infos = model.spec.weight_info()?;
    let eval = effective_weight_counts(model, false, vd_threshold);
    let train = effective_weight_counts(model, true, vd_threshold);
    let mut out = String::new();
    writeln!(out, "{FLOP_CONVENTION}").expect("string write");
    writeln!(out, "layer,eval_flops,train_flops").expect("string write");
    for (i, info) in infos.iter().enumerate() {
        writeln!(
            out,
            "{},{},{}",
            info.name,
            fmt_f64(2.0 * eval[i] * info.spatial as f64),
            fmt_f64(2.0 * train[i] * info.spatial as f64),
        )
        .expect("string write");
    }
    writeln!(
        out,
        "(total),{},{}",
        fmt_f64(count_flops(&model.spec, &eval)?),
        fmt_f64(count_flops(&model.spec, &train)?),
    )
    .expect("string write");
    Ok(out)
}

/// FLOP report recomputed from a saved checkpoint against a named
/// architecture, using each layer's stored masks or gates for the
/// effective nonzero counts.
pub fn checkpoint_flops(ck: &Checkpoint, spec: &ModelSpec, vd_threshold: f64) -> Result<String> {
    let infos = spec.weight_info()?;
    let (rows, _) = sparsity_distribution(ck, vd_threshold);
    let mut effective = Vec::with_capacity(infos.len());
    for info in &infos {
        let row = rows.iter().find(|r| r.name == info.name).ok_or_else(|| Error::Missing {
            what: format!("checkpoint record for layer `{}`", info.name),
        })?;
        let size: usize = info.dims.iter().product();
        if row.size != size {
            return Err(Error::Plan {
                reason: format!(
                    "layer `{}` holds {} weights in the checkpoint but {size} in the model",
                    info.name, row.size
                ),
            });
        }
        effective.push(row.nonzeros as f64);
    }
    let mut out = String::new();
    writeln!(out, "{FLOP_CONVENTION}").expect("string write");
    writeln!(out, "layer,eval_flops").expect("string write");
    for (info, eff) in infos.iter().zip(&effective) {
        writeln!(out, "{},{}", info.name, fmt_f64(2.0 * eff * info.spatial as f64))
            .expect("string write");
    }
    writeln!(out, "(total),{}", fmt_f64(count_flops(spec, &effective)?)).expect("string write");
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mask::SparsityMask;
    use crate::models::MethodConfig;
    use crate::rng::RngState;
    use crate::tape::MaskGradMode;
    use crate::tensor::Tensor;
    use proptest::prelude::*;

    fn row(method: &str, sparsity: f64, accuracy: f64) -> SweepRow {
        SweepRow {
            method: method.to_string(),
            target_sparsity: sparsity,
            train_sparsity: sparsity,
            test_sparsity: sparsity,
            test_accuracy: accuracy,
            reg_coefficient: 0.0,
            threshold: 3.0,
            seed: 0,
            steps: 100,
            wall_clock_s: 1.5,
            config_hash: 0xabcd_ef01_2345_6789,
        }
    }

    #[test]
    fn dense_lenet300_forward_is_532400_flops() {
        let spec = ModelSpec::lenet300();
        let counts = vec![235_200.0, 30_000.0, 1_000.0];
        assert_eq!(count_flops(&spec, &counts).unwrap(), 532_400.0);
    }

    #[test]
    fn uniform_ninety_percent_sparsity_keeps_a_tenth_of_the_flops() {
        let spec = ModelSpec::lenet300();
        let counts = vec![23_520.0, 3_000.0, 100.0];
        assert_eq!(count_flops(&spec, &counts).unwrap(), 53_240.0);
    }

    #[test]
    fn flops_scale_linearly_with_expected_gates() {
        let spec = ModelSpec::lenet300();
        let dense = vec![235_200.0, 30_000.0, 1_000.0];
        let g = 0.978;
        let gated: Vec<f64> = dense.iter().map(|c| c * g).collect();
        let full = count_flops(&spec, &dense).unwrap();
        let scaled = count_flops(&spec, &gated).unwrap();
        assert!(
            ((scaled / full) - g).abs() < 1e-6,
            "gating must scale the count linearly: {scaled} vs {full}"
        );
    }

    #[test]
    fn convolution_flops_count_every_output_position() {
        let spec = ModelSpec::lenet5();
        // Hand count: conv1 500 weights * 24*24, conv2 25,000 * 8*8,
        // fc1 400,000, fc2 5,000; MAC = 2 FLOPs.
        let counts = vec![500.0, 25_000.0, 400_000.0, 5_000.0];
        let expect = 2.0 * (500.0 * 576.0 + 25_000.0 * 64.0 + 400_000.0 + 5_000.0);
        assert_eq!(count_flops(&spec, &counts).unwrap(), expect);
        assert_eq!(expect, 4_586_000.0);
    }

    #[test]
    fn effective_counts_follow_the_method_state() {
        let rng = RngState::new(11);
        let spec = ModelSpec::lenet300();
        let mut masked = Model::<f32>::build(
            spec.clone(),
            &MethodConfig::Masked { grad_mode: MaskGradMode::Masked },
            &rng,
        )
        .unwrap();
        if let MethodState::Masked { mask, .. } = &mut masked.layers[0].method {
            for i in 0..100 {
                mask.prune(i);
            }
        }
        let counts = effective_weight_counts(&masked, false, 3.0);
        assert_eq!(counts, vec![235_100.0, 30_000.0, 1_000.0]);
        assert_eq!(counts, effective_weight_counts(&masked, true, 3.0));

        let gated = Model::<f32>::build(
            spec,
            &MethodConfig::L0 {
                droprate_init: 0.1,
                beta: crate::l0::DEFAULT_BETA,
                gamma: crate::l0::DEFAULT_GAMMA,
                zeta: crate::l0::DEFAULT_ZETA,
            },
            &rng,
        )
        .unwrap();
        let train = effective_weight_counts(&gated, true, 3.0);
        let expect = 235_200.0 * 0.978_029_118_311_891_9;
        assert!((train[0] - expect).abs() < 1e-6 * expect);
        let eval = effective_weight_counts(&gated, false, 3.0);
        assert_eq!(eval[0], 235_200.0, "fresh gates all pass the test threshold");
    }

    #[test]
    fn count_flops_validates_its_inputs() {
        let spec = ModelSpec::lenet300();
        assert!(count_flops(&spec, &[1.0, 2.0]).is_err());
        assert!(count_flops(&spec, &[-1.0, 0.0, 0.0]).is_err());
        assert!(count_flops(&spec, &[235_201.0, 0.0, 0.0]).is_err());
    }

    #[test]
    fn sweep_rows_round_trip_through_text() {
        let r = SweepRow {
            method: "vd".to_string(),
            target_sparsity: 0.95,
            train_sparsity: 0.9613,
            test_sparsity: 0.975_200_1,
            test_accuracy: 0.9842,
            reg_coefficient: 1.6666666666666667e-5,
            threshold: 3.0,
            seed: 17,
            steps: 36_000,
            wall_clock_s: 5_131.25,
            config_hash: 0x0123_4567_89ab_cdef,
        };
        let back = SweepRow::parse_line(&r.to_line(), Path::new("t")).unwrap();
        assert_eq!(back, r, "floats must round-trip losslessly");
        assert!(SweepRow::parse_line("vd,1,2,3", Path::new("t")).is_err());
        assert!(SweepRow::parse_line(&r.to_line().replace("17", "x"), Path::new("t")).is_err());
    }

    #[test]
    fn sweep_log_appends_once_per_config_and_seed() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sweep.csv");
        let a = row("magnitude", 0.5, 0.98);
        let mut b = a.clone();
        b.seed = 1;
        assert!(append_sweep_row(&path, &a).unwrap());
        assert!(append_sweep_row(&path, &b).unwrap());
        assert!(!append_sweep_row(&path, &a).unwrap(), "duplicate key is skipped");
        let rows = read_sweep_rows(&path).unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[0], a);
        assert_eq!(rows[1], b);
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().next().unwrap(), SWEEP_HEADER);
        assert_eq!(text.lines().count(), 3, "header exactly once");
        let err = read_sweep_rows(&dir.path().join("missing.csv"));
        assert!(err.is_err());
    }

    #[test]
    fn frontier_removes_dominated_rows_and_sorts() {
        assert!(pareto_frontier(&[]).unwrap().is_empty());
        let single = vec![row("vd", 0.9, 0.98)];
        assert_eq!(pareto_frontier(&single).unwrap(), single);

        let rows = vec![
            row("vd", 0.9, 0.98),
            row("vd", 0.8, 0.97), // dominated on both axes
            row("vd", 0.95, 0.96),
            row("vd", 0.9, 0.98), // duplicate point collapses
        ];
        let frontier = pareto_frontier(&rows).unwrap();
        let points: Vec<(f64, f64)> =
            frontier.iter().map(|r| (r.test_sparsity, r.test_accuracy)).collect();
        assert_eq!(points, vec![(0.9, 0.98), (0.95, 0.96)]);

        let mixed = vec![row("vd", 0.9, 0.98), row("l0", 0.8, 0.97)];
        assert!(pareto_frontier(&mixed).is_err());

        let csv = frontier_csv(&rows).unwrap();
        assert_eq!(csv.lines().count(), 3);
        assert_eq!(csv.lines().next().unwrap(), "test_sparsity,test_accuracy");
        assert_eq!(frontier_csv(&[]).unwrap(), "test_sparsity,test_accuracy\n");
    }

    proptest! {
        #[test]
        fn frontier_matches_the_quadratic_dominance_oracle(
            points in proptest::collection::vec((0.0f64..1.0, 0.5f64..1.0), 1..50)
        ) {
            let rows: Vec<SweepRow> =
                points.iter().map(|&(s, a)| row("magnitude", s, a)).collect();
            let frontier = pareto_frontier(&rows).unwrap();
            // Oracle: a point survives iff nothing dominates it.
            let dominated = |r: &SweepRow| {
                rows.iter().any(|o| {
                    o.test_sparsity >= r.test_sparsity
                        && o.test_accuracy >= r.test_accuracy
                        && (o.test_sparsity > r.test_sparsity || o.test_accuracy > r.test_accuracy)
                })
            };
            for r in &frontier {
                prop_assert!(!dominated(r));
            }
            let mut survivors: Vec<(f64, f64)> = rows
                .iter()
                .filter(|r| !dominated(r))
                .map(|r| (r.test_sparsity, r.test_accuracy))
                .collect();
            survivors.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
            survivors.dedup();
            let got: Vec<(f64, f64)> =
                frontier.iter().map(|r| (r.test_sparsity, r.test_accuracy)).collect();
            prop_assert_eq!(got, survivors);
            // Frontier sparsity is strictly increasing and, along it,
            // accuracy cannot increase (else the sparser point dominates).
            for w in frontier.windows(2) {
                prop_assert!(w[0].test_sparsity < w[1].test_sparsity);
                prop_assert!(w[0].test_accuracy >= w[1].test_accuracy);
            }
        }
    }

    #[test]
    fn distribution_reads_masks_and_falls_back_to_exact_zeros() {
        let mut ck = Checkpoint::new();
        // Layer a: explicit mask, 3 of 4 kept. Dense-first policy: all ones.
        let w_a = Tensor::new(vec![2, 2], vec![1.0, -2.0, 3.0, 4.0]).unwrap();
        ck.insert_tensor("a.w", &w_a).unwrap();
        ck.insert_mask("a.mask", &[2, 2], &SparsityMask::ones(4)).unwrap();
        // Layer b: maskless with two exact zeros.
        let w_b = Tensor::new(vec![1, 4], vec![0.0, -0.0, 1.0, 2.0]).unwrap();
        ck.insert_tensor("b.w", &w_b).unwrap();
        // Layer c: mask with half pruned.
        let w_c = Tensor::new(vec![4], vec![1.0, 1.0, 1.0, 1.0]).unwrap();
        ck.insert_tensor("c.w", &w_c).unwrap();
        let mut m = SparsityMask::ones(4);
        m.prune(0);
        m.prune(2);
        ck.insert_mask("c.mask", &[4], &m).unwrap();
        // Captured init records must not show up as layers.
        ck.insert_tensor("init.a.w", &w_a).unwrap();

        let (rows, global) = sparsity_distribution(&ck, 3.0);
        assert_eq!(rows.len(), 3);
        assert_eq!(rows[0], LayerRow { name: "a".into(), size: 4, nonzeros: 4, sparsity: 0.0 });
        assert_eq!(rows[1].nonzeros, 2, "-0.0 is exactly zero");
        assert_eq!(rows[1].sparsity, 0.5);
        assert_eq!(rows[2].sparsity, 0.5);
        // The global figure recomputes exactly from the integer columns.
        let pruned: usize = rows.iter().map(|r| r.size - r.nonzeros).sum();
        let size_sum: usize = rows.iter().map(|r| r.size).sum();
        assert_eq!(global, pruned as f64 / size_sum as f64);
        for r in &rows {
            assert_eq!(r.sparsity, (r.size - r.nonzeros) as f64 / r.size as f64);
        }

        let csv = distribution_csv(&ck, 3.0);
        assert!(csv.starts_with("layer,size,nonzeros,sparsity\n"));
        assert!(csv.trim_end().ends_with(&format!("(global),12,8,{}", super::fmt_f64(global))));
    }

    #[test]
    fn flop_reports_state_the_convention() {
        let rng = RngState::new(3);
        let model =
            Model::<f32>::build(ModelSpec::lenet300(), &MethodConfig::Dense, &rng).unwrap();
        let text = flops_report(&model, 3.0).unwrap();
        assert!(text.starts_with("# convention: one multiply-accumulate = 2 FLOPs"));
        assert!(text.contains("(total),532400,532400"));
    }

    #[test]
    fn checkpoint_flops_match_the_live_model() {
        let rng = RngState::new(9);
        let mut model = Model::<f32>::build(
            ModelSpec::lenet300(),
            &MethodConfig::Masked { grad_mode: MaskGradMode::Masked },
            &rng,
        )
        .unwrap();
        // Prune 90% of the first layer so the counts are nontrivial.
        if let crate::models::MethodState::Masked { mask, .. } = &mut model.layers[0].method {
            for i in 0..211_680 {
                mask.prune(i);
            }
        }
        let ck = crate::checkpoint::model_to_checkpoint(&model, None).unwrap();
        let text = checkpoint_flops(&ck, &ModelSpec::lenet300(), 3.0).unwrap();
        let live = flops_report(&model, 3.0).unwrap();
        let total_of = |s: &str| {
            s.lines()
                .find(|l| l.starts_with("(total)"))
                .and_then(|l| l.split(',').nth(1).map(str::to_string))
                .unwrap()
        };
        assert_eq!(total_of(&text), total_of(&live));
        assert!(text.starts_with("# convention"));

        // A checkpoint from a different architecture is rejected.
        assert!(checkpoint_flops(&ck, &ModelSpec::lenet5(), 3.0).is_err());
    }
}
