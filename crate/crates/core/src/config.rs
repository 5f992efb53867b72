//! Flat key=value run configuration.
//!
//! A config file is UTF-8 text, one `key = value` per line, `#` starting a
//! comment. Every key is namespaced, has a documented default, and is listed
//! in [`KEYS`]; unknown keys are rejected rather than ignored so typos fail
//! loudly. Command-line `--set key=value` overrides are applied after the
//! file. Keys marked sweepable accept comma-separated value lists, which
//! [`Config::expand`] turns into the cartesian product of single-value
//! configs (the sweep grid).
//!
//! The resolved config (defaults filled in) renders back to canonical text,
//! and [`Config::hash`] gives a stable 64-bit FNV-1a fingerprint of that
//! canonical form, used to key sweep CSV rows.

use crate::error::{Error, Result};
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

/// What a key's value must parse as.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    /// One of a fixed token set.
    Choice(&'static [&'static str]),
    Bool,
    UInt,
    Float,
    /// Whitespace-separated unsigned integers (may be empty).
    UIntList,
    /// Whitespace-separated `layer:sparsity` pairs (may be empty).
    OverrideList,
}

/// One documented configuration key.
pub struct KeySpec {
    pub name: &'static str,
    pub kind: Kind,
    pub default: &'static str,
    /// Whether a comma list here is a sweep axis rather than a mistake.
    pub sweepable: bool,
    pub doc: &'static str,
}

/// Every key the toolkit understands, with defaults and documentation.
pub const KEYS: &[KeySpec] = &[
    KeySpec { name: "model", kind: Kind::Choice(&["lenet300", "lenet5"]), default: "lenet300", sweepable: true, doc: "architecture to build" },
    KeySpec { name: "method", kind: Kind::Choice(&["none", "magnitude", "random", "vd", "l0"]), default: "none", sweepable: true, doc: "sparsification method" },
    KeySpec { name: "seed", kind: Kind::UInt, default: "0", sweepable: true, doc: "root RNG seed for init, shuffling, noise, and pruning" },
    KeySpec { name: "data.source", kind: Kind::Choice(&["synthetic", "mnist"]), default: "synthetic", sweepable: false, doc: "dataset: generated blobs or MNIST IDX files" },
    KeySpec { name: "data.dir", kind: Kind::Choice(&[]), default: "", sweepable: false, doc: "MNIST directory; empty falls back to $SPARSEKIT_DATA" },
    KeySpec { name: "data.synthetic_n", kind: Kind::UInt, default: "512", sweepable: false, doc: "synthetic training examples" },
    KeySpec { name: "data.synthetic_classes", kind: Kind::UInt, default: "10", sweepable: false, doc: "synthetic class count" },
    KeySpec { name: "data.train_limit", kind: Kind::UInt, default: "0", sweepable: false, doc: "use only the first N training examples (0 = all)" },
    KeySpec { name: "run.steps", kind: Kind::UInt, default: "1000", sweepable: true, doc: "optimizer steps (ignored when run.epochs > 0)" },
    KeySpec { name: "run.epochs", kind: Kind::UInt, default: "0", sweepable: true, doc: "epochs over the training set; 0 = use run.steps" },
    KeySpec { name: "run.batch_size", kind: Kind::UInt, default: "100", sweepable: false, doc: "training batch size" },
    KeySpec { name: "run.log_every", kind: Kind::UInt, default: "100", sweepable: false, doc: "steps between retained step logs (0 = final only)" },
    KeySpec { name: "run.eval_every", kind: Kind::UInt, default: "0", sweepable: false, doc: "steps between held-out evaluations (0 = final only)" },
    KeySpec { name: "train.optimizer", kind: Kind::Choice(&["adam", "sgd"]), default: "adam", sweepable: true, doc: "weight update rule" },
    KeySpec { name: "train.lr", kind: Kind::Float, default: "0.001", sweepable: true, doc: "base learning rate" },
    KeySpec { name: "train.momentum", kind: Kind::Float, default: "0.9", sweepable: true, doc: "sgd momentum coefficient" },
    KeySpec { name: "train.adam_beta1", kind: Kind::Float, default: "0.9", sweepable: false, doc: "adam first-moment decay" },
    KeySpec { name: "train.adam_beta2", kind: Kind::Float, default: "0.999", sweepable: false, doc: "adam second-moment decay" },
    KeySpec { name: "train.adam_eps", kind: Kind::Float, default: "1e-8", sweepable: false, doc: "adam denominator floor" },
    KeySpec { name: "train.weight_decay", kind: Kind::Float, default: "0", sweepable: true, doc: "l2 coefficient on weight matrices (biases excluded)" },
    KeySpec { name: "train.warmup_steps", kind: Kind::UInt, default: "0", sweepable: false, doc: "linear learning-rate warmup steps" },
    KeySpec { name: "train.lr_drop_steps", kind: Kind::UIntList, default: "", sweepable: false, doc: "steps at which the rate is multiplied by train.lr_drop_factor (space-separated, ascending)" },
    KeySpec { name: "train.lr_drop_factor", kind: Kind::Float, default: "0.1", sweepable: false, doc: "multiplicative rate drop at each boundary" },
    KeySpec { name: "eval.batch_size", kind: Kind::UInt, default: "500", sweepable: false, doc: "evaluation batch size" },
    KeySpec { name: "prune.start_step", kind: Kind::UInt, default: "0", sweepable: false, doc: "first prune event step (magnitude/random)" },
    KeySpec { name: "prune.end_step", kind: Kind::UInt, default: "0", sweepable: false, doc: "last prune event step; 0 = three quarters of the run" },
    KeySpec { name: "prune.frequency", kind: Kind::UInt, default: "100", sweepable: false, doc: "steps between prune events" },
    KeySpec { name: "prune.initial_sparsity", kind: Kind::Float, default: "0", sweepable: false, doc: "sparsity at the first event" },
    KeySpec { name: "prune.final_sparsity", kind: Kind::Float, default: "0.9", sweepable: true, doc: "global sparsity target at the last event" },
    KeySpec { name: "prune.overrides", kind: Kind::OverrideList, default: "", sweepable: false, doc: "per-layer final-sparsity overrides as layer:sparsity pairs (space-separated)" },
    KeySpec { name: "reg.shape", kind: Kind::Choice(&["constant", "linear", "cubic"]), default: "constant", sweepable: false, doc: "regularizer coefficient ramp shape" },
    KeySpec { name: "reg.start_step", kind: Kind::UInt, default: "0", sweepable: false, doc: "ramp start step" },
    KeySpec { name: "reg.end_step", kind: Kind::UInt, default: "0", sweepable: false, doc: "ramp end step; 0 = half the run" },
    KeySpec { name: "reg.scale", kind: Kind::Float, default: "0", sweepable: true, doc: "final regularizer coefficient" },
    KeySpec { name: "reg.per_example", kind: Kind::Bool, default: "false", sweepable: false, doc: "divide reg.scale by the training-set size (per-example ELBO scaling)" },
    KeySpec { name: "vd.log_sigma2_init", kind: Kind::Float, default: "-10", sweepable: true, doc: "initial log-variance of the weight posterior" },
    KeySpec { name: "vd.threshold", kind: Kind::Float, default: "3", sweepable: true, doc: "log-dropout-ratio cutoff for evaluation-time pruning" },
    KeySpec { name: "l0.droprate_init", kind: Kind::Float, default: "0.1", sweepable: true, doc: "initial gate dropout rate" },
    KeySpec { name: "l0.beta", kind: Kind::Float, default: "0.6666666666666666", sweepable: false, doc: "hard-concrete temperature" },
    KeySpec { name: "l0.gamma", kind: Kind::Float, default: "-0.1", sweepable: false, doc: "hard-concrete stretch lower bound" },
    KeySpec { name: "l0.zeta", kind: Kind::Float, default: "1.1", sweepable: false, doc: "hard-concrete stretch upper bound" },
];

fn key_spec(name: &str) -> Option<&'static KeySpec> {
    KEYS.iter().find(|k| k.name == name)
}

/// A fully resolved configuration: every key present, values validated
/// against their kinds (sweepable keys may still hold comma lists until
/// [`Config::expand`]).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Config {
    values: BTreeMap<&'static str, String>,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            values: KEYS.iter().map(|k| (k.name, k.default.to_string())).collect(),
        }
    }
}

impl Config {
    /// Parse config text, starting from defaults. Duplicate keys within one
    /// text are rejected as ambiguous.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Config::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config { reason } => {
                Error::Config { reason: format!("{}: {reason}", path.display()) }
            }
            other => other,
        })
    }

    fn apply_text(&mut self, text: &str) -> Result<()> {
        let mut seen: Vec<&'static str> = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = match raw.find('#') {
                Some(i) => &raw[..i],
                None => raw,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Config {
                reason: format!("line {}: expected `key = value`, got `{line}`", lineno + 1),
            })?;
            let name = self.set(key.trim(), value.trim())?;
            if seen.contains(&name) {
                return Err(Error::Config {
                    reason: format!("line {}: key `{name}` set twice in one file", lineno + 1),
                });
            }
            seen.push(name);
        }
        Ok(())
    }

    /// Apply one `key=value` override (later overrides win).
    pub fn set(&mut self, key: &str, value: &str) -> Result<&'static str> {
        let spec = key_spec(key).ok_or_else(|| Error::UnknownConfigKey { key: key.to_string() })?;
        let value = value.trim();
        // A comma list on a sweepable key is validated element-wise and kept
        // verbatim for `expand`; anywhere else it is an error.
        let parts: Vec<&str> = if value.contains(',') {
            if !spec.sweepable {
                return Err(Error::Config {
                    reason: format!("key `{key}` does not accept a comma list"),
                });
            }
            value.split(',').map(str::trim).collect()
        } else {
            vec![value]
        };
        for part in &parts {
            check_kind(spec, part)?;
        }
        self.values.insert(spec.name, parts.join(","));
        Ok(spec.name)
    }

    /// Apply a sequence of `key=value` override strings (the `--set` flag).
    pub fn apply_overrides(&mut self, overrides: &[String]) -> Result<()> {
        for item in overrides {
            let (key, value) = item.split_once('=').ok_or_else(|| Error::Config {
                reason: format!("override `{item}` is not of the form key=value"),
            })?;
            self.set(key.trim(), value.trim())?;
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> &str {
        self.values
            .get(key_spec(key).unwrap_or_else(|| panic!("unknown config key `{key}`")).name)
            .expect("all keys resolved")
    }

    pub fn get_u64(&self, key: &str) -> Result<u64> {
        let v = self.get(key);
        v.parse().map_err(|_| Error::Config {
            reason: format!("key `{key}`: `{v}` is not an unsigned integer"),
        })
    }

    pub fn get_usize(&self, key: &str) -> Result<usize> {
        Ok(self.get_u64(key)? as usize)
    }

    pub fn get_f64(&self, key: &str) -> Result<f64> {
        let v = self.get(key);
        v.parse().map_err(|_| Error::Config {
            reason: format!("key `{key}`: `{v}` is not a number"),
        })
    }

    pub fn get_bool(&self, key: &str) -> Result<bool> {
        match self.get(key) {
            "true" => Ok(true),
            "false" => Ok(false),
            v => Err(Error::Config {
                reason: format!("key `{key}`: `{v}` is not true/false"),
            }),
        }
    }

    /// Whitespace-separated unsigned integers.
    pub fn get_u64_list(&self, key: &str) -> Result<Vec<u64>> {
        self.get(key)
            .split_whitespace()
            .map(|t| {
                t.parse().map_err(|_| Error::Config {
                    reason: format!("key `{key}`: `{t}` is not an unsigned integer"),
                })
            })
            .collect()
    }

    /// Whitespace-separated `layer:sparsity` pairs.
    pub fn get_override_list(&self, key: &str) -> Result<Vec<(usize, f64)>> {
        self.get(key)
            .split_whitespace()
            .map(|t| {
                let bad = || Error::Config {
                    reason: format!("key `{key}`: `{t}` is not layer:sparsity"),
                };
                let (l, s) = t.split_once(':').ok_or_else(bad)?;
                Ok((l.parse().map_err(|_| bad())?, s.parse().map_err(|_| bad())?))
            })
            .collect()
    }

    /// Canonical text form: sorted `key = value` lines.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.values {
            writeln!(out, "{k} = {v}").expect("string write");
        }
        out
    }

    /// Documented defaults, suitable as a starting config file.
    pub fn documented_defaults() -> String {
        let mut out = String::new();
        for spec in KEYS {
            writeln!(out, "# {}", spec.doc).expect("string write");
            writeln!(out, "{} = {}\n", spec.name, spec.default).expect("string write");
        }
        out
    }

    /// Stable fingerprint of the resolved config (FNV-1a 64 over the
    /// canonical `key=value` lines).
    pub fn hash(&self) -> u64 {
        let mut h = FNV_OFFSET;
        for (k, v) in &self.values {
            for &b in k.as_bytes() {
                h = fnv1a_step(h, b);
            }
            h = fnv1a_step(h, b'=');
            for &b in v.as_bytes() {
                h = fnv1a_step(h, b);
            }
            h = fnv1a_step(h, b'\n');
        }
        h
    }

    /// Expand comma lists on sweepable keys into the cartesian product of
    /// single-value configs, in key-table order (outer) and listed value
    /// order (inner). A config with no lists expands to itself.
    pub fn expand(&self) -> Vec<Config> {
        let mut grid = vec![self.clone()];
        for spec in KEYS {
            let value = self.values.get(spec.name).expect("all keys resolved");
            if !value.contains(',') {
                continue;
            }
            let options: Vec<&str> = value.split(',').collect();
            let mut next = Vec::with_capacity(grid.len() * options.len());
            for base in &grid {
                for option in &options {
                    let mut c = base.clone();
                    c.values.insert(spec.name, option.to_string());
                    next.push(c);
                }
            }
            grid = next;
        }
        grid
    }
}

fn check_kind(spec: &KeySpec, value: &str) -> Result<()> {
    let fail = |want: &str| Error::Config {
        reason: format!("key `{}`: `{value}` is not {want}", spec.name),
    };
    match spec.kind {
        Kind::Choice(options) => {
            // An empty option table means free-form text (paths).
            if !options.is_empty() && !options.contains(&value) {
                return Err(fail(&format!("one of {options:?}")));
            }
        }
        Kind::Bool => {
            if value != "true" && value != "false" {
                return Err(fail("true/false"));
            }
        }
        Kind::UInt => {
            value.parse::<u64>().map_err(|_| fail("an unsigned integer"))?;
        }
        Kind::Float => {
            let f: f64 = value.parse().map_err(|_| fail("a number"))?;
            if !f.is_finite() {
                return Err(fail("a finite number"));
            }
        }
        Kind::UIntList => {
            for t in value.split_whitespace() {
                t.parse::<u64>().map_err(|_| fail("space-separated unsigned integers"))?;
            }
        }
        Kind::OverrideList => {
            for t in value.split_whitespace() {
                let ok = t
                    .split_once(':')
                    .map(|(l, s)| l.parse::<usize>().is_ok() && s.parse::<f64>().is_ok())
                    .unwrap_or(false);
                if !ok {
                    return Err(fail("space-separated layer:sparsity pairs"));
                }
            }
        }
    }
    Ok(())
}

// ---- FNV-1a 64 ---------------------------------------------------------------

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

#[inline]
fn fnv1a_step(h: u64, b: u8) -> u64 {
    (h ^ b as u64).wrapping_mul(FNV_PRIME)
}

/// FNV-1a 64-bit hash of a byte string.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    bytes.iter().fold(FNV_OFFSET, |h, &b| fnv1a_step(h, b))
}
