//! Run configuration: an optional TOML file overlaid with command-line flags.
//!
//! Relative paths in a config file are taken relative to the file's directory;
//! relative paths given as flags are taken relative to the working directory.

use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use llmq_core::sim::{ArrivalProcess, Policy, SwapMode};
use llmq_core::trace_io::{self, Estimator, RequestTrace};
use llmq_core::workload::{EmpiricalPmf, Workload, WorkloadSpec};

use crate::error::{CliError, CliResult};

pub const DEFAULT_MEMORY: u64 = 131_000;
pub const DEFAULT_CHUNK: u64 = 512;
pub const DEFAULT_REQUESTS: u64 = 20_000;
pub const DEFAULT_SEED: u64 = 42;
pub const DEFAULT_MAX_QUEUE: u64 = 20;

/// Where request sizes and arrival times come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum ArrivalMode {
    /// Random arrival counts at `lambda`; sizes drawn from the workload.
    #[default]
    Synthetic,
    /// The trace rows in order, with random arrival counts at `lambda`.
    Trace,
    /// The trace rows at their recorded `arrival_time`s.
    TraceTimes,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Json,
    Csv,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum OneOrMany {
    One(f64),
    Many(Vec<f64>),
}

impl OneOrMany {
    pub fn to_vec(&self) -> Vec<f64> {
        match self {
            OneOrMany::One(x) => vec![*x],
            OneOrMany::Many(v) => v.clone(),
        }
    }
}

/// Every field is optional; missing values fall back to defaults or to an
/// error naming the missing field.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub workload: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub memory: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub chunk: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub slot_seconds: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub segment_slot_seconds: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub batch_times: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub estimator: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train_split: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lambda: Option<OneOrMany>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub replicas: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub policy: Option<Policy>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub process: Option<ArrivalProcess>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub swap: Option<SwapMode>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub arrivals: Option<ArrivalMode>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub total_requests: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub warmup: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub slot_cap: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_queue: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rho: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub formats: Option<Vec<Format>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub output: Option<PathBuf>,
}

macro_rules! overlay {
    ($dst:ident, $src:ident; $($field:ident),* $(,)?) => {
        $( if $src.$field.is_some() { $dst.$field = $src.$field; } )*
    };
}

impl RunConfig {
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let mut cfg: RunConfig = toml::from_str(&text)
            .map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        cfg.rebase(base)?;
        Ok(cfg)
    }

    fn rebase(&mut self, base: &Path) -> CliResult<()> {
        if let Some(w) = &self.workload {
            self.workload = Some(WorkloadExpr::parse(w)?.rebase(base).to_string());
        }
        for p in [&mut self.batch_times, &mut self.output].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(())
    }

    /// Fields set in `flags` replace those in `self`.
    pub fn overlay(mut self, flags: RunConfig) -> Self {
        overlay!(self, flags;
            workload, memory, chunk, slot_seconds, segment_slot_seconds, batch_times,
            estimator, train_split, lambda, replicas, policy, process, swap, arrivals,
            total_requests, seed, warmup, slot_cap, max_queue, rho, formats, output,
        );
        self
    }

    pub fn memory(&self) -> u64 {
        self.memory.unwrap_or(DEFAULT_MEMORY)
    }

    pub fn chunk(&self) -> u64 {
        self.chunk.unwrap_or(DEFAULT_CHUNK)
    }

    pub fn seed(&self) -> u64 {
        self.seed.unwrap_or(DEFAULT_SEED)
    }

    pub fn lambdas(&self) -> CliResult<Vec<f64>> {
        let v = self
            .lambda
            .as_ref()
            .map(OneOrMany::to_vec)
            .ok_or_else(|| CliError::config("no arrival rate: pass --lambda or set `lambda`"))?;
        if v.is_empty() {
            return Err(CliError::config("`lambda` list is empty"));
        }
        if let Some(bad) = v.iter().find(|l| !(l.is_finite() && **l >= 0.0)) {
            return Err(CliError::config(format!("arrival rate must be non-negative, got {bad}")));
        }
        Ok(v)
    }

    pub fn estimator(&self) -> CliResult<Estimator> {
        match &self.estimator {
            None => Ok(Estimator::Median),
            Some(s) => s.parse().map_err(|e: llmq_core::Error| CliError::config(e.to_string())),
        }
    }
}

/// A workload as written on the command line or in a config file.
///
/// Grammar: terms joined by `+`, each `q*atom` (the weight may be omitted for
/// a single term). An atom is a preset name, `uniform(s_lo,s_hi,o_lo,o_hi)`,
/// a request trace path (`.csv`, `.jsonl`), or a workload JSON file (`.json`).
#[derive(Debug, Clone, PartialEq)]
pub struct WorkloadExpr {
    pub terms: Vec<(Option<f64>, Atom)>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Atom {
    Preset(String),
    Uniform([u64; 4]),
    Trace(PathBuf),
    Json(PathBuf),
}

impl WorkloadExpr {
    pub fn parse(text: &str) -> CliResult<Self> {
        let text = text.trim();
        if text.is_empty() {
            return Err(CliError::config("empty workload"));
        }
        let pieces: Vec<&str> = text.split('+').map(str::trim).collect();
        let mut terms = Vec::with_capacity(pieces.len());
        for piece in &pieces {
            let (weight, atom) = match piece.split_once('*') {
                Some((q, a)) => {
                    let q: f64 = q.trim().parse().map_err(|_| {
                        CliError::config(format!("bad mixture weight `{}` in `{text}`", q.trim()))
                    })?;
                    (Some(q), a.trim())
                }
                None => (None, *piece),
            };
            if pieces.len() > 1 && weight.is_none() {
                return Err(CliError::config(format!(
                    "mixture term `{piece}` needs a weight, e.g. `0.5*{piece}`"
                )));
            }
            terms.push((weight, Atom::parse(atom)?));
        }
        Ok(Self { terms })
    }

    fn rebase(mut self, base: &Path) -> Self {
        for (_, atom) in &mut self.terms {
            if let Atom::Trace(p) | Atom::Json(p) = atom {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            }
        }
        self
    }

    /// Replaces relative paths with absolute ones.
    pub fn absolutize(self) -> CliResult<Self> {
        let cwd = std::env::current_dir().map_err(|e| CliError::io(".", e))?;
        Ok(self.rebase(&cwd))
    }

    pub fn len(&self) -> usize {
        self.terms.len()
    }
}

impl Atom {
    fn parse(text: &str) -> CliResult<Self> {
        if Workload::preset(text).is_some() {
            return Ok(Atom::Preset(text.to_string()));
        }
        if let Some(args) = text.strip_prefix("uniform(").and_then(|r| r.strip_suffix(')')) {
            let nums: Vec<u64> = args
                .split(',')
                .map(|n| n.trim().parse::<u64>())
                .collect::<Result<_, _>>()
                .map_err(|_| CliError::config(format!("bad uniform bounds in `{text}`")))?;
            let bounds: [u64; 4] = nums
                .try_into()
                .map_err(|_| CliError::config(format!("`{text}` needs four bounds: s_lo,s_hi,o_lo,o_hi")))?;
            return Ok(Atom::Uniform(bounds));
        }
        let path = PathBuf::from(text);
        match path.extension().and_then(|e| e.to_str()) {
            Some("json") => Ok(Atom::Json(path)),
            Some("csv" | "jsonl" | "ndjson") => Ok(Atom::Trace(path)),
            _ => Err(CliError::config(format!(
                "unknown workload `{text}`: expected pd-1-1, pd-2-1, pd-1-2, uniform(...), or a .csv/.jsonl/.json file"
            ))),
        }
    }
}

impl fmt::Display for WorkloadExpr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, (q, atom)) in self.terms.iter().enumerate() {
            if i > 0 {
                f.write_str("+")?;
            }
            if let Some(q) = q {
                write!(f, "{q}*")?;
            }
            match atom {
                Atom::Preset(name) => f.write_str(name)?,
                Atom::Uniform([a, b, c, d]) => write!(f, "uniform({a},{b},{c},{d})")?,
                Atom::Trace(p) | Atom::Json(p) => write!(f, "{}", p.display())?,
            }
        }
        Ok(())
    }
}

/// A workload with everything loaded from disk.
#[derive(Debug, Clone)]
pub struct ResolvedWorkload {
    pub expr: WorkloadExpr,
    pub spec: WorkloadSpec,
    /// Requests held out for replay: the test part of a split trace, or the
    /// whole trace when no split was requested.
    pub replay: Option<RequestTrace>,
}

pub fn resolve_workload(text: &str, chunk: u64, train_split: Option<f64>, seed: u64) -> CliResult<ResolvedWorkload> {
    let expr = WorkloadExpr::parse(text)?.absolutize()?;
    let mut replay = None;
    let mut parts = Vec::with_capacity(expr.len());
    for (q, atom) in &expr.terms {
        let w = match atom {
            Atom::Preset(name) => Workload::preset(name).expect("parsed preset"),
            Atom::Uniform([a, b, c, d]) => Workload::uniform(*a, *b, *c, *d),
            Atom::Json(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| CliError::io(p, e))?;
                serde_json::from_str(&text)
                    .map_err(|e| CliError::config(format!("{}: {e}", p.display())))?
            }
            Atom::Trace(p) => {
                let trace = trace_io::load_request_trace(p)?;
                let (pmf, held_out) = match train_split {
                    Some(split) => trace_io::fit_empirical_pmf(&trace, split, seed)?,
                    None => (EmpiricalPmf::from_samples(trace.samples())?, trace),
                };
                if expr.len() == 1 {
                    replay = Some(held_out);
                }
                Workload::EmpiricalPmf { pmf }
            }
        };
        parts.push((q.unwrap_or(1.0), w));
    }
    let workload = if parts.len() == 1 {
        parts.pop().expect("one term").1
    } else {
        Workload::mixture(parts)?
    };
    Ok(ResolvedWorkload {
        spec: WorkloadSpec::new(workload, chunk)?,
        expr,
        replay,
    })
}

/// Slot duration: given directly, estimated from a batch-time log, or the
/// fraction-weighted mean of per-segment durations.
pub fn resolve_slot_seconds(cfg: &RunConfig, fractions: &[f64]) -> CliResult<f64> {
    if let Some(b) = cfg.slot_seconds {
        return positive("slot_seconds", b);
    }
    if let Some(path) = &cfg.batch_times {
        let bt = trace_io::load_batch_times(path)?;
        return Ok(trace_io::estimate_slot_seconds(&bt, cfg.estimator()?)?);
    }
    if let Some(segs) = &cfg.segment_slot_seconds {
        if segs.len() == fractions.len() {
            return Ok(segs.iter().zip(fractions).map(|(b, q)| b * q).sum());
        }
    }
    Err(CliError::config(
        "no slot duration: pass --slot-seconds, --batch-times, or per-segment --segment-slot-seconds",
    ))
}

pub fn positive(name: &str, x: f64) -> CliResult<f64> {
    if x.is_finite() && x > 0.0 {
        Ok(x)
    } else {
        Err(CliError::config(format!("{name} must be positive, got {x}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_mixture_and_round_trips() {
        let e = WorkloadExpr::parse("0.5*pd-2-1 + 0.5*pd-1-2").unwrap();
        assert_eq!(e.len(), 2);
        assert_eq!(e.to_string(), "0.5*pd-2-1+0.5*pd-1-2");
        assert_eq!(WorkloadExpr::parse(&e.to_string()).unwrap(), e);
        let u = WorkloadExpr::parse("uniform(1,2,3,4)").unwrap();
        assert_eq!(u.terms[0].1, Atom::Uniform([1, 2, 3, 4]));
    }

    #[test]
    fn rejects_bad_workloads() {
        assert!(WorkloadExpr::parse("pd-9-9").is_err());
        assert!(WorkloadExpr::parse("pd-1-1+pd-1-2").is_err());
        assert!(WorkloadExpr::parse("x*pd-1-1").is_err());
        assert!(WorkloadExpr::parse("uniform(1,2,3)").is_err());
    }

    #[test]
    fn flags_override_file_values() {
        let file = RunConfig {
            memory: Some(10),
            chunk: Some(4),
            ..Default::default()
        };
        let flags = RunConfig {
            memory: Some(20),
            ..Default::default()
        };
        let merged = file.overlay(flags);
        assert_eq!(merged.memory(), 20);
        assert_eq!(merged.chunk(), 4);
    }

    #[test]
    fn lambda_accepts_scalar_or_list() {
        let c: RunConfig = toml::from_str("lambda = 5").unwrap();
        assert_eq!(c.lambdas().unwrap(), vec![5.0]);
        let c: RunConfig = toml::from_str("lambda = [1, 3.5]").unwrap();
        assert_eq!(c.lambdas().unwrap(), vec![1.0, 3.5]);
        assert!(toml::from_str::<RunConfig>("lamda = 1").is_err());
    }

    #[test]
    fn weighted_slot_seconds() {
        let cfg = RunConfig {
            segment_slot_seconds: Some(vec![0.04, 0.02]),
            ..Default::default()
        };
        let b = resolve_slot_seconds(&cfg, &[0.5, 0.5]).unwrap();
        assert!((b - 0.03).abs() < 1e-15);
        assert!(resolve_slot_seconds(&RunConfig::default(), &[1.0]).is_err());
    }
}
