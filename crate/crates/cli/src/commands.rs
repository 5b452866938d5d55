use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use llmq_core::analysis::{
    self, CapacityReport, DemandTracker, DriftSeries, EmpiricalLabel, MeasurementReport, Verdict,
};
use llmq_core::cluster::{self, ClusterConfig};
use llmq_core::sim::{self, ArrivalSource, SimConfig, SlotOutcome, Termination};
use llmq_core::trace_io::{self, Estimator, ResultSet};
use llmq_core::workload;

use crate::config::{
    self, ArrivalMode, Format, OneOrMany, ResolvedWorkload, RunConfig, DEFAULT_MAX_QUEUE, DEFAULT_REQUESTS,
};
use crate::error::{CliError, CliResult};

pub struct Capacity {
    pub workload: ResolvedWorkload,
    pub slot_seconds: f64,
    pub report: CapacityReport,
}

pub fn capacity(cfg: &RunConfig) -> CliResult<Capacity> {
    let text = cfg
        .workload
        .as_deref()
        .ok_or_else(|| CliError::config("no workload: pass --workload or set `workload`"))?;
    let rw = config::resolve_workload(text, cfg.chunk(), cfg.train_split, cfg.seed())?;
    let fractions: Vec<f64> = workload::segment_footprints(&rw.spec)?
        .iter()
        .map(|&(q, _)| q)
        .collect();
    let b = config::resolve_slot_seconds(cfg, &fractions)?;
    let report = match &cfg.segment_slot_seconds {
        Some(segs) => analysis::capacity_report_segmented(&rw.spec, cfg.memory(), b, segs)?,
        None => analysis::capacity_report(&rw.spec, cfg.memory(), b)?,
    };
    Ok(Capacity {
        workload: rw,
        slot_seconds: b,
        report,
    })
}

#[derive(Debug, Serialize)]
pub struct LambdaVerdict {
    pub lambda: f64,
    pub verdict: Verdict,
}

#[derive(Debug, Serialize)]
pub struct TheoryOutput {
    pub workload: String,
    pub capacity: CapacityReport,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub verdicts: Vec<LambdaVerdict>,
}

pub fn theory(cfg: &RunConfig) -> CliResult<TheoryOutput> {
    let cap = capacity(cfg)?;
    let verdicts = match &cfg.lambda {
        Some(_) => cfg
            .lambdas()?
            .into_iter()
            .map(|lambda| LambdaVerdict {
                lambda,
                verdict: analysis::classify_stability(lambda, &cap.report),
            })
            .collect(),
        None => Vec::new(),
    };
    if let Some(dir) = &cfg.output {
        let files = vec![("capacity.json".to_string(), json_bytes(&cap.report))];
        trace_io::write_files(dir, files)?;
    }
    Ok(TheoryOutput {
        workload: cap.workload.expr.to_string(),
        capacity: cap.report,
        verdicts,
    })
}

#[derive(Debug, Serialize)]
pub struct PlanOutput {
    pub lambda: f64,
    pub rho: f64,
    pub gpus: u64,
    pub capacity: CapacityReport,
}

pub fn plan(cfg: &RunConfig) -> CliResult<Vec<PlanOutput>> {
    let cap = capacity(cfg)?;
    let rho = cfg.rho.unwrap_or(1.0);
    cfg.lambdas()?
        .into_iter()
        .map(|lambda| {
            Ok(PlanOutput {
                lambda,
                rho,
                gpus: analysis::plan_gpus(lambda, cap.report.mu_theory, rho)?,
                capacity: cap.report.clone(),
            })
        })
        .collect()
}

#[derive(Debug, Serialize)]
pub struct EstimateOutput {
    pub slot_seconds: f64,
    pub method: String,
    pub samples: usize,
}

pub fn estimate_b(cfg: &RunConfig) -> CliResult<EstimateOutput> {
    let path = cfg
        .batch_times
        .as_ref()
        .ok_or_else(|| CliError::config("no batch-time log: pass --batch-times"))?;
    let method: Estimator = cfg.estimator()?;
    let bt = trace_io::load_batch_times(path)?;
    Ok(EstimateOutput {
        slot_seconds: trace_io::estimate_slot_seconds(&bt, method)?,
        method: method.to_string(),
        samples: bt.samples().len(),
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ValidateOutput {
    pub mu_theory: f64,
    pub mu_measured: f64,
    pub gap: f64,
    pub tolerance: f64,
    pub pass: bool,
}

#[derive(Deserialize)]
struct TheoryFile {
    mu_theory: f64,
}

#[derive(Deserialize)]
struct MeasurementFile {
    mu_measured: f64,
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> CliResult<T> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::config(format!("{}: {e}", path.display())))
}

/// Compares the `mu_theory` of one report with the `mu_measured` of another;
/// `replicas` scales the per-replica theoretical rate.
pub fn validate(theory: &Path, measurement: &Path, tolerance: f64, replicas: usize) -> CliResult<ValidateOutput> {
    if !(tolerance.is_finite() && tolerance >= 0.0) {
        return Err(CliError::config(format!("tolerance must be non-negative, got {tolerance}")));
    }
    if replicas == 0 {
        return Err(CliError::config("replicas must be at least 1"));
    }
    let mu_theory = read_json::<TheoryFile>(theory)?.mu_theory * replicas as f64;
    let mu_measured = read_json::<MeasurementFile>(measurement)?.mu_measured;
    let gap = analysis::gap(mu_theory, mu_measured)?;
    Ok(ValidateOutput {
        mu_theory,
        mu_measured,
        gap,
        tolerance,
        pass: gap <= tolerance,
    })
}

/// Headline numbers of one simulation run; also written as `summary.json`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunSummary {
    pub lambda: f64,
    pub replicas: usize,
    pub termination: Termination,
    pub total_requests: u64,
    pub completed: u64,
    pub slots: u64,
    pub last_arrival_slot: u64,
    pub max_queue: u64,
    /// Fitted over the slots up to the last arrival.
    pub queue_slope: Option<f64>,
    pub label: Option<EmpiricalLabel>,
    pub verdict: Verdict,
    /// Replica rate times the number of replicas.
    pub mu_theory: f64,
    pub measurement: Option<MeasurementReport>,
}

#[derive(Debug, Serialize)]
pub struct SimulateOutput {
    pub output: PathBuf,
    #[serde(flatten)]
    pub summary: RunSummary,
}

pub fn simulate(cfg: &RunConfig) -> CliResult<Vec<SimulateOutput>> {
    let cap = capacity(cfg)?;
    let lambdas = cfg.lambdas()?;
    let out = cfg
        .output
        .clone()
        .ok_or_else(|| CliError::config("no output directory: pass --output or set `output`"))?;
    let replicas = cfg.replicas.unwrap_or(1);
    if replicas == 0 {
        return Err(CliError::config("replicas must be at least 1"));
    }
    let mode = cfg.arrivals.unwrap_or_default();
    if mode != ArrivalMode::Synthetic && cap.workload.replay.is_none() {
        return Err(CliError::config(format!(
            "arrivals = {mode:?} needs a single request-trace workload"
        )));
    }
    let sweep = lambdas.len() > 1;
    let runs: Vec<(f64, PathBuf)> = lambdas
        .iter()
        .map(|&l| {
            let dir = if sweep { out.join(format!("lambda-{l}")) } else { out.clone() };
            (l, dir)
        })
        .collect();
    runs.par_iter()
        .map(|(lambda, dir)| {
            let summary = simulate_one(cfg, &cap, *lambda, replicas, mode, dir)?;
            Ok(SimulateOutput {
                output: dir.clone(),
                summary,
            })
        })
        .collect()
}

fn simulate_one(
    cfg: &RunConfig,
    cap: &Capacity,
    lambda: f64,
    replicas: usize,
    mode: ArrivalMode,
    dir: &Path,
) -> CliResult<RunSummary> {
    let b = cap.slot_seconds;
    let seed = cfg.seed();
    let mut sim = SimConfig::new(
        cfg.memory(),
        cfg.chunk(),
        b,
        lambda,
        cfg.total_requests.unwrap_or(DEFAULT_REQUESTS),
    );
    sim.policy = cfg.policy.unwrap_or_default();
    sim.process = cfg.process.unwrap_or_default();
    sim.swap = cfg.swap.unwrap_or_default();
    sim.slot_cap = cfg.slot_cap;

    let source = match mode {
        ArrivalMode::Synthetic => ArrivalSource::Synthetic {
            spec: &cap.workload.spec,
            seed,
        },
        ArrivalMode::Trace => {
            let trace = cap.workload.replay.as_ref().expect("checked by caller");
            let samples: Vec<_> = trace.samples().collect();
            ArrivalSource::Replay(sim::paced_schedule(&sim, &samples, seed)?)
        }
        ArrivalMode::TraceTimes => {
            let trace = cap.workload.replay.as_ref().expect("checked by caller");
            ArrivalSource::Replay(trace.replay_schedule(b)?)
        }
    };
    if let ArrivalSource::Replay(rows) = &source {
        sim.total_requests = rows.len() as u64;
    }
    let total = sim.total_requests;
    let warmup = cfg.warmup.unwrap_or_else(|| analysis::default_warmup(total));

    let mut trackers = vec![DemandTracker::default(); replicas];
    let outcome = cluster::run_cluster_with(&ClusterConfig::new(replicas, sim.clone())?, source, &mut trackers)?;
    let drift: Vec<DriftSeries> = outcome
        .replicas
        .iter()
        .zip(&trackers)
        .map(|(r, t)| analysis::drift_series(&r.slots, t))
        .collect::<Result<_, _>>()?;

    let mu_theory = cap.report.mu_theory * replicas as f64;
    let measurement = analysis::measured_rate(&outcome.requests, warmup, b)
        .ok()
        .map(|m| m.with_gap(mu_theory))
        .transpose()?;
    let queue = &outcome.aggregate_queue;
    let arrival_phase = &queue[..queue.len().min(outcome.last_arrival_slot as usize + 1)];
    let max_queue = cfg.max_queue.unwrap_or(DEFAULT_MAX_QUEUE);
    let summary = RunSummary {
        lambda,
        replicas,
        termination: outcome.termination,
        total_requests: total,
        completed: outcome.completed(),
        slots: queue.len() as u64,
        last_arrival_slot: outcome.last_arrival_slot,
        max_queue: queue.iter().copied().max().unwrap_or(0),
        queue_slope: analysis::queue_slope(arrival_phase, b).ok(),
        label: analysis::empirical_label(arrival_phase, lambda, b, max_queue).ok(),
        verdict: analysis::classify_stability(lambda / replicas as f64, &cap.report),
        mu_theory,
        measurement: measurement.clone(),
    };

    let slot_refs: Vec<&[SlotOutcome]> = outcome.replicas.iter().map(|r| r.slots.as_slice()).collect();
    let drift_refs: Vec<&DriftSeries> = drift.iter().collect();
    let cdf = analysis::waiting_time_cdf(&outcome.requests, b);
    let results = ResultSet {
        capacity: &cap.report,
        measurement: measurement.as_ref(),
        slots: &slot_refs,
        requests: &outcome.requests,
        queue,
        slot_seconds: b,
        waiting_cdf: &cdf,
        drift: &drift_refs,
    };
    let formats = cfg.formats.clone().unwrap_or_else(|| vec![Format::Json, Format::Csv]);
    let mut files: Vec<(String, Vec<u8>)> = trace_io::render_results(&results)
        .into_iter()
        .filter(|(name, _)| {
            let ext = if name.ends_with(".json") { Format::Json } else { Format::Csv };
            formats.contains(&ext)
        })
        .collect();
    let echoed = resolved_config(cfg, cap, lambda, warmup, replicas, mode, formats);
    let toml = toml::to_string(&echoed).map_err(|e| CliError::config(e.to_string()))?;
    files.push(("config.toml".to_string(), toml.into_bytes()));
    files.push(("summary.json".to_string(), json_bytes(&summary)));
    trace_io::write_files(dir, files)?;
    Ok(summary)
}

/// The configuration that reproduces one run, with every default made explicit.
fn resolved_config(
    cfg: &RunConfig,
    cap: &Capacity,
    lambda: f64,
    warmup: u64,
    replicas: usize,
    mode: ArrivalMode,
    formats: Vec<Format>,
) -> RunConfig {
    RunConfig {
        workload: Some(cap.workload.expr.to_string()),
        memory: Some(cfg.memory()),
        chunk: Some(cfg.chunk()),
        slot_seconds: Some(cap.slot_seconds),
        segment_slot_seconds: cfg.segment_slot_seconds.clone(),
        batch_times: None,
        estimator: None,
        train_split: cfg.train_split,
        lambda: Some(OneOrMany::One(lambda)),
        replicas: Some(replicas),
        policy: Some(cfg.policy.unwrap_or_default()),
        process: Some(cfg.process.unwrap_or_default()),
        swap: Some(cfg.swap.unwrap_or_default()),
        arrivals: Some(mode),
        total_requests: Some(cfg.total_requests.unwrap_or(DEFAULT_REQUESTS)),
        seed: Some(cfg.seed()),
        warmup: Some(warmup),
        slot_cap: cfg.slot_cap,
        max_queue: Some(cfg.max_queue.unwrap_or(DEFAULT_MAX_QUEUE)),
        rho: None,
        formats: Some(formats),
        output: None,
    }
}

pub fn json_bytes<T: Serialize + ?Sized>(value: &T) -> Vec<u8> {
    let mut out = serde_json::to_vec_pretty(value).expect("serializable");
    out.push(b'\n');
    out
}
