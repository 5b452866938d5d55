//! Capacity formulas, stability verdicts, outstanding-demand drift and the
//! estimators used to compare simulated or measured runs with theory.
//!
//! The stable service rate of one replica is
//!
//! ```text
//! mu = M / (slot_seconds * E[g(s, o)])
//! ```
//!
//! where `g` is the lifetime footprint. Arrival rates above `mu` overload the
//! replica; rates below `mu * (1 - delta)`, with `delta = esssup(s + o) / M`,
//! keep it stable. The band in between is reported as a gray zone.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sim::{Arrival, EngineState, RequestRecord, RequestState, SlotObserver, SlotOutcome};
use crate::workload::{self, WorkloadSpec};

fn positive(name: &str, x: f64) -> Result<()> {
    if x > 0.0 && x.is_finite() {
        Ok(())
    } else {
        Err(Error::domain(format!("{name} must be positive, got {x}")))
    }
}

/// Requests per second one replica sustains at full memory utilization.
pub fn theoretical_rate(memory: f64, slot_seconds: f64, expected_footprint: f64) -> Result<f64> {
    positive("memory", memory)?;
    positive("slot duration", slot_seconds)?;
    positive("expected footprint", expected_footprint)?;
    Ok(memory / (slot_seconds * expected_footprint))
}

/// Long-run rate of a workload whose fraction `q` of requests is served at
/// rate `mu`: the `q`-weighted harmonic mean.
pub fn mixture_rate(segments: &[(f64, f64)]) -> Result<f64> {
    if segments.is_empty() {
        return Err(Error::EmptyInput("mixture has no segments"));
    }
    let total: f64 = segments.iter().map(|(q, _)| q).sum();
    if (total - 1.0).abs() > workload::PROBABILITY_TOLERANCE {
        return Err(Error::domain(format!("segment fractions sum to {total}, expected 1")));
    }
    let mut inverse = 0.0;
    for &(q, mu) in segments {
        if q < 0.0 {
            return Err(Error::domain(format!("negative segment fraction {q}")));
        }
        positive("segment rate", mu)?;
        inverse += q / mu;
    }
    Ok(1.0 / inverse)
}

/// `delta = ess_sup_total / memory`.
pub fn memory_slack(ess_sup_total: u64, memory: u64) -> Result<f64> {
    if ess_sup_total == 0 || memory == 0 {
        return Err(Error::domain("memory slack needs positive request size and memory"));
    }
    if ess_sup_total > memory {
        return Err(Error::Infeasible {
            needed: ess_sup_total,
            limit: memory,
        });
    }
    Ok(ess_sup_total as f64 / memory as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentRate {
    pub fraction: f64,
    pub slot_seconds: f64,
    pub expected_footprint: f64,
    pub mu: f64,
}

/// Theoretical thresholds with every input echoed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CapacityReport {
    pub mu_theory: f64,
    pub delta: f64,
    pub stable_below: f64,
    pub overloaded_above: f64,
    pub memory: u64,
    pub chunk: u64,
    pub slot_seconds: f64,
    pub expected_footprint: f64,
    pub ess_sup_total: u64,
    /// Per-segment rates for segmented workloads; empty otherwise.
    pub segments: Vec<SegmentRate>,
}

/// Capacity of one replica; every segment shares `slot_seconds`.
pub fn capacity_report(spec: &WorkloadSpec, memory: u64, slot_seconds: f64) -> Result<CapacityReport> {
    let n = workload::segment_footprints(spec)?.len();
    capacity_report_segmented(spec, memory, slot_seconds, &vec![slot_seconds; n])
}

/// Capacity with a separate slot duration per top-level segment. The headline
/// rate is the harmonic mixture of the segment rates.
pub fn capacity_report_segmented(
    spec: &WorkloadSpec,
    memory: u64,
    slot_seconds: f64,
    segment_slot_seconds: &[f64],
) -> Result<CapacityReport> {
    positive("slot duration", slot_seconds)?;
    let footprints = workload::segment_footprints(spec)?;
    if footprints.len() != segment_slot_seconds.len() {
        return Err(Error::domain(format!(
            "workload has {} segments but {} slot durations were given",
            footprints.len(),
            segment_slot_seconds.len()
        )));
    }
    let ess = workload::ess_sup_total(spec)?;
    let delta = memory_slack(ess, memory)?;
    let mut segments = Vec::with_capacity(footprints.len());
    for (&(fraction, footprint), &b) in footprints.iter().zip(segment_slot_seconds) {
        segments.push(SegmentRate {
            fraction,
            slot_seconds: b,
            expected_footprint: footprint,
            mu: theoretical_rate(memory as f64, b, footprint)?,
        });
    }
    let mu = if let [single] = segments.as_slice() {
        single.mu
    } else {
        mixture_rate(&segments.iter().map(|s| (s.fraction, s.mu)).collect::<Vec<_>>())?
    };
    if !matches!(spec.workload, workload::Workload::SegmentedMixture { .. }) {
        segments.clear();
    }
    Ok(CapacityReport {
        mu_theory: mu,
        delta,
        stable_below: mu * (1.0 - delta),
        overloaded_above: mu,
        memory,
        chunk: spec.chunk,
        slot_seconds,
        expected_footprint: workload::expected_footprint(spec)?,
        ess_sup_total: ess,
        segments,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Verdict {
    Stable,
    /// Between the stability and overload thresholds, where neither applies.
    GrayZone,
    Overloaded,
}

pub fn classify_stability(lambda: f64, report: &CapacityReport) -> Verdict {
    if lambda < report.stable_below {
        Verdict::Stable
    } else if lambda > report.overloaded_above {
        Verdict::Overloaded
    } else {
        Verdict::GrayZone
    }
}

/// Sum of end-of-unit occupancies of all units `r` has not processed yet.
/// Waiting requests owe their whole exact footprint; finished ones owe nothing.
pub fn remaining_demand(r: &RequestState, chunk: u64) -> u64 {
    if r.is_complete() {
        return 0;
    }
    let total = workload::exact_footprint(r.s, r.o, chunk).expect("engine requests are valid");
    total - workload::prefill_area(r.s, chunk, r.c) - workload::decode_area(r.s, r.d)
}

/// Outstanding demand of everything in the system.
pub fn outstanding_demand(state: &EngineState) -> u64 {
    let chunk = state.config().chunk;
    state
        .in_progress()
        .iter()
        .chain(state.waiting())
        .map(|r| remaining_demand(r, chunk))
        .sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DemandSnapshot {
    pub slot: u64,
    /// Outstanding demand at the start of the slot, before its arrivals.
    pub demand: u64,
    /// Exact footprint of the slot's arrivals.
    pub new_demand: u64,
}

/// Records outstanding demand at every slot boundary of a run.
#[derive(Debug, Clone, Default)]
pub struct DemandTracker {
    pub snapshots: Vec<DemandSnapshot>,
    pub final_demand: Option<u64>,
    pending: HashMap<u64, u64>,
    pending_total: u64,
}

impl DemandTracker {
    /// Requests that arrived but have not been seen in a batch are still
    /// untouched, so their remaining demand is their full exact footprint.
    /// The running total is cross-checked against the engine's queue length
    /// and rebuilt from scratch on any disagreement.
    fn demand(&mut self, state: &EngineState) -> u64 {
        let chunk = state.config().chunk;
        let mut active = 0u64;
        for r in state.in_progress() {
            if let Some(d) = self.pending.remove(&r.id) {
                self.pending_total -= d;
            }
            active += remaining_demand(r, chunk);
        }
        if self.pending.len() != state.queue_len() {
            self.pending = state
                .waiting()
                .map(|r| (r.id, remaining_demand(r, chunk)))
                .collect();
            self.pending_total = self.pending.values().sum();
        }
        active + self.pending_total
    }
}

impl SlotObserver for DemandTracker {
    fn observe(&mut self, state: &EngineState, arrivals: &[Arrival]) {
        let chunk = state.config().chunk;
        let demand = self.demand(state);
        let mut new_demand = 0;
        for a in arrivals {
            let g = workload::exact_footprint(a.sample.prompt_len, a.sample.output_len, chunk)
                .expect("valid arrival");
            new_demand += g;
            self.pending.insert(a.id, g);
            self.pending_total += g;
        }
        self.snapshots.push(DemandSnapshot {
            slot: state.slot(),
            demand,
            new_demand,
        });
    }

    fn finish(&mut self, state: &EngineState) {
        self.final_demand = Some(self.demand(state));
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DriftPoint {
    pub slot: u64,
    pub outstanding_demand: u64,
    pub memory_used: u64,
    pub new_demand: u64,
    /// `V(t+1) - V(t) + U_t - new_demand`; zero for a correct engine.
    pub residual: i128,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct DriftSeries {
    pub points: Vec<DriftPoint>,
}

impl DriftSeries {
    pub fn demand(&self) -> impl Iterator<Item = u64> + '_ {
        self.points.iter().map(|p| p.outstanding_demand)
    }
}

/// Pairs tracked demand with the engine's per-slot memory use and checks
/// that every slot erases exactly the memory it used.
pub fn drift_series(slots: &[SlotOutcome], tracker: &DemandTracker) -> Result<DriftSeries> {
    if slots.len() != tracker.snapshots.len() {
        return Err(Error::InsufficientData(format!(
            "{} slot outcomes but {} demand snapshots",
            slots.len(),
            tracker.snapshots.len()
        )));
    }
    let mut points = Vec::with_capacity(slots.len());
    for (i, (slot, snap)) in slots.iter().zip(&tracker.snapshots).enumerate() {
        let next = match tracker.snapshots.get(i + 1) {
            Some(n) => n.demand,
            None => tracker.final_demand.ok_or_else(|| {
                Error::InsufficientData("demand tracker was not finished".into())
            })?,
        };
        let residual = next as i128 - snap.demand as i128 + slot.memory_used as i128
            - snap.new_demand as i128;
        if residual != 0 {
            return Err(Error::DriftMismatch {
                slot: slot.slot,
                residual,
            });
        }
        points.push(DriftPoint {
            slot: slot.slot,
            outstanding_demand: snap.demand,
            memory_used: slot.memory_used,
            new_demand: snap.new_demand,
            residual,
        });
    }
    Ok(DriftSeries { points })
}

/// Empirical check of the negative-drift condition above a demand threshold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftReport {
    /// `sup g * M`.
    pub threshold: f64,
    /// `(mu (1 - delta) - lambda) * slot_seconds * E[g]`; negative when
    /// `lambda` is outside the stable region.
    pub epsilon: f64,
    pub slots_above_threshold: u64,
    /// Mean one-slot change of demand over slots above the threshold.
    pub mean_drift_above_threshold: Option<f64>,
    /// Mean one-slot change over the whole series.
    pub mean_drift: Option<f64>,
}

pub fn drift_report(
    series: &DriftSeries,
    spec: &WorkloadSpec,
    report: &CapacityReport,
    lambda: f64,
) -> Result<DriftReport> {
    let threshold = workload::sup_lifetime_footprint(spec)? * report.memory as f64;
    let epsilon = (report.stable_below - lambda) * report.slot_seconds * report.expected_footprint;
    let steps: Vec<(u64, f64)> = series
        .points
        .iter()
        .map(|p| {
            (
                p.outstanding_demand,
                p.new_demand as f64 - p.memory_used as f64,
            )
        })
        .collect();
    let mean = |xs: &[f64]| (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64);
    let above: Vec<f64> = steps
        .iter()
        .filter(|(v, _)| *v as f64 > threshold)
        .map(|(_, d)| *d)
        .collect();
    let all: Vec<f64> = steps.iter().map(|(_, d)| *d).collect();
    Ok(DriftReport {
        threshold,
        epsilon,
        slots_above_threshold: above.len() as u64,
        mean_drift_above_threshold: mean(&above),
        mean_drift: mean(&all),
    })
}

/// Steady-state completion rate of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeasurementReport {
    pub mu_measured: f64,
    pub window_start: f64,
    pub window_end: f64,
    pub completed_in_window: u64,
    pub warmup_excluded: u64,
    pub total_requests: u64,
    pub slot_seconds: f64,
    /// Relative gap to a theoretical rate, once compared.
    pub gap: Option<f64>,
}

impl MeasurementReport {
    pub fn with_gap(mut self, mu_theory: f64) -> Result<Self> {
        self.gap = Some(gap(mu_theory, self.mu_measured)?);
        Ok(self)
    }
}

/// `min(1000, n / 10)` requests trimmed from each end of a run.
pub fn default_warmup(total_requests: u64) -> u64 {
    1000.min(total_requests / 10)
}

/// Completions per second between the arrivals of request `warmup + 1` and
/// request `n - warmup`. `records` must be in arrival order.
pub fn measured_rate(records: &[RequestRecord], warmup: u64, slot_seconds: f64) -> Result<MeasurementReport> {
    positive("slot duration", slot_seconds)?;
    let n = records.len() as u64;
    if n <= 2 * warmup {
        return Err(Error::InsufficientData(format!(
            "{n} requests cannot exclude {warmup} at each end"
        )));
    }
    let start_slot = records[warmup as usize].arrival_slot;
    let end_slot = records[(n - warmup - 1) as usize].arrival_slot;
    let (start, end) = (start_slot as f64 * slot_seconds, end_slot as f64 * slot_seconds);
    if end <= start {
        return Err(Error::InsufficientData(format!(
            "measurement window [{start}, {end}] has no duration"
        )));
    }
    let completed = records
        .iter()
        .filter_map(|r| r.completion_slot)
        .filter(|&c| (start_slot..=end_slot).contains(&c))
        .count() as u64;
    Ok(MeasurementReport {
        mu_measured: completed as f64 / (end - start),
        window_start: start,
        window_end: end,
        completed_in_window: completed,
        warmup_excluded: 2 * warmup,
        total_requests: n,
        slot_seconds,
        gap: None,
    })
}

/// `|mu_theory - mu_measured| / mu_measured`.
pub fn gap(mu_theory: f64, mu_measured: f64) -> Result<f64> {
    positive("measured rate", mu_measured)?;
    Ok((mu_theory - mu_measured).abs() / mu_measured)
}

pub fn mean(samples: &[f64]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::EmptyInput("mean of no samples"));
    }
    Ok(samples.iter().sum::<f64>() / samples.len() as f64)
}

/// Mean after discarding the largest `ceil(trim_top * n)` samples. Only the
/// top tail is trimmed; at least one sample is always kept.
pub fn trimmed_mean(samples: &[f64], trim_top: f64) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::EmptyInput("trimmed mean of no samples"));
    }
    if !(0.0..1.0).contains(&trim_top) {
        return Err(Error::domain(format!("trim fraction must be in [0, 1), got {trim_top}")));
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let drop = ((trim_top * n as f64 - 1e-9).ceil().max(0.0) as usize).min(n - 1);
    mean(&sorted[..n - drop])
}

pub fn median(samples: &[f64]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::EmptyInput("median of no samples"));
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    Ok(if n % 2 == 1 {
        sorted[n / 2]
    } else {
        (sorted[n / 2 - 1] + sorted[n / 2]) / 2.0
    })
}

/// Replicas needed to serve `lambda` at target utilization `rho`.
pub fn plan_gpus(lambda: f64, mu: f64, rho: f64) -> Result<u64> {
    positive("arrival rate", lambda)?;
    positive("service rate", mu)?;
    positive("target utilization", rho)?;
    if rho > 1.0 {
        return Err(Error::domain(format!("target utilization must be <= 1, got {rho}")));
    }
    let ratio = lambda / (mu * rho);
    // a ratio within rounding of an integer needs exactly that many replicas
    Ok((ratio * (1.0 - 1e-12)).ceil().max(1.0) as u64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WaitingCdf {
    /// `(wait_seconds, cumulative_fraction)` at each distinct wait.
    pub points: Vec<(f64, f64)>,
    /// Requests that never started.
    pub censored: u64,
}

impl WaitingCdf {
    /// Largest jump between consecutive CDF points, including the first.
    pub fn max_step(&self) -> f64 {
        let mut prev = 0.0;
        let mut max: f64 = 0.0;
        for &(_, f) in &self.points {
            max = max.max(f - prev);
            prev = f;
        }
        max
    }

    /// Fraction of started requests that waited strictly less than `seconds`.
    pub fn fraction_below(&self, seconds: f64) -> f64 {
        self.points
            .iter()
            .take_while(|(w, _)| *w < seconds)
            .last()
            .map_or(0.0, |(_, f)| *f)
    }
}

/// Empirical CDF of `(first_service_slot - arrival_slot) * slot_seconds`.
pub fn waiting_time_cdf(records: &[RequestRecord], slot_seconds: f64) -> WaitingCdf {
    let mut waits: Vec<u64> = records
        .iter()
        .filter_map(|r| r.first_service_slot.map(|f| f - r.arrival_slot))
        .collect();
    let censored = (records.len() - waits.len()) as u64;
    waits.sort_unstable();
    let n = waits.len() as f64;
    let points = waits
        .chunk_by(|a, b| a == b)
        .scan(0usize, |seen, group| {
            *seen += group.len();
            Some((group[0] as f64 * slot_seconds, *seen as f64 / n))
        })
        .collect();
    WaitingCdf { points, censored }
}

/// Least-squares slope of queue length against time over the last 80% of the
/// series, in requests per second.
pub fn queue_slope(queue: &[u64], slot_seconds: f64) -> Result<f64> {
    positive("slot duration", slot_seconds)?;
    if queue.len() < 100 {
        return Err(Error::InsufficientData(format!(
            "queue slope needs at least 100 slots, got {}",
            queue.len()
        )));
    }
    let start = queue.len() / 5;
    let tail = &queue[start..];
    let n = tail.len() as f64;
    let mean_t = (start as f64 + (queue.len() - 1) as f64) / 2.0;
    let mean_q = tail.iter().map(|&q| q as f64).sum::<f64>() / n;
    let (mut cov, mut var) = (0.0, 0.0);
    for (i, &q) in tail.iter().enumerate() {
        let dt = (start + i) as f64 - mean_t;
        cov += dt * (q as f64 - mean_q);
        var += dt * dt;
    }
    Ok(cov / var / slot_seconds)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EmpiricalLabel {
    Stable,
    Overloaded,
    Inconclusive,
}

/// Labels a run from its queue series: overloaded when the fitted slope
/// exceeds `max(0.05 * lambda, 5 / horizon_seconds)`, stable when the queue
/// never exceeds `max_queue`.
pub fn empirical_label(queue: &[u64], lambda: f64, slot_seconds: f64, max_queue: u64) -> Result<EmpiricalLabel> {
    let slope = queue_slope(queue, slot_seconds)?;
    let horizon = queue.len() as f64 * slot_seconds;
    if slope > (0.05 * lambda).max(5.0 / horizon) {
        return Ok(EmpiricalLabel::Overloaded);
    }
    if queue.iter().all(|&q| q <= max_queue) {
        return Ok(EmpiricalLabel::Stable);
    }
    Ok(EmpiricalLabel::Inconclusive)
}
