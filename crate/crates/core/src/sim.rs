//! Single-replica slotted engine.
//!
//! One slot is one mixed batch of `slot_seconds`. Each slot the engine:
//!
//! 1. enqueues the slot's arrivals (they may be admitted in the same slot),
//! 2. walks the in-progress set in priority order and advances every request
//!    whose next unit still fits under the memory limit,
//! 3. admits waiting requests in priority order until the head does not fit,
//! 4. releases the memory of requests that produced their last token.
//!
//! A unit's cost is the request's KV occupancy once the unit completes:
//! `min((c + 1) * chunk, s)` for a prefill chunk and `s + d + 1` for a decode
//! token.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::workload::{self, RequestSample, WorkloadSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Policy {
    /// Ascending arrival ordinal.
    #[default]
    Fcfs,
    /// Ascending lifetime footprint, ties broken by arrival ordinal.
    Sjf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ArrivalProcess {
    #[default]
    Poisson,
    /// `Binomial(n, m / n)` with `n = ceil(m) + 1`, `m` the mean per slot.
    Binomial,
    /// `floor((t + 1) m) - floor(t m)` arrivals in slot `t`.
    Deterministic,
}

/// What happens to in-progress requests that are left out of a batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SwapMode {
    /// Left-out requests are swapped to host memory at no cost, so only the
    /// units in the current batch occupy device memory.
    #[default]
    Free,
    /// Left-out requests keep their KV cache resident. The engine can reach a
    /// state where nothing fits; such runs stop with [`Termination::Deadlock`].
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EngineConfig {
    pub memory: u64,
    pub chunk: u64,
    pub policy: Policy,
    pub swap: SwapMode,
}

impl EngineConfig {
    pub fn new(memory: u64, chunk: u64, policy: Policy) -> Result<Self> {
        if memory == 0 || chunk == 0 {
            return Err(Error::domain("memory limit and chunk size must be >= 1"));
        }
        Ok(Self {
            memory,
            chunk,
            policy,
            swap: SwapMode::default(),
        })
    }

    pub fn with_swap(mut self, swap: SwapMode) -> Self {
        self.swap = swap;
        self
    }
}

/// One request inside the engine.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RequestState {
    pub id: u64,
    pub s: u64,
    pub o: u64,
    pub num_chunks: u64,
    /// Prefill chunks completed.
    pub c: u64,
    /// Output tokens completed.
    pub d: u64,
    pub arrival_slot: u64,
    pub first_service_slot: Option<u64>,
    pub completion_slot: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Waiting,
    Prefill,
    Decode,
    Complete,
}

impl RequestState {
    pub fn new(id: u64, sample: RequestSample, chunk: u64, arrival_slot: u64) -> Self {
        Self {
            id,
            s: sample.prompt_len,
            o: sample.output_len,
            num_chunks: workload::num_chunks(sample.prompt_len, chunk),
            c: 0,
            d: 0,
            arrival_slot,
            first_service_slot: None,
            completion_slot: None,
        }
    }

    pub fn phase(&self) -> Phase {
        if self.d == self.o {
            Phase::Complete
        } else if self.c == 0 {
            Phase::Waiting
        } else if self.c < self.num_chunks {
            Phase::Prefill
        } else {
            Phase::Decode
        }
    }

    pub fn is_complete(&self) -> bool {
        self.d == self.o
    }

    /// Tokens of KV cache currently held.
    pub fn footprint(&self, chunk: u64) -> u64 {
        (self.c * chunk).min(self.s) + self.d
    }

    /// Occupancy after the next unit of work completes.
    pub fn next_unit_cost(&self, chunk: u64) -> Result<u64> {
        if self.is_complete() {
            return Err(Error::InvalidState(format!(
                "request {} has no remaining work",
                self.id
            )));
        }
        Ok(if self.c < self.num_chunks {
            ((self.c + 1) * chunk).min(self.s)
        } else {
            self.s + self.d + 1
        })
    }

    fn advance(&mut self) {
        if self.c < self.num_chunks {
            self.c += 1;
        } else {
            debug_assert!(self.d < self.o);
            self.d += 1;
        }
    }

    fn priority(&self, policy: Policy, chunk: u64) -> PriorityKey {
        let size = match policy {
            Policy::Fcfs => 0,
            // 2 * chunk * lifetime_footprint(s, o, chunk), kept integral.
            Policy::Sjf => {
                let (s, o, k) = (self.s as u128, self.o as u128, chunk as u128);
                (k + s) * s + k * (2 * o * s + (1 + o) * o)
            }
        };
        (size, self.id)
    }
}

type PriorityKey = (u128, u64);

/// A request entering the system.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Arrival {
    pub id: u64,
    pub sample: RequestSample,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Completion {
    pub id: u64,
    pub arrival_slot: u64,
    pub first_service_slot: u64,
    pub completion_slot: u64,
}

/// Per-slot record.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SlotOutcome {
    pub slot: u64,
    /// Sum of end-of-unit occupancies of every unit processed this slot.
    pub memory_used: u64,
    /// Device occupancy after processing, before completed requests are released.
    pub occupancy_peak: u64,
    /// Device occupancy after completed requests are released.
    pub occupancy_end: u64,
    pub queue_len: u64,
    pub in_progress_count: u64,
    pub admissions: u64,
    pub arrivals: u64,
    pub completions: Vec<Completion>,
    /// Outstanding demand at the start of the slot, when tracked.
    pub outstanding_demand: Option<u64>,
}

/// Selection made by [`EngineState::form_batch`].
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Batch {
    pub advanced: Vec<u64>,
    pub admitted: Vec<u64>,
}

#[derive(Debug, Clone, Default)]
struct Plan {
    advanced: Vec<usize>,
    admitted: usize,
    projected: u64,
}

/// State of one replica at a slot boundary.
#[derive(Debug, Clone)]
pub struct EngineState {
    config: EngineConfig,
    slot: u64,
    /// Started but unfinished, in priority order.
    in_progress: Vec<RequestState>,
    waiting: BTreeMap<PriorityKey, RequestState>,
}

impl EngineState {
    pub fn new(config: EngineConfig) -> Self {
        Self {
            config,
            slot: 0,
            in_progress: Vec::new(),
            waiting: BTreeMap::new(),
        }
    }

    pub fn config(&self) -> &EngineConfig {
        &self.config
    }

    pub fn slot(&self) -> u64 {
        self.slot
    }

    pub fn in_progress(&self) -> &[RequestState] {
        &self.in_progress
    }

    /// Waiting requests in priority order.
    pub fn waiting(&self) -> impl Iterator<Item = &RequestState> {
        self.waiting.values()
    }

    pub fn queue_len(&self) -> usize {
        self.waiting.len()
    }

    pub fn is_empty(&self) -> bool {
        self.in_progress.is_empty() && self.waiting.is_empty()
    }

    /// KV cache held by all started requests.
    pub fn held_footprint(&self) -> u64 {
        let chunk = self.config.chunk;
        self.in_progress.iter().map(|r| r.footprint(chunk)).sum()
    }

    /// Memory already committed before any unit of the next batch is chosen.
    fn baseline(&self) -> u64 {
        match self.config.swap {
            SwapMode::Free => 0,
            SwapMode::None => self.held_footprint(),
        }
    }

    /// Extra memory needed to run `r`'s next unit on top of the baseline.
    fn delta(&self, r: &RequestState, cost: u64) -> u64 {
        match self.config.swap {
            SwapMode::Free => cost,
            SwapMode::None => cost - r.footprint(self.config.chunk),
        }
    }

    /// Adds a request to the waiting set, stamped with the current slot.
    pub fn enqueue(&mut self, arrival: Arrival) {
        let r = RequestState::new(arrival.id, arrival.sample, self.config.chunk, self.slot);
        let key = r.priority(self.config.policy, self.config.chunk);
        self.waiting.insert(key, r);
    }

    fn plan(&self) -> Plan {
        let EngineConfig { memory, chunk, .. } = self.config;
        let mut projected = self.baseline();
        let mut advanced = Vec::new();
        for (i, r) in self.in_progress.iter().enumerate() {
            let cost = r.next_unit_cost(chunk).expect("in-progress requests are unfinished");
            let delta = self.delta(r, cost);
            if projected + delta <= memory {
                projected += delta;
                advanced.push(i);
            }
        }
        let mut admitted = 0;
        for r in self.waiting.values() {
            let cost = chunk.min(r.s);
            if projected + cost > memory {
                break;
            }
            projected += cost;
            admitted += 1;
        }
        Plan {
            advanced,
            admitted,
            projected,
        }
    }

    /// Greedy maximal batch: in-progress requests first, skipping any whose
    /// next unit does not fit, then waiting requests until the head does not fit.
    pub fn form_batch(&self) -> Batch {
        let plan = self.plan();
        Batch {
            advanced: plan.advanced.iter().map(|&i| self.in_progress[i].id).collect(),
            admitted: self.waiting.values().take(plan.admitted).map(|r| r.id).collect(),
        }
    }

    /// Occupancy the next batch would reach, as computed by [`Self::form_batch`].
    pub fn projected_occupancy(&self) -> u64 {
        self.plan().projected
    }

    /// Memory the highest-priority waiting request would add if admitted.
    pub fn head_admission_cost(&self) -> Option<u64> {
        self.waiting
            .values()
            .next()
            .map(|r| self.config.chunk.min(r.s))
    }

    /// Runs one slot with the given arrivals.
    pub fn advance_slot(&mut self, arrivals: &[Arrival]) -> SlotOutcome {
        let chunk = self.config.chunk;
        let slot = self.slot;
        for &a in arrivals {
            self.enqueue(a);
        }
        let plan = self.plan();

        let mut memory_used = 0;
        for &i in &plan.advanced {
            let r = &mut self.in_progress[i];
            r.advance();
            memory_used += r.footprint(chunk);
        }
        for _ in 0..plan.admitted {
            let (_, mut r) = self.waiting.pop_first().expect("planned admission");
            r.first_service_slot = Some(slot);
            r.advance();
            memory_used += r.footprint(chunk);
            let key = r.priority(self.config.policy, chunk);
            let pos = self
                .in_progress
                .partition_point(|x| x.priority(self.config.policy, chunk) < key);
            self.in_progress.insert(pos, r);
        }

        let mut completions = Vec::new();
        let mut released = 0;
        self.in_progress.retain_mut(|r| {
            if r.is_complete() {
                r.completion_slot = Some(slot);
                released += r.s + r.o;
                completions.push(Completion {
                    id: r.id,
                    arrival_slot: r.arrival_slot,
                    first_service_slot: r.first_service_slot.expect("started"),
                    completion_slot: slot,
                });
                false
            } else {
                true
            }
        });
        completions.sort_by_key(|c| c.id);

        self.slot += 1;
        SlotOutcome {
            slot,
            memory_used,
            occupancy_peak: plan.projected,
            occupancy_end: plan.projected - released,
            queue_len: self.waiting.len() as u64,
            in_progress_count: self.in_progress.len() as u64,
            admissions: plan.admitted as u64,
            arrivals: arrivals.len() as u64,
            completions,
            outstanding_demand: None,
        }
    }
}

/// Hook invoked at every slot boundary, before the slot's arrivals are enqueued.
pub trait SlotObserver {
    fn observe(&mut self, state: &EngineState, arrivals: &[Arrival]);

    /// Called once with the final state after the last slot.
    fn finish(&mut self, _state: &EngineState) {}
}

impl SlotObserver for () {
    fn observe(&mut self, _: &EngineState, _: &[Arrival]) {}
}

/// Per-slot arrival counts with mean `lambda * slot_seconds`.
#[derive(Debug, Clone)]
pub struct ArrivalGenerator {
    mean: f64,
    kind: GeneratorKind,
}

#[derive(Debug, Clone)]
enum GeneratorKind {
    Zero,
    Poisson(Poisson<f64>),
    Binomial(Binomial),
    Deterministic,
}

impl ArrivalGenerator {
    pub fn new(lambda: f64, slot_seconds: f64, process: ArrivalProcess) -> Result<Self> {
        if !lambda.is_finite() || lambda < 0.0 {
            return Err(Error::domain(format!("arrival rate must be >= 0, got {lambda}")));
        }
        if !slot_seconds.is_finite() || slot_seconds <= 0.0 {
            return Err(Error::domain(format!(
                "slot duration must be > 0, got {slot_seconds}"
            )));
        }
        let mean = lambda * slot_seconds;
        let kind = if mean == 0.0 {
            GeneratorKind::Zero
        } else {
            match process {
                ArrivalProcess::Poisson => GeneratorKind::Poisson(
                    Poisson::new(mean).map_err(|e| Error::domain(e.to_string()))?,
                ),
                ArrivalProcess::Binomial => {
                    let n = mean.ceil() as u64 + 1;
                    GeneratorKind::Binomial(
                        Binomial::new(n, mean / n as f64).map_err(|e| Error::domain(e.to_string()))?,
                    )
                }
                ArrivalProcess::Deterministic => GeneratorKind::Deterministic,
            }
        };
        Ok(Self { mean, kind })
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    pub fn count<R: Rng + ?Sized>(&self, slot: u64, rng: &mut R) -> u64 {
        match &self.kind {
            GeneratorKind::Zero => 0,
            GeneratorKind::Poisson(p) => p.sample(rng) as u64,
            GeneratorKind::Binomial(b) => b.sample(rng),
            GeneratorKind::Deterministic => {
                // absorbs rounding in products such as (1 / b) * b
                const EPS: f64 = 1e-9;
                let upto = |t: u64| (t as f64 * self.mean + EPS).floor() as u64;
                upto(slot + 1) - upto(slot)
            }
        }
    }
}

/// Everything needed to run one replica.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub memory: u64,
    pub chunk: u64,
    pub slot_seconds: f64,
    pub lambda: f64,
    pub total_requests: u64,
    #[serde(default)]
    pub policy: Policy,
    #[serde(default)]
    pub process: ArrivalProcess,
    #[serde(default)]
    pub swap: SwapMode,
    /// Defaults to [`SimConfig::default_slot_cap`], shifted by the last
    /// scheduled arrival for replays.
    #[serde(default)]
    pub slot_cap: Option<u64>,
}

impl SimConfig {
    pub fn new(memory: u64, chunk: u64, slot_seconds: f64, lambda: f64, total_requests: u64) -> Self {
        Self {
            memory,
            chunk,
            slot_seconds,
            lambda,
            total_requests,
            policy: Policy::default(),
            process: ArrivalProcess::default(),
            swap: SwapMode::default(),
            slot_cap: None,
        }
    }

    pub fn engine(&self) -> Result<EngineConfig> {
        Ok(EngineConfig::new(self.memory, self.chunk, self.policy)?.with_swap(self.swap))
    }

    /// Twice the expected arrival span plus `requests * max_request_tokens`.
    ///
    /// With [`SwapMode::Free`] every slot with work in the system advances at
    /// least one unit and a request has at most `s + o` units, so a run that
    /// hits this cap has arrivals far slower than expected.
    pub fn default_slot_cap(&self, requests: u64, max_request_tokens: u64) -> u64 {
        let per_slot = self.lambda * self.slot_seconds;
        let span = if per_slot > 0.0 {
            (2.0 * requests as f64 / per_slot).ceil() as u64
        } else {
            0
        };
        span.saturating_add(requests.saturating_mul(max_request_tokens))
    }

    fn validate(&self) -> Result<()> {
        if self.total_requests == 0 {
            return Err(Error::domain("total_requests must be >= 1"));
        }
        self.engine()?;
        ArrivalGenerator::new(self.lambda, self.slot_seconds, self.process)?;
        Ok(())
    }
}

/// Where requests come from.
#[derive(Debug, Clone)]
pub enum ArrivalSource<'a> {
    /// Random arrival counts; sizes drawn from the workload.
    Synthetic { spec: &'a WorkloadSpec, seed: u64 },
    /// Fixed `(slot, sample)` pairs, e.g. a timestamped trace.
    Replay(Vec<(u64, RequestSample)>),
}

struct ArrivalStream<'a> {
    source: ArrivalSource<'a>,
    generator: ArrivalGenerator,
    rng: ChaCha8Rng,
    total: u64,
    emitted: u64,
    cursor: usize,
}

impl<'a> ArrivalStream<'a> {
    fn new(cfg: &SimConfig, mut source: ArrivalSource<'a>) -> Result<Self> {
        let seed = match &mut source {
            ArrivalSource::Synthetic { seed, .. } => *seed,
            ArrivalSource::Replay(rows) => {
                rows.sort_by_key(|(slot, _)| *slot);
                0
            }
        };
        let total = match &source {
            ArrivalSource::Synthetic { .. } => cfg.total_requests,
            ArrivalSource::Replay(rows) => rows.len() as u64,
        };
        Ok(Self {
            source,
            generator: ArrivalGenerator::new(cfg.lambda, cfg.slot_seconds, cfg.process)?,
            rng: ChaCha8Rng::seed_from_u64(seed),
            total,
            emitted: 0,
            cursor: 0,
        })
    }

    fn exhausted(&self) -> bool {
        self.emitted >= self.total
    }

    fn last_replay_slot(&self) -> u64 {
        match &self.source {
            ArrivalSource::Replay(rows) => rows.last().map_or(0, |(s, _)| *s),
            ArrivalSource::Synthetic { .. } => 0,
        }
    }

    fn next_slot(&mut self, slot: u64) -> Vec<Arrival> {
        if self.exhausted() {
            return Vec::new();
        }
        match &self.source {
            ArrivalSource::Synthetic { spec, seed } => {
                let n = self
                    .generator
                    .count(slot, &mut self.rng)
                    .min(self.total - self.emitted);
                (0..n)
                    .map(|_| {
                        let id = self.emitted;
                        self.emitted += 1;
                        let position = id as f64 / self.total as f64;
                        Arrival {
                            id,
                            sample: workload::sample_request(spec, *seed, id, position),
                        }
                    })
                    .collect()
            }
            ArrivalSource::Replay(rows) => {
                let mut out = Vec::new();
                while let Some(&(s, sample)) = rows.get(self.cursor) {
                    if s > slot {
                        break;
                    }
                    out.push(Arrival {
                        id: self.emitted,
                        sample,
                    });
                    self.emitted += 1;
                    self.cursor += 1;
                }
                out
            }
        }
    }
}

/// Assigns arrival slots to `samples`, kept in order, using random arrival
/// counts at `cfg.lambda`. The counts match those of a synthetic run with the
/// same seed.
pub fn paced_schedule(cfg: &SimConfig, samples: &[RequestSample], seed: u64) -> Result<Vec<(u64, RequestSample)>> {
    let generator = ArrivalGenerator::new(cfg.lambda, cfg.slot_seconds, cfg.process)?;
    if generator.mean() <= 0.0 && !samples.is_empty() {
        return Err(Error::domain("cannot pace requests at a zero arrival rate"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(samples.len());
    let mut slot = 0;
    while out.len() < samples.len() {
        let n = generator.count(slot, &mut rng) as usize;
        let take = n.min(samples.len() - out.len());
        out.extend(samples[out.len()..out.len() + take].iter().map(|&s| (slot, s)));
        slot += 1;
    }
    Ok(out)
}

/// Per-request lifecycle summary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RequestRecord {
    pub id: u64,
    pub prompt_len: u64,
    pub output_len: u64,
    pub arrival_slot: u64,
    pub first_service_slot: Option<u64>,
    pub completion_slot: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Termination {
    /// Every request arrived and completed.
    Drained,
    /// Stopped at the slot cap with work outstanding.
    SlotCap,
    /// Resident memory left no room for any unit (only with [`SwapMode::None`]).
    Deadlock,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReplicaRun {
    pub slots: Vec<SlotOutcome>,
    /// Indexed by request id.
    pub requests: Vec<RequestRecord>,
    pub termination: Termination,
    /// Slot of the last arrival.
    pub last_arrival_slot: u64,
}

impl ReplicaRun {
    pub fn capped(&self) -> bool {
        self.termination != Termination::Drained
    }

    pub fn queue_series(&self) -> Vec<u64> {
        self.slots.iter().map(|s| s.queue_len).collect()
    }
}

pub(crate) struct MultiRun {
    pub engines: Vec<(Vec<SlotOutcome>, Vec<RequestRecord>)>,
    pub termination: Termination,
    pub last_arrival_slot: u64,
}

/// Drives `replicas` identical engines from one arrival stream, routing
/// arrival `id` to engine `id % replicas`.
pub(crate) fn drive<O: SlotObserver>(
    cfg: &SimConfig,
    source: ArrivalSource<'_>,
    replicas: usize,
    observers: &mut [O],
) -> Result<MultiRun> {
    assert!(replicas >= 1 && observers.len() == replicas);
    cfg.validate()?;
    let engine_cfg = cfg.engine()?;
    let needed = match &source {
        ArrivalSource::Synthetic { spec, .. } => workload::ess_sup_total(spec)?,
        ArrivalSource::Replay(rows) => rows.iter().map(|(_, r)| r.total_len()).max().unwrap_or(0),
    };
    if needed > cfg.memory {
        return Err(Error::Infeasible {
            needed,
            limit: cfg.memory,
        });
    }
    if let ArrivalSource::Synthetic { spec, .. } = &source {
        if spec.chunk != cfg.chunk {
            return Err(Error::domain(format!(
                "workload chunk {} differs from engine chunk {}",
                spec.chunk, cfg.chunk
            )));
        }
    }

    let mut stream = ArrivalStream::new(cfg, source)?;
    let cap = cfg
        .slot_cap
        .unwrap_or_else(|| cfg.default_slot_cap(stream.total, needed).saturating_add(stream.last_replay_slot()));
    let mut engines: Vec<EngineState> = (0..replicas).map(|_| EngineState::new(engine_cfg)).collect();
    let mut series: Vec<Vec<SlotOutcome>> = vec![Vec::new(); replicas];
    let mut records: Vec<RequestRecord> = Vec::new();
    let mut routed: Vec<Vec<Arrival>> = vec![Vec::new(); replicas];
    let mut last_arrival_slot = 0;

    let termination = loop {
        let slot = engines[0].slot();
        if stream.exhausted() && engines.iter().all(EngineState::is_empty) {
            break Termination::Drained;
        }
        if slot >= cap {
            break Termination::SlotCap;
        }
        for r in routed.iter_mut() {
            r.clear();
        }
        let arrivals = stream.next_slot(slot);
        if !arrivals.is_empty() {
            last_arrival_slot = slot;
        }
        for a in arrivals {
            records.push(RequestRecord {
                id: a.id,
                prompt_len: a.sample.prompt_len,
                output_len: a.sample.output_len,
                arrival_slot: slot,
                first_service_slot: None,
                completion_slot: None,
            });
            routed[(a.id % replicas as u64) as usize].push(a);
        }
        let mut stuck = false;
        for (k, engine) in engines.iter_mut().enumerate() {
            observers[k].observe(engine, &routed[k]);
            let outcome = engine.advance_slot(&routed[k]);
            for c in &outcome.completions {
                let rec = &mut records[c.id as usize];
                rec.first_service_slot = Some(c.first_service_slot);
                rec.completion_slot = Some(c.completion_slot);
            }
            if outcome.memory_used == 0 && !engine.in_progress().is_empty() {
                stuck = true;
            }
            series[k].push(outcome);
        }
        if stuck {
            break Termination::Deadlock;
        }
    };

    for (k, engine) in engines.iter().enumerate() {
        observers[k].finish(engine);
        for r in engine.in_progress() {
            records[r.id as usize].first_service_slot = r.first_service_slot;
        }
    }

    let mut per_engine: Vec<Vec<RequestRecord>> = vec![Vec::new(); replicas];
    for rec in records {
        per_engine[(rec.id % replicas as u64) as usize].push(rec);
    }
    Ok(MultiRun {
        engines: series.into_iter().zip(per_engine).collect(),
        termination,
        last_arrival_slot,
    })
}

/// Simulates one replica with synthetic arrivals until every request has
/// completed or the slot cap is hit.
pub fn run_replica(cfg: &SimConfig, spec: &WorkloadSpec, seed: u64) -> Result<ReplicaRun> {
    run_replica_with(cfg, ArrivalSource::Synthetic { spec, seed }, &mut ())
}

pub fn run_replica_with<O: SlotObserver>(
    cfg: &SimConfig,
    source: ArrivalSource<'_>,
    observer: &mut O,
) -> Result<ReplicaRun> {
    let mut observers = [Forward(observer)];
    let run = drive(cfg, source, 1, &mut observers)?;
    let (slots, requests) = run.engines.into_iter().next().expect("one engine");
    Ok(ReplicaRun {
        slots,
        requests,
        termination: run.termination,
        last_arrival_slot: run.last_arrival_slot,
    })
}

struct Forward<'a, O>(&'a mut O);

impl<O: SlotObserver> SlotObserver for Forward<'_, O> {
    fn observe(&mut self, state: &EngineState, arrivals: &[Arrival]) {
        self.0.observe(state, arrivals)
    }

    fn finish(&mut self, state: &EngineState) {
        self.0.finish(state)
    }
}
