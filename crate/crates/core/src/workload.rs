//! Request-size distributions and per-request KV-cache footprints.
//!
//! A request with prompt length `s` and output length `o` is prefilled in
//! chunks of `chunk` tokens and then decoded one token at a time. After the
//! `j`-th chunk it holds `min(j * chunk, s)` tokens of KV cache; after the
//! `j`-th output token it holds `s + j`. The *lifetime footprint* is the sum of
//! these per-unit occupancies over the whole service of the request.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Probability mass must sum to one within this tolerance.
pub const PROBABILITY_TOLERANCE: f64 = 1e-9;

/// Names accepted by [`Workload::preset`].
pub const PRESET_NAMES: [&str; 3] = ["pd-1-1", "pd-2-1", "pd-1-2"];

/// Keys the per-request sampling stream away from the arrival-count stream.
const SAMPLE_STREAM_KEY: u64 = 0x5851_f42d_4c95_7f2d;

/// One request's size in tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct RequestSample {
    pub prompt_len: u64,
    pub output_len: u64,
}

impl RequestSample {
    pub fn new(prompt_len: u64, output_len: u64) -> Result<Self> {
        if prompt_len == 0 || output_len == 0 {
            return Err(Error::domain(format!(
                "request needs prompt_len >= 1 and output_len >= 1, got ({prompt_len}, {output_len})"
            )));
        }
        Ok(Self {
            prompt_len,
            output_len,
        })
    }

    /// Peak KV occupancy, reached when the last output token is produced.
    pub fn total_len(&self) -> u64 {
        self.prompt_len + self.output_len
    }
}

fn check_args(s: u64, o: u64, chunk: u64) -> Result<()> {
    if s == 0 || o == 0 || chunk == 0 {
        return Err(Error::domain(format!(
            "footprint needs s, o, chunk >= 1, got ({s}, {o}, {chunk})"
        )));
    }
    Ok(())
}

/// Closed-form lifetime footprint with `s / chunk` taken as a real number.
///
/// Equals [`exact_footprint`] whenever `chunk` divides `s`; otherwise it is the
/// smooth interpolation used by the capacity formula.
pub fn lifetime_footprint(s: u64, o: u64, chunk: u64) -> Result<f64> {
    check_args(s, o, chunk)?;
    let (s, o, chunk) = (s as f64, o as f64, chunk as f64);
    Ok(((1.0 + s / chunk) * s + 2.0 * o * s + (1.0 + o) * o) / 2.0)
}

/// Lifetime footprint under exact chunking: `ceil(s / chunk)` chunks, the last
/// one possibly partial.
pub fn exact_footprint(s: u64, o: u64, chunk: u64) -> Result<u64> {
    check_args(s, o, chunk)?;
    Ok(prefill_area(s, chunk, num_chunks(s, chunk)) + decode_area(s, o))
}

pub fn num_chunks(s: u64, chunk: u64) -> u64 {
    s.div_ceil(chunk)
}

/// `sum_{j=1..chunks} min(j * chunk, s)`.
pub(crate) fn prefill_area(s: u64, chunk: u64, chunks: u64) -> u64 {
    if chunks == 0 {
        return 0;
    }
    let full = num_chunks(s, chunk);
    if chunks < full {
        chunk * chunks * (chunks + 1) / 2
    } else {
        chunk * (full - 1) * full / 2 + s
    }
}

/// `sum_{j=1..tokens} (s + j)`.
pub(crate) fn decode_area(s: u64, tokens: u64) -> u64 {
    tokens * s + tokens * (tokens + 1) / 2
}

/// Inclusive integer token range.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenRange {
    pub lo: u64,
    pub hi: u64,
}

impl TokenRange {
    pub fn new(lo: u64, hi: u64) -> Self {
        Self { lo, hi }
    }

    fn validate(&self, what: &str) -> Result<()> {
        if self.lo == 0 || self.lo > self.hi {
            return Err(Error::InvalidSpec(format!(
                "{what} range must satisfy 1 <= lo <= hi, got [{}, {}]",
                self.lo, self.hi
            )));
        }
        Ok(())
    }

    fn len(&self) -> u64 {
        self.hi - self.lo + 1
    }

    fn mean(&self) -> f64 {
        (self.lo as f64 + self.hi as f64) / 2.0
    }

    fn second_moment(&self) -> f64 {
        fn squares_upto(n: u64) -> u128 {
            let n = n as u128;
            n * (n + 1) * (2 * n + 1) / 6
        }
        let sum = squares_upto(self.hi) - squares_upto(self.lo - 1);
        sum as f64 / self.len() as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PmfEntry {
    pub prompt_len: u64,
    pub output_len: u64,
    pub probability: f64,
}

/// Explicit joint pmf over `(prompt_len, output_len)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<PmfEntry>", into = "Vec<PmfEntry>")]
pub struct EmpiricalPmf {
    entries: Vec<PmfEntry>,
    cumulative: Vec<f64>,
}

impl EmpiricalPmf {
    /// Validates and canonicalizes: entries are sorted by `(s, o)` and
    /// duplicate pairs merged.
    pub fn new(mut entries: Vec<PmfEntry>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::InvalidSpec("empirical pmf has no entries".into()));
        }
        for e in &entries {
            if e.prompt_len == 0 || e.output_len == 0 {
                return Err(Error::InvalidSpec(format!(
                    "pmf entry ({}, {}) has a zero token count",
                    e.prompt_len, e.output_len
                )));
            }
            if !e.probability.is_finite() || e.probability < 0.0 {
                return Err(Error::InvalidSpec(format!(
                    "pmf entry ({}, {}) has invalid probability {}",
                    e.prompt_len, e.output_len, e.probability
                )));
            }
        }
        entries.sort_by_key(|e| (e.prompt_len, e.output_len));
        entries.dedup_by(|next, kept| {
            if (next.prompt_len, next.output_len) == (kept.prompt_len, kept.output_len) {
                kept.probability += next.probability;
                true
            } else {
                false
            }
        });
        let total: f64 = entries.iter().map(|e| e.probability).sum();
        if (total - 1.0).abs() > PROBABILITY_TOLERANCE {
            return Err(Error::InvalidSpec(format!(
                "pmf probabilities sum to {total}, expected 1"
            )));
        }
        let mut acc = 0.0;
        let mut cumulative: Vec<f64> = entries
            .iter()
            .map(|e| {
                acc += e.probability;
                acc / total
            })
            .collect();
        if let Some(last) = cumulative.last_mut() {
            *last = 1.0;
        }
        Ok(Self {
            entries,
            cumulative,
        })
    }

    /// Normalized counts of the given samples.
    pub fn from_samples<I: IntoIterator<Item = RequestSample>>(samples: I) -> Result<Self> {
        let mut sorted: Vec<RequestSample> = samples.into_iter().collect();
        if sorted.is_empty() {
            return Err(Error::EmptyInput("no samples to build a pmf from"));
        }
        sorted.sort_unstable();
        let n = sorted.len() as f64;
        let mut entries: Vec<PmfEntry> = Vec::new();
        for chunk in sorted.chunk_by(|a, b| a == b) {
            entries.push(PmfEntry {
                prompt_len: chunk[0].prompt_len,
                output_len: chunk[0].output_len,
                probability: chunk.len() as f64 / n,
            });
        }
        Self::new(entries)
    }

    pub fn point_mass(sample: RequestSample) -> Self {
        Self::new(vec![PmfEntry {
            prompt_len: sample.prompt_len,
            output_len: sample.output_len,
            probability: 1.0,
        }])
        .expect("a point mass is a valid pmf")
    }

    pub fn entries(&self) -> &[PmfEntry] {
        &self.entries
    }

    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> RequestSample {
        let u: f64 = rng.random();
        let idx = self
            .cumulative
            .partition_point(|&c| c <= u)
            .min(self.entries.len() - 1);
        let e = &self.entries[idx];
        RequestSample {
            prompt_len: e.prompt_len,
            output_len: e.output_len,
        }
    }
}

impl TryFrom<Vec<PmfEntry>> for EmpiricalPmf {
    type Error = Error;

    fn try_from(entries: Vec<PmfEntry>) -> Result<Self> {
        Self::new(entries)
    }
}

impl From<EmpiricalPmf> for Vec<PmfEntry> {
    fn from(pmf: EmpiricalPmf) -> Self {
        pmf.entries
    }
}

/// One piece of a time-segmented workload: the next `fraction` of requests,
/// in arrival order, is drawn from `workload`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub fraction: f64,
    pub workload: Workload,
}

/// Joint distribution of `(prompt_len, output_len)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Workload {
    /// Independent discrete uniforms, both ranges inclusive.
    IndependentUniform { prompt: TokenRange, output: TokenRange },
    EmpiricalPmf { pmf: EmpiricalPmf },
    SegmentedMixture { segments: Vec<Segment> },
}

impl Workload {
    pub fn uniform(s_lo: u64, s_hi: u64, o_lo: u64, o_hi: u64) -> Self {
        Workload::IndependentUniform {
            prompt: TokenRange::new(s_lo, s_hi),
            output: TokenRange::new(o_lo, o_hi),
        }
    }

    /// The three prefill:decode ratio workloads used for single-GPU validation.
    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "pd-1-1" => Some(Self::uniform(10, 1600, 10, 1600)),
            "pd-2-1" => Some(Self::uniform(10, 2133, 10, 1066)),
            "pd-1-2" => Some(Self::uniform(10, 1066, 10, 2133)),
            _ => None,
        }
    }

    pub fn mixture(segments: Vec<(f64, Workload)>) -> Result<Self> {
        let w = Workload::SegmentedMixture {
            segments: segments
                .into_iter()
                .map(|(fraction, workload)| Segment { fraction, workload })
                .collect(),
        };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Workload::IndependentUniform { prompt, output } => {
                prompt.validate("prompt")?;
                output.validate("output")
            }
            // constructor already validated
            Workload::EmpiricalPmf { .. } => Ok(()),
            Workload::SegmentedMixture { segments } => {
                if segments.is_empty() {
                    return Err(Error::InvalidSpec("mixture has no segments".into()));
                }
                let mut total = 0.0;
                for seg in segments {
                    if !seg.fraction.is_finite() || seg.fraction <= 0.0 {
                        return Err(Error::InvalidSpec(format!(
                            "mixture fraction must be positive, got {}",
                            seg.fraction
                        )));
                    }
                    total += seg.fraction;
                    seg.workload.validate()?;
                }
                if (total - 1.0).abs() > PROBABILITY_TOLERANCE {
                    return Err(Error::InvalidSpec(format!(
                        "mixture fractions sum to {total}, expected 1"
                    )));
                }
                Ok(())
            }
        }
    }

    fn expected_footprint(&self, chunk: u64) -> f64 {
        match self {
            Workload::IndependentUniform { prompt, output } => {
                let (es, es2) = (prompt.mean(), prompt.second_moment());
                let (eo, eo2) = (output.mean(), output.second_moment());
                (es + es2 / chunk as f64 + 2.0 * eo * es + eo + eo2) / 2.0
            }
            Workload::EmpiricalPmf { pmf } => pmf
                .entries
                .iter()
                .map(|e| {
                    e.probability
                        * lifetime_footprint(e.prompt_len, e.output_len, chunk)
                            .expect("validated entry")
                })
                .sum(),
            Workload::SegmentedMixture { segments } => segments
                .iter()
                .map(|s| s.fraction * s.workload.expected_footprint(chunk))
                .sum(),
        }
    }

    fn ess_sup_total(&self) -> u64 {
        match self {
            Workload::IndependentUniform { prompt, output } => prompt.hi + output.hi,
            Workload::EmpiricalPmf { pmf } => pmf
                .entries
                .iter()
                .filter(|e| e.probability > 0.0)
                .map(|e| e.prompt_len + e.output_len)
                .max()
                .unwrap_or(0),
            Workload::SegmentedMixture { segments } => segments
                .iter()
                .map(|s| s.workload.ess_sup_total())
                .max()
                .unwrap_or(0),
        }
    }

    /// Draws one request. `position` is the request's ordinal divided by the
    /// planned total; only mixtures look at it.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R, position: f64) -> RequestSample {
        match self {
            Workload::IndependentUniform { prompt, output } => RequestSample {
                prompt_len: rng.random_range(prompt.lo..=prompt.hi),
                output_len: rng.random_range(output.lo..=output.hi),
            },
            Workload::EmpiricalPmf { pmf } => pmf.sample(rng),
            Workload::SegmentedMixture { segments } => {
                let (seg, local) = route_segment(segments, position);
                seg.workload.sample(rng, local)
            }
        }
    }
}

/// Picks the segment whose cumulative fraction covers `position` and rescales
/// the position into that segment.
fn route_segment(segments: &[Segment], position: f64) -> (&Segment, f64) {
    let position = position.clamp(0.0, 1.0);
    let mut start = 0.0;
    for seg in segments {
        let end = start + seg.fraction;
        if position < end {
            return (seg, ((position - start) / seg.fraction).clamp(0.0, 1.0));
        }
        start = end;
    }
    (segments.last().expect("validated mixture"), 1.0)
}

/// A workload together with the prefill chunk size it is served with.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkloadSpec {
    pub workload: Workload,
    pub chunk: u64,
}

impl WorkloadSpec {
    pub fn new(workload: Workload, chunk: u64) -> Result<Self> {
        if chunk == 0 {
            return Err(Error::InvalidSpec("chunk size must be >= 1".into()));
        }
        workload.validate()?;
        Ok(Self { workload, chunk })
    }

    pub fn preset(name: &str, chunk: u64) -> Result<Self> {
        let w = Workload::preset(name)
            .ok_or_else(|| Error::InvalidSpec(format!("unknown workload preset `{name}`")))?;
        Self::new(w, chunk)
    }
}

/// `E[g(s, o)]` under the workload's pmf, using the closed-form footprint.
pub fn expected_footprint(spec: &WorkloadSpec) -> Result<f64> {
    spec.workload.validate()?;
    Ok(spec.workload.expected_footprint(spec.chunk))
}

/// `(fraction, E[g])` for every top-level segment; a non-mixture is a single
/// segment of weight one.
pub fn segment_footprints(spec: &WorkloadSpec) -> Result<Vec<(f64, f64)>> {
    spec.workload.validate()?;
    Ok(match &spec.workload {
        Workload::SegmentedMixture { segments } => segments
            .iter()
            .map(|s| (s.fraction, s.workload.expected_footprint(spec.chunk)))
            .collect(),
        w => vec![(1.0, w.expected_footprint(spec.chunk))],
    })
}

/// Largest `s + o` with positive probability.
pub fn ess_sup_total(spec: &WorkloadSpec) -> Result<u64> {
    spec.workload.validate()?;
    Ok(spec.workload.ess_sup_total())
}

/// Largest lifetime footprint with positive probability.
pub fn sup_lifetime_footprint(spec: &WorkloadSpec) -> Result<f64> {
    fn sup(w: &Workload, chunk: u64) -> f64 {
        match w {
            // footprint is increasing in both lengths
            Workload::IndependentUniform { prompt, output } => {
                lifetime_footprint(prompt.hi, output.hi, chunk).expect("validated range")
            }
            Workload::EmpiricalPmf { pmf } => pmf
                .entries
                .iter()
                .filter(|e| e.probability > 0.0)
                .map(|e| lifetime_footprint(e.prompt_len, e.output_len, chunk).expect("validated entry"))
                .fold(0.0, f64::max),
            Workload::SegmentedMixture { segments } => segments
                .iter()
                .map(|s| sup(&s.workload, chunk))
                .fold(0.0, f64::max),
        }
    }
    spec.workload.validate()?;
    Ok(sup(&spec.workload, spec.chunk))
}

/// Deterministic in `(seed, index)`: each draw uses its own ChaCha stream.
pub fn sample_request(spec: &WorkloadSpec, seed: u64, index: u64, position: f64) -> RequestSample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ SAMPLE_STREAM_KEY);
    rng.set_stream(index);
    spec.workload.sample(&mut rng, position)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FootprintSummary {
    pub expected_footprint: f64,
    pub ess_sup_total: u64,
    /// Present once a memory limit is supplied.
    pub memory_slack: Option<f64>,
}

pub fn summarize(spec: &WorkloadSpec, memory: Option<u64>) -> Result<FootprintSummary> {
    let ess = ess_sup_total(spec)?;
    Ok(FootprintSummary {
        expected_footprint: expected_footprint(spec)?,
        ess_sup_total: ess,
        memory_slack: memory
            .map(|m| crate::analysis::memory_slack(ess, m))
            .transpose()?,
    })
}
