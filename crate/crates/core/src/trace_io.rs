//! File formats: request traces, batch-time logs, and result artifacts.
//!
//! Request traces are CSV with header `arrival_time,prompt_len,output_len`
//! (the `arrival_time` column may be omitted or left blank) or JSON Lines
//! with the same keys. Batch-time logs are CSV with a single `batch_seconds`
//! column. Result directories hold JSON reports, plot-ready CSV series and a
//! `manifest.json` with a SHA-256 for every other file.

use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::analysis::{self, CapacityReport, DriftSeries, MeasurementReport, WaitingCdf};
use crate::error::{Error, Result};
use crate::sim::{RequestRecord, SlotOutcome};
use crate::workload::{EmpiricalPmf, RequestSample};

pub const REQUEST_TRACE_HEADER: [&str; 3] = ["arrival_time", "prompt_len", "output_len"];
pub const BATCH_TIME_HEADER: &str = "batch_seconds";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TraceFormat {
    #[default]
    Csv,
    Jsonl,
}

impl TraceFormat {
    /// `.jsonl`/`.ndjson` select JSON Lines; anything else is CSV.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(ext) if ext.eq_ignore_ascii_case("jsonl") || ext.eq_ignore_ascii_case("ndjson") => {
                TraceFormat::Jsonl
            }
            _ => TraceFormat::Csv,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    /// Seconds; either every row has one or none does.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub arrival_time: Option<f64>,
    pub prompt_len: u64,
    pub output_len: u64,
}

impl TraceRow {
    pub fn sample(&self) -> RequestSample {
        RequestSample {
            prompt_len: self.prompt_len,
            output_len: self.output_len,
        }
    }
}

#[derive(Debug, Deserialize)]
struct CsvRow {
    #[serde(default, deserialize_with = "csv::invalid_option")]
    arrival_time: Option<f64>,
    prompt_len: u64,
    output_len: u64,
}

/// Validated request trace, sorted by arrival time when times are present.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RequestTrace {
    rows: Vec<TraceRow>,
}

impl RequestTrace {
    /// Validates rows; errors name the 1-based data row.
    pub fn new(rows: Vec<TraceRow>) -> Result<Self> {
        Self::validated(rows, "<memory>")
    }

    fn validated(mut rows: Vec<TraceRow>, source: &str) -> Result<Self> {
        let row_err = |i: usize, msg: String| Error::Row {
            path: source.to_string(),
            row: i as u64 + 1,
            msg,
        };
        let timed = rows.first().is_some_and(|r| r.arrival_time.is_some());
        for (i, r) in rows.iter().enumerate() {
            if r.prompt_len == 0 {
                return Err(row_err(i, "prompt_len must be at least 1".into()));
            }
            if r.output_len == 0 {
                return Err(row_err(i, "output_len must be at least 1".into()));
            }
            match r.arrival_time {
                Some(t) if !t.is_finite() || t < 0.0 => {
                    return Err(row_err(i, format!("arrival_time {t} must be finite and non-negative")));
                }
                Some(_) if !timed => {
                    return Err(row_err(i, "arrival_time is set on some rows but not all".into()));
                }
                None if timed => {
                    return Err(row_err(i, "arrival_time is set on some rows but not all".into()));
                }
                _ => {}
            }
        }
        if timed {
            rows.sort_by(|a, b| a.arrival_time.partial_cmp(&b.arrival_time).expect("finite"));
        }
        Ok(Self { rows })
    }

    pub fn rows(&self) -> &[TraceRow] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn has_arrival_times(&self) -> bool {
        self.rows.first().is_some_and(|r| r.arrival_time.is_some())
    }

    pub fn samples(&self) -> impl Iterator<Item = RequestSample> + '_ {
        self.rows.iter().map(TraceRow::sample)
    }

    /// Maps arrival times to slots, measured from the first arrival.
    pub fn replay_schedule(&self, slot_seconds: f64) -> Result<Vec<(u64, RequestSample)>> {
        if !(slot_seconds.is_finite() && slot_seconds > 0.0) {
            return Err(Error::domain(format!("slot duration must be positive, got {slot_seconds}")));
        }
        if !self.has_arrival_times() {
            return Err(Error::InsufficientData("trace has no arrival_time column to replay".into()));
        }
        let t0 = self.rows[0].arrival_time.expect("timed");
        Ok(self
            .rows
            .iter()
            .map(|r| {
                let dt = r.arrival_time.expect("timed") - t0;
                ((dt / slot_seconds + 1e-9).floor() as u64, r.sample())
            })
            .collect())
    }
}

pub fn read_request_trace<R: Read>(reader: R, format: TraceFormat, source: &str) -> Result<RequestTrace> {
    let rows = match format {
        TraceFormat::Csv => read_csv_rows(reader, source)?,
        TraceFormat::Jsonl => read_jsonl_rows(reader, source)?,
    };
    RequestTrace::validated(rows, source)
}

fn read_csv_rows<R: Read>(reader: R, source: &str) -> Result<Vec<TraceRow>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let mut rows = Vec::new();
    for rec in rdr.deserialize::<CsvRow>() {
        let r = rec.map_err(|e| csv_error(e, source))?;
        rows.push(TraceRow {
            arrival_time: r.arrival_time,
            prompt_len: r.prompt_len,
            output_len: r.output_len,
        });
    }
    Ok(rows)
}

fn read_jsonl_rows<R: Read>(reader: R, source: &str) -> Result<Vec<TraceRow>> {
    let mut rows = Vec::new();
    for (i, line) in BufReader::new(reader).lines().enumerate() {
        let line = line.map_err(|e| Error::io(source, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let row: TraceRow = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: source.to_string(),
            line: i as u64 + 1,
            msg: e.to_string(),
        })?;
        rows.push(row);
    }
    Ok(rows)
}

fn csv_error(e: csv::Error, source: &str) -> Error {
    let line = e.position().map_or(0, |p| p.line());
    let msg = match e.kind() {
        csv::ErrorKind::Deserialize { err, .. } => err.to_string(),
        _ => e.to_string(),
    };
    Error::Parse {
        path: source.to_string(),
        line,
        msg,
    }
}

fn open(path: &Path) -> Result<fs::File> {
    fs::File::open(path).map_err(|e| Error::io(path, e))
}

/// Loads a trace, choosing the format from the file extension.
pub fn load_request_trace(path: impl AsRef<Path>) -> Result<RequestTrace> {
    let path = path.as_ref();
    read_request_trace(open(path)?, TraceFormat::from_path(path), &path.display().to_string())
}

pub fn request_trace_bytes(trace: &RequestTrace, format: TraceFormat) -> Result<Vec<u8>> {
    let timed = trace.has_arrival_times();
    match format {
        TraceFormat::Csv => {
            let header: &[&str] = if timed {
                &REQUEST_TRACE_HEADER
            } else {
                &REQUEST_TRACE_HEADER[1..]
            };
            let mut w = CsvBuf::new(header);
            for r in trace.rows() {
                let mut rec = Vec::with_capacity(3);
                if let Some(t) = r.arrival_time {
                    rec.push(t.to_string());
                }
                rec.push(r.prompt_len.to_string());
                rec.push(r.output_len.to_string());
                w.row(rec);
            }
            Ok(w.finish())
        }
        TraceFormat::Jsonl => {
            let mut out = Vec::new();
            for r in trace.rows() {
                serde_json::to_writer(&mut out, r).map_err(|e| Error::domain(e.to_string()))?;
                out.push(b'\n');
            }
            Ok(out)
        }
    }
}

pub fn write_request_trace(path: impl AsRef<Path>, trace: &RequestTrace) -> Result<()> {
    let path = path.as_ref();
    let bytes = request_trace_bytes(trace, TraceFormat::from_path(path))?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct BatchTimeTrace {
    samples: Vec<f64>,
}

impl BatchTimeTrace {
    pub fn new(samples: Vec<f64>) -> Result<Self> {
        for (i, &s) in samples.iter().enumerate() {
            if !(s.is_finite() && s > 0.0) {
                return Err(Error::Row {
                    path: "<memory>".into(),
                    row: i as u64 + 1,
                    msg: format!("batch_seconds must be positive, got {s}"),
                });
            }
        }
        Ok(Self { samples })
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }
}

#[derive(Debug, Deserialize)]
struct BatchRow {
    batch_seconds: f64,
}

pub fn read_batch_times<R: Read>(reader: R, source: &str) -> Result<BatchTimeTrace> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let mut samples = Vec::new();
    for (i, rec) in rdr.deserialize::<BatchRow>().enumerate() {
        let s = rec.map_err(|e| csv_error(e, source))?.batch_seconds;
        if !(s.is_finite() && s > 0.0) {
            return Err(Error::Row {
                path: source.to_string(),
                row: i as u64 + 1,
                msg: format!("batch_seconds must be positive, got {s}"),
            });
        }
        samples.push(s);
    }
    Ok(BatchTimeTrace { samples })
}

pub fn load_batch_times(path: impl AsRef<Path>) -> Result<BatchTimeTrace> {
    let path = path.as_ref();
    read_batch_times(open(path)?, &path.display().to_string())
}

/// Random train/test split; the train part becomes an empirical pmf.
///
/// The train part holds `floor(split * n)` rows. Shuffling is driven by
/// `seed` alone, so the split is reproducible.
pub fn fit_empirical_pmf(trace: &RequestTrace, split: f64, seed: u64) -> Result<(EmpiricalPmf, RequestTrace)> {
    if !(split > 0.0 && split < 1.0) {
        return Err(Error::domain(format!("train split must lie in (0, 1), got {split}")));
    }
    let n = trace.len();
    let n_train = (split * n as f64 + 1e-9).floor() as usize;
    if n_train == 0 {
        return Err(Error::InsufficientData(format!(
            "a {split} split of {n} rows leaves no training rows"
        )));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (train, test) = idx.split_at(n_train);
    let pmf = EmpiricalPmf::from_samples(train.iter().map(|&i| trace.rows[i].sample()))?;
    let mut test: Vec<usize> = test.to_vec();
    test.sort_unstable();
    let test_rows = test.into_iter().map(|i| trace.rows[i]).collect();
    Ok((pmf, RequestTrace { rows: test_rows }))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", content = "trim", rename_all = "kebab-case")]
pub enum Estimator {
    Median,
    /// Fraction of the largest samples to drop.
    TrimmedMean(f64),
}

impl FromStr for Estimator {
    type Err = Error;

    /// Accepts `median`, `mean`, `trimmed-mean` (10%), or `trimmed-mean:<x>`.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        match s {
            "median" => return Ok(Estimator::Median),
            "mean" => return Ok(Estimator::TrimmedMean(0.0)),
            "trimmed-mean" => return Ok(Estimator::TrimmedMean(0.10)),
            _ => {}
        }
        let x = s
            .strip_prefix("trimmed-mean:")
            .or_else(|| s.strip_prefix("trimmed-mean(").and_then(|r| r.strip_suffix(')')))
            .ok_or_else(|| Error::domain(format!("unknown estimator `{s}`")))?;
        let x: f64 = x
            .trim()
            .parse()
            .map_err(|_| Error::domain(format!("bad trim fraction in `{s}`")))?;
        if !(0.0..1.0).contains(&x) {
            return Err(Error::domain(format!("trim fraction must lie in [0, 1), got {x}")));
        }
        Ok(Estimator::TrimmedMean(x))
    }
}

impl std::fmt::Display for Estimator {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Estimator::Median => f.write_str("median"),
            Estimator::TrimmedMean(x) => write!(f, "trimmed-mean:{x}"),
        }
    }
}

pub fn estimate_slot_seconds(trace: &BatchTimeTrace, method: Estimator) -> Result<f64> {
    if trace.samples.is_empty() {
        return Err(Error::EmptyInput("batch-time trace"));
    }
    match method {
        Estimator::Median => analysis::median(&trace.samples),
        Estimator::TrimmedMean(x) => analysis::trimmed_mean(&trace.samples, x),
    }
}

/// Headered CSV accumulated in memory.
struct CsvBuf {
    w: csv::Writer<Vec<u8>>,
}

impl CsvBuf {
    fn new(header: &[&str]) -> Self {
        let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
        w.write_record(header).expect("in-memory write");
        Self { w }
    }

    fn row<I, T>(&mut self, fields: I)
    where
        I: IntoIterator<Item = T>,
        T: AsRef<[u8]>,
    {
        self.w.write_record(fields).expect("in-memory write");
    }

    fn finish(self) -> Vec<u8> {
        self.w.into_inner().expect("in-memory flush")
    }
}

fn opt(v: Option<u64>) -> String {
    v.map_or_else(String::new, |x| x.to_string())
}

/// Everything a run produces. Per-replica series are indexed by replica.
#[derive(Debug, Clone, Copy)]
pub struct ResultSet<'a> {
    pub capacity: &'a CapacityReport,
    pub measurement: Option<&'a MeasurementReport>,
    pub slots: &'a [&'a [SlotOutcome]],
    pub requests: &'a [RequestRecord],
    /// Queue length per slot, summed over replicas.
    pub queue: &'a [u64],
    pub slot_seconds: f64,
    pub waiting_cdf: &'a WaitingCdf,
    pub drift: &'a [&'a DriftSeries],
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Manifest {
    pub files: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn get(&self, name: &str) -> Option<&ManifestEntry> {
        self.files.iter().find(|e| e.name == name)
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn json_bytes<T: Serialize + ?Sized>(value: &T) -> Vec<u8> {
    let mut out = serde_json::to_vec_pretty(value).expect("report types serialize");
    out.push(b'\n');
    out
}

/// Renders every artifact of a run as `(file name, contents)`.
pub fn render_results(results: &ResultSet<'_>) -> Vec<(String, Vec<u8>)> {
    let mut files = Vec::new();
    files.push(("capacity.json".to_string(), json_bytes(results.capacity)));
    files.push(("measurement.json".to_string(), json_bytes(&results.measurement)));

    let mut slots = CsvBuf::new(&[
        "replica",
        "slot",
        "memory_used",
        "occupancy",
        "queue_len",
        "in_progress",
        "arrivals",
        "completions",
    ]);
    for (k, series) in results.slots.iter().enumerate() {
        for s in series.iter() {
            slots.row([
                k.to_string(),
                s.slot.to_string(),
                s.memory_used.to_string(),
                s.occupancy_end.to_string(),
                s.queue_len.to_string(),
                s.in_progress_count.to_string(),
                s.arrivals.to_string(),
                s.completions.len().to_string(),
            ]);
        }
    }
    files.push(("slots.csv".to_string(), slots.finish()));

    let mut reqs = CsvBuf::new(&[
        "id",
        "prompt_len",
        "output_len",
        "arrival_slot",
        "first_service_slot",
        "completion_slot",
    ]);
    for r in results.requests {
        reqs.row([
            r.id.to_string(),
            r.prompt_len.to_string(),
            r.output_len.to_string(),
            r.arrival_slot.to_string(),
            opt(r.first_service_slot),
            opt(r.completion_slot),
        ]);
    }
    files.push(("requests.csv".to_string(), reqs.finish()));

    let mut queue = CsvBuf::new(&["slot", "time_seconds", "queue_len"]);
    for (t, q) in results.queue.iter().enumerate() {
        queue.row([
            t.to_string(),
            (t as f64 * results.slot_seconds).to_string(),
            q.to_string(),
        ]);
    }
    files.push(("queue.csv".to_string(), queue.finish()));

    let mut cdf = CsvBuf::new(&["wait_seconds", "cumulative_fraction"]);
    for (w, f) in &results.waiting_cdf.points {
        cdf.row([w.to_string(), f.to_string()]);
    }
    files.push(("waiting_cdf.csv".to_string(), cdf.finish()));

    let mut drift = CsvBuf::new(&[
        "replica",
        "slot",
        "outstanding_demand",
        "memory_used",
        "new_demand",
        "residual",
    ]);
    for (k, series) in results.drift.iter().enumerate() {
        for p in &series.points {
            drift.row([
                k.to_string(),
                p.slot.to_string(),
                p.outstanding_demand.to_string(),
                p.memory_used.to_string(),
                p.new_demand.to_string(),
                p.residual.to_string(),
            ]);
        }
    }
    files.push(("drift.csv".to_string(), drift.finish()));
    files
}

/// Writes `files` into `dir` (created if missing) followed by a manifest of
/// their hashes. Names must be plain file names.
pub fn write_files(dir: impl AsRef<Path>, mut files: Vec<(String, Vec<u8>)>) -> Result<Manifest> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    files.sort_by(|a, b| a.0.cmp(&b.0));
    for pair in files.windows(2) {
        if pair[0].0 == pair[1].0 {
            return Err(Error::domain(format!("duplicate output file `{}`", pair[0].0)));
        }
    }
    let mut manifest = Manifest::default();
    for (name, bytes) in &files {
        if name == MANIFEST_FILE || Path::new(name).file_name().and_then(|n| n.to_str()) != Some(name.as_str()) {
            return Err(Error::domain(format!("invalid output file name `{name}`")));
        }
        let path = dir.join(name);
        write_atomic(&path, bytes)?;
        manifest.files.push(ManifestEntry {
            name: name.clone(),
            sha256: sha256_hex(bytes),
            bytes: bytes.len() as u64,
        });
    }
    write_atomic(&dir.join(MANIFEST_FILE), &json_bytes(&manifest))?;
    Ok(manifest)
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}

/// Writes the standard artifact set plus any `extra` files.
pub fn write_results(
    dir: impl AsRef<Path>,
    results: &ResultSet<'_>,
    extra: Vec<(String, Vec<u8>)>,
) -> Result<Manifest> {
    let mut files = render_results(results);
    files.extend(extra);
    write_files(dir, files)
}

pub fn read_manifest(dir: impl AsRef<Path>) -> Result<Manifest> {
    let path: PathBuf = dir.as_ref().join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.display().to_string(),
        line: e.line() as u64,
        msg: e.to_string(),
    })
}

/// Re-hashes every listed file and reports the first mismatch.
pub fn verify_manifest(dir: impl AsRef<Path>) -> Result<Manifest> {
    let dir = dir.as_ref();
    let manifest = read_manifest(dir)?;
    for entry in &manifest.files {
        let path = dir.join(&entry.name);
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let hash = sha256_hex(&bytes);
        if hash != entry.sha256 || bytes.len() as u64 != entry.bytes {
            return Err(Error::InvalidState(format!(
                "{} does not match its manifest entry",
                path.display()
            )));
        }
    }
    Ok(manifest)
}
