//! End-to-end runs of the preset workloads and the artifact pipeline.

use llmq_core::analysis::{self, DemandTracker, DriftSeries};
use llmq_core::cluster::{run_cluster_with, ClusterConfig};
use llmq_core::sim::{run_replica, run_replica_with, ArrivalSource, SimConfig, SlotOutcome};
use llmq_core::trace_io::{self, ResultSet, TraceRow};
use llmq_core::workload::WorkloadSpec;
use llmq_core::{RequestTrace, WorkloadSpec as Spec};

const M: u64 = 131_000;
const CHUNK: u64 = 512;
const B: f64 = 0.0372;

fn pd11() -> Spec {
    WorkloadSpec::preset("pd-1-1", CHUNK).unwrap()
}

#[test]
fn light_load_rarely_waits() {
    let run = run_replica(&SimConfig::new(M, CHUNK, B, 2.0, 20_000), &pd11(), 7).unwrap();
    let cdf = analysis::waiting_time_cdf(&run.requests, B);
    assert_eq!(cdf.censored, 0);
    let short = cdf.fraction_below(5.0 * B);
    println!("lambda=2: {:.4} of waits below 5 slots", short);
    assert!(short >= 0.95, "only {short} of waits are shorter than 5 slots");
}

#[test]
fn overload_spreads_waiting_times() {
    let run = run_replica(&SimConfig::new(M, CHUNK, B, 4.0, 20_000), &pd11(), 7).unwrap();
    let cdf = analysis::waiting_time_cdf(&run.requests, B);
    let step = cdf.max_step();
    println!("lambda=4: largest CDF step {step:.4}");
    assert!(step < 0.05, "largest CDF step {step}");
}

#[test]
fn stable_run_drifts_down_above_threshold() {
    let spec = pd11();
    let cfg = SimConfig::new(M, CHUNK, B, 1.0, 5_000);
    let mut tracker = DemandTracker::default();
    let run = run_replica_with(&cfg, ArrivalSource::Synthetic { spec: &spec, seed: 3 }, &mut tracker).unwrap();
    let series = analysis::drift_series(&run.slots, &tracker).unwrap();
    let report = analysis::capacity_report(&spec, M, B).unwrap();
    let drift = analysis::drift_report(&series, &spec, &report, 1.0).unwrap();
    println!("{drift:?}");
    assert!(drift.epsilon > 0.0);
    if let Some(d) = drift.mean_drift_above_threshold {
        assert!(d <= 0.0);
    }
    // Every token-slot of demand that arrives is eventually served.
    let arrived: u64 = series.points.iter().map(|p| p.new_demand).sum();
    let served: u64 = run.slots.iter().map(|s| s.memory_used).sum();
    assert_eq!(arrived, served);
}

fn artifacts(seed: u64, requests: u64, replicas: usize) -> Vec<(String, Vec<u8>)> {
    let spec = pd11();
    let sim = SimConfig::new(M, CHUNK, B, 6.0, requests);
    let mut trackers = vec![DemandTracker::default(); replicas];
    let out = run_cluster_with(
        &ClusterConfig::new(replicas, sim).unwrap(),
        ArrivalSource::Synthetic { spec: &spec, seed },
        &mut trackers,
    )
    .unwrap();
    let drift: Vec<DriftSeries> = out
        .replicas
        .iter()
        .zip(&trackers)
        .map(|(r, t)| analysis::drift_series(&r.slots, t).unwrap())
        .collect();
    let capacity = analysis::capacity_report(&spec, M, B).unwrap();
    let measurement = analysis::measured_rate(&out.requests, 20, B).ok();
    let cdf = analysis::waiting_time_cdf(&out.requests, B);
    let slots: Vec<&[SlotOutcome]> = out.replicas.iter().map(|r| r.slots.as_slice()).collect();
    let drift_refs: Vec<&DriftSeries> = drift.iter().collect();
    trace_io::render_results(&ResultSet {
        capacity: &capacity,
        measurement: measurement.as_ref(),
        slots: &slots,
        requests: &out.requests,
        queue: &out.aggregate_queue,
        slot_seconds: B,
        waiting_cdf: &cdf,
        drift: &drift_refs,
    })
}

#[test]
fn written_results_match_manifest_and_reproduce() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    let manifest = trace_io::write_files(&a, artifacts(5, 400, 2)).unwrap();
    trace_io::write_files(&b, artifacts(5, 400, 2)).unwrap();
    let names: Vec<&str> = manifest.files.iter().map(|e| e.name.as_str()).collect();
    assert_eq!(
        names,
        [
            "capacity.json",
            "drift.csv",
            "measurement.json",
            "queue.csv",
            "requests.csv",
            "slots.csv",
            "waiting_cdf.csv"
        ]
    );
    assert_eq!(trace_io::verify_manifest(&a).unwrap(), manifest);
    for entry in &manifest.files {
        let x = std::fs::read(a.join(&entry.name)).unwrap();
        let y = std::fs::read(b.join(&entry.name)).unwrap();
        assert_eq!(x, y, "{} differs between identical runs", entry.name);
    }
    assert_eq!(std::fs::read(a.join("manifest.json")).unwrap(), std::fs::read(b.join("manifest.json")).unwrap());

    std::fs::write(a.join("queue.csv"), b"slot,time_seconds,queue_len\n").unwrap();
    assert!(trace_io::verify_manifest(&a).is_err());
}

#[test]
fn emitted_csvs_parse_back() {
    let files = artifacts(9, 300, 1);
    let get = |name: &str| &files.iter().find(|(n, _)| n == name).unwrap().1;
    let mut rdr = csv::Reader::from_reader(get("requests.csv").as_slice());
    #[derive(serde::Deserialize)]
    struct Req {
        id: u64,
        prompt_len: u64,
        output_len: u64,
        arrival_slot: u64,
        first_service_slot: Option<u64>,
        completion_slot: Option<u64>,
    }
    let rows: Vec<Req> = rdr.deserialize().collect::<Result<_, _>>().unwrap();
    assert_eq!(rows.len(), 300);
    for (i, r) in rows.iter().enumerate() {
        assert_eq!(r.id, i as u64);
        assert!(r.prompt_len >= 10 && r.output_len >= 10);
        assert!(r.first_service_slot.unwrap() >= r.arrival_slot);
        assert!(r.completion_slot.unwrap() > r.first_service_slot.unwrap());
    }
    #[derive(serde::Deserialize)]
    struct Drift {
        replica: usize,
        slot: u64,
        outstanding_demand: u64,
        memory_used: u64,
        new_demand: u64,
        residual: i64,
    }
    let drift: Vec<Drift> = csv::Reader::from_reader(get("drift.csv").as_slice())
        .deserialize()
        .collect::<Result<_, _>>()
        .unwrap();
    for w in drift.windows(2) {
        assert_eq!((w[0].replica, w[0].slot + 1), (w[1].replica, w[1].slot));
        assert_eq!(
            w[1].outstanding_demand as i128,
            w[0].outstanding_demand as i128 - w[0].memory_used as i128 + w[0].new_demand as i128
        );
    }
    assert!(drift.iter().all(|d| d.residual == 0));
    let mut cdf = csv::Reader::from_reader(get("waiting_cdf.csv").as_slice());
    let pts: Vec<(f64, f64)> = cdf.deserialize().collect::<Result<_, _>>().unwrap();
    assert!((pts.last().unwrap().1 - 1.0).abs() < 1e-12);
    assert!(pts.windows(2).all(|w| w[0].0 < w[1].0 && w[0].1 < w[1].1));
}

#[test]
fn empty_run_writes_headers_only() {
    let capacity = analysis::capacity_report(&pd11(), M, B).unwrap();
    let cdf = analysis::waiting_time_cdf(&[], B);
    let files = trace_io::render_results(&ResultSet {
        capacity: &capacity,
        measurement: None,
        slots: &[],
        requests: &[],
        queue: &[],
        slot_seconds: B,
        waiting_cdf: &cdf,
        drift: &[],
    });
    for (name, bytes) in &files {
        let text = std::str::from_utf8(bytes).unwrap();
        if name.ends_with(".csv") {
            assert_eq!(text.lines().count(), 1, "{name}: {text}");
        }
    }
    let dir = tempfile::tempdir().unwrap();
    let manifest = trace_io::write_files(dir.path(), files).unwrap();
    assert_eq!(manifest.get("measurement.json").unwrap().bytes, 5);
    assert_eq!(
        std::fs::read_to_string(dir.path().join("queue.csv")).unwrap(),
        "slot,time_seconds,queue_len\n"
    );
}

#[test]
fn long_context_trace_shape() {
    // 503 rows shaped like a long-context benchmark: long prompts, short answers.
    let rows: Vec<TraceRow> = (0..503u64)
        .map(|i| TraceRow {
            arrival_time: None,
            prompt_len: 8_000 + (i * 7919) % 120_000,
            output_len: 1 + (i * 31) % 200,
        })
        .collect();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("longbench.csv");
    trace_io::write_request_trace(&path, &RequestTrace::new(rows).unwrap()).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    assert!(text.starts_with("prompt_len,output_len\n"));
    let trace = trace_io::load_request_trace(&path).unwrap();
    assert_eq!(trace.len(), 503);
    assert!(trace.rows().iter().all(|r| r.prompt_len >= 1 && r.output_len >= 1));
    let (pmf, test) = trace_io::fit_empirical_pmf(&trace, 0.8, 0).unwrap();
    assert_eq!(test.len(), 101);
    let total: f64 = pmf.entries().iter().map(|e| e.probability).sum();
    assert!((total - 1.0).abs() < 1e-9);

    let jsonl = dir.path().join("longbench.jsonl");
    trace_io::write_request_trace(&jsonl, &trace).unwrap();
    assert_eq!(trace_io::load_request_trace(&jsonl).unwrap(), trace);
}
