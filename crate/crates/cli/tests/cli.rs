use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn llmq(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_llmq"))
        .args(args)
        .output()
        .expect("run llmq")
}

fn ok_json(args: &[&str]) -> Value {
    let out = llmq(args);
    assert!(
        out.status.success(),
        "llmq {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).expect("json on stdout")
}

fn json_lines(out: &Output) -> Vec<Value> {
    String::from_utf8_lossy(&out.stdout)
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

fn mu(v: &Value) -> f64 {
    v["capacity"]["mu_theory"].as_f64().unwrap()
}

#[test]
fn theory_presets() {
    let v = ok_json(&["theory", "--workload", "pd-1-1", "--memory", "131000", "--chunk", "512", "--slot-seconds", "0.0372"]);
    assert!((mu(&v) - 3.263).abs() / 3.263 < 0.01);
    let v = ok_json(&["theory", "--workload", "pd-1-2", "--slot-seconds", "0.0337"]);
    assert!((mu(&v) - 2.902).abs() / 2.902 < 0.01);
    let delta = v["capacity"]["delta"].as_f64().unwrap();
    assert!((delta - 3199.0 / 131000.0).abs() < 1e-12);
}

#[test]
fn theory_point_mass_files() {
    let dir = tempfile::tempdir().unwrap();
    let json = dir.path().join("point.json");
    std::fs::write(
        &json,
        r#"{"kind":"empirical-pmf","pmf":[{"prompt_len":512,"output_len":1,"probability":1.0}]}"#,
    )
    .unwrap();
    let csv = dir.path().join("point.csv");
    std::fs::write(&csv, "prompt_len,output_len\n512,1\n").unwrap();
    for path in [&json, &csv] {
        let v = ok_json(&["theory", "--workload", path.to_str().unwrap(), "--memory", "1025", "--slot-seconds", "1.0"]);
        assert!((mu(&v) - 1.0).abs() < 1e-12, "{v}");
        assert!((v["capacity"]["delta"].as_f64().unwrap() - 513.0 / 1025.0).abs() < 1e-12);
    }
}

#[test]
fn theory_mixture_and_verdicts() {
    let v = ok_json(&[
        "theory",
        "--workload",
        "0.5*pd-2-1+0.5*pd-1-2",
        "--segment-slot-seconds",
        "0.0430,0.0337",
        "--lambda",
        "1,3.3,5",
    ]);
    let segs = v["capacity"]["segments"].as_array().unwrap();
    assert_eq!(segs.len(), 2);
    let expected = 2.0 / (1.0 / segs[0]["mu"].as_f64().unwrap() + 1.0 / segs[1]["mu"].as_f64().unwrap());
    assert!((mu(&v) - expected).abs() < 1e-12);
    let verdicts: Vec<&str> = v["verdicts"].as_array().unwrap().iter().map(|x| x["verdict"].as_str().unwrap()).collect();
    assert_eq!(verdicts, ["stable", "gray-zone", "overloaded"]);
}

#[test]
fn estimate_b_methods() {
    let dir = tempfile::tempdir().unwrap();
    let bt = dir.path().join("bt.csv");
    let p = bt.to_str().unwrap();
    std::fs::write(&bt, "batch_seconds\n0.03\n0.0372\n0.05\n").unwrap();
    assert_eq!(ok_json(&["estimate-b", "--batch-times", p])["slot_seconds"], 0.0372);
    let mut text = "batch_seconds\n".to_string();
    for _ in 0..9 {
        text.push_str("0.01\n");
    }
    text.push_str("10.0\n");
    std::fs::write(&bt, text).unwrap();
    let v = ok_json(&["estimate-b", "--batch-times", p, "--estimator", "trimmed-mean:0.10"]);
    assert!((v["slot_seconds"].as_f64().unwrap() - 0.01).abs() < 1e-15);
    assert_eq!(v["method"], "trimmed-mean:0.1");

    std::fs::write(&bt, "batch_seconds\n").unwrap();
    let out = llmq(&["estimate-b", "--batch-times", p]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("empty"));
}

#[test]
fn plan_counts() {
    let out = llmq(&["plan", "--workload", "pd-1-1", "--slot-seconds", "0.0372", "--lambda", "26.1,30", "--rho", "0.9"]);
    assert!(out.status.success());
    let plans = json_lines(&out);
    assert_eq!(plans[0]["gpus"], 9);
    assert_eq!(plans[1]["gpus"], 11);
    let out = llmq(&["plan", "--workload", "pd-1-1", "--slot-seconds", "0.0372", "--lambda", "26.1"]);
    assert_eq!(json_lines(&out)[0]["gpus"], 8);
}

fn write_json(path: &Path, key: &str, value: f64) {
    std::fs::write(path, format!("{{\"{key}\": {value}}}")).unwrap();
}

#[test]
fn validate_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let t = dir.path().join("t.json");
    let m = dir.path().join("m.json");
    let (ts, ms) = (t.to_str().unwrap(), m.to_str().unwrap());

    write_json(&t, "mu_theory", 3.263);
    write_json(&m, "mu_measured", 3.387);
    let out = llmq(&["validate", "--theory", ts, "--measurement", ms]);
    assert_eq!(out.status.code(), Some(0));
    let v: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!((v["gap"].as_f64().unwrap() - 0.0366).abs() < 5e-5);
    assert_eq!(v["pass"], true);

    write_json(&m, "mu_measured", 3.263);
    let v: Value = serde_json::from_slice(&llmq(&["validate", "--theory", ts, "--measurement", ms]).stdout).unwrap();
    assert_eq!(v["gap"], 0.0);

    write_json(&t, "mu_theory", 5.0);
    write_json(&m, "mu_measured", 2.5);
    let out = llmq(&["validate", "--theory", ts, "--measurement", ms, "--tolerance", "0.10"]);
    assert_eq!(out.status.code(), Some(3));
    let v: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["gap"], 1.0);
    assert_eq!(v["pass"], false);

    std::fs::write(&m, "not json").unwrap();
    assert_eq!(llmq(&["validate", "--theory", ts, "--measurement", ms]).status.code(), Some(1));
    let missing = dir.path().join("missing.json");
    assert_eq!(
        llmq(&["validate", "--theory", missing.to_str().unwrap(), "--measurement", ms]).status.code(),
        Some(2)
    );
}

#[test]
fn usage_errors() {
    assert_eq!(llmq(&["--help"]).status.code(), Some(0));
    assert_eq!(llmq(&["--version"]).status.code(), Some(0));
    assert_eq!(llmq(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(llmq(&["theory", "--memory", "lots"]).status.code(), Some(1));
    assert_eq!(llmq(&["theory", "--workload", "pd-7-7", "--slot-seconds", "1"]).status.code(), Some(1));
    assert_eq!(llmq(&["theory", "--workload", "pd-1-1"]).status.code(), Some(1));
    let out = llmq(&["theory", "--workload", "pd-1-1", "--slot-seconds", "0.0372", "--memory", "3000"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("3200"));
    let out = llmq(&["theory", "--workload", "/nonexistent/trace.csv", "--slot-seconds", "1"]);
    assert_eq!(out.status.code(), Some(2));
    let out = llmq(&["simulate", "--workload", "pd-1-1", "--slot-seconds", "0.0372", "--lambda", "1"]);
    assert_eq!(out.status.code(), Some(1), "missing output directory");
}

#[test]
fn config_file_with_flag_override() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    std::fs::write(&cfg, "workload = \"pd-1-1\"\nslot_seconds = 0.0372\nmemory = 65500\n").unwrap();
    let c = cfg.to_str().unwrap();
    let half = mu(&ok_json(&["theory", "--config", c]));
    let full = mu(&ok_json(&["theory", "--config", c, "--memory", "131000"]));
    assert!((full / half - 2.0).abs() < 1e-12);

    std::fs::write(&cfg, "workload = \"pd-1-1\"\nslot_secs = 0.0372\n").unwrap();
    let out = llmq(&["theory", "--config", c]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("slot_secs"));
}

#[test]
fn config_paths_are_relative_to_the_file() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::create_dir(dir.path().join("data")).unwrap();
    std::fs::write(dir.path().join("data/bt.csv"), "batch_seconds\n0.5\n1.5\n1.0\n").unwrap();
    std::fs::write(dir.path().join("data/t.csv"), "prompt_len,output_len\n512,1\n").unwrap();
    let cfg = dir.path().join("run.toml");
    std::fs::write(&cfg, "workload = \"data/t.csv\"\nbatch_times = \"data/bt.csv\"\nmemory = 1025\n").unwrap();
    let v = ok_json(&["theory", "--config", cfg.to_str().unwrap()]);
    assert!((mu(&v) - 1.0).abs() < 1e-12);
}

#[test]
fn simulate_labels_and_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("light");
    let out = llmq(&[
        "simulate", "--workload", "pd-1-1", "--slot-seconds", "0.0372", "--lambda", "1", "--requests", "3000",
        "--output", out_dir.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let run = &json_lines(&out)[0];
    assert_eq!(run["label"], "stable");
    assert_eq!(run["verdict"], "stable");
    assert_eq!(run["termination"], "drained");
    assert!(run["max_queue"].as_u64().unwrap() <= 5);
    for name in [
        "capacity.json", "measurement.json", "slots.csv", "requests.csv", "queue.csv", "waiting_cdf.csv", "drift.csv",
        "manifest.json", "config.toml", "summary.json",
    ] {
        assert!(out_dir.join(name).is_file(), "{name} missing");
    }
    let summary: Value = serde_json::from_str(&std::fs::read_to_string(out_dir.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["completed"], 3000);

    let cluster_dir = dir.path().join("cluster");
    let out = llmq(&[
        "simulate", "--workload", "pd-1-1", "--slot-seconds", "0.0372", "--lambda", "40", "--replicas", "8",
        "--requests", "12000", "--output", cluster_dir.to_str().unwrap(),
    ]);
    assert!(out.status.success());
    let run = &json_lines(&out)[0];
    assert_eq!(run["label"], "overloaded");
    assert_eq!(run["replicas"], 8);
    let slots = std::fs::read_to_string(cluster_dir.join("slots.csv")).unwrap();
    assert!(slots.lines().skip(1).any(|l| l.starts_with("7,")));
}

#[test]
fn sweep_matches_individual_runs() {
    let dir = tempfile::tempdir().unwrap();
    let sweep = dir.path().join("sweep");
    let base = ["simulate", "--workload", "pd-1-1", "--slot-seconds", "0.0372", "--requests", "1500", "--seed", "3"];
    let mut args = base.to_vec();
    args.extend(["--lambda", "2,6", "--output", sweep.to_str().unwrap()]);
    let out = llmq(&args);
    assert!(out.status.success());
    let lines = json_lines(&out);
    assert_eq!(lines.len(), 2);
    assert_eq!(lines[0]["lambda"], 2.0);

    let single = dir.path().join("single");
    let mut args = base.to_vec();
    args.extend(["--lambda", "6", "--output", single.to_str().unwrap()]);
    assert!(llmq(&args).status.success());
    for name in ["manifest.json", "slots.csv", "requests.csv", "drift.csv", "config.toml"] {
        assert_eq!(
            std::fs::read(sweep.join("lambda-6").join(name)).unwrap(),
            std::fs::read(single.join(name)).unwrap(),
            "{name}"
        );
    }
}

#[test]
fn echoed_config_reproduces_run() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bt.csv"), "batch_seconds\n0.04\n0.0372\n0.03\n").unwrap();
    let a = dir.path().join("a");
    let out = llmq(&[
        "simulate", "--workload", "uniform(10,800,10,800)", "--batch-times", dir.path().join("bt.csv").to_str().unwrap(),
        "--lambda", "7", "--requests", "800", "--policy", "sjf", "--process", "binomial", "--output", a.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let echoed = std::fs::read_to_string(a.join("config.toml")).unwrap();
    assert!(echoed.contains("slot_seconds = 0.0372"));
    assert!(echoed.contains("policy = \"sjf\""));
    assert!(!echoed.contains("output"));
    let b = dir.path().join("b");
    let out = llmq(&["simulate", "--config", a.join("config.toml").to_str().unwrap(), "--output", b.to_str().unwrap()]);
    assert!(out.status.success());
    assert_eq!(std::fs::read(a.join("manifest.json")).unwrap(), std::fs::read(b.join("manifest.json")).unwrap());
}

#[test]
fn trace_arrival_modes() {
    let dir = tempfile::tempdir().unwrap();
    let trace = dir.path().join("trace.csv");
    let mut text = String::from("arrival_time,prompt_len,output_len\n");
    for i in 0..200u64 {
        text.push_str(&format!("{},{},{}\n", i as f64 * 0.25, 100 + (i * 37) % 900, 1 + (i * 13) % 300));
    }
    std::fs::write(&trace, text).unwrap();
    let t = trace.to_str().unwrap();
    let common = ["simulate", "--workload", t, "--slot-seconds", "0.05", "--memory", "20000", "--train-split", "0.8"];

    let times = dir.path().join("times");
    let mut args = common.to_vec();
    args.extend(["--arrivals", "trace-times", "--lambda", "4", "--output", times.to_str().unwrap()]);
    let out = llmq(&args);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let run = &json_lines(&out)[0];
    assert_eq!(run["total_requests"], 40);
    let requests = std::fs::read_to_string(times.join("requests.csv")).unwrap();
    let arrivals: Vec<u64> = requests
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(3).unwrap().parse().unwrap())
        .collect();
    assert_eq!(arrivals.len(), 40);
    assert_eq!(arrivals[0], 0);
    assert!(arrivals.iter().all(|a| a % 5 == 0), "quarter-second gaps land on every fifth slot");

    let paced = dir.path().join("paced");
    let mut args = common.to_vec();
    args.extend(["--arrivals", "trace", "--lambda", "20", "--output", paced.to_str().unwrap()]);
    let out = llmq(&args);
    assert!(out.status.success());
    assert_eq!(json_lines(&out)[0]["completed"], 40);

    let out = llmq(&["simulate", "--workload", "pd-1-1", "--slot-seconds", "0.05", "--arrivals", "trace", "--lambda", "1",
        "--output", dir.path().join("x").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn resident_memory_mode_reports_deadlock() {
    let dir = tempfile::tempdir().unwrap();
    let out = llmq(&[
        "simulate", "--workload", "uniform(4,4,8,8)", "--memory", "30", "--chunk", "4", "--slot-seconds", "1",
        "--lambda", "3", "--requests", "3", "--process", "deterministic", "--swap", "none", "--output",
        dir.path().join("d").to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(json_lines(&out)[0]["termination"], "deadlock");
}
