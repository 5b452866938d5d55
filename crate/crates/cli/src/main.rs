//! `llmq`: capacity planning and simulation for memory-bound LLM serving.

mod commands;
mod config;
mod error;

use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::Serialize;

use llmq_core::sim::{ArrivalProcess, Policy, SwapMode};

use crate::config::{ArrivalMode, Format, OneOrMany, RunConfig};
use crate::error::{CliError, CliResult};

#[derive(Parser, Debug)]
#[command(name = "llmq", version, about = "Memory-aware queueing model of LLM inference serving")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Stable service rate and stability thresholds of one replica.
    Theory {
        #[command(flatten)]
        model: ModelArgs,
        /// Classify these arrival rates (requests/s).
        #[arg(long, value_delimiter = ',')]
        lambda: Option<Vec<f64>>,
        /// Also write capacity.json and a manifest here.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Run the slot simulator and write every series.
    Simulate {
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        sim: SimArgs,
    },
    /// Estimate the slot duration from a batch-time log.
    EstimateB {
        #[arg(long)]
        config: Option<PathBuf>,
        /// CSV with a `batch_seconds` column.
        #[arg(long)]
        batch_times: Option<PathBuf>,
        /// `median`, `mean`, `trimmed-mean` or `trimmed-mean:<fraction>`.
        #[arg(long)]
        estimator: Option<String>,
    },
    /// Number of replicas needed for a target load.
    Plan {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, value_delimiter = ',')]
        lambda: Option<Vec<f64>>,
        /// Target utilization in (0, 1].
        #[arg(long)]
        rho: Option<f64>,
    },
    /// Compare a theoretical and a measured rate.
    Validate {
        /// JSON file with `mu_theory`, e.g. capacity.json.
        #[arg(long)]
        theory: PathBuf,
        /// JSON file with `mu_measured`, e.g. measurement.json.
        #[arg(long)]
        measurement: PathBuf,
        #[arg(long, default_value_t = 0.10)]
        tolerance: f64,
        /// Multiply the per-replica theoretical rate by this many replicas.
        #[arg(long, default_value_t = 1)]
        replicas: usize,
    },
}

#[derive(Args, Debug, Default)]
struct ModelArgs {
    /// TOML run configuration; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Preset (pd-1-1, pd-2-1, pd-1-2), uniform(s_lo,s_hi,o_lo,o_hi), a trace
    /// (.csv/.jsonl), a workload .json, or a mixture such as 0.5*pd-2-1+0.5*pd-1-2.
    #[arg(long)]
    workload: Option<String>,
    /// KV-cache capacity in tokens.
    #[arg(long)]
    memory: Option<u64>,
    /// Prefill chunk size in tokens.
    #[arg(long)]
    chunk: Option<u64>,
    /// Mean batch processing time in seconds.
    #[arg(long)]
    slot_seconds: Option<f64>,
    /// Per-segment slot durations for mixture workloads.
    #[arg(long, value_delimiter = ',')]
    segment_slot_seconds: Option<Vec<f64>>,
    /// Estimate the slot duration from this batch-time log.
    #[arg(long)]
    batch_times: Option<PathBuf>,
    #[arg(long)]
    estimator: Option<String>,
    /// Fit trace workloads on this fraction of rows; the rest is held out.
    #[arg(long)]
    train_split: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug, Default)]
struct SimArgs {
    /// Arrival rate(s) in requests/s; a list runs a sweep.
    #[arg(long, value_delimiter = ',')]
    lambda: Option<Vec<f64>>,
    #[arg(long)]
    replicas: Option<usize>,
    #[arg(long, value_parser = serde_enum::<Policy>)]
    policy: Option<Policy>,
    /// poisson, binomial or deterministic.
    #[arg(long, value_parser = serde_enum::<ArrivalProcess>)]
    process: Option<ArrivalProcess>,
    /// free: stalled requests release memory; none: they keep it.
    #[arg(long, value_parser = serde_enum::<SwapMode>)]
    swap: Option<SwapMode>,
    #[arg(long, value_enum)]
    arrivals: Option<ArrivalMode>,
    /// Number of synthetic requests.
    #[arg(long)]
    requests: Option<u64>,
    /// Requests excluded at each end of the measurement window.
    #[arg(long)]
    warmup: Option<u64>,
    #[arg(long)]
    slot_cap: Option<u64>,
    /// Queue bound for the stable label.
    #[arg(long)]
    max_queue: Option<u64>,
    #[arg(long, value_enum, value_delimiter = ',')]
    formats: Option<Vec<Format>>,
    #[arg(long)]
    output: Option<PathBuf>,
}

fn serde_enum<T: DeserializeOwned>(s: &str) -> Result<T, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string())).map_err(|e| e.to_string())
}

fn lambda_flag(v: Option<Vec<f64>>) -> Option<OneOrMany> {
    v.map(OneOrMany::Many)
}

impl ModelArgs {
    /// Loads the config file, if any, and overlays the flags.
    fn resolve(self, extra: RunConfig) -> CliResult<RunConfig> {
        let base = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        let flags = RunConfig {
            workload: self.workload,
            memory: self.memory,
            chunk: self.chunk,
            slot_seconds: self.slot_seconds,
            segment_slot_seconds: self.segment_slot_seconds,
            batch_times: self.batch_times,
            estimator: self.estimator,
            train_split: self.train_split,
            seed: self.seed,
            ..extra
        };
        Ok(base.overlay(flags))
    }
}

/// Writes one line to stdout. A reader that hung up early is not an error.
fn emit(line: &str) -> CliResult<()> {
    let mut out = std::io::stdout().lock();
    match writeln!(out, "{line}").and_then(|()| out.flush()) {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(CliError::Io {
            path: PathBuf::from("<stdout>"),
            source: e,
        }),
        _ => Ok(()),
    }
}

fn print_json<T: Serialize>(value: &T) -> CliResult<()> {
    emit(&serde_json::to_string_pretty(value).expect("serializable"))
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Theory { model, lambda, output } => {
            let cfg = model.resolve(RunConfig {
                lambda: lambda_flag(lambda),
                output,
                ..Default::default()
            })?;
            print_json(&commands::theory(&cfg)?)?;
        }
        Command::Simulate { model, sim } => {
            let cfg = model.resolve(RunConfig {
                lambda: lambda_flag(sim.lambda),
                replicas: sim.replicas,
                policy: sim.policy,
                process: sim.process,
                swap: sim.swap,
                arrivals: sim.arrivals,
                total_requests: sim.requests,
                warmup: sim.warmup,
                slot_cap: sim.slot_cap,
                max_queue: sim.max_queue,
                formats: sim.formats,
                output: sim.output,
                ..Default::default()
            })?;
            for run in commands::simulate(&cfg)? {
                emit(&serde_json::to_string(&run).expect("serializable"))?;
            }
        }
        Command::EstimateB {
            config,
            batch_times,
            estimator,
        } => {
            let cfg = ModelArgs {
                config,
                batch_times,
                estimator,
                ..Default::default()
            }
            .resolve(RunConfig::default())?;
            print_json(&commands::estimate_b(&cfg)?)?;
        }
        Command::Plan { model, lambda, rho } => {
            let cfg = model.resolve(RunConfig {
                lambda: lambda_flag(lambda),
                rho,
                ..Default::default()
            })?;
            for p in commands::plan(&cfg)? {
                emit(&serde_json::to_string(&p).expect("serializable"))?;
            }
        }
        Command::Validate {
            theory,
            measurement,
            tolerance,
            replicas,
        } => {
            let out = commands::validate(&theory, &measurement, tolerance, replicas)?;
            print_json(&out)?;
            if !out.pass {
                return Err(CliError::ValidationFailed {
                    gap: out.gap,
                    tolerance,
                });
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("llmq: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
