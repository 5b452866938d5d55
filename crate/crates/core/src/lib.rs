//! Memory-aware slotted queueing model of LLM inference serving.
//!
//! A replica processes one mixed batch per slot of `slot_seconds`. Prompts are
//! prefilled in fixed-size chunks and then decoded token by token; every unit of
//! work occupies KV-cache memory equal to the request's context length after the
//! unit completes. The crate provides:
//!
//! * [`workload`]: request-size distributions and per-request memory footprints,
//! * [`sim`]: the single-replica slot engine with work-conserving batching,
//! * [`cluster`]: round-robin replicas behind one arrival stream,
//! * [`analysis`]: stable service rate, stability verdicts, outstanding-demand
//!   drift, rate measurement and robust estimators,
//! * [`trace_io`]: trace ingestion and result artifacts.

pub mod analysis;
pub mod cluster;
pub mod error;
pub mod sim;
pub mod trace_io;
pub mod workload;

pub use analysis::{CapacityReport, DriftSeries, MeasurementReport, Verdict};
pub use cluster::{ClusterConfig, ClusterOutcome};
pub use error::{Error, Result};
pub use sim::{
    ArrivalProcess, EngineConfig, EngineState, Policy, ReplicaRun, RequestRecord, RequestState,
    SimConfig, SlotOutcome, SwapMode,
};
pub use workload::{EmpiricalPmf, RequestSample, Workload, WorkloadSpec};
pub use trace_io::{BatchTimeTrace, Estimator, Manifest, RequestTrace, TraceFormat, TraceRow};
