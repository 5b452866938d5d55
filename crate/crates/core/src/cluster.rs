//! Identical replicas behind a stateless round-robin router.
//!
//! One global arrival stream is generated at the cluster rate and request `i`
//! is sent to replica `i mod N`. All replicas share the slot grid.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sim::{self, ArrivalSource, ReplicaRun, RequestRecord, SimConfig, SlotObserver, Termination};
use crate::workload::WorkloadSpec;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Routing {
    #[default]
    RoundRobin,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterConfig {
    pub replicas: usize,
    #[serde(default)]
    pub routing: Routing,
    /// Shared engine settings; `lambda` is the cluster-wide rate.
    pub sim: SimConfig,
}

impl ClusterConfig {
    pub fn new(replicas: usize, sim: SimConfig) -> Result<Self> {
        if replicas == 0 {
            return Err(Error::domain("a cluster needs at least one replica"));
        }
        Ok(Self {
            replicas,
            routing: Routing::RoundRobin,
            sim,
        })
    }
}

/// Replica that serves the `ordinal`-th request.
pub fn route(ordinal: u64, replicas: usize) -> usize {
    assert!(replicas >= 1, "route needs at least one replica");
    (ordinal % replicas as u64) as usize
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterOutcome {
    pub replicas: Vec<ReplicaRun>,
    /// All requests in arrival order.
    pub requests: Vec<RequestRecord>,
    /// Sum of replica queue lengths per slot.
    pub aggregate_queue: Vec<u64>,
    pub termination: Termination,
    pub last_arrival_slot: u64,
}

impl ClusterOutcome {
    pub fn completed(&self) -> u64 {
        self.requests.iter().filter(|r| r.completion_slot.is_some()).count() as u64
    }

    pub fn assigned_counts(&self) -> Vec<u64> {
        self.replicas.iter().map(|r| r.requests.len() as u64).collect()
    }
}

pub fn run_cluster(cfg: &ClusterConfig, spec: &WorkloadSpec, seed: u64) -> Result<ClusterOutcome> {
    let mut observers = vec![(); cfg.replicas];
    run_cluster_with(cfg, ArrivalSource::Synthetic { spec, seed }, &mut observers)
}

/// Runs the cluster with one observer per replica.
pub fn run_cluster_with<O: SlotObserver>(
    cfg: &ClusterConfig,
    source: ArrivalSource<'_>,
    observers: &mut [O],
) -> Result<ClusterOutcome> {
    if cfg.replicas == 0 {
        return Err(Error::domain("a cluster needs at least one replica"));
    }
    if observers.len() != cfg.replicas {
        return Err(Error::domain(format!(
            "{} observers for {} replicas",
            observers.len(),
            cfg.replicas
        )));
    }
    let run = sim::drive(&cfg.sim, source, cfg.replicas, observers)?;
    let n_slots = run.engines.first().map_or(0, |(s, _)| s.len());
    let mut aggregate_queue = vec![0; n_slots];
    let mut requests = Vec::new();
    let mut replicas = Vec::with_capacity(cfg.replicas);
    for (slots, recs) in run.engines {
        for (agg, s) in aggregate_queue.iter_mut().zip(&slots) {
            *agg += s.queue_len;
        }
        requests.extend_from_slice(&recs);
        replicas.push(ReplicaRun {
            slots,
            requests: recs,
            termination: run.termination,
            last_arrival_slot: run.last_arrival_slot,
        });
    }
    requests.sort_by_key(|r| r.id);
    Ok(ClusterOutcome {
        replicas,
        requests,
        aggregate_queue,
        termination: run.termination,
        last_arrival_slot: run.last_arrival_slot,
    })
}
