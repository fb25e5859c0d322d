//! Boots plans, drives scenarios and measures latency on the running
//! system.

mod latency;
mod live;
mod node;
mod remote;
mod scenario;

use std::path::PathBuf;

use thiserror::Error;

pub use latency::{measure_rpc, nearest_rank, Collector, LatencyReport, Quantiles};
pub use live::{run_node, wall_ms, LiveNode};
pub use node::{
    computed_owner, signals_of, AppRuntime, GatewayRuntime, NodeOptions, NodeRuntime, QUERY_CHANNEL,
};
pub use remote::{serve_store, RemoteStore, StoreRouter};
pub use scenario::{
    measure_ingest_latency, run_scenario, run_scenario_with, ComponentReport, ScenarioOptions,
    ScenarioResult, ScenarioRun, DEFAULT_PERIOD_MS,
};

use crate::appmods::AppError;
use crate::gateway::GatewayError;
use crate::rtdb::{Millis, StoreError};
use crate::session::SessionError;

pub const TREND_DIR_ENV: &str = "PLANTBUS_TREND_DIR";

/// `$PLANTBUS_TREND_DIR`, or `./trends`.
pub fn trend_dir_from_env() -> PathBuf {
    std::env::var_os(TREND_DIR_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("trends"))
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum HarnessError {
    #[error("component {component} failed to boot: {reason}")]
    BootFailure { component: String, reason: String },
    #[error("{0}")]
    InvalidArgument(String),
    #[error(transparent)]
    Session(#[from] SessionError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    App(#[from] AppError),
    #[error("measurement stopped after {completed} calls: {source}")]
    Measurement { completed: u64, source: SessionError },
    #[error("echo reply differs from request on call {call}")]
    EchoMismatch { call: u64 },
    #[error("no measurements for {0}")]
    EmptyReport(String),
    #[error("sample {variable}@{timestamp} never became visible")]
    NotVisible { variable: String, timestamp: Millis },
}
