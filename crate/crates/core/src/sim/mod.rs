//! Deterministic discrete-event simulation of a serverless cluster.

pub mod audit;
pub mod config;
pub mod engine;
pub mod events;
pub mod metrics;
pub mod pipeline;
pub mod run;
pub mod trace;
pub mod workload;

use alloc::vec::Vec;

use thiserror::Error;

use crate::capacity::CapacityError;
use crate::cluster::ClusterError;
use crate::scaling::ScalingError;
use crate::scheduler::SchedError;
use crate::model::{FunctionId, SpecViolation};
use crate::oracle::OracleError;
use crate::predictor::PredictorError;

pub use audit::{replay, ReplayReport};
pub use config::ScenarioConfig;
pub use engine::{simulate, Plug, RunOutput};
pub use events::EventRecord;
pub use metrics::MetricsReport;
pub use run::{compare, prepare, prepare_with, run, Comparison, ComparisonRatios, Prepared};
pub use trace::{gen_trace, TraceKind, TraceRecord, TraceSignal};
pub use workload::{build_workload, Workload};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SimError {
    #[error("invalid config: {0}")]
    Config(&'static str),
    #[error("invalid trace: {0}")]
    Trace(&'static str),
    #[error("invalid spec for {0}: {1:?}")]
    InvalidSpec(FunctionId, Vec<SpecViolation>),
    #[error(transparent)]
    Oracle(#[from] OracleError),
    #[error(transparent)]
    Predictor(#[from] PredictorError),
    #[error(transparent)]
    Capacity(#[from] CapacityError),
    #[error(transparent)]
    Schedule(#[from] SchedError),
    #[error(transparent)]
    Scaling(#[from] ScalingError),
    #[error(transparent)]
    Cluster(#[from] ClusterError),
}
