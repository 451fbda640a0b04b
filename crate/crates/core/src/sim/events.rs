//! Structured event-log records. A run's log is enough to replay its rosters
//! and offered load against the oracle.

use serde::{Deserialize, Serialize};

use crate::capacity::UpdateReason;
use crate::cluster::TransitionRecord;
use crate::model::{FunctionId, InstanceId, InstanceState, NodeId};
use crate::predictor::monitor::Verdict;
use crate::scheduler::Path;
use crate::time::SimTime;

/// Why an instance was placed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StartKind {
    /// A new instance created for a scale-up.
    Real,
    /// A cached instance re-routed to saturated.
    Logical,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScalingAction {
    Release,
    LogicalStart,
    RealColdStart,
    Migrate,
    Evict,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeAction {
    Added,
    Removed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum EventRecord {
    /// Offered load of a function changes.
    Load {
        t_us: SimTime,
        function: FunctionId,
        rps: f64,
    },
    /// Instance lifecycle step; `from` is absent on creation.
    Transition {
        t_us: SimTime,
        instance: InstanceId,
        function: FunctionId,
        node: NodeId,
        from: Option<InstanceState>,
        to: InstanceState,
    },
    /// Instances admitted on one node by one decision.
    Schedule {
        t_us: SimTime,
        function: FunctionId,
        requested: u32,
        node: NodeId,
        admitted: u32,
        path: Path,
        kind: StartKind,
        critical_path_ms: f64,
        inference_events: u32,
    },
    Scaling {
        t_us: SimTime,
        function: FunctionId,
        action: ScalingAction,
        node: NodeId,
        instance: InstanceId,
        latency_ms: f64,
    },
    /// An asynchronous capacity-table refresh landed.
    Update {
        t_us: SimTime,
        node: NodeId,
        reason: UpdateReason,
        enqueued_us: SimTime,
        rows: usize,
        cost_ms: f64,
    },
    Node {
        t_us: SimTime,
        node: NodeId,
        action: NodeAction,
        conservative: bool,
    },
    /// Non-trivial predictability-monitor outcome.
    Verdict {
        t_us: SimTime,
        function: FunctionId,
        verdict: Verdict,
    },
}

impl EventRecord {
    pub fn time(&self) -> SimTime {
        match self {
            EventRecord::Load { t_us, .. }
            | EventRecord::Transition { t_us, .. }
            | EventRecord::Schedule { t_us, .. }
            | EventRecord::Scaling { t_us, .. }
            | EventRecord::Update { t_us, .. }
            | EventRecord::Node { t_us, .. }
            | EventRecord::Verdict { t_us, .. } => *t_us,
        }
    }
}

impl From<TransitionRecord> for EventRecord {
    fn from(t: TransitionRecord) -> Self {
        EventRecord::Transition {
            t_us: t.time,
            instance: t.instance,
            function: t.function,
            node: t.node,
            from: t.from,
            to: t.to,
        }
    }
}
