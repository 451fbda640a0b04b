//! Scenario configuration. Every field has a default, so a partial document
//! deserializes into a complete scenario.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::trace::TraceConfig;
use crate::oracle::{GroundTruthRanges, OracleParams};
use crate::predictor::{ForestParams, InferenceCostModel};
use crate::scaling::ScalingConfig;
use crate::scheduler::{Policy, SchedulerConfig};
use super::SimError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub seed: u64,
    pub horizon_s: f64,
    /// Initial period excluded from every metric.
    pub warmup_s: f64,
    /// QoS evaluation window.
    pub window_s: f64,
    pub policy: Policy,
    pub oracle: OracleParams,
    pub functions: FunctionsConfig,
    pub cluster: ClusterConfig,
    pub scheduler: SchedulerConfig,
    pub predictor: PredictorConfig,
    pub scaling: ScalingConfig,
    pub trace: TraceConfig,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            horizon_s: 3600.0,
            warmup_s: 300.0,
            window_s: 1.0,
            policy: Policy::Capsched,
            oracle: OracleParams::default(),
            functions: FunctionsConfig::default(),
            cluster: ClusterConfig::default(),
            scheduler: SchedulerConfig::default(),
            predictor: PredictorConfig::default(),
            scaling: ScalingConfig::default(),
            trace: TraceConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FunctionsConfig {
    pub count: usize,
    pub saturated_load_rps: f64,
    pub qos_multiplier: f64,
    /// Per-instance reservation, in the units of `cluster.node_capacity`.
    pub configured_resources: Vec<f64>,
    pub max_capacity_bound: u32,
    pub ground_truth: GroundTruthRanges,
}

impl Default for FunctionsConfig {
    fn default() -> Self {
        Self {
            count: 6,
            saturated_load_rps: 10.0,
            qos_multiplier: 1.2,
            configured_resources: vec![8.0, 8.0],
            max_capacity_bound: 32,
            ground_truth: GroundTruthRanges::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClusterConfig {
    pub node_capacity: Vec<f64>,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        Self {
            node_capacity: vec![48.0, 48.0],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PredictorKind {
    /// Regression forest trained on profiled colocations.
    Forest,
    /// The contention oracle itself.
    Perfect,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MonitorConfig {
    pub enabled: bool,
    pub error_threshold: f64,
    pub consecutive_bad_limit: u32,
    pub retrain_limit: u32,
}

impl Default for MonitorConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            error_threshold: 0.15,
            consecutive_bad_limit: 3,
            retrain_limit: 5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PredictorConfig {
    pub kind: PredictorKind,
    pub training_samples: usize,
    pub train_fraction: f64,
    /// Weight of cached neighbours in the pooled features; the oracle's
    /// cached-demand factor when absent.
    pub gamma_feat: Option<f64>,
    pub forest: ForestParams,
    pub cost: InferenceCostModel,
    pub monitor: MonitorConfig,
}

impl Default for PredictorConfig {
    fn default() -> Self {
        Self {
            kind: PredictorKind::Forest,
            training_samples: 2000,
            train_fraction: 0.9,
            gamma_feat: None,
            forest: ForestParams::default(),
            cost: InferenceCostModel::default(),
            monitor: MonitorConfig::default(),
        }
    }
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: &'static str| Err(SimError::Config(m));
        if !(self.horizon_s >= 0.0 && self.horizon_s.is_finite()) {
            return bad("horizon_s must be a non-negative number");
        }
        if !(self.warmup_s >= 0.0 && self.warmup_s <= self.horizon_s) {
            return bad("warmup_s must lie in [0, horizon_s]");
        }
        if !(self.window_s > 0.0) {
            return bad("window_s must be positive");
        }
        self.oracle.validate()?;
        let f = &self.functions;
        if f.count == 0 {
            return bad("functions.count must be positive");
        }
        if !(f.saturated_load_rps > 0.0) {
            return bad("functions.saturated_load_rps must be positive");
        }
        if !(f.qos_multiplier >= 1.0) {
            return bad("functions.qos_multiplier must be at least 1");
        }
        if f.max_capacity_bound == 0 {
            return bad("functions.max_capacity_bound must be positive");
        }
        if f.configured_resources.len() != self.cluster.node_capacity.len() {
            return bad("functions.configured_resources and cluster.node_capacity differ in length");
        }
        if f.configured_resources.iter().any(|r| !(*r > 0.0)) || self.cluster.node_capacity.iter().any(|r| !(*r > 0.0)) {
            return bad("resource vectors must be positive");
        }
        if f
            .configured_resources
            .iter()
            .zip(&self.cluster.node_capacity)
            .any(|(c, n)| c > n)
        {
            return bad("one instance must fit on an empty node");
        }
        let p = &self.predictor;
        if p.training_samples < 10 {
            return bad("predictor.training_samples must be at least 10");
        }
        if !(p.train_fraction > 0.0 && p.train_fraction < 1.0) {
            return bad("predictor.train_fraction must lie in (0, 1)");
        }
        p.cost.validate().map_err(|_| SimError::Config("predictor costs must be non-negative"))?;
        let s = &self.scaling;
        if !(s.release_duration_s >= 0.0 && s.keep_alive_s >= 0.0) {
            return bad("scaling durations must be non-negative");
        }
        if !(s.logical_start_ms >= 0.0 && s.logical_start_ms < 1.0) {
            return bad("scaling.logical_start_ms must lie in [0, 1)");
        }
        let sc = &self.scheduler;
        if !(sc.table_lookup_ms >= 0.0 && sc.kube_decision_ms >= 0.0 && sc.provision_delay_ms >= 0.0) {
            return bad("scheduler costs must be non-negative");
        }
        self.trace.validate()
    }

    pub fn gamma_feat(&self) -> f64 {
        self.predictor.gamma_feat.unwrap_or(self.oracle.gamma)
    }
}
