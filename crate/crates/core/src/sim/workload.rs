//! Function population of a scenario: hidden ground truths registered with
//! the oracle and the profiled specs the scheduler sees.

use alloc::format;
use alloc::vec::Vec;

use super::config::ScenarioConfig;
use super::SimError;
use crate::model::{validate_spec, FunctionId, FunctionRegistry, FunctionSpec, Resources};
use crate::oracle::{ContentionOracle, FunctionGroundTruth};
use crate::rng;

#[derive(Clone, Debug, PartialEq)]
pub struct Workload {
    pub oracle: ContentionOracle,
    pub specs: FunctionRegistry,
}

impl Workload {
    pub fn ids(&self) -> Vec<FunctionId> {
        self.specs.keys().cloned().collect()
    }
}

pub fn function_id(index: usize) -> FunctionId {
    FunctionId::new(format!("f{index:02}"))
}

/// Draws `count` ground truths from the oracle seed and profiles each
/// function once in isolation.
pub fn build_workload(cfg: &ScenarioConfig, count: usize) -> Result<Workload, SimError> {
    let mut oracle = ContentionOracle::new(cfg.oracle.clone())?;
    let mut truth_rng = rng::stream(cfg.oracle.seed, "ground-truth");
    let mut profile_rng = rng::stream(cfg.oracle.seed, "profiling");
    let mut specs = FunctionRegistry::new();
    for i in 0..count {
        let id = function_id(i);
        let truth = FunctionGroundTruth::sample(
            i,
            cfg.oracle.resource_axes,
            &cfg.functions.ground_truth,
            &mut truth_rng,
        );
        oracle.register(id.clone(), truth.clone())?;
        let (profile, _observed_solo) = oracle.solo_profile(&id, &mut profile_rng)?;
        let spec = FunctionSpec {
            id: id.clone(),
            solo_latency_ms: truth.solo_latency_ms,
            profile,
            saturated_load_rps: cfg.functions.saturated_load_rps,
            qos_multiplier: cfg.functions.qos_multiplier,
            configured_resources: Resources(cfg.functions.configured_resources.clone()),
            max_capacity_bound: cfg.functions.max_capacity_bound,
        };
        let demand = demand_in_node_units(&truth, &cfg.cluster.node_capacity);
        let spec = validate_spec(spec, &demand).map_err(|errs| SimError::InvalidSpec(id.clone(), errs))?;
        specs.insert(id, spec);
    }
    Ok(Workload { oracle, specs })
}

/// Oracle demand on the configured axes, in node-capacity units.
fn demand_in_node_units(truth: &FunctionGroundTruth, node_capacity: &[f64]) -> Resources {
    Resources(
        node_capacity
            .iter()
            .enumerate()
            .map(|(r, cap)| truth.demand.get(r).copied().unwrap_or(0.0) * cap)
            .collect(),
    )
}
