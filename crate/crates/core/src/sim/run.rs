//! Scenario entry points: preparation, single-policy runs with paired
//! density normalization, and the three-way policy comparison.

use alloc::collections::BTreeMap;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::config::{PredictorKind, ScenarioConfig};
use super::engine::{simulate, Plug, RunOutput};
use super::events::EventRecord;
use super::metrics::MetricsReport;
use super::pipeline::{train_pipeline, training_split, AccuracyReport};
use super::trace::{gen_trace, TraceSignal};
use super::workload::{build_workload, Workload};
use super::SimError;
use crate::predictor::{ForestModel, IncrementalLearner};
use crate::scheduler::Policy;

/// Everything a run needs besides the policy.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub workload: Workload,
    pub trace: TraceSignal,
    pub plug: Plug,
    /// Held-out accuracy when the forest was trained here.
    pub accuracy: Option<AccuracyReport>,
}

/// The scenario's trace, derived from the run seed.
pub fn scenario_trace(cfg: &ScenarioConfig, workload: &Workload) -> Result<TraceSignal, SimError> {
    let horizon_ms = libm::round(cfg.horizon_s * 1000.0) as u64;
    gen_trace(&cfg.trace, &workload.ids(), cfg.functions.saturated_load_rps, horizon_ms, cfg.seed)
}

/// Builds the workload and fills in whatever is not supplied: the trace is
/// generated and the forest is trained from the config.
pub fn prepare_with(
    cfg: &ScenarioConfig,
    trace: Option<TraceSignal>,
    model: Option<ForestModel>,
) -> Result<Prepared, SimError> {
    cfg.validate()?;
    let workload = build_workload(cfg, cfg.functions.count)?;
    let trace = match trace {
        Some(t) => t,
        None => scenario_trace(cfg, &workload)?,
    };
    let (plug, accuracy) = match (cfg.predictor.kind, model) {
        (PredictorKind::Perfect, _) => (Plug::Perfect, None),
        (PredictorKind::Forest, Some(model)) => {
            let (train_set, _) = training_split(cfg, &workload)?;
            (Plug::Forest(IncrementalLearner::from_trained(model, train_set)), None)
        }
        (PredictorKind::Forest, None) => {
            let (model, report) = train_pipeline(cfg, &workload)?;
            let (train_set, _) = training_split(cfg, &workload)?;
            (Plug::Forest(IncrementalLearner::from_trained(model, train_set)), Some(report))
        }
    };
    Ok(Prepared {
        workload,
        trace,
        plug,
        accuracy,
    })
}

pub fn prepare(cfg: &ScenarioConfig) -> Result<Prepared, SimError> {
    prepare_with(cfg, None, None)
}

fn with_policy(cfg: &ScenarioConfig, policy: Policy) -> ScenarioConfig {
    ScenarioConfig {
        policy,
        ..cfg.clone()
    }
}

fn simulate_policy(cfg: &ScenarioConfig, prepared: &Prepared, policy: Policy) -> Result<RunOutput, SimError> {
    let w = &prepared.workload;
    simulate(&with_policy(cfg, policy), &w.oracle, &w.specs, &prepared.trace, &prepared.plug)
}

/// Runs `cfg.policy` and normalizes its density by a bin-packing run on the
/// same trace and seed.
pub fn run(cfg: &ScenarioConfig, prepared: &Prepared) -> Result<RunOutput, SimError> {
    let mut out = simulate_policy(cfg, prepared, cfg.policy)?;
    let baseline = if cfg.policy == Policy::Kube {
        out.report.density.raw
    } else {
        simulate_policy(cfg, prepared, Policy::Kube)?.report.density.raw
    };
    out.report.normalize_density(baseline);
    Ok(out)
}

/// Headline ratios between the policies.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRatios {
    /// Mean per-schedule critical path, gsight over capsched.
    pub scheduling_cost_ratio: f64,
    /// 1 − capsched / gsight critical-path inferences per schedule.
    pub inference_reduction: f64,
    /// Capsched density over bin-packing density.
    pub density_ratio: f64,
    /// 1 − capsched / gsight mean end-to-end real cold start.
    pub cold_start_reduction: f64,
    pub capsched_fast_path_fraction: f64,
    pub capsched_violation_rate: f64,
    pub capsched_logical_fraction: f64,
    pub capsched_real_cold_starts: u64,
    pub capsched_logical_starts: u64,
    pub capsched_migrations: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Comparison {
    pub reports: BTreeMap<Policy, MetricsReport>,
    pub events: BTreeMap<Policy, Vec<EventRecord>>,
    pub ratios: ComparisonRatios,
}

fn ratio(num: f64, den: f64) -> f64 {
    if den > 0.0 {
        num / den
    } else {
        0.0
    }
}

/// Runs capsched, kube and gsight on the same prepared scenario.
pub fn compare(cfg: &ScenarioConfig, prepared: &Prepared) -> Result<Comparison, SimError> {
    let mut reports = BTreeMap::new();
    let mut events = BTreeMap::new();
    let kube = simulate_policy(cfg, prepared, Policy::Kube)?;
    let baseline = kube.report.density.raw;
    for policy in [Policy::Capsched, Policy::Kube, Policy::Gsight] {
        let mut out = if policy == Policy::Kube {
            kube.clone()
        } else {
            simulate_policy(cfg, prepared, policy)?
        };
        out.report.normalize_density(baseline);
        reports.insert(policy, out.report);
        events.insert(policy, out.events);
    }
    let c = &reports[&Policy::Capsched];
    let g = &reports[&Policy::Gsight];
    let ratios = ComparisonRatios {
        scheduling_cost_ratio: ratio(g.scheduling.mean_critical_path_ms, c.scheduling.mean_critical_path_ms),
        inference_reduction: 1.0
            - ratio(
                c.scheduling.inference_events_per_schedule,
                g.scheduling.inference_events_per_schedule,
            ),
        density_ratio: c.density.normalized,
        cold_start_reduction: 1.0 - ratio(c.cold_starts.mean_end_to_end_ms, g.cold_starts.mean_end_to_end_ms),
        capsched_fast_path_fraction: c.scheduling.fast_path_fraction,
        capsched_violation_rate: c.qos.violation_rate,
        capsched_logical_fraction: c.cold_starts.logical_fraction,
        capsched_real_cold_starts: c.cold_starts.real,
        capsched_logical_starts: c.cold_starts.logical,
        capsched_migrations: c.cold_starts.migrations,
    };
    Ok(Comparison {
        reports,
        events,
        ratios,
    })
}
