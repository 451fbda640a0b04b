//! Run metrics: oracle-truth QoS per evaluation window, density, scheduling
//! cost and the cold-start ledger.

use alloc::collections::BTreeMap;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::SimError;
use crate::model::{meets_qos, Colocation, FunctionId, FunctionRegistry};
use crate::oracle::ContentionOracle;
use crate::predictor::forest::percentile;
use crate::scheduler::{Path, Policy};

/// Request mass of one evaluation window.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct WindowMass {
    pub violating: f64,
    pub total: f64,
    /// Offered with no saturated instance to route to; also counted as
    /// violating.
    pub unservable: f64,
    /// Per function: (violating, total).
    pub per_function: BTreeMap<FunctionId, (f64, f64)>,
}

/// Evaluates one window of length `dt_s` against oracle truth: each
/// function's load is split equally over its saturated instances and a
/// node's share violates when the function's true latency on that node
/// misses its QoS threshold.
pub fn window_mass<'a>(
    oracle: &ContentionOracle,
    specs: &FunctionRegistry,
    rosters: impl Iterator<Item = &'a Colocation> + Clone,
    rps: &BTreeMap<FunctionId, f64>,
    dt_s: f64,
) -> Result<WindowMass, SimError> {
    let mut out = WindowMass::default();
    for (f, rate) in rps {
        if *rate <= 0.0 {
            continue;
        }
        let spec = specs
            .get(f)
            .ok_or_else(|| SimError::Trace("trace names an unknown function"))?;
        let mass = rate * dt_s;
        let saturated: u32 = rosters.clone().map(|r| r.get(f).map_or(0, |c| c.saturated)).sum();
        let entry = out.per_function.entry(f.clone()).or_default();
        entry.1 += mass;
        out.total += mass;
        if saturated == 0 {
            entry.0 += mass;
            out.violating += mass;
            out.unservable += mass;
            continue;
        }
        for roster in rosters.clone() {
            let s = roster.get(f).map_or(0, |c| c.saturated);
            if s == 0 {
                continue;
            }
            let share = mass * s as f64 / saturated as f64;
            if !meets_qos(oracle.true_latency(f, roster)?, spec.qos_threshold_ms()) {
                entry.0 += share;
                out.violating += share;
            }
        }
    }
    Ok(out)
}

fn ratio(num: f64, den: f64) -> f64 {
    if den > 0.0 {
        num / den
    } else {
        0.0
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct QosMetrics {
    pub violation_rate: f64,
    pub violating_mass: f64,
    pub total_mass: f64,
    pub unservable_mass: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DensityMetrics {
    pub instance_seconds: f64,
    pub node_seconds: f64,
    /// Time-weighted instances per provisioned node.
    pub raw: f64,
    /// `raw` divided by the bin-packing run's `raw` on the same trace.
    pub normalized: f64,
    /// Set when the normalization is undefined and 1.0 is reported.
    pub undefined: bool,
    pub peak_nodes: u32,
    pub nodes_added: u32,
    pub nodes_removed: u32,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SchedulingMetrics {
    /// Instances placed, logical starts included.
    pub schedules: u64,
    pub fast: u64,
    pub slow: u64,
    pub packing: u64,
    pub fast_path_fraction: f64,
    pub mean_critical_path_ms: f64,
    pub p50_critical_path_ms: f64,
    pub p99_critical_path_ms: f64,
    /// Inferences on scheduling critical paths.
    pub critical_inference_events: u64,
    pub inference_events_per_schedule: f64,
    /// Critical-path, background update and migration inferences.
    pub total_inference_events: u64,
    /// Decision cost that admitted nothing.
    pub wasted_ms: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ColdStartMetrics {
    /// New instances created for scale-ups.
    pub real: u64,
    pub logical: u64,
    pub migrations: u64,
    /// Scale-up demand that a cached instance could have served.
    pub reactivations: u64,
    pub reactivations_logical: u64,
    pub reactivations_real: u64,
    /// Real re-activations caused by cached instances stuck on nodes without
    /// headroom.
    pub reactivations_real_from_full: u64,
    pub logical_fraction: f64,
    pub real_fraction: f64,
    /// Critical path plus initialisation, over real cold starts.
    pub mean_end_to_end_ms: f64,
    /// Critical path plus re-routing cost, over logical starts.
    pub mean_logical_ms: f64,
    pub runtime_init_ms: f64,
    pub migration_background_ms: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct UpdateMetrics {
    pub completed: u64,
    pub rows: u64,
    pub cost_ms: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MonitorMetrics {
    pub observations: u64,
    pub retrains: u64,
    pub fallback_functions: Vec<FunctionId>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FunctionMetrics {
    pub schedules: u64,
    pub fast: u64,
    pub real_cold_starts: u64,
    pub logical_starts: u64,
    pub violation_rate: f64,
    pub violating_mass: f64,
    pub total_mass: f64,
    pub mean_critical_path_ms: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub policy: Policy,
    pub horizon_s: f64,
    pub warmup_s: f64,
    pub qos: QosMetrics,
    pub density: DensityMetrics,
    pub scheduling: SchedulingMetrics,
    pub cold_starts: ColdStartMetrics,
    pub updates: UpdateMetrics,
    pub monitor: MonitorMetrics,
    pub per_function: BTreeMap<FunctionId, FunctionMetrics>,
}

impl MetricsReport {
    /// Sets the normalized density against a bin-packing run's raw density.
    pub fn normalize_density(&mut self, baseline_raw: f64) {
        if baseline_raw > 0.0 && self.density.raw > 0.0 {
            self.density.normalized = self.density.raw / baseline_raw;
            self.density.undefined = false;
        } else {
            self.density.normalized = 1.0;
            self.density.undefined = true;
        }
    }
}

#[derive(Clone, Debug, Default)]
struct FunctionTally {
    schedules: u64,
    fast: u64,
    real: u64,
    logical: u64,
    critical_ms: f64,
    violating: f64,
    total: f64,
}

/// Running totals of one simulation.
#[derive(Clone, Debug, Default)]
pub struct Accumulator {
    critical_paths: Vec<f64>,
    fast: u64,
    slow: u64,
    packing: u64,
    critical_inferences: u64,
    background_inferences: u64,
    wasted_ms: f64,
    real_e2e_ms: f64,
    logical_ms: f64,
    pub cold: ColdStartMetrics,
    pub updates: UpdateMetrics,
    pub monitor: MonitorMetrics,
    pub qos: QosMetrics,
    pub density: DensityMetrics,
    functions: BTreeMap<FunctionId, FunctionTally>,
}

impl Accumulator {
    /// One placed instance with its decision cost.
    pub fn record_schedule(&mut self, f: &FunctionId, path: Path, critical_path_ms: f64, inference_events: u32) {
        self.critical_paths.push(critical_path_ms);
        match path {
            Path::Fast => self.fast += 1,
            Path::Slow => self.slow += 1,
            Path::Packing => self.packing += 1,
        }
        self.critical_inferences += u64::from(inference_events);
        let t = self.functions.entry(f.clone()).or_default();
        t.schedules += 1;
        t.fast += u64::from(path == Path::Fast);
        t.critical_ms += critical_path_ms;
    }

    pub fn record_real_start(&mut self, f: &FunctionId, end_to_end_ms: f64) {
        self.cold.real += 1;
        self.real_e2e_ms += end_to_end_ms;
        self.functions.entry(f.clone()).or_default().real += 1;
    }

    pub fn record_logical_start(&mut self, f: &FunctionId, latency_ms: f64) {
        self.cold.logical += 1;
        self.logical_ms += latency_ms;
        self.functions.entry(f.clone()).or_default().logical += 1;
    }

    pub fn record_waste(&mut self, ms: f64, inferences: u32) {
        self.wasted_ms += ms;
        self.critical_inferences += u64::from(inferences);
    }

    pub fn record_background_inferences(&mut self, events: u32) {
        self.background_inferences += u64::from(events);
    }

    pub fn record_window(&mut self, w: &WindowMass, instances: u32, nodes: u32, dt_s: f64) {
        self.qos.violating_mass += w.violating;
        self.qos.total_mass += w.total;
        self.qos.unservable_mass += w.unservable;
        for (f, (v, t)) in &w.per_function {
            let tally = self.functions.entry(f.clone()).or_default();
            tally.violating += v;
            tally.total += t;
        }
        self.density.instance_seconds += f64::from(instances) * dt_s;
        self.density.node_seconds += f64::from(nodes) * dt_s;
        self.density.peak_nodes = self.density.peak_nodes.max(nodes);
    }

    pub fn finish(mut self, policy: Policy, horizon_s: f64, warmup_s: f64) -> MetricsReport {
        let schedules = self.critical_paths.len() as u64;
        let scheduling = SchedulingMetrics {
            schedules,
            fast: self.fast,
            slow: self.slow,
            packing: self.packing,
            fast_path_fraction: ratio(self.fast as f64, schedules as f64),
            mean_critical_path_ms: ratio(self.critical_paths.iter().sum(), schedules as f64),
            p50_critical_path_ms: percentile(&self.critical_paths, 0.5),
            p99_critical_path_ms: percentile(&self.critical_paths, 0.99),
            critical_inference_events: self.critical_inferences,
            inference_events_per_schedule: ratio(self.critical_inferences as f64, schedules as f64),
            total_inference_events: self.critical_inferences + self.background_inferences,
            wasted_ms: self.wasted_ms,
        };
        let c = &mut self.cold;
        c.logical_fraction = ratio(c.reactivations_logical as f64, c.reactivations as f64);
        c.real_fraction = ratio(c.reactivations_real as f64, c.reactivations as f64);
        c.mean_end_to_end_ms = ratio(self.real_e2e_ms, c.real as f64);
        c.mean_logical_ms = ratio(self.logical_ms, c.logical as f64);
        self.qos.violation_rate = ratio(self.qos.violating_mass, self.qos.total_mass);
        self.density.raw = ratio(self.density.instance_seconds, self.density.node_seconds);
        self.monitor.fallback_functions.sort();
        let per_function = self
            .functions
            .into_iter()
            .map(|(f, t)| {
                let m = FunctionMetrics {
                    schedules: t.schedules,
                    fast: t.fast,
                    real_cold_starts: t.real,
                    logical_starts: t.logical,
                    violation_rate: ratio(t.violating, t.total),
                    violating_mass: t.violating,
                    total_mass: t.total,
                    mean_critical_path_ms: ratio(t.critical_ms, t.schedules as f64),
                };
                (f, m)
            })
            .collect();
        MetricsReport {
            policy,
            horizon_s,
            warmup_s,
            qos: self.qos,
            density: self.density,
            scheduling,
            cold_starts: self.cold,
            updates: self.updates,
            monitor: self.monitor,
            per_function,
        }
    }
}
