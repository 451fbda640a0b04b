//! Oracle replay of an event log: rebuilds node rosters and offered load
//! from the log alone and re-derives the QoS and density figures.

use alloc::collections::BTreeMap;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::events::{EventRecord, NodeAction};
use super::metrics::window_mass;
use super::SimError;
use crate::model::{Colocation, FunctionId, FunctionRegistry, InstanceState, NodeId};
use crate::oracle::ContentionOracle;
use crate::time::SimTime;

/// An admission that left a function above its true capacity.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OverAdmission {
    pub t_us: SimTime,
    pub node: NodeId,
    pub function: FunctionId,
    pub saturated: u32,
    pub true_capacity: u32,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ReplayReport {
    pub violation_rate: f64,
    pub violating_mass: f64,
    pub total_mass: f64,
    pub raw_density: f64,
    /// Saturated admissions (creations and re-activations) checked.
    pub admissions: u64,
    pub over_admissions: Vec<OverAdmission>,
    pub creations_saturated: u64,
    pub creations_cached: u64,
    pub reactivations: u64,
    pub evictions: u64,
}

fn apply(rosters: &mut BTreeMap<NodeId, Colocation>, node: &NodeId, f: &FunctionId, from: Option<InstanceState>, to: InstanceState) {
    let roster = rosters.entry(node.clone()).or_default();
    let c = roster.entry(f.clone()).or_default();
    match from {
        Some(InstanceState::Saturated) => c.saturated -= 1,
        Some(InstanceState::Cached) => c.cached -= 1,
        _ => {}
    }
    match to {
        InstanceState::Saturated => c.saturated += 1,
        InstanceState::Cached => c.cached += 1,
        InstanceState::Evicted => {}
    }
    if c.is_empty() {
        roster.remove(f);
    }
}

/// Replays `events` over `[0, horizon)` in windows of `window`; figures and
/// ledger counts cover `[warmup, horizon)`. When `check_admissions` is set
/// every saturated admission is compared with the oracle's brute-force
/// capacity on the resulting roster.
pub fn replay(
    events: &[EventRecord],
    oracle: &ContentionOracle,
    specs: &FunctionRegistry,
    horizon: SimTime,
    warmup: SimTime,
    window: SimTime,
    check_admissions: bool,
) -> Result<ReplayReport, SimError> {
    let mut out = ReplayReport::default();
    let mut rosters: BTreeMap<NodeId, Colocation> = BTreeMap::new();
    let mut nodes: u32 = 0;
    let mut rps: BTreeMap<FunctionId, f64> = BTreeMap::new();
    let (mut instance_s, mut node_s) = (0.0, 0.0);
    let mut it = events.iter().peekable();
    let mut now = SimTime::ZERO;
    while now < horizon {
        while let Some(e) = it.next_if(|e| e.time() <= now) {
            match e {
                EventRecord::Load { function, rps: r, .. } => {
                    rps.insert(function.clone(), *r);
                }
                EventRecord::Node { action, node, .. } => match action {
                    NodeAction::Added => nodes += 1,
                    NodeAction::Removed => {
                        nodes -= 1;
                        rosters.remove(node);
                    }
                },
                EventRecord::Transition {
                    t_us,
                    function,
                    node,
                    from,
                    to,
                    ..
                } => {
                    apply(&mut rosters, node, function, *from, *to);
                    let counted = *t_us >= warmup;
                    match (from, to) {
                        _ if !counted => {}
                        (None, InstanceState::Saturated) => out.creations_saturated += 1,
                        (None, InstanceState::Cached) => out.creations_cached += 1,
                        (Some(InstanceState::Cached), InstanceState::Saturated) => out.reactivations += 1,
                        (_, InstanceState::Evicted) => out.evictions += 1,
                        _ => {}
                    }
                    if *to == InstanceState::Saturated && check_admissions {
                        out.admissions += 1;
                        let roster = &rosters[node];
                        let saturated = roster[function].saturated;
                        let true_capacity = oracle.brute_force_capacity(roster, function, specs)?;
                        if saturated > true_capacity {
                            out.over_admissions.push(OverAdmission {
                                t_us: *t_us,
                                node: node.clone(),
                                function: function.clone(),
                                saturated,
                                true_capacity,
                            });
                        }
                    }
                }
                _ => {}
            }
        }
        let dt = window.min(horizon - now);
        let dt_s = dt.as_secs_f64();
        if now < warmup {
            now = now + dt;
            continue;
        }
        let w = window_mass(oracle, specs, rosters.values(), &rps, dt_s)?;
        out.violating_mass += w.violating;
        out.total_mass += w.total;
        let instances: u32 = rosters.values().flat_map(|r| r.values()).map(|c| c.total()).sum();
        instance_s += f64::from(instances) * dt_s;
        node_s += f64::from(nodes) * dt_s;
        now = now + dt;
    }
    out.violation_rate = if out.total_mass > 0.0 { out.violating_mass / out.total_mass } else { 0.0 };
    out.raw_density = if node_s > 0.0 { instance_s / node_s } else { 0.0 };
    Ok(out)
}
