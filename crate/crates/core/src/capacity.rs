//! Capacity computation, table refresh and the per-node asynchronous update
//! queue.
//!
//! A capacity is the largest saturated concurrency of a function on a node at
//! which every colocated saturated function is predicted to meet its QoS. All
//! candidate concurrencies, for every function involved, go to the predictor
//! as one batch.

use alloc::collections::BTreeMap;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{meets_qos, CapacityEntry, Colocation, ConcurrencyInfo, FunctionId, FunctionRegistry, NodeId, NodeState};
use crate::predictor::{predict_batch, InferenceCostModel, LatencyModel, LatencyQuery, PredictorError};
use crate::time::SimTime;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CapacityError {
    #[error("unknown function {0}")]
    UnknownFunction(FunctionId),
    #[error(transparent)]
    Predictor(#[from] PredictorError),
}

/// Result of one capacity computation or table refresh.
#[derive(Clone, Debug, PartialEq)]
pub struct CapacityOutcome {
    pub capacities: BTreeMap<FunctionId, u32>,
    pub rows: usize,
    pub cost_ms: f64,
    pub inference_events: u32,
}

impl CapacityOutcome {
    pub fn capacity(&self, f: &FunctionId) -> u32 {
        self.capacities.get(f).copied().unwrap_or(0)
    }
}

struct Trial {
    target: usize,
    candidate: u32,
    colocation: Colocation,
}

/// The candidate scan for a set of targets on one roster.
struct ScanPlan {
    targets: Vec<(FunctionId, u32)>,
    trials: Vec<Trial>,
}

impl ScanPlan {
    fn new(roster: &Colocation, targets: &[FunctionId], specs: &FunctionRegistry) -> Result<Self, CapacityError> {
        let mut plan = ScanPlan {
            targets: Vec::with_capacity(targets.len()),
            trials: Vec::new(),
        };
        for (t, f) in targets.iter().enumerate() {
            let spec = specs
                .get(f)
                .ok_or_else(|| CapacityError::UnknownFunction(f.clone()))?;
            let own = roster.get(f).copied().unwrap_or_default();
            plan.targets.push((f.clone(), own.saturated));
            for candidate in own.saturated.max(1)..=spec.max_capacity_bound {
                let mut colocation = roster.clone();
                colocation.insert(f.clone(), ConcurrencyInfo::new(candidate, own.cached));
                plan.trials.push(Trial {
                    target: t,
                    candidate,
                    colocation,
                });
            }
        }
        Ok(plan)
    }

    fn queries(&self) -> Vec<LatencyQuery<'_>> {
        self.trials
            .iter()
            .flat_map(|trial| {
                trial
                    .colocation
                    .iter()
                    .filter(|(_, c)| c.saturated > 0)
                    .map(move |(g, _)| LatencyQuery {
                        target: g,
                        colocation: &trial.colocation,
                    })
            })
            .collect()
    }

    fn rows(&self) -> usize {
        self.trials
            .iter()
            .map(|t| t.colocation.values().filter(|c| c.saturated > 0).count())
            .sum()
    }

    /// Capacities from this plan's slice of a batch, in query order.
    fn capacities<'p>(
        &self,
        preds: &mut impl Iterator<Item = &'p f64>,
        specs: &FunctionRegistry,
    ) -> Result<BTreeMap<FunctionId, u32>, CapacityError> {
        let mut passing: Vec<Option<u32>> = alloc::vec![None; self.targets.len()];
        for trial in &self.trials {
            let mut ok = true;
            for (g, c) in &trial.colocation {
                if c.saturated == 0 {
                    continue;
                }
                let predicted = *preds.next().expect("one prediction per query");
                let spec = specs
                    .get(g)
                    .ok_or_else(|| CapacityError::UnknownFunction(g.clone()))?;
                ok &= meets_qos(predicted, spec.qos_threshold_ms());
            }
            if ok {
                let best = &mut passing[trial.target];
                *best = Some(best.map_or(trial.candidate, |b| b.max(trial.candidate)));
            }
        }
        Ok(self
            .targets
            .iter()
            .zip(passing)
            .map(|((f, current), best)| {
                let bound = specs.get(f).map_or(0, |s| s.max_capacity_bound);
                let capacity = best.unwrap_or_else(|| current.saturating_sub(1)).min(bound);
                (f.clone(), capacity)
            })
            .collect())
    }

    fn evaluate<M: LatencyModel + ?Sized>(
        &self,
        model: &M,
        specs: &FunctionRegistry,
        cost: &InferenceCostModel,
    ) -> Result<CapacityOutcome, CapacityError> {
        let mut outcomes = evaluate_plans(core::slice::from_ref(self), model, specs, cost)?;
        Ok(outcomes.0.pop().map_or_else(
            || CapacityOutcome {
                capacities: BTreeMap::new(),
                rows: 0,
                cost_ms: 0.0,
                inference_events: 0,
            },
            |capacities| CapacityOutcome {
                capacities,
                rows: outcomes.1,
                cost_ms: outcomes.2,
                inference_events: outcomes.3,
            },
        ))
    }
}

/// Evaluates several plans as one batch: per-plan capacities, then rows,
/// cost and inference events of the shared call.
fn evaluate_plans<M: LatencyModel + ?Sized>(
    plans: &[ScanPlan],
    model: &M,
    specs: &FunctionRegistry,
    cost: &InferenceCostModel,
) -> Result<(Vec<BTreeMap<FunctionId, u32>>, usize, f64, u32), CapacityError> {
    let queries: Vec<LatencyQuery<'_>> = plans.iter().flat_map(ScanPlan::queries).collect();
    let (predictions, rows, cost_ms, events) = if queries.is_empty() {
        (Vec::new(), 0, 0.0, 0)
    } else {
        let batch = predict_batch(model, &queries, specs, cost)?;
        (batch.predictions, batch.rows, batch.cost_ms, batch.inference_events)
    };
    let mut preds = predictions.iter();
    let capacities = plans
        .iter()
        .map(|p| p.capacities(&mut preds, specs))
        .collect::<Result<Vec<_>, _>>()?;
    Ok((capacities, rows, cost_ms, events))
}

/// Capacities of `target` on several rosters, scanned in one batched
/// inference.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchCapacity {
    pub capacities: Vec<u32>,
    pub rows: usize,
    pub cost_ms: f64,
    pub inference_events: u32,
}

pub fn compute_capacities<M: LatencyModel + ?Sized>(
    rosters: &[&Colocation],
    target: &FunctionId,
    specs: &FunctionRegistry,
    model: &M,
    cost: &InferenceCostModel,
) -> Result<BatchCapacity, CapacityError> {
    let plans = rosters
        .iter()
        .map(|r| ScanPlan::new(r, core::slice::from_ref(target), specs))
        .collect::<Result<Vec<_>, _>>()?;
    let (maps, rows, cost_ms, inference_events) = evaluate_plans(&plans, model, specs, cost)?;
    Ok(BatchCapacity {
        capacities: maps.iter().map(|m| m.get(target).copied().unwrap_or(0)).collect(),
        rows,
        cost_ms,
        inference_events,
    })
}

/// Capacity of `target` on a node holding `roster`, as one batched inference.
/// If no candidate at or above the current concurrency passes, the capacity
/// is one below the current concurrency (clamped at zero).
pub fn compute_capacity<M: LatencyModel + ?Sized>(
    roster: &Colocation,
    target: &FunctionId,
    specs: &FunctionRegistry,
    model: &M,
    cost: &InferenceCostModel,
) -> Result<CapacityOutcome, CapacityError> {
    ScanPlan::new(roster, core::slice::from_ref(target), specs)?.evaluate(model, specs, cost)
}

/// Recomputes the capacity of every function on `roster` in one batch.
pub fn recompute_all<M: LatencyModel + ?Sized>(
    roster: &Colocation,
    specs: &FunctionRegistry,
    model: &M,
    cost: &InferenceCostModel,
) -> Result<CapacityOutcome, CapacityError> {
    let targets: Vec<FunctionId> = roster.keys().cloned().collect();
    ScanPlan::new(roster, &targets, specs)?.evaluate(model, specs, cost)
}

/// Row count of a full-table recomputation for `roster`.
pub fn refresh_rows(roster: &Colocation, specs: &FunctionRegistry) -> Result<usize, CapacityError> {
    let targets: Vec<FunctionId> = roster.keys().cloned().collect();
    Ok(ScanPlan::new(roster, &targets, specs)?.rows())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum UpdateReason {
    Admit,
    Evict,
    Release,
    LogicalStart,
    NewFunction,
    Migration,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UpdateTask {
    pub node: NodeId,
    pub reason: UpdateReason,
    pub enqueued_at: SimTime,
    pub completes_at: SimTime,
    pub rows: usize,
    pub cost_ms: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Enqueued {
    /// A new task is in flight.
    Started(UpdateTask),
    /// Folded into the follow-up of the task already in flight.
    Coalesced,
    /// Nothing on the node to recompute.
    Skipped,
}

/// At most one in-flight update per node, plus at most one coalesced
/// follow-up.
#[derive(Clone, Debug, Default)]
pub struct UpdateQueue {
    in_flight: BTreeMap<NodeId, UpdateTask>,
    follow_up: BTreeMap<NodeId, UpdateReason>,
}

impl UpdateQueue {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn in_flight(&self, node: &NodeId) -> Option<&UpdateTask> {
        self.in_flight.get(node)
    }

    pub fn has_follow_up(&self, node: &NodeId) -> bool {
        self.follow_up.contains_key(node)
    }

    pub fn is_idle(&self) -> bool {
        self.in_flight.is_empty() && self.follow_up.is_empty()
    }

    /// Requests a refresh of `node`'s table. Entries become stale until the
    /// task lands.
    pub fn enqueue_update(
        &mut self,
        node: &mut NodeState,
        reason: UpdateReason,
        now: SimTime,
        specs: &FunctionRegistry,
        cost: &InferenceCostModel,
    ) -> Result<Enqueued, CapacityError> {
        if self.in_flight.contains_key(&node.id) {
            self.follow_up.entry(node.id.clone()).or_insert(reason);
            return Ok(Enqueued::Coalesced);
        }
        let rows = refresh_rows(&node.roster, specs)?;
        if rows == 0 {
            return Ok(Enqueued::Skipped);
        }
        for entry in node.capacity_table.values_mut() {
            entry.stale = true;
        }
        let cost_ms = cost.cost_ms(rows);
        let task = UpdateTask {
            node: node.id.clone(),
            reason,
            enqueued_at: now,
            completes_at: now + SimTime::from_millis_f64(cost_ms),
            rows,
            cost_ms,
        };
        self.in_flight.insert(node.id.clone(), task.clone());
        Ok(Enqueued::Started(task))
    }

    /// Retires the in-flight task of `node` and returns the coalesced
    /// follow-up reason, if any; the caller enqueues it.
    pub fn finish(&mut self, node: &NodeId) -> Option<UpdateReason> {
        self.in_flight.remove(node);
        self.follow_up.remove(node)
    }

    /// Drops all bookkeeping for a removed node.
    pub fn forget(&mut self, node: &NodeId) {
        self.in_flight.remove(node);
        self.follow_up.remove(node);
    }
}

/// Refreshes every entry of `node` against its roster as of `now`; clears
/// stale flags and pending counters. Returns the recomputation outcome.
pub fn apply_update_completion<M: LatencyModel + ?Sized>(
    node: &mut NodeState,
    specs: &FunctionRegistry,
    model: &M,
    cost: &InferenceCostModel,
    now: SimTime,
) -> Result<CapacityOutcome, CapacityError> {
    let outcome = recompute_all(&node.roster, specs, model, cost)?;
    node.capacity_table.clear();
    for (f, capacity) in &outcome.capacities {
        node.capacity_table
            .insert(f.clone(), CapacityEntry::fresh(*capacity, now, node.roster.clone()));
    }
    node.pending.clear();
    Ok(outcome)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{FunctionSpec, ProfileVector, Resources};
    use crate::oracle::{ContentionOracle, FunctionGroundTruth, OracleParams};
    use crate::predictor::PerfectPredictor;
    use crate::rng;
    use alloc::vec;
    use alloc::vec::Vec;
    use proptest::prelude::*;
    use rand::Rng;

    fn setup(truths: &[(&str, f64, f64, u32)]) -> (PerfectPredictor, FunctionRegistry) {
        let mut oracle = ContentionOracle::new(OracleParams {
            resource_axes: 1,
            theta: vec![0.6],
            noise_sigma: 0.0,
            ..OracleParams::default()
        })
        .unwrap();
        let mut specs = FunctionRegistry::new();
        for (id, demand, sens, bound) in truths {
            oracle
                .register(
                    (*id).into(),
                    FunctionGroundTruth {
                        demand: vec![*demand],
                        sensitivity: vec![*sens],
                        solo_latency_ms: 100.0,
                    },
                )
                .unwrap();
            specs.insert(
                (*id).into(),
                FunctionSpec {
                    id: (*id).into(),
                    solo_latency_ms: 100.0,
                    profile: ProfileVector(vec![0.0; 13]),
                    saturated_load_rps: 10.0,
                    qos_multiplier: 1.2,
                    configured_resources: Resources(vec![8.0, 8.0]),
                    max_capacity_bound: *bound,
                },
            );
        }
        (PerfectPredictor { oracle }, specs)
    }

    fn roster(entries: &[(&str, u32, u32)]) -> Colocation {
        entries
            .iter()
            .map(|(f, s, c)| (FunctionId::from(*f), ConcurrencyInfo::new(*s, *c)))
            .collect()
    }

    #[test]
    fn boundary_example_gives_eight() {
        let (p, specs) = setup(&[("f", 0.1, 5.0, 16)]);
        let out = compute_capacity(&Colocation::new(), &"f".into(), &specs, &p, &InferenceCostModel::default()).unwrap();
        assert_eq!(out.capacity(&"f".into()), 8);
        assert_eq!(out.inference_events, 1);
        assert_eq!(out.rows, 16);
    }

    #[test]
    fn insensitive_function_reaches_bound() {
        let (p, specs) = setup(&[("f", 0.001, 0.0, 12)]);
        let out = compute_capacity(&Colocation::new(), &"f".into(), &specs, &p, &InferenceCostModel::default()).unwrap();
        assert_eq!(out.capacity(&"f".into()), 12);
    }

    #[test]
    fn three_function_example_matches_brute_force() {
        let (p, specs) = setup(&[("f1", 0.08, 4.0, 16), ("f2", 0.05, 3.0, 16), ("f3", 0.07, 5.0, 16)]);
        let r = roster(&[("f1", 2, 0), ("f2", 3, 0)]);
        let f3: FunctionId = "f3".into();
        let out = compute_capacity(&r, &f3, &specs, &p, &InferenceCostModel::default()).unwrap();
        let c = out.capacity(&f3);
        assert!(c > 0);
        assert_eq!(c, p.oracle.brute_force_capacity(&r, &f3, &specs).unwrap());
        let mut at = r.clone();
        at.insert(f3, ConcurrencyInfo::new(c, 0));
        assert!(p.oracle.is_feasible(&at, &specs).unwrap());
    }

    #[test]
    fn infeasible_current_state_clamps_below_current() {
        let (p, specs) = setup(&[("f", 0.1, 5.0, 16)]);
        let r = roster(&[("f", 10, 0)]);
        let out = compute_capacity(&r, &"f".into(), &specs, &p, &InferenceCostModel::default()).unwrap();
        assert_eq!(out.capacity(&"f".into()), 9);
    }

    #[test]
    fn unknown_function_is_an_error() {
        let (p, specs) = setup(&[("f", 0.1, 5.0, 16)]);
        assert!(matches!(
            compute_capacity(&Colocation::new(), &"g".into(), &specs, &p, &InferenceCostModel::default()),
            Err(CapacityError::UnknownFunction(_))
        ));
    }

    fn node_with(r: Colocation) -> NodeState {
        let mut n = NodeState::new("n".into(), Resources(vec![48.0, 48.0]), SimTime::ZERO);
        n.roster = r;
        n
    }

    #[test]
    fn admit_update_refreshes_table_and_clears_pending() {
        let (p, specs) = setup(&[("f", 0.1, 5.0, 16)]);
        let cost = InferenceCostModel::default();
        let mut node = node_with(roster(&[("f", 2, 0)]));
        node.pending.insert("f".into(), 2);
        let mut q = UpdateQueue::new();
        let Enqueued::Started(task) = q.enqueue_update(&mut node, UpdateReason::Admit, SimTime::ZERO, &specs, &cost).unwrap() else {
            panic!("expected a new task");
        };
        assert_eq!(task.completes_at, SimTime::from_millis_f64(cost.cost_ms(15)));
        let out = apply_update_completion(&mut node, &specs, &p, &cost, task.completes_at).unwrap();
        assert_eq!(q.finish(&node.id), None);
        assert_eq!(node.pending(&"f".into()), 0);
        let entry = &node.capacity_table[&FunctionId::from("f")];
        assert_eq!(entry.capacity, 8);
        assert!(!entry.stale);
        assert_eq!(out.inference_events, 1);
        assert!(q.is_idle());
    }

    #[test]
    fn second_enqueue_coalesces() {
        let (_, specs) = setup(&[("f", 0.1, 5.0, 16)]);
        let cost = InferenceCostModel::default();
        let mut node = node_with(roster(&[("f", 1, 0)]));
        let mut q = UpdateQueue::new();
        let mut started = 0;
        for ms in [0, 1, 2] {
            if let Enqueued::Started(_) = q
                .enqueue_update(&mut node, UpdateReason::Admit, SimTime::from_millis(ms), &specs, &cost)
                .unwrap()
            {
                started += 1;
            }
        }
        assert_eq!(started, 1);
        assert_eq!(q.finish(&node.id), Some(UpdateReason::Admit));
        assert!(matches!(
            q.enqueue_update(&mut node, UpdateReason::Admit, SimTime::from_millis(25), &specs, &cost).unwrap(),
            Enqueued::Started(_)
        ));
        assert_eq!(q.finish(&node.id), None);
    }

    #[test]
    fn completion_uses_roster_at_completion_time() {
        let (p, specs) = setup(&[("f", 0.1, 5.0, 16), ("g", 0.1, 5.0, 16)]);
        let cost = InferenceCostModel::default();
        let mut node = node_with(roster(&[("f", 2, 0), ("g", 3, 0)]));
        let mut q = UpdateQueue::new();
        q.enqueue_update(&mut node, UpdateReason::Admit, SimTime::ZERO, &specs, &cost).unwrap();
        node.roster.insert("g".into(), ConcurrencyInfo::new(2, 1));
        apply_update_completion(&mut node, &specs, &p, &cost, SimTime::from_millis(30)).unwrap();
        let sync = recompute_all(&node.roster, &specs, &p, &cost).unwrap();
        for (f, c) in &sync.capacities {
            assert_eq!(node.capacity_table[f].capacity, *c);
            assert_eq!(node.capacity_table[f].basis, node.roster);
        }
    }

    #[test]
    fn eviction_never_lowers_neighbour_capacity() {
        let (p, specs) = setup(&[("f", 0.1, 5.0, 16), ("g", 0.08, 3.0, 16)]);
        let cost = InferenceCostModel::default();
        let before = recompute_all(&roster(&[("f", 2, 0), ("g", 2, 3)]), &specs, &p, &cost).unwrap();
        let after = recompute_all(&roster(&[("f", 2, 0), ("g", 2, 2)]), &specs, &p, &cost).unwrap();
        assert!(after.capacity(&"f".into()) >= before.capacity(&"f".into()));
    }

    #[test]
    fn empty_roster_skips_update() {
        let (_, specs) = setup(&[("f", 0.1, 5.0, 16)]);
        let mut node = node_with(Colocation::new());
        let mut q = UpdateQueue::new();
        assert_eq!(
            q.enqueue_update(&mut node, UpdateReason::Evict, SimTime::ZERO, &specs, &InferenceCostModel::default())
                .unwrap(),
            Enqueued::Skipped
        );
    }

    fn random_instance(seed: u64) -> (PerfectPredictor, FunctionRegistry, Colocation, FunctionId) {
        let mut r = rng::stream(seed, "capacity-prop");
        let n = r.random_range(1..=4usize);
        let truths: Vec<(alloc::string::String, f64, f64, u32)> = (0..n)
            .map(|i| {
                (
                    alloc::format!("f{i}"),
                    r.random_range(0.02..0.12),
                    r.random_range(0.0..6.0),
                    r.random_range(4..=16),
                )
            })
            .collect();
        let refs: Vec<(&str, f64, f64, u32)> = truths.iter().map(|(a, b, c, d)| (a.as_str(), *b, *c, *d)).collect();
        let (p, specs) = setup(&refs);
        let mut coloc = Colocation::new();
        for (id, ..) in &truths {
            let c = ConcurrencyInfo::new(r.random_range(0..=10), r.random_range(0..=10));
            if !c.is_empty() {
                coloc.insert(id.as_str().into(), c);
            }
        }
        let target: FunctionId = truths[r.random_range(0..n)].0.as_str().into();
        (p, specs, coloc, target)
    }

    proptest! {
        #[test]
        fn perfect_predictor_equals_brute_force_on_feasible_states(seed in any::<u64>()) {
            let (p, specs, coloc, target) = random_instance(seed);
            prop_assume!(p.oracle.is_feasible(&coloc, &specs).unwrap());
            let out = compute_capacity(&coloc, &target, &specs, &p, &InferenceCostModel::default()).unwrap();
            prop_assert_eq!(out.capacity(&target), p.oracle.brute_force_capacity(&coloc, &target, &specs).unwrap());
            prop_assert!(out.inference_events <= 1);
        }
    }
}
