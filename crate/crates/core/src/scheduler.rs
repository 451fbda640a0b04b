//! Placement: capacity-table fast path, synchronous slow path, node
//! filtering, scale-out, and the two baseline policies.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::capacity::{compute_capacities, compute_capacity, CapacityError, Enqueued, UpdateQueue, UpdateReason, UpdateTask};
use crate::cluster::{Cluster, ClusterError};
use crate::model::{meets_qos, CapacityEntry, ConcurrencyInfo, FunctionId, FunctionRegistry, InstanceId, InstanceState, NodeId, NodeState};
use crate::predictor::{predict_batch, InferenceCostModel, LatencyModel, LatencyQuery, PredictorError};
use crate::time::SimTime;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Policy {
    /// Capacity-table scheduling with overcommitment.
    Capsched,
    /// Least-allocated spreading on configured resources, no overcommitment.
    Kube,
    /// Per-instance synchronous inference on the critical path.
    Gsight,
}

impl Policy {
    pub fn name(self) -> &'static str {
        match self {
            Policy::Capsched => "capsched",
            Policy::Kube => "kube",
            Policy::Gsight => "gsight",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SchedulerConfig {
    /// Charged for a capacity-table lookup.
    pub table_lookup_ms: f64,
    /// Charged for a bin-packing decision.
    pub kube_decision_ms: f64,
    /// Delay before a newly requested node accepts instances.
    pub provision_delay_ms: f64,
}

impl Default for SchedulerConfig {
    fn default() -> Self {
        Self {
            table_lookup_ms: 0.5,
            kube_decision_ms: 0.5,
            provision_delay_ms: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SchedError {
    #[error(transparent)]
    Capacity(#[from] CapacityError),
    #[error(transparent)]
    Predictor(#[from] PredictorError),
    #[error(transparent)]
    Cluster(#[from] ClusterError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Path {
    /// Admitted from the capacity table without inference.
    Fast,
    /// Admitted after a synchronous inference.
    Slow,
    /// Admitted by configured-resource bin packing.
    Packing,
}

/// Instances admitted on one node by one scheduling call.
#[derive(Clone, Debug, PartialEq)]
pub struct Placement {
    pub node: NodeId,
    pub instances: Vec<InstanceId>,
    pub path: Path,
    /// Decision cost accumulated by the call up to this admission.
    pub critical_path_ms: f64,
    /// Inferences run by the call since the previous placement.
    pub inference_events: u32,
}

impl Placement {
    pub fn admitted(&self) -> u32 {
        self.instances.len() as u32
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ScheduleOutcome {
    pub placements: Vec<Placement>,
    /// Instances that found no feasible node.
    pub unplaced: u32,
    /// Asynchronous table updates started by the admissions.
    pub tasks: Vec<UpdateTask>,
    /// Nodes added while placing.
    pub scaled_out: Vec<NodeId>,
    /// Decision cost not followed by any admission.
    pub wasted_ms: f64,
    pub wasted_inferences: u32,
}

impl ScheduleOutcome {
    pub fn admitted(&self) -> u32 {
        self.placements.iter().map(Placement::admitted).sum()
    }
}

/// Everything a scheduling call reads or mutates.
pub struct SchedContext<'a, M: LatencyModel + ?Sized> {
    pub cluster: &'a mut Cluster,
    pub queue: &'a mut UpdateQueue,
    pub specs: &'a FunctionRegistry,
    pub model: &'a M,
    pub cost: &'a InferenceCostModel,
    pub config: &'a SchedulerConfig,
}

/// Candidate tier of a node for a capacity-table admission.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Tier {
    /// Valid table entry with this much headroom.
    Table(u32),
    /// No usable entry: needs a synchronous capacity computation.
    Compute,
}

fn usable(node: &NodeState, now: SimTime, conservative: bool) -> bool {
    node.is_ready(now) && node.conservative == conservative
}

/// Orders the overcommitting nodes for `f`: valid entries with headroom by
/// descending headroom, then nodes needing a computation by descending free
/// configured resources; ties by node id. Entries without headroom are
/// dropped.
pub fn node_filter(cluster: &Cluster, f: &FunctionId, specs: &FunctionRegistry, now: SimTime) -> Vec<(NodeId, Tier)> {
    let mut table: Vec<(u32, &NodeId)> = Vec::new();
    let mut compute: Vec<(f64, &NodeId)> = Vec::new();
    for node in cluster.nodes.values().filter(|n| usable(n, now, false)) {
        match node.fast_path_headroom(f) {
            Some(0) => {}
            Some(h) => table.push((h, &node.id)),
            None if node.capacity_table.contains_key(f) && node.is_full_for(f) => {}
            None => compute.push((node.free_configured(specs), &node.id)),
        }
    }
    table.sort_by(|a, b| b.0.cmp(&a.0).then_with(|| a.1.cmp(b.1)));
    compute.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.cmp(b.1)));
    table
        .into_iter()
        .map(|(h, id)| (id.clone(), Tier::Table(h)))
        .chain(compute.into_iter().map(|(_, id)| (id.clone(), Tier::Compute)))
        .collect()
}

/// Requests one node; it accepts instances after the provisioning delay.
pub fn scale_out(cluster: &mut Cluster, now: SimTime, config: &SchedulerConfig, conservative: bool) -> NodeId {
    cluster.add_node(now, now + SimTime::from_millis_f64(config.provision_delay_ms), conservative)
}

/// Removes an empty node.
pub fn scale_in(cluster: &mut Cluster, queue: &mut UpdateQueue, node: &NodeId) -> Result<NodeState, SchedError> {
    let removed = cluster.remove_node(node)?;
    queue.forget(node);
    Ok(removed)
}

fn admit<M: LatencyModel + ?Sized>(
    ctx: &mut SchedContext<'_, M>,
    f: &FunctionId,
    node: &NodeId,
    k: u32,
    reason: UpdateReason,
    now: SimTime,
    out: &mut ScheduleOutcome,
) -> Result<Vec<InstanceId>, SchedError> {
    let mut ids = Vec::with_capacity(k as usize);
    for _ in 0..k {
        ids.push(ctx.cluster.create_instance(f, node, InstanceState::Saturated, now)?);
    }
    let n = ctx.cluster.node_mut(node).expect("admitted on a live node");
    *n.pending.entry(f.clone()).or_insert(0) += k;
    if let Enqueued::Started(task) = ctx.queue.enqueue_update(n, reason, now, ctx.specs, ctx.cost)? {
        out.tasks.push(task);
    }
    Ok(ids)
}

/// Synchronously computes `f`'s capacity on `node` and stores the entry.
/// Returns (capacity, cost, inference events).
pub fn refresh_entry<M: LatencyModel + ?Sized>(
    ctx: &mut SchedContext<'_, M>,
    f: &FunctionId,
    node: &NodeId,
    now: SimTime,
) -> Result<(u32, f64, u32), SchedError> {
    let n = ctx.cluster.node_mut(node).expect("live node");
    let outcome = compute_capacity(&n.roster, f, ctx.specs, ctx.model, ctx.cost)?;
    let capacity = outcome.capacity(f);
    n.capacity_table
        .insert(f.clone(), CapacityEntry::fresh(capacity, now, n.roster.clone()));
    Ok((capacity, outcome.cost_ms, outcome.inference_events))
}

/// Stores freshly computed entries for `f` on `nodes`; returns (capacity,
/// cost, inference events) per node order.
fn refresh_entries<M: LatencyModel + ?Sized>(
    ctx: &mut SchedContext<'_, M>,
    f: &FunctionId,
    nodes: &[NodeId],
    now: SimTime,
) -> Result<(Vec<u32>, f64, u32), SchedError> {
    let rosters: Vec<&crate::model::Colocation> = nodes
        .iter()
        .map(|id| &ctx.cluster.node(id).expect("live node").roster)
        .collect();
    let batch = compute_capacities(&rosters, f, ctx.specs, ctx.model, ctx.cost)?;
    for (id, capacity) in nodes.iter().zip(&batch.capacities) {
        let n = ctx.cluster.node_mut(id).expect("live node");
        n.capacity_table
            .insert(f.clone(), CapacityEntry::fresh(*capacity, now, n.roster.clone()));
    }
    Ok((batch.capacities, batch.cost_ms, batch.inference_events))
}

/// Places up to `count` saturated instances of `f` using the capacity
/// tables. Nodes come from [`node_filter`]. Table nodes admit what their
/// headroom allows; the nodes without a usable entry then get their
/// capacities computed in one batched inference and admit in order. When
/// every node is exhausted, one node is added and the slow path runs on it;
/// this repeats while the new node admits something.
pub fn schedule<M: LatencyModel + ?Sized>(
    ctx: &mut SchedContext<'_, M>,
    f: &FunctionId,
    count: u32,
    now: SimTime,
) -> Result<ScheduleOutcome, SchedError> {
    let mut out = ScheduleOutcome::default();
    let mut remaining = count;
    let mut spent_ms = 0.0;
    let mut unreported_inferences = 0;
    let place = |ctx: &mut SchedContext<'_, M>,
                     node: &NodeId,
                     headroom: u32,
                     path: Path,
                     spent_ms: f64,
                     unreported: &mut u32,
                     remaining: &mut u32,
                     out: &mut ScheduleOutcome|
     -> Result<(), SchedError> {
        let k = headroom.min(*remaining);
        if k == 0 {
            return Ok(());
        }
        let reason = if path == Path::Slow { UpdateReason::NewFunction } else { UpdateReason::Admit };
        let instances = admit(ctx, f, node, k, reason, now, out)?;
        *remaining -= k;
        out.placements.push(Placement {
            node: node.clone(),
            instances,
            path,
            critical_path_ms: spent_ms,
            inference_events: core::mem::take(unreported),
        });
        Ok(())
    };
    let mut compute = Vec::new();
    for (node, tier) in node_filter(ctx.cluster, f, ctx.specs, now) {
        match tier {
            Tier::Table(h) if remaining > 0 => {
                spent_ms += ctx.config.table_lookup_ms;
                place(ctx, &node, h, Path::Fast, spent_ms, &mut unreported_inferences, &mut remaining, &mut out)?;
            }
            Tier::Table(_) => {}
            Tier::Compute => compute.push(node),
        }
    }
    if remaining > 0 && !compute.is_empty() {
        let (capacities, cost, events) = refresh_entries(ctx, f, &compute, now)?;
        spent_ms += cost;
        unreported_inferences += events;
        for (node, capacity) in compute.iter().zip(capacities) {
            if remaining == 0 {
                break;
            }
            let headroom = capacity.saturating_sub(ctx.cluster.node(node).expect("live").saturated(f));
            place(ctx, node, headroom, Path::Slow, spent_ms, &mut unreported_inferences, &mut remaining, &mut out)?;
        }
    }
    // Added nodes start empty, so one computation serves all of them.
    let mut empty_capacity = None;
    while remaining > 0 {
        let node = scale_out(ctx.cluster, now, ctx.config, false);
        out.scaled_out.push(node.clone());
        let before = remaining;
        if ctx.cluster.node(&node).is_some_and(|n| n.is_ready(now)) {
            let capacity = match empty_capacity {
                Some(c) => {
                    let n = ctx.cluster.node_mut(&node).expect("live node");
                    n.capacity_table
                        .insert(f.clone(), CapacityEntry::fresh(c, now, n.roster.clone()));
                    c
                }
                None => {
                    let (capacities, cost, events) = refresh_entries(ctx, f, core::slice::from_ref(&node), now)?;
                    spent_ms += cost;
                    unreported_inferences += events;
                    *empty_capacity.insert(capacities[0])
                }
            };
            place(ctx, &node, capacity, Path::Slow, spent_ms, &mut unreported_inferences, &mut remaining, &mut out)?;
        }
        if remaining == before {
            break;
        }
    }
    out.unplaced = remaining;
    out.wasted_ms = spent_ms - out.placements.last().map_or(0.0, |p| p.critical_path_ms);
    out.wasted_inferences = unreported_inferences;
    Ok(out)
}

/// Mean free fraction of configured resources on a node.
fn mean_free_fraction(node: &NodeState, specs: &FunctionRegistry) -> f64 {
    let used = node.configured_usage(specs);
    let axes = node.capacity.len().max(1) as f64;
    node.capacity
        .0
        .iter()
        .zip(&used.0)
        .map(|(c, u)| (c - u) / c)
        .sum::<f64>()
        / axes
}

/// Least-allocated bin packing without overcommitment: each instance goes to
/// the node with the largest mean free fraction that still fits its
/// configured resources; ties by node id; a node is added when none fits.
/// `conservative` selects the node pool reserved for conservative scheduling.
pub fn baseline_kube_schedule(
    cluster: &mut Cluster,
    specs: &FunctionRegistry,
    f: &FunctionId,
    count: u32,
    now: SimTime,
    config: &SchedulerConfig,
    conservative: bool,
) -> Result<ScheduleOutcome, SchedError> {
    let mut out = ScheduleOutcome::default();
    let spec = specs.get(f).ok_or_else(|| CapacityError::UnknownFunction(f.clone()))?;
    for _ in 0..count {
        let mut best: Option<(f64, NodeId)> = None;
        for node in cluster.nodes.values().filter(|n| usable(n, now, conservative)) {
            let used = node.configured_usage(specs);
            if !used.fits_with(&spec.configured_resources, &node.capacity) {
                continue;
            }
            let free = mean_free_fraction(node, specs);
            if best.as_ref().is_none_or(|(b, _)| free > *b) {
                best = Some((free, node.id.clone()));
            }
        }
        let node = match best {
            Some((_, id)) => id,
            None => {
                let id = scale_out(cluster, now, config, conservative);
                out.scaled_out.push(id.clone());
                let fits = cluster.node(&id).is_some_and(|n| {
                    n.is_ready(now) && n.configured_usage(specs).fits_with(&spec.configured_resources, &n.capacity)
                });
                if !fits {
                    out.unplaced += 1;
                    continue;
                }
                id
            }
        };
        let id = cluster.create_instance(f, &node, InstanceState::Saturated, now)?;
        out.placements.push(Placement {
            node,
            instances: alloc::vec![id],
            path: Path::Packing,
            critical_path_ms: config.kube_decision_ms,
            inference_events: 0,
        });
    }
    Ok(out)
}

/// Nodes in the order a per-instance validator probes them: nodes already
/// hosting `f` first, then by descending free configured resources, then id.
pub fn gsight_candidates(cluster: &Cluster, f: &FunctionId, specs: &FunctionRegistry, now: SimTime) -> Vec<NodeId> {
    let mut nodes: Vec<(bool, f64, &NodeId)> = cluster
        .nodes
        .values()
        .filter(|n| usable(n, now, false))
        .map(|n| (!n.roster.contains_key(f), n.free_configured(specs), &n.id))
        .collect();
    nodes.sort_by(|a, b| a.0.cmp(&b.0).then_with(|| b.1.total_cmp(&a.1)).then_with(|| a.2.cmp(b.2)));
    nodes.into_iter().map(|(_, _, id)| id.clone()).collect()
}

/// One batched validation of "move `f` on each node to `counts(node)`":
/// returns the first node (in `nodes` order) where every saturated function
/// is predicted to meet its QoS, plus the charged cost.
pub fn validate_first_fit<M: LatencyModel + ?Sized>(
    cluster: &Cluster,
    f: &FunctionId,
    nodes: &[NodeId],
    change: impl Fn(ConcurrencyInfo) -> ConcurrencyInfo,
    specs: &FunctionRegistry,
    model: &M,
    cost: &InferenceCostModel,
) -> Result<(Option<NodeId>, f64, u32), SchedError> {
    if nodes.is_empty() {
        return Ok((None, 0.0, 0));
    }
    let trials: Vec<crate::model::Colocation> = nodes
        .iter()
        .map(|id| {
            let node = cluster.node(id).expect("live node");
            let mut trial = node.roster.clone();
            trial.insert(f.clone(), change(node.counts(f)));
            trial
        })
        .collect();
    let queries: Vec<LatencyQuery<'_>> = trials
        .iter()
        .flat_map(|t| {
            t.iter()
                .filter(|(_, c)| c.saturated > 0)
                .map(move |(g, _)| LatencyQuery { target: g, colocation: t })
        })
        .collect();
    let batch = predict_batch(model, &queries, specs, cost)?;
    let mut preds = batch.predictions.iter();
    let mut chosen = None;
    for (id, trial) in nodes.iter().zip(&trials) {
        let mut ok = true;
        for (g, c) in trial {
            if c.saturated == 0 {
                continue;
            }
            let p = *preds.next().expect("one prediction per query");
            let spec = specs.get(g).ok_or_else(|| CapacityError::UnknownFunction(g.clone()))?;
            ok &= meets_qos(p, spec.qos_threshold_ms());
        }
        if ok && chosen.is_none() {
            chosen = Some(id.clone());
        }
    }
    Ok((chosen, batch.cost_ms, batch.inference_events))
}

/// Per-instance placement with a synchronous inference for every instance:
/// one batched validation over all candidate nodes, first passing node wins;
/// if none passes a node is added and validated with one more inference.
pub fn baseline_gsight_schedule<M: LatencyModel + ?Sized>(
    ctx: &mut SchedContext<'_, M>,
    f: &FunctionId,
    count: u32,
    now: SimTime,
) -> Result<ScheduleOutcome, SchedError> {
    let mut out = ScheduleOutcome::default();
    let add_one = |c: ConcurrencyInfo| ConcurrencyInfo::new(c.saturated + 1, c.cached);
    for _ in 0..count {
        let nodes = gsight_candidates(ctx.cluster, f, ctx.specs, now);
        let (mut chosen, mut spent, mut events) =
            validate_first_fit(ctx.cluster, f, &nodes, add_one, ctx.specs, ctx.model, ctx.cost)?;
        if chosen.is_none() {
            let id = scale_out(ctx.cluster, now, ctx.config, false);
            out.scaled_out.push(id.clone());
            if ctx.cluster.node(&id).is_some_and(|n| n.is_ready(now)) {
                let (c, s, e) = validate_first_fit(
                    ctx.cluster,
                    f,
                    core::slice::from_ref(&id),
                    add_one,
                    ctx.specs,
                    ctx.model,
                    ctx.cost,
                )?;
                chosen = c;
                spent += s;
                events += e;
            }
        }
        let Some(node) = chosen else {
            out.unplaced += 1;
            out.wasted_ms += spent;
            out.wasted_inferences += events;
            continue;
        };
        let id = ctx.cluster.create_instance(f, &node, InstanceState::Saturated, now)?;
        out.placements.push(Placement {
            node,
            instances: alloc::vec![id],
            path: Path::Slow,
            critical_path_ms: spent,
            inference_events: events,
        });
    }
    Ok(out)
}
