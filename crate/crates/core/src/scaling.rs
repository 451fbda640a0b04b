//! Autoscaler and router: expected instances, dual-staged release and
//! eviction, logical cold starts and migration of stranded cached instances.

use alloc::collections::BTreeMap;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::capacity::{Enqueued, UpdateReason, UpdateTask};
use crate::cluster::Cluster;
use crate::model::{ConcurrencyInfo, FunctionId, FunctionSpec, InstanceId, InstanceState, NodeId};
use crate::predictor::LatencyModel;
use crate::scheduler::{refresh_entry, scale_out, validate_first_fit, Path, SchedContext, SchedError};
use crate::time::SimTime;

/// Instance initialisation cost of the container runtime.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RuntimePreset {
    Cfork,
    Docker,
}

impl RuntimePreset {
    pub fn init_ms(self) -> f64 {
        match self {
            RuntimePreset::Cfork => 8.4,
            RuntimePreset::Docker => 85.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScalingConfig {
    pub release_duration_s: f64,
    pub keep_alive_s: f64,
    pub logical_start_ms: f64,
    pub runtime: RuntimePreset,
    pub migration: bool,
}

impl Default for ScalingConfig {
    fn default() -> Self {
        Self {
            release_duration_s: 45.0,
            keep_alive_s: 60.0,
            logical_start_ms: 0.5,
            runtime: RuntimePreset::Cfork,
            migration: true,
        }
    }
}

impl ScalingConfig {
    pub fn real_cold_start_ms(&self) -> f64 {
        self.runtime.init_ms()
    }

    /// Release at or beyond keep-alive disables the cached stage.
    pub fn is_classic_keep_alive(&self) -> bool {
        self.release_duration_s >= self.keep_alive_s
    }

    pub fn release_duration(&self) -> SimTime {
        SimTime::from_secs_f64(self.release_duration_s)
    }

    pub fn keep_alive(&self) -> SimTime {
        SimTime::from_secs_f64(self.keep_alive_s)
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ScalingError {
    #[error("rps must be finite and non-negative")]
    NegativeRps,
    #[error("cannot release {requested} of {available} saturated instances")]
    TooManyVictims { requested: u32, available: u32 },
}

/// Saturated instances needed for `rps`: `ceil(rps / saturated load)`.
pub fn expected_saturated(spec: &FunctionSpec, rps: f64) -> Result<u32, ScalingError> {
    if !(rps >= 0.0 && rps.is_finite()) {
        return Err(ScalingError::NegativeRps);
    }
    Ok(libm::ceil(rps / spec.saturated_load_rps) as u32)
}

/// Autoscaler state of one function.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FunctionScaler {
    pub rps: f64,
    pub expected: u32,
    /// Start of the current continuous stretch with expected below saturated.
    pub below_since: Option<SimTime>,
    /// Bumped whenever a pending release is cancelled.
    pub generation: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LoadAction {
    /// Nothing to do now.
    Hold,
    /// `need` more saturated instances are required.
    ScaleUp { need: u32 },
    /// Arm a release check at `due` tagged with `generation`.
    ArmRelease { due: SimTime, generation: u64 },
}

impl FunctionScaler {
    /// Reacts to a new rate. A release is armed when expected first drops
    /// below the saturated count; it is cancelled when expected recovers.
    pub fn on_load_change(
        &mut self,
        spec: &FunctionSpec,
        rps: f64,
        saturated: u32,
        now: SimTime,
        cfg: &ScalingConfig,
    ) -> Result<LoadAction, ScalingError> {
        self.rps = rps;
        self.expected = expected_saturated(spec, rps)?;
        Ok(self.reconcile(saturated, now, cfg))
    }

    /// Re-evaluates against the current saturated count.
    pub fn reconcile(&mut self, saturated: u32, now: SimTime, cfg: &ScalingConfig) -> LoadAction {
        if self.expected >= saturated {
            if self.below_since.take().is_some() {
                self.generation += 1;
            }
            return match self.expected - saturated {
                0 => LoadAction::Hold,
                need => LoadAction::ScaleUp { need },
            };
        }
        if self.below_since.is_some() {
            return LoadAction::Hold;
        }
        self.below_since = Some(now);
        let stage = if cfg.is_classic_keep_alive() { cfg.keep_alive() } else { cfg.release_duration() };
        LoadAction::ArmRelease {
            due: now + stage,
            generation: self.generation,
        }
    }

    /// Number of instances to release when the check tagged `generation`
    /// fires at `now`, if it is still current.
    pub fn release_due(&mut self, generation: u64, saturated: u32) -> Option<(u32, SimTime)> {
        if generation != self.generation {
            return None;
        }
        let since = self.below_since.take()?;
        self.generation += 1;
        let k = saturated.saturating_sub(self.expected);
        (k > 0).then_some((k, since))
    }
}

/// Picks `k` saturated instances of `f` to release: nodes whose
/// saturated + cached count most exceeds the table capacity first, then by
/// node id and instance id.
pub fn select_release_victims(cluster: &Cluster, f: &FunctionId, k: u32) -> Result<Vec<InstanceId>, ScalingError> {
    let mut candidates: Vec<(i64, &NodeId, InstanceId)> = cluster
        .instances_in_state(f, InstanceState::Saturated)
        .map(|rec| {
            let node = cluster.node(&rec.node).expect("instance on live node");
            let c = node.counts(f);
            let capacity = node
                .capacity_table
                .get(f)
                .map_or(c.total() as i64, |e| e.capacity as i64);
            (c.total() as i64 - capacity, &rec.node, rec.id)
        })
        .collect();
    if (candidates.len() as u32) < k {
        return Err(ScalingError::TooManyVictims {
            requested: k,
            available: candidates.len() as u32,
        });
    }
    candidates.sort_by(|a, b| b.0.cmp(&a.0).then_with(|| a.1.cmp(b.1)).then_with(|| a.2.cmp(&b.2)));
    Ok(candidates.into_iter().take(k as usize).map(|(_, _, id)| id).collect())
}

/// Load split over the saturated instances of one function.
#[derive(Clone, Debug, PartialEq)]
pub struct Routing {
    /// Rate per saturated instance; cached instances receive nothing.
    pub per_instance_rps: f64,
    /// Rate routed to each node.
    pub per_node_rps: BTreeMap<NodeId, f64>,
    /// Load arrives but no saturated instance exists.
    pub unservable: bool,
    /// Per-instance rate exceeds the saturated load.
    pub overloaded: bool,
}

/// Splits `rps` equally across saturated instances of `f`.
pub fn route_load(cluster: &Cluster, spec: &FunctionSpec, rps: f64) -> Routing {
    let mut per_node_rps = BTreeMap::new();
    let saturated = cluster.totals(&spec.id).saturated;
    if saturated == 0 {
        return Routing {
            per_instance_rps: 0.0,
            per_node_rps,
            unservable: rps > 0.0,
            overloaded: false,
        };
    }
    let per_instance_rps = rps / saturated as f64;
    for node in cluster.nodes.values() {
        let s = node.saturated(&spec.id);
        if s > 0 {
            per_node_rps.insert(node.id.clone(), per_instance_rps * s as f64);
        }
    }
    Routing {
        per_instance_rps,
        per_node_rps,
        unservable: false,
        overloaded: per_instance_rps > spec.saturated_load_rps * (1.0 + 1e-9),
    }
}

/// One cached instance brought back to saturated.
#[derive(Clone, Debug, PartialEq)]
pub struct LogicalStart {
    pub instance: InstanceId,
    pub node: NodeId,
    pub path: Path,
    /// Decision cost accumulated up to this start.
    pub critical_path_ms: f64,
    pub inference_events: u32,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Reactivation {
    pub starts: Vec<LogicalStart>,
    /// Cached instances left behind on nodes without headroom.
    pub blocked: u32,
    pub tasks: Vec<UpdateTask>,
    pub wasted_ms: f64,
    pub wasted_inferences: u32,
}

fn cached_by_node(cluster: &Cluster, f: &FunctionId) -> BTreeMap<NodeId, Vec<InstanceId>> {
    let mut by_node: BTreeMap<NodeId, Vec<InstanceId>> = BTreeMap::new();
    for rec in cluster.instances_in_state(f, InstanceState::Cached) {
        by_node.entry(rec.node.clone()).or_default().push(rec.id);
    }
    by_node
}

/// Logical cold starts from the capacity tables: up to `want` cached
/// instances of `f` return to saturated on nodes whose capacity allows it.
/// Nodes not full for `f` go first, then by node id. A node whose entry no
/// longer describes its roster is recomputed synchronously.
pub fn reactivate_from_tables<M: LatencyModel + ?Sized>(
    ctx: &mut SchedContext<'_, M>,
    f: &FunctionId,
    want: u32,
    now: SimTime,
) -> Result<Reactivation, SchedError> {
    let mut out = Reactivation::default();
    let by_node = cached_by_node(ctx.cluster, f);
    let mut order: Vec<(bool, NodeId)> = by_node
        .keys()
        .map(|id| (ctx.cluster.node(id).expect("live").is_full_for(f), id.clone()))
        .collect();
    order.sort();
    let (mut spent, mut events, mut remaining) = (0.0, 0u32, want);
    for (_, node) in order {
        let cached = &by_node[&node];
        if remaining == 0 {
            continue;
        }
        let n = ctx.cluster.node(&node).expect("live");
        let (headroom, path) = match n.fast_path_headroom(f) {
            Some(h) => {
                spent += ctx.config.table_lookup_ms;
                (h, Path::Fast)
            }
            None => {
                let (capacity, cost, e) = refresh_entry(ctx, f, &node, now)?;
                spent += cost;
                events += e;
                (capacity.saturating_sub(ctx.cluster.node(&node).expect("live").saturated(f)), Path::Slow)
            }
        };
        let k = headroom.min(remaining).min(cached.len() as u32);
        out.blocked += cached.len() as u32 - k;
        if k == 0 {
            continue;
        }
        for id in &cached[..k as usize] {
            ctx.cluster.transition(*id, InstanceState::Saturated, now)?;
            out.starts.push(LogicalStart {
                instance: *id,
                node: node.clone(),
                path,
                critical_path_ms: spent,
                inference_events: core::mem::take(&mut events),
            });
        }
        remaining -= k;
        let n = ctx.cluster.node_mut(&node).expect("live");
        *n.pending.entry(f.clone()).or_insert(0) += k;
        if let Enqueued::Started(task) = ctx.queue.enqueue_update(n, UpdateReason::LogicalStart, now, ctx.specs, ctx.cost)? {
            out.tasks.push(task);
        }
    }
    out.wasted_ms = spent - out.starts.last().map_or(0.0, |s| s.critical_path_ms);
    out.wasted_inferences = events;
    Ok(out)
}

/// Logical cold starts validated by inference, one batched validation per
/// instance over every node holding a cached instance of `f`.
pub fn reactivate_with_validation<M: LatencyModel + ?Sized>(
    ctx: &mut SchedContext<'_, M>,
    f: &FunctionId,
    want: u32,
    now: SimTime,
) -> Result<Reactivation, SchedError> {
    let mut out = Reactivation::default();
    let promote = |c: ConcurrencyInfo| ConcurrencyInfo::new(c.saturated + 1, c.cached.saturating_sub(1));
    for _ in 0..want {
        let by_node = cached_by_node(ctx.cluster, f);
        if by_node.is_empty() {
            break;
        }
        let nodes: Vec<NodeId> = by_node.keys().cloned().collect();
        let (chosen, cost, events) = validate_first_fit(ctx.cluster, f, &nodes, promote, ctx.specs, ctx.model, ctx.cost)?;
        let Some(node) = chosen else {
            out.wasted_ms += cost;
            out.wasted_inferences += events;
            break;
        };
        let id = by_node[&node][0];
        ctx.cluster.transition(id, InstanceState::Saturated, now)?;
        out.starts.push(LogicalStart {
            instance: id,
            node,
            path: Path::Slow,
            critical_path_ms: cost,
            inference_events: events,
        });
    }
    out.blocked = ctx.cluster.totals(f).cached;
    Ok(out)
}

/// A cached instance moved off a node whose capacity no longer covers all
/// of the function's instances.
#[derive(Clone, Debug, PartialEq)]
pub struct Migration {
    pub function: FunctionId,
    pub from_node: NodeId,
    pub evicted: InstanceId,
    pub to_node: NodeId,
    pub replacement: InstanceId,
    pub evict_at: Option<SimTime>,
    /// Background cost: inference plus instance initialisation.
    pub background_ms: f64,
    pub inference_events: u32,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MigrationOutcome {
    pub migrations: Vec<Migration>,
    /// Excess cached instances for which no node was found.
    pub stranded: u32,
    pub tasks: Vec<UpdateTask>,
    pub scaled_out: Vec<NodeId>,
    pub background_ms: f64,
    pub inference_events: u32,
}

fn slack(cluster: &Cluster, node: &NodeId, f: &FunctionId) -> Option<i64> {
    let n = cluster.node(node)?;
    let entry = n.capacity_table.get(f)?;
    Some(entry.capacity as i64 - n.counts(f).total() as i64)
}

/// For each function on `node` whose saturated + cached count exceeds its
/// capacity, moves the excess cached instances to nodes with room for one
/// more instance of the function: a replacement is created there in the
/// cached state (inheriting the keep-alive deadline) and the stranded
/// instance is evicted. Costs go to the background ledger.
pub fn migrate_stranded<M: LatencyModel + ?Sized>(
    ctx: &mut SchedContext<'_, M>,
    node: &NodeId,
    init_ms: f64,
    now: SimTime,
) -> Result<MigrationOutcome, SchedError> {
    let mut out = MigrationOutcome::default();
    let Some(n) = ctx.cluster.node(node) else { return Ok(out) };
    let excess: Vec<(FunctionId, u32)> = n
        .roster
        .iter()
        .filter_map(|(f, c)| {
            let capacity = n.capacity_table.get(f)?.capacity;
            let over = c.total().saturating_sub(capacity).min(c.cached);
            (over > 0).then(|| (f.clone(), over))
        })
        .collect();
    for (f, over) in excess {
        let victims: Vec<(InstanceId, Option<SimTime>)> = ctx
            .cluster
            .instances_in_state(&f, InstanceState::Cached)
            .filter(|r| &r.node == node)
            .take(over as usize)
            .map(|r| (r.id, r.evict_at))
            .collect();
        for (victim, evict_at) in victims {
            let (target, cost, events) = migration_target(ctx, &f, node, now, &mut out)?;
            out.background_ms += cost;
            out.inference_events += events;
            let Some(target) = target else {
                out.stranded += 1;
                continue;
            };
            let replacement = ctx.cluster.create_instance(&f, &target, InstanceState::Cached, now)?;
            ctx.cluster
                .instances
                .get_mut(&replacement)
                .expect("just created")
                .evict_at = evict_at;
            ctx.cluster.transition(victim, InstanceState::Evicted, now)?;
            for id in [&target, node] {
                if let Some(n) = ctx.cluster.node_mut(id) {
                    if let Enqueued::Started(task) =
                        ctx.queue.enqueue_update(n, UpdateReason::Migration, now, ctx.specs, ctx.cost)?
                    {
                        out.tasks.push(task);
                    }
                }
            }
            out.background_ms += init_ms;
            out.migrations.push(Migration {
                function: f.clone(),
                from_node: node.clone(),
                evicted: victim,
                to_node: target,
                replacement,
                evict_at,
                background_ms: cost + init_ms,
                inference_events: events,
            });
        }
    }
    Ok(out)
}

/// First node other than `source` with room for one more instance of `f`:
/// valid entries with slack first, then nodes needing a computation, then a
/// new node.
fn migration_target<M: LatencyModel + ?Sized>(
    ctx: &mut SchedContext<'_, M>,
    f: &FunctionId,
    source: &NodeId,
    now: SimTime,
    out: &mut MigrationOutcome,
) -> Result<(Option<NodeId>, f64, u32), SchedError> {
    let mut table: Vec<(i64, NodeId)> = Vec::new();
    let mut compute: Vec<(f64, NodeId)> = Vec::new();
    for n in ctx.cluster.nodes.values() {
        if &n.id == source || n.conservative || !n.is_ready(now) {
            continue;
        }
        match n.fast_path_headroom(f) {
            Some(_) => {
                let s = slack(ctx.cluster, &n.id, f).unwrap_or(0);
                if s >= 1 {
                    table.push((s, n.id.clone()));
                }
            }
            None => compute.push((n.free_configured(ctx.specs), n.id.clone())),
        }
    }
    table.sort_by(|a, b| b.0.cmp(&a.0).then_with(|| a.1.cmp(&b.1)));
    if let Some((_, id)) = table.into_iter().next() {
        return Ok((Some(id), 0.0, 0));
    }
    compute.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.cmp(&b.1)));
    let (mut spent, mut events) = (0.0, 0);
    for (_, id) in compute {
        let (_, cost, e) = refresh_entry(ctx, f, &id, now)?;
        spent += cost;
        events += e;
        if slack(ctx.cluster, &id, f).unwrap_or(0) >= 1 {
            return Ok((Some(id), spent, events));
        }
    }
    let id = scale_out(ctx.cluster, now, ctx.config, false);
    out.scaled_out.push(id.clone());
    if !ctx.cluster.node(&id).is_some_and(|n| n.is_ready(now)) {
        return Ok((None, spent, events));
    }
    let (_, cost, e) = refresh_entry(ctx, f, &id, now)?;
    spent += cost;
    events += e;
    let fits = slack(ctx.cluster, &id, f).unwrap_or(0) >= 1;
    Ok((fits.then_some(id), spent, events))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::capacity::UpdateQueue;
    use crate::model::{CapacityEntry, Colocation, FunctionRegistry, ProfileVector, Resources};
    use crate::oracle::{ContentionOracle, FunctionGroundTruth, OracleParams};
    use crate::predictor::{InferenceCostModel, PerfectPredictor};
    use crate::scheduler::SchedulerConfig;
    use alloc::vec;

    fn spec(id: &str) -> FunctionSpec {
        FunctionSpec {
            id: id.into(),
            solo_latency_ms: 100.0,
            profile: ProfileVector(vec![0.0; 13]),
            saturated_load_rps: 10.0,
            qos_multiplier: 1.2,
            configured_resources: Resources(vec![8.0, 8.0]),
            max_capacity_bound: 16,
        }
    }

    #[test]
    fn expected_instances_round_up() {
        let s = spec("f");
        assert_eq!(expected_saturated(&s, 0.0), Ok(0));
        assert_eq!(expected_saturated(&s, 10.0), Ok(1));
        assert_eq!(expected_saturated(&s, 25.0), Ok(3));
        assert_eq!(expected_saturated(&s, -1.0), Err(ScalingError::NegativeRps));
    }

    fn cfg(release: f64, keep: f64) -> ScalingConfig {
        ScalingConfig {
            release_duration_s: release,
            keep_alive_s: keep,
            ..ScalingConfig::default()
        }
    }

    #[test]
    fn drop_arms_release_and_recovery_cancels_it() {
        let s = spec("f");
        let c = cfg(10.0, 60.0);
        let mut st = FunctionScaler::default();
        assert_eq!(
            st.on_load_change(&s, 40.0, 0, SimTime::ZERO, &c).unwrap(),
            LoadAction::ScaleUp { need: 4 }
        );
        let t = SimTime::from_secs(100);
        let LoadAction::ArmRelease { due, generation } = st.on_load_change(&s, 10.0, 4, t, &c).unwrap() else {
            panic!("expected a release timer");
        };
        assert_eq!(due, SimTime::from_secs(110));
        assert_eq!(st.on_load_change(&s, 40.0, 4, SimTime::from_secs(105), &c).unwrap(), LoadAction::Hold);
        assert_eq!(st.release_due(generation, 4), None);
    }

    #[test]
    fn release_fires_for_the_current_shortfall() {
        let s = spec("f");
        let c = cfg(45.0, 60.0);
        let mut st = FunctionScaler::default();
        st.on_load_change(&s, 40.0, 0, SimTime::ZERO, &c).unwrap();
        let LoadAction::ArmRelease { generation, .. } = st.on_load_change(&s, 30.0, 4, SimTime::from_secs(1), &c).unwrap() else {
            panic!()
        };
        // A further drop inside the stretch keeps the original timer.
        assert_eq!(st.on_load_change(&s, 10.0, 4, SimTime::from_secs(2), &c).unwrap(), LoadAction::Hold);
        assert_eq!(st.release_due(generation, 4), Some((3, SimTime::from_secs(1))));
        assert_eq!(st.below_since, None);
    }

    #[test]
    fn classic_keep_alive_arms_at_keep_alive() {
        let s = spec("f");
        let c = cfg(60.0, 60.0);
        assert!(c.is_classic_keep_alive());
        let mut st = FunctionScaler::default();
        st.on_load_change(&s, 10.0, 0, SimTime::ZERO, &c).unwrap();
        assert_eq!(
            st.on_load_change(&s, 0.0, 1, SimTime::from_secs(5), &c).unwrap(),
            LoadAction::ArmRelease { due: SimTime::from_secs(65), generation: 0 }
        );
    }

    fn two_node_cluster() -> (Cluster, NodeId, NodeId) {
        let mut c = Cluster::new(Resources(vec![48.0, 48.0]));
        let a = c.add_node(SimTime::ZERO, SimTime::ZERO, false);
        let b = c.add_node(SimTime::ZERO, SimTime::ZERO, false);
        (c, a, b)
    }

    #[test]
    fn victims_prefer_full_nodes_then_ids() {
        let (mut c, a, b) = two_node_cluster();
        let f: FunctionId = "f".into();
        for node in [&a, &a, &b, &b] {
            c.create_instance(&f, node, InstanceState::Saturated, SimTime::ZERO).unwrap();
        }
        c.node_mut(&a).unwrap().capacity_table.insert(f.clone(), CapacityEntry::fresh(6, SimTime::ZERO, Colocation::new()));
        c.node_mut(&b).unwrap().capacity_table.insert(f.clone(), CapacityEntry::fresh(2, SimTime::ZERO, Colocation::new()));
        let v = select_release_victims(&c, &f, 1).unwrap();
        assert_eq!(c.instances[&v[0]].node, b);
        let all = select_release_victims(&c, &f, 4).unwrap();
        assert_eq!(all.len(), 4);
        assert_eq!(all, select_release_victims(&c, &f, 4).unwrap());
        assert!(select_release_victims(&c, &f, 5).is_err());
    }

    #[test]
    fn routing_ignores_cached_instances() {
        let (mut c, a, b) = two_node_cluster();
        let s = spec("f");
        let i = c.create_instance(&s.id, &a, InstanceState::Saturated, SimTime::ZERO).unwrap();
        c.create_instance(&s.id, &a, InstanceState::Saturated, SimTime::ZERO).unwrap();
        c.create_instance(&s.id, &b, InstanceState::Saturated, SimTime::ZERO).unwrap();
        let r = route_load(&c, &s, 25.0);
        assert!((r.per_instance_rps - 25.0 / 3.0).abs() < 1e-12);
        c.transition(i, InstanceState::Cached, SimTime::ZERO).unwrap();
        let r = route_load(&c, &s, 20.0);
        assert_eq!(r.per_node_rps[&a], 10.0);
        assert_eq!(r.per_node_rps[&b], 10.0);
        assert!(!r.overloaded);
        let (empty, ..) = two_node_cluster();
        let r = route_load(&empty, &s, 5.0);
        assert!(r.unservable);
        assert_eq!(r.per_instance_rps, 0.0);
    }

    struct Fx {
        cluster: Cluster,
        queue: UpdateQueue,
        specs: FunctionRegistry,
        model: PerfectPredictor,
        cost: InferenceCostModel,
        config: SchedulerConfig,
    }

    impl Fx {
        fn new() -> Self {
            let mut oracle = ContentionOracle::new(OracleParams {
                resource_axes: 1,
                theta: vec![0.6],
                noise_sigma: 0.0,
                ..OracleParams::default()
            })
            .unwrap();
            oracle
                .register(
                    "f".into(),
                    FunctionGroundTruth {
                        demand: vec![0.1],
                        sensitivity: vec![5.0],
                        solo_latency_ms: 100.0,
                    },
                )
                .unwrap();
            let mut specs = FunctionRegistry::new();
            specs.insert("f".into(), spec("f"));
            let (cluster, ..) = two_node_cluster();
            Self {
                cluster,
                queue: UpdateQueue::new(),
                specs,
                model: PerfectPredictor { oracle },
                cost: InferenceCostModel::default(),
                config: SchedulerConfig::default(),
            }
        }

        fn ctx(&mut self) -> SchedContext<'_, PerfectPredictor> {
            SchedContext {
                cluster: &mut self.cluster,
                queue: &mut self.queue,
                specs: &self.specs,
                model: &self.model,
                cost: &self.cost,
                config: &self.config,
            }
        }
    }

    #[test]
    fn stranded_excess_migrates_exactly() {
        let mut fx = Fx::new();
        let a: NodeId = "node-0001".into();
        let f: FunctionId = "f".into();
        let mut ids = Vec::new();
        for _ in 0..5 {
            ids.push(fx.cluster.create_instance(&f, &a, InstanceState::Saturated, SimTime::ZERO).unwrap());
        }
        for id in &ids[3..] {
            fx.cluster.transition(*id, InstanceState::Cached, SimTime::ZERO).unwrap();
        }
        let roster = fx.cluster.node(&a).unwrap().roster.clone();
        fx.cluster.node_mut(&a).unwrap().capacity_table.insert(f.clone(), CapacityEntry::fresh(4, SimTime::ZERO, roster));
        let out = migrate_stranded(&mut fx.ctx(), &a, 8.4, SimTime::from_secs(1)).unwrap();
        assert_eq!(out.migrations.len(), 1);
        assert_eq!(out.stranded, 0);
        let m = &out.migrations[0];
        assert_eq!(m.to_node.as_str(), "node-0002");
        assert_eq!(fx.cluster.node(&a).unwrap().counts(&f), ConcurrencyInfo::new(3, 1));
        assert_eq!(fx.cluster.node(&m.to_node).unwrap().counts(&f), ConcurrencyInfo::new(0, 1));
        assert!(m.background_ms > 8.4);
        fx.cluster.audit_roster().unwrap();
    }

    #[test]
    fn no_excess_no_migration() {
        let mut fx = Fx::new();
        let a: NodeId = "node-0001".into();
        let f: FunctionId = "f".into();
        let i = fx.cluster.create_instance(&f, &a, InstanceState::Saturated, SimTime::ZERO).unwrap();
        fx.cluster.transition(i, InstanceState::Cached, SimTime::ZERO).unwrap();
        let roster = fx.cluster.node(&a).unwrap().roster.clone();
        fx.cluster.node_mut(&a).unwrap().capacity_table.insert(f.clone(), CapacityEntry::fresh(8, SimTime::ZERO, roster));
        let out = migrate_stranded(&mut fx.ctx(), &a, 8.4, SimTime::ZERO).unwrap();
        assert!(out.migrations.is_empty());
    }

    #[test]
    fn table_reactivation_respects_headroom() {
        let mut fx = Fx::new();
        let a: NodeId = "node-0001".into();
        let f: FunctionId = "f".into();
        let mut ids = Vec::new();
        for _ in 0..9 {
            ids.push(fx.cluster.create_instance(&f, &a, InstanceState::Saturated, SimTime::ZERO).unwrap());
        }
        for id in &ids[5..] {
            fx.cluster.transition(*id, InstanceState::Cached, SimTime::ZERO).unwrap();
        }
        let roster = fx.cluster.node(&a).unwrap().roster.clone();
        fx.cluster.node_mut(&a).unwrap().capacity_table.insert(f.clone(), CapacityEntry::fresh(7, SimTime::ZERO, roster));
        let out = reactivate_from_tables(&mut fx.ctx(), &f, 4, SimTime::ZERO).unwrap();
        assert_eq!(out.starts.len(), 2);
        assert!(out.starts.iter().all(|s| s.path == Path::Fast && s.inference_events == 0));
        assert_eq!(out.blocked, 2);
        assert_eq!(fx.cluster.node(&a).unwrap().counts(&f), ConcurrencyInfo::new(7, 2));
    }
}
