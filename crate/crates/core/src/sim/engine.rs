//! Single-threaded discrete-event loop over virtual time.
//!
//! Events at the same instant run in a fixed class order (table updates,
//! load changes, releases, evictions, scale-in, evaluation tick) and then in
//! insertion order. Decisions take no simulated time; their cost is recorded
//! as critical-path latency. Metrics start at the end of the warm-up.

use alloc::collections::{BTreeMap, BTreeSet, VecDeque};
use alloc::vec::Vec;

use super::config::ScenarioConfig;
use super::events::{EventRecord, NodeAction, ScalingAction, StartKind};
use super::metrics::{window_mass, Accumulator, MetricsReport};
use super::trace::TraceSignal;
use super::SimError;
use crate::capacity::{apply_update_completion, Enqueued, UpdateQueue, UpdateReason, UpdateTask};
use crate::cluster::Cluster;
use crate::model::{FunctionId, FunctionRegistry, InstanceId, InstanceState, NodeId, Resources};
use crate::oracle::ContentionOracle;
use crate::predictor::{
    assemble_features, ForestPredictor, IncrementalLearner, LatencyModel, LatencyQuery, PerfectPredictor,
    PredictabilityMonitor, PredictorError, Sample, Verdict,
};
use crate::rng::{self, StreamRng};
use crate::scaling::{
    migrate_stranded, reactivate_from_tables, reactivate_with_validation, select_release_victims, FunctionScaler,
    LoadAction, Reactivation, ScalingConfig,
};
use crate::scheduler::{
    baseline_gsight_schedule, baseline_kube_schedule, scale_in, schedule, Policy, SchedContext, ScheduleOutcome,
};
use crate::time::SimTime;

/// Observations kept per function for a monitor-triggered retrain.
const RETRAIN_BUFFER: usize = 64;

/// Latency model handed to a run.
#[derive(Clone, Debug)]
pub enum Plug {
    /// Oracle truth behind the model interface.
    Perfect,
    /// Trained forest plus its training set for incremental retrains.
    Forest(IncrementalLearner),
}

#[derive(Clone, Debug)]
enum Model {
    Perfect(PerfectPredictor),
    Forest(ForestPredictor),
}

impl LatencyModel for Model {
    fn predict_queries(&self, queries: &[LatencyQuery<'_>], specs: &FunctionRegistry) -> Result<Vec<f64>, PredictorError> {
        match self {
            Model::Perfect(m) => m.predict_queries(queries, specs),
            Model::Forest(m) => m.predict_queries(queries, specs),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
enum Class {
    Update,
    Load,
    Release,
    Evict,
    ScaleIn,
    Tick,
}

#[derive(Clone, Debug)]
enum Event {
    UpdateComplete { node: NodeId, completes_at: SimTime },
    Load { function: FunctionId, rps: f64 },
    Release { function: FunctionId, generation: u64 },
    Evict { instance: InstanceId, at: SimTime },
    ScaleIn { node: NodeId, empty_since: SimTime },
    Tick,
}

impl Event {
    fn class(&self) -> Class {
        match self {
            Event::UpdateComplete { .. } => Class::Update,
            Event::Load { .. } => Class::Load,
            Event::Release { .. } => Class::Release,
            Event::Evict { .. } => Class::Evict,
            Event::ScaleIn { .. } => Class::ScaleIn,
            Event::Tick => Class::Tick,
        }
    }
}

/// Report and event log of one policy run.
#[derive(Clone, Debug, PartialEq)]
pub struct RunOutput {
    pub report: MetricsReport,
    pub events: Vec<EventRecord>,
}

/// Scaling parameters a policy actually runs with: the bin-packing baseline
/// has no cached stage.
pub fn effective_scaling(cfg: &ScenarioConfig) -> ScalingConfig {
    let mut s = cfg.scaling.clone();
    if cfg.policy == Policy::Kube {
        s.release_duration_s = s.keep_alive_s;
    }
    s
}

struct Engine<'a> {
    cfg: &'a ScenarioConfig,
    oracle: &'a ContentionOracle,
    specs: &'a FunctionRegistry,
    scaling: ScalingConfig,
    horizon: SimTime,
    window: SimTime,
    warmup: SimTime,
    measuring: bool,
    model: Model,
    learner: Option<IncrementalLearner>,
    monitor: Option<PredictabilityMonitor>,
    monitor_rng: StreamRng,
    observations: BTreeMap<FunctionId, VecDeque<Sample>>,
    fallback: BTreeSet<FunctionId>,
    cluster: Cluster,
    queue: UpdateQueue,
    scalers: BTreeMap<FunctionId, FunctionScaler>,
    rps: BTreeMap<FunctionId, f64>,
    agenda: BTreeMap<(SimTime, Class, u64), Event>,
    seq: u64,
    now: SimTime,
    log: Vec<EventRecord>,
    m: Accumulator,
}

/// Runs `cfg.policy` over `trace` without density normalization.
pub fn simulate(
    cfg: &ScenarioConfig,
    oracle: &ContentionOracle,
    specs: &FunctionRegistry,
    trace: &TraceSignal,
    plug: &Plug,
) -> Result<RunOutput, SimError> {
    cfg.validate()?;
    let (model, learner) = match plug {
        Plug::Perfect => (Model::Perfect(PerfectPredictor { oracle: oracle.clone() }), None),
        Plug::Forest(learner) => (
            Model::Forest(ForestPredictor {
                model: learner.model().clone(),
                gamma_feat: cfg.gamma_feat(),
            }),
            Some(learner.clone()),
        ),
    };
    let monitored = cfg.predictor.monitor.enabled && learner.is_some() && cfg.policy == Policy::Capsched;
    let mon = &cfg.predictor.monitor;
    let mut engine = Engine {
        cfg,
        oracle,
        specs,
        scaling: effective_scaling(cfg),
        horizon: SimTime::from_secs_f64(cfg.horizon_s),
        window: SimTime::from_secs_f64(cfg.window_s),
        warmup: SimTime::from_secs_f64(cfg.warmup_s),
        measuring: false,
        model,
        learner,
        monitor: monitored.then(|| PredictabilityMonitor::new(mon.error_threshold, mon.consecutive_bad_limit, mon.retrain_limit)),
        monitor_rng: rng::stream(cfg.seed, "monitor"),
        observations: BTreeMap::new(),
        fallback: BTreeSet::new(),
        cluster: Cluster::new(Resources(cfg.cluster.node_capacity.clone())),
        queue: UpdateQueue::new(),
        scalers: specs.keys().map(|f| (f.clone(), FunctionScaler::default())).collect(),
        rps: BTreeMap::new(),
        agenda: BTreeMap::new(),
        seq: 0,
        now: SimTime::ZERO,
        log: Vec::new(),
        m: Accumulator::default(),
    };
    for (f, points) in &trace.functions {
        if !specs.contains_key(f) {
            return Err(SimError::Trace("trace names an unknown function"));
        }
        for (t_ms, rps) in points {
            let at = SimTime::from_millis(*t_ms);
            engine.push(at, Event::Load { function: f.clone(), rps: *rps });
        }
    }
    if engine.horizon > SimTime::ZERO {
        engine.push(SimTime::ZERO, Event::Tick);
    }
    while let Some(((at, _, _), event)) = engine.agenda.pop_first() {
        if at >= engine.horizon {
            break;
        }
        engine.now = at;
        if !engine.measuring && at >= engine.warmup {
            // Metrics cover [warmup, horizon).
            engine.m = Accumulator::default();
            engine.measuring = true;
        }
        engine.handle(event)?;
    }
    engine.m.cold.runtime_init_ms = engine.scaling.real_cold_start_ms();
    let report = engine.m.finish(cfg.policy, cfg.horizon_s, cfg.warmup_s);
    Ok(RunOutput {
        report,
        events: engine.log,
    })
}

impl Engine<'_> {
    fn push(&mut self, at: SimTime, event: Event) {
        self.seq += 1;
        self.agenda.insert((at, event.class(), self.seq), event);
    }

    fn push_tasks(&mut self, tasks: Vec<UpdateTask>) {
        for t in tasks {
            self.push(
                t.completes_at,
                Event::UpdateComplete {
                    node: t.node,
                    completes_at: t.completes_at,
                },
            );
        }
    }

    fn uses_tables(&self) -> bool {
        self.cfg.policy == Policy::Capsched
    }

    fn enqueue(&mut self, node: &NodeId, reason: UpdateReason) -> Result<(), SimError> {
        if !self.uses_tables() {
            return Ok(());
        }
        let Some(n) = self.cluster.node_mut(node) else { return Ok(()) };
        if let Enqueued::Started(task) = self.queue.enqueue_update(n, reason, self.now, self.specs, &self.cfg.predictor.cost)? {
            self.push_tasks(alloc::vec![task]);
        }
        Ok(())
    }

    fn flush_transitions(&mut self) {
        let drained = self.cluster.drain_transitions();
        self.log.extend(drained.into_iter().map(EventRecord::from));
    }

    fn log_nodes_added(&mut self, nodes: &[NodeId]) {
        for id in nodes {
            let conservative = self.cluster.node(id).is_some_and(|n| n.conservative);
            self.log.push(EventRecord::Node {
                t_us: self.now,
                node: id.clone(),
                action: NodeAction::Added,
                conservative,
            });
            self.m.density.nodes_added += 1;
        }
    }

    /// Arms the scale-in check of `node` if it is empty.
    fn arm_scale_in(&mut self, node: &NodeId) {
        let Some(n) = self.cluster.node(node) else { return };
        if let (true, Some(since)) = (n.is_empty(), n.empty_since) {
            let at = since + self.scaling.keep_alive();
            self.push(
                at.max(self.now),
                Event::ScaleIn {
                    node: node.clone(),
                    empty_since: since,
                },
            );
        }
    }

    fn handle(&mut self, event: Event) -> Result<(), SimError> {
        match event {
            Event::UpdateComplete { node, completes_at } => self.on_update(&node, completes_at),
            Event::Load { function, rps } => self.on_load(&function, rps),
            Event::Release { function, generation } => self.on_release(&function, generation),
            Event::Evict { instance, at } => self.on_evict(instance, at),
            Event::ScaleIn { node, empty_since } => self.on_scale_in(&node, empty_since),
            Event::Tick => self.on_tick(),
        }
    }

    fn on_load(&mut self, f: &FunctionId, rps: f64) -> Result<(), SimError> {
        self.log.push(EventRecord::Load {
            t_us: self.now,
            function: f.clone(),
            rps,
        });
        self.rps.insert(f.clone(), rps);
        let spec = &self.specs[f];
        let saturated = self.cluster.totals(f).saturated;
        let scaler = self.scalers.get_mut(f).expect("scaler per function");
        let action = scaler.on_load_change(spec, rps, saturated, self.now, &self.scaling)?;
        match action {
            LoadAction::Hold => Ok(()),
            LoadAction::ScaleUp { need } => self.scale_up(f, need),
            LoadAction::ArmRelease { due, generation } => {
                self.push(due, Event::Release { function: f.clone(), generation });
                Ok(())
            }
        }
    }

    fn scale_up(&mut self, f: &FunctionId, need: u32) -> Result<(), SimError> {
        let fallback = self.fallback.contains(f);
        let want = need.min(self.cluster.totals(f).cached);
        let mut logical = 0;
        if want > 0 {
            let mut ctx = SchedContext {
                cluster: &mut self.cluster,
                queue: &mut self.queue,
                specs: self.specs,
                model: &self.model,
                cost: &self.cfg.predictor.cost,
                config: &self.cfg.scheduler,
            };
            let react = match self.cfg.policy {
                Policy::Capsched if !fallback => reactivate_from_tables(&mut ctx, f, want, self.now)?,
                Policy::Capsched | Policy::Gsight => reactivate_with_validation(&mut ctx, f, want, self.now)?,
                Policy::Kube => Reactivation::default(),
            };
            logical = react.starts.len() as u32;
            let real = want - logical;
            let c = &mut self.m.cold;
            c.reactivations += u64::from(want);
            c.reactivations_logical += u64::from(logical);
            c.reactivations_real += u64::from(real);
            c.reactivations_real_from_full += u64::from(real.min(react.blocked));
            self.flush_transitions();
            for s in &react.starts {
                self.log.push(EventRecord::Schedule {
                    t_us: self.now,
                    function: f.clone(),
                    requested: want,
                    node: s.node.clone(),
                    admitted: 1,
                    path: s.path,
                    kind: StartKind::Logical,
                    critical_path_ms: s.critical_path_ms,
                    inference_events: s.inference_events,
                });
                let latency = s.critical_path_ms + self.scaling.logical_start_ms;
                self.log.push(EventRecord::Scaling {
                    t_us: self.now,
                    function: f.clone(),
                    action: ScalingAction::LogicalStart,
                    node: s.node.clone(),
                    instance: s.instance,
                    latency_ms: latency,
                });
                self.m.record_schedule(f, s.path, s.critical_path_ms, s.inference_events);
                self.m.record_logical_start(f, latency);
            }
            self.m.record_waste(react.wasted_ms, react.wasted_inferences);
            self.push_tasks(react.tasks);
        }
        let remaining = need - logical;
        if remaining == 0 {
            return Ok(());
        }
        let out = self.place_new(f, remaining, fallback)?;
        self.log_nodes_added(&out.scaled_out);
        self.flush_transitions();
        let init = self.scaling.real_cold_start_ms();
        for p in &out.placements {
            self.log.push(EventRecord::Schedule {
                t_us: self.now,
                function: f.clone(),
                requested: remaining,
                node: p.node.clone(),
                admitted: p.admitted(),
                path: p.path,
                kind: StartKind::Real,
                critical_path_ms: p.critical_path_ms,
                inference_events: p.inference_events,
            });
            for (i, id) in p.instances.iter().enumerate() {
                let events = if i == 0 { p.inference_events } else { 0 };
                self.m.record_schedule(f, p.path, p.critical_path_ms, events);
                self.m.record_real_start(f, p.critical_path_ms + init);
                self.log.push(EventRecord::Scaling {
                    t_us: self.now,
                    function: f.clone(),
                    action: ScalingAction::RealColdStart,
                    node: p.node.clone(),
                    instance: *id,
                    latency_ms: p.critical_path_ms + init,
                });
            }
        }
        self.m.record_waste(out.wasted_ms, out.wasted_inferences);
        for node in &out.scaled_out {
            self.arm_scale_in(node);
        }
        self.push_tasks(out.tasks);
        Ok(())
    }

    fn place_new(&mut self, f: &FunctionId, count: u32, fallback: bool) -> Result<ScheduleOutcome, SimError> {
        let now = self.now;
        if self.cfg.policy == Policy::Kube || fallback {
            return Ok(baseline_kube_schedule(
                &mut self.cluster,
                self.specs,
                f,
                count,
                now,
                &self.cfg.scheduler,
                fallback,
            )?);
        }
        let mut ctx = SchedContext {
            cluster: &mut self.cluster,
            queue: &mut self.queue,
            specs: self.specs,
            model: &self.model,
            cost: &self.cfg.predictor.cost,
            config: &self.cfg.scheduler,
        };
        Ok(match self.cfg.policy {
            Policy::Gsight => baseline_gsight_schedule(&mut ctx, f, count, now)?,
            _ => schedule(&mut ctx, f, count, now)?,
        })
    }

    fn on_release(&mut self, f: &FunctionId, generation: u64) -> Result<(), SimError> {
        let saturated = self.cluster.totals(f).saturated;
        let scaler = self.scalers.get_mut(f).expect("scaler per function");
        let Some((k, since)) = scaler.release_due(generation, saturated) else {
            return Ok(());
        };
        let victims = select_release_victims(&self.cluster, f, k)?;
        let classic = self.scaling.is_classic_keep_alive();
        let evict_at = (since + self.scaling.keep_alive()).max(self.now);
        let mut touched = BTreeSet::new();
        for id in victims {
            let node = self.cluster.instances[&id].node.clone();
            self.cluster.transition(id, InstanceState::Cached, self.now)?;
            let action = if classic {
                self.cluster.transition(id, InstanceState::Evicted, self.now)?;
                ScalingAction::Evict
            } else {
                self.cluster.instances.get_mut(&id).expect("cached instance").evict_at = Some(evict_at);
                self.push(evict_at, Event::Evict { instance: id, at: evict_at });
                ScalingAction::Release
            };
            self.log.push(EventRecord::Scaling {
                t_us: self.now,
                function: f.clone(),
                action,
                node: node.clone(),
                instance: id,
                latency_ms: 0.0,
            });
            touched.insert(node);
        }
        self.flush_transitions();
        let reason = if classic { UpdateReason::Evict } else { UpdateReason::Release };
        for node in &touched {
            self.enqueue(node, reason)?;
            self.arm_scale_in(node);
        }
        Ok(())
    }

    fn on_evict(&mut self, instance: InstanceId, at: SimTime) -> Result<(), SimError> {
        let Some(rec) = self.cluster.instances.get(&instance) else { return Ok(()) };
        if rec.state != InstanceState::Cached || rec.evict_at != Some(at) {
            return Ok(());
        }
        let (node, function) = (rec.node.clone(), rec.function.clone());
        self.cluster.transition(instance, InstanceState::Evicted, self.now)?;
        self.flush_transitions();
        self.log.push(EventRecord::Scaling {
            t_us: self.now,
            function,
            action: ScalingAction::Evict,
            node: node.clone(),
            instance,
            latency_ms: 0.0,
        });
        self.enqueue(&node, UpdateReason::Evict)?;
        self.arm_scale_in(&node);
        Ok(())
    }

    fn on_scale_in(&mut self, node: &NodeId, empty_since: SimTime) -> Result<(), SimError> {
        let Some(n) = self.cluster.node(node) else { return Ok(()) };
        if !n.is_empty() || n.empty_since != Some(empty_since) {
            return Ok(());
        }
        let removed = scale_in(&mut self.cluster, &mut self.queue, node)?;
        self.log.push(EventRecord::Node {
            t_us: self.now,
            node: node.clone(),
            action: NodeAction::Removed,
            conservative: removed.conservative,
        });
        self.m.density.nodes_removed += 1;
        Ok(())
    }

    fn on_update(&mut self, node: &NodeId, completes_at: SimTime) -> Result<(), SimError> {
        let Some(task) = self.queue.in_flight(node) else { return Ok(()) };
        if task.completes_at != completes_at {
            return Ok(());
        }
        let (reason, enqueued_at) = (task.reason, task.enqueued_at);
        let n = self.cluster.node_mut(node).expect("in-flight update on a live node");
        let outcome = apply_update_completion(n, self.specs, &self.model, &self.cfg.predictor.cost, self.now)?;
        self.log.push(EventRecord::Update {
            t_us: self.now,
            node: node.clone(),
            reason,
            enqueued_us: enqueued_at,
            rows: outcome.rows,
            cost_ms: outcome.cost_ms,
        });
        self.m.updates.completed += 1;
        self.m.updates.rows += outcome.rows as u64;
        self.m.updates.cost_ms += outcome.cost_ms;
        self.m.record_background_inferences(outcome.inference_events);
        self.observe(node)?;
        if self.cfg.scaling.migration {
            self.migrate(node)?;
        }
        if let Some(reason) = self.queue.finish(node) {
            self.enqueue(node, reason)?;
        }
        Ok(())
    }

    fn migrate(&mut self, node: &NodeId) -> Result<(), SimError> {
        let mut ctx = SchedContext {
            cluster: &mut self.cluster,
            queue: &mut self.queue,
            specs: self.specs,
            model: &self.model,
            cost: &self.cfg.predictor.cost,
            config: &self.cfg.scheduler,
        };
        let out = migrate_stranded(&mut ctx, node, self.scaling.real_cold_start_ms(), self.now)?;
        self.log_nodes_added(&out.scaled_out);
        self.flush_transitions();
        for mig in &out.migrations {
            self.log.push(EventRecord::Scaling {
                t_us: self.now,
                function: mig.function.clone(),
                action: ScalingAction::Migrate,
                node: mig.to_node.clone(),
                instance: mig.replacement,
                latency_ms: mig.background_ms,
            });
            if let Some(at) = mig.evict_at {
                let at = at.max(self.now);
                self.cluster
                    .instances
                    .get_mut(&mig.replacement)
                    .expect("replacement is live")
                    .evict_at = Some(at);
                self.push(at, Event::Evict { instance: mig.replacement, at });
            }
        }
        self.m.cold.migrations += out.migrations.len() as u64;
        self.m.cold.migration_background_ms += out.background_ms;
        self.m.record_background_inferences(out.inference_events);
        self.push_tasks(out.tasks);
        self.arm_scale_in(node);
        for n in &out.scaled_out {
            self.arm_scale_in(n);
        }
        Ok(())
    }

    /// Feeds the predictability monitor with one noisy observation per
    /// saturated function on `node`.
    fn observe(&mut self, node: &NodeId) -> Result<(), SimError> {
        if self.monitor.is_none() {
            return Ok(());
        }
        let roster = self.cluster.node(node).expect("live node").roster.clone();
        for (g, c) in &roster {
            if c.saturated == 0 || self.fallback.contains(g) {
                continue;
            }
            let query = [LatencyQuery { target: g, colocation: &roster }];
            let predicted = self.model.predict_queries(&query, self.specs)?[0];
            let observed = self.oracle.observe_sample(g, &roster, &mut self.monitor_rng)?;
            let row = assemble_features(g, &roster, self.specs, self.cfg.gamma_feat())?;
            let buffer = self.observations.entry(g.clone()).or_default();
            buffer.push_back(Sample { row, latency_ms: observed });
            while buffer.len() > RETRAIN_BUFFER {
                buffer.pop_front();
            }
            self.m.monitor.observations += 1;
            let verdict = self
                .monitor
                .as_mut()
                .expect("checked above")
                .record_observation(g, predicted, observed);
            match verdict {
                Verdict::Ok => continue,
                Verdict::Retrain => {
                    let fresh: Vec<Sample> = self.observations.remove(g).unwrap_or_default().into();
                    let learner = self.learner.as_mut().expect("monitor implies a forest");
                    let model = learner.incremental_update(&fresh)?.clone();
                    self.model = Model::Forest(ForestPredictor {
                        model,
                        gamma_feat: self.cfg.gamma_feat(),
                    });
                    self.m.monitor.retrains += 1;
                }
                Verdict::Fallback => {
                    self.fallback.insert(g.clone());
                    self.m.monitor.fallback_functions.push(g.clone());
                }
            }
            self.log.push(EventRecord::Verdict {
                t_us: self.now,
                function: g.clone(),
                verdict,
            });
        }
        Ok(())
    }

    fn on_tick(&mut self) -> Result<(), SimError> {
        let dt = self.window.min(self.horizon - self.now);
        let dt_s = dt.as_secs_f64();
        let w = window_mass(
            self.oracle,
            self.specs,
            self.cluster.nodes.values().map(|n| &n.roster),
            &self.rps,
            dt_s,
        )?;
        let nodes = self.cluster.nodes.len() as u32;
        self.m.record_window(&w, self.cluster.instance_count(), nodes, dt_s);
        let next = self.now + dt;
        if next < self.horizon {
            self.push(next, Event::Tick);
        }
        Ok(())
    }
}
