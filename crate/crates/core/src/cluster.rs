//! Cluster state: nodes, live instances and the state-transition log.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{
    ConcurrencyInfo, FunctionId, InstanceId, InstanceRecord, InstanceState, NodeId, NodeState,
    Resources,
};
use crate::time::SimTime;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ClusterError {
    #[error("unknown node {0}")]
    UnknownNode(NodeId),
    #[error("unknown instance {0}")]
    UnknownInstance(InstanceId),
    #[error("illegal transition {from:?} -> {to:?} for {instance}")]
    IllegalTransition {
        instance: InstanceId,
        from: Option<InstanceState>,
        to: InstanceState,
    },
    #[error("node {0} still hosts instances")]
    NodeNotEmpty(NodeId),
}

/// One observed instance state change. `from == None` is creation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransitionRecord {
    pub time: SimTime,
    pub instance: InstanceId,
    pub function: FunctionId,
    pub node: NodeId,
    pub from: Option<InstanceState>,
    pub to: InstanceState,
}

#[derive(Clone, Debug)]
pub struct Cluster {
    pub nodes: BTreeMap<NodeId, NodeState>,
    /// Live (non-evicted) instances.
    pub instances: BTreeMap<InstanceId, InstanceRecord>,
    pub node_capacity: Resources,
    transitions: Vec<TransitionRecord>,
    next_instance: u64,
    next_node: u64,
}

impl Cluster {
    pub fn new(node_capacity: Resources) -> Self {
        Self {
            nodes: BTreeMap::new(),
            instances: BTreeMap::new(),
            node_capacity,
            transitions: Vec::new(),
            next_instance: 0,
            next_node: 0,
        }
    }

    /// Adds an empty node that becomes usable at `ready_at`.
    pub fn add_node(&mut self, now: SimTime, ready_at: SimTime, conservative: bool) -> NodeId {
        self.next_node += 1;
        let id = NodeId(format!("node-{:04}", self.next_node));
        let mut node = NodeState::new(id.clone(), self.node_capacity.clone(), now);
        node.ready_at = ready_at;
        node.conservative = conservative;
        self.nodes.insert(id.clone(), node);
        id
    }

    pub fn remove_node(&mut self, id: &NodeId) -> Result<NodeState, ClusterError> {
        let node = self
            .nodes
            .get(id)
            .ok_or_else(|| ClusterError::UnknownNode(id.clone()))?;
        if !node.is_empty() {
            return Err(ClusterError::NodeNotEmpty(id.clone()));
        }
        Ok(self.nodes.remove(id).expect("checked above"))
    }

    pub fn node(&self, id: &NodeId) -> Option<&NodeState> {
        self.nodes.get(id)
    }

    pub fn node_mut(&mut self, id: &NodeId) -> Option<&mut NodeState> {
        self.nodes.get_mut(id)
    }

    pub fn transitions(&self) -> &[TransitionRecord] {
        &self.transitions
    }

    /// Hands over the transitions logged so far.
    pub fn drain_transitions(&mut self) -> Vec<TransitionRecord> {
        core::mem::take(&mut self.transitions)
    }

    /// Creates an instance directly in `state` (Saturated for a real cold
    /// start, Cached for a migration replacement).
    pub fn create_instance(
        &mut self,
        function: &FunctionId,
        node_id: &NodeId,
        state: InstanceState,
        now: SimTime,
    ) -> Result<InstanceId, ClusterError> {
        let id = InstanceId(self.next_instance);
        if !InstanceState::is_legal_transition(None, state) {
            return Err(ClusterError::IllegalTransition {
                instance: id,
                from: None,
                to: state,
            });
        }
        let node = self
            .nodes
            .get_mut(node_id)
            .ok_or_else(|| ClusterError::UnknownNode(node_id.clone()))?;
        self.next_instance += 1;
        let counts = node.roster.entry(function.clone()).or_default();
        match state {
            InstanceState::Saturated => counts.saturated += 1,
            _ => counts.cached += 1,
        }
        node.empty_since = None;
        self.instances.insert(
            id,
            InstanceRecord {
                id,
                function: function.clone(),
                node: node_id.clone(),
                state,
                state_since: now,
                evict_at: None,
            },
        );
        self.transitions.push(TransitionRecord {
            time: now,
            instance: id,
            function: function.clone(),
            node: node_id.clone(),
            from: None,
            to: state,
        });
        Ok(id)
    }

    /// Moves an instance along a legal transition and keeps the roster, the
    /// capacity-table lifecycle and the transition log consistent.
    pub fn transition(
        &mut self,
        instance: InstanceId,
        to: InstanceState,
        now: SimTime,
    ) -> Result<(), ClusterError> {
        let rec = self
            .instances
            .get(&instance)
            .ok_or(ClusterError::UnknownInstance(instance))?;
        let from = rec.state;
        if !InstanceState::is_legal_transition(Some(from), to) {
            return Err(ClusterError::IllegalTransition {
                instance,
                from: Some(from),
                to,
            });
        }
        let function = rec.function.clone();
        let node_id = rec.node.clone();
        let node = self
            .nodes
            .get_mut(&node_id)
            .ok_or_else(|| ClusterError::UnknownNode(node_id.clone()))?;
        let counts = node.roster.entry(function.clone()).or_default();
        match (from, to) {
            (InstanceState::Saturated, InstanceState::Cached) => {
                counts.saturated -= 1;
                counts.cached += 1;
            }
            (InstanceState::Cached, InstanceState::Saturated) => {
                counts.cached -= 1;
                counts.saturated += 1;
            }
            (InstanceState::Cached, InstanceState::Evicted) => {
                counts.cached -= 1;
            }
            _ => unreachable!("legality checked above"),
        }
        let now_empty = counts.is_empty();
        if now_empty {
            node.roster.remove(&function);
            node.capacity_table.remove(&function);
            node.pending.remove(&function);
        }
        if node.roster.is_empty() {
            node.empty_since = Some(now);
        }
        if to == InstanceState::Evicted {
            self.instances.remove(&instance);
        } else {
            let rec = self.instances.get_mut(&instance).expect("present");
            rec.state = to;
            rec.state_since = now;
            if to == InstanceState::Saturated {
                rec.evict_at = None;
            }
        }
        self.transitions.push(TransitionRecord {
            time: now,
            instance,
            function,
            node: node_id,
            from: Some(from),
            to,
        });
        Ok(())
    }

    /// Cluster-wide counts of one function.
    pub fn totals(&self, f: &FunctionId) -> ConcurrencyInfo {
        let mut total = ConcurrencyInfo::default();
        for node in self.nodes.values() {
            let c = node.counts(f);
            total.saturated += c.saturated;
            total.cached += c.cached;
        }
        total
    }

    pub fn instances_in_state<'a>(
        &'a self,
        f: &'a FunctionId,
        state: InstanceState,
    ) -> impl Iterator<Item = &'a InstanceRecord> + 'a {
        self.instances
            .values()
            .filter(move |r| &r.function == f && r.state == state)
    }

    pub fn instance_count(&self) -> u32 {
        self.nodes.values().map(NodeState::instance_count).sum()
    }

    /// Roster counts must equal the number of live instance records in the
    /// matching state, node by node.
    pub fn audit_roster(&self) -> Result<(), String> {
        let mut recount: BTreeMap<(NodeId, FunctionId), ConcurrencyInfo> = BTreeMap::new();
        for rec in self.instances.values() {
            let c = recount
                .entry((rec.node.clone(), rec.function.clone()))
                .or_default();
            match rec.state {
                InstanceState::Saturated => c.saturated += 1,
                InstanceState::Cached => c.cached += 1,
                InstanceState::Evicted => return Err(format!("evicted record {} kept live", rec.id)),
            }
        }
        for (nid, node) in &self.nodes {
            for (f, c) in &node.roster {
                let got = recount.remove(&(nid.clone(), f.clone())).unwrap_or_default();
                if got != *c {
                    return Err(format!("{nid}/{f}: roster {c:?} vs records {got:?}"));
                }
            }
        }
        if let Some(((n, f), _)) = recount.into_iter().next() {
            return Err(format!("records for {n}/{f} missing from roster"));
        }
        Ok(())
    }
}

/// Number of illegal transitions in a log (zero for every valid run).
pub fn audit_transitions(log: &[TransitionRecord]) -> usize {
    let mut last: BTreeMap<InstanceId, InstanceState> = BTreeMap::new();
    let mut illegal = 0;
    for t in log {
        let known = last.get(&t.instance).copied();
        if known != t.from || !InstanceState::is_legal_transition(t.from, t.to) {
            illegal += 1;
        }
        last.insert(t.instance, t.to);
    }
    illegal
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{CapacityEntry, Colocation};
    use alloc::vec;

    fn cluster() -> (Cluster, NodeId) {
        let mut c = Cluster::new(Resources(vec![48.0, 48.0]));
        let n = c.add_node(SimTime::ZERO, SimTime::ZERO, false);
        (c, n)
    }

    #[test]
    fn lifecycle_keeps_roster_consistent() {
        let (mut c, n) = cluster();
        let f: FunctionId = "f".into();
        let a = c.create_instance(&f, &n, InstanceState::Saturated, SimTime::ZERO).unwrap();
        let b = c.create_instance(&f, &n, InstanceState::Saturated, SimTime::ZERO).unwrap();
        c.transition(a, InstanceState::Cached, SimTime::from_secs(1)).unwrap();
        assert_eq!(c.totals(&f), ConcurrencyInfo::new(1, 1));
        c.audit_roster().unwrap();
        c.transition(a, InstanceState::Saturated, SimTime::from_secs(2)).unwrap();
        assert_eq!(c.totals(&f), ConcurrencyInfo::new(2, 0));
        c.transition(a, InstanceState::Cached, SimTime::from_secs(3)).unwrap();
        c.transition(b, InstanceState::Cached, SimTime::from_secs(3)).unwrap();
        c.transition(a, InstanceState::Evicted, SimTime::from_secs(4)).unwrap();
        c.transition(b, InstanceState::Evicted, SimTime::from_secs(4)).unwrap();
        assert!(c.node(&n).unwrap().is_empty());
        assert_eq!(c.node(&n).unwrap().empty_since, Some(SimTime::from_secs(4)));
        c.audit_roster().unwrap();
        assert_eq!(audit_transitions(c.transitions()), 0);
    }

    #[test]
    fn saturated_cannot_be_evicted_directly() {
        let (mut c, n) = cluster();
        let a = c
            .create_instance(&"f".into(), &n, InstanceState::Saturated, SimTime::ZERO)
            .unwrap();
        assert!(matches!(
            c.transition(a, InstanceState::Evicted, SimTime::ZERO),
            Err(ClusterError::IllegalTransition { .. })
        ));
    }

    #[test]
    fn last_eviction_drops_the_table_entry() {
        let (mut c, n) = cluster();
        let f: FunctionId = "f".into();
        let a = c.create_instance(&f, &n, InstanceState::Saturated, SimTime::ZERO).unwrap();
        c.node_mut(&n)
            .unwrap()
            .capacity_table
            .insert(f.clone(), CapacityEntry::fresh(4, SimTime::ZERO, Colocation::new()));
        c.transition(a, InstanceState::Cached, SimTime::ZERO).unwrap();
        assert!(c.node(&n).unwrap().capacity_table.contains_key(&f));
        c.transition(a, InstanceState::Evicted, SimTime::ZERO).unwrap();
        assert!(!c.node(&n).unwrap().capacity_table.contains_key(&f));
    }

    #[test]
    fn foreign_growth_invalidates_fast_path() {
        let (mut c, n) = cluster();
        let f: FunctionId = "f".into();
        let g: FunctionId = "g".into();
        c.create_instance(&f, &n, InstanceState::Saturated, SimTime::ZERO).unwrap();
        c.node_mut(&n)
            .unwrap()
            .capacity_table
            .insert(f.clone(), CapacityEntry::fresh(4, SimTime::ZERO, Colocation::new()));
        c.create_instance(&f, &n, InstanceState::Saturated, SimTime::ZERO).unwrap();
        assert_eq!(c.node(&n).unwrap().fast_path_headroom(&f), Some(2));
        c.create_instance(&g, &n, InstanceState::Saturated, SimTime::ZERO).unwrap();
        assert_eq!(c.node(&n).unwrap().fast_path_headroom(&f), None);
    }

    #[test]
    fn scale_in_requires_empty_node() {
        let (mut c, n) = cluster();
        c.create_instance(&"f".into(), &n, InstanceState::Saturated, SimTime::ZERO)
            .unwrap();
        assert_eq!(c.remove_node(&n), Err(ClusterError::NodeNotEmpty(n.clone())));
    }
}
