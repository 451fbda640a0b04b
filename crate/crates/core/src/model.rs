//! Shared domain types: functions, nodes, capacity entries and instances.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};

use crate::time::SimTime;

/// Default QoS multiplier: the tail-latency target is 120% of the solo p90.
pub const DEFAULT_QOS_MULTIPLIER: f64 = 1.2;

/// Default width of a function's profile vector.
pub const DEFAULT_PROFILE_LEN: usize = 13;

macro_rules! string_id {
    ($(#[$meta:meta])* $name:ident) => {
        $(#[$meta])*
        #[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
        #[serde(transparent)]
        pub struct $name(pub String);

        impl $name {
            pub fn new(id: impl Into<String>) -> Self {
                Self(id.into())
            }

            pub fn as_str(&self) -> &str {
                &self.0
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(&self.0)
            }
        }

        impl From<&str> for $name {
            fn from(s: &str) -> Self {
                Self(s.to_string())
            }
        }
    };
}

string_id!(
    /// Opaque function identifier. Ordering is lexicographic.
    FunctionId
);
string_id!(
    /// Opaque node identifier. Ordering is lexicographic.
    NodeId
);

/// Instance identifiers are allocated sequentially per run.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct InstanceId(pub u64);

impl fmt::Display for InstanceId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "i{}", self.0)
    }
}

/// A length-generic resource vector (CPU, memory, ... in node units).
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Resources(pub Vec<f64>);

impl Resources {
    pub fn zeros(len: usize) -> Self {
        Resources(alloc::vec![0.0; len])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn add_scaled(&mut self, other: &Resources, factor: f64) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            *a += b * factor;
        }
    }

    /// `self + other <= limit` componentwise.
    pub fn fits_with(&self, other: &Resources, limit: &Resources) -> bool {
        self.0
            .iter()
            .zip(&other.0)
            .zip(&limit.0)
            .all(|((a, b), l)| a + b <= *l + 1e-9)
    }
}

/// Solo-run profile of a function (fixed width within one run).
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ProfileVector(pub Vec<f64>);

impl ProfileVector {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn is_valid(&self) -> bool {
        self.0.iter().all(|v| v.is_finite() && *v >= 0.0)
    }
}

/// Static description of a function as known to the provider.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FunctionSpec {
    pub id: FunctionId,
    /// p90 latency of a saturated, interference-free instance.
    pub solo_latency_ms: f64,
    pub profile: ProfileVector,
    pub saturated_load_rps: f64,
    pub qos_multiplier: f64,
    pub configured_resources: Resources,
    pub max_capacity_bound: u32,
}

impl FunctionSpec {
    pub fn qos_threshold_ms(&self) -> f64 {
        qos_threshold(self)
    }
}

/// Tail-latency target of a function in milliseconds.
pub fn qos_threshold(spec: &FunctionSpec) -> f64 {
    spec.qos_multiplier * spec.solo_latency_ms
}

/// Relative slack on QoS comparisons so that a latency landing exactly on the
/// threshold (up to float rounding) counts as meeting it.
pub const QOS_RELATIVE_EPSILON: f64 = 1e-9;

/// `latency_ms` meets a QoS threshold of `threshold_ms`.
pub fn meets_qos(latency_ms: f64, threshold_ms: f64) -> bool {
    latency_ms <= threshold_ms * (1.0 + QOS_RELATIVE_EPSILON)
}

/// Registered functions of a run, keyed by id.
pub type FunctionRegistry = BTreeMap<FunctionId, FunctionSpec>;

/// A single violated invariant reported by [`validate_spec`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum SpecViolation {
    NonPositiveSoloLatency,
    NonPositiveSaturatedLoad,
    QosMultiplierBelowOne,
    InvalidProfile,
    ZeroCapacityBound,
    ResourceArity { configured: usize, demand: usize },
    ConfiguredBelowDemand { axis: usize },
}

impl fmt::Display for SpecViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SpecViolation::NonPositiveSoloLatency => f.write_str("solo latency must be positive"),
            SpecViolation::NonPositiveSaturatedLoad => f.write_str("saturated load must be positive"),
            SpecViolation::QosMultiplierBelowOne => f.write_str("qos multiplier must be at least 1"),
            SpecViolation::InvalidProfile => {
                f.write_str("profile entries must be finite and non-negative")
            }
            SpecViolation::ZeroCapacityBound => f.write_str("max capacity bound must be positive"),
            SpecViolation::ResourceArity { configured, demand } => write!(
                f,
                "configured resources have {configured} axes but demand has {demand}"
            ),
            SpecViolation::ConfiguredBelowDemand { axis } => {
                write!(f, "configured below demand on resource {axis}")
            }
        }
    }
}

/// Checks every [`FunctionSpec`] invariant. `oracle_demand` is the per-instance
/// demand expressed in the same units as `configured_resources`.
pub fn validate_spec(
    spec: FunctionSpec,
    oracle_demand: &Resources,
) -> Result<FunctionSpec, Vec<SpecViolation>> {
    let mut errors = Vec::new();
    if !(spec.solo_latency_ms > 0.0) {
        errors.push(SpecViolation::NonPositiveSoloLatency);
    }
    if !(spec.saturated_load_rps > 0.0) {
        errors.push(SpecViolation::NonPositiveSaturatedLoad);
    }
    if !(spec.qos_multiplier >= 1.0) {
        errors.push(SpecViolation::QosMultiplierBelowOne);
    }
    if !spec.profile.is_valid() {
        errors.push(SpecViolation::InvalidProfile);
    }
    if spec.max_capacity_bound == 0 {
        errors.push(SpecViolation::ZeroCapacityBound);
    }
    if spec.configured_resources.len() != oracle_demand.len() {
        errors.push(SpecViolation::ResourceArity {
            configured: spec.configured_resources.len(),
            demand: oracle_demand.len(),
        });
    } else {
        for (axis, (c, d)) in spec.configured_resources.0.iter().zip(&oracle_demand.0).enumerate() {
            if c < d {
                errors.push(SpecViolation::ConfiguredBelowDemand { axis });
            }
        }
    }
    if errors.is_empty() {
        Ok(spec)
    } else {
        Err(errors)
    }
}

/// Saturated and cached instance counts of one function (on a node or in a
/// hypothetical colocation).
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConcurrencyInfo {
    pub saturated: u32,
    pub cached: u32,
}

impl ConcurrencyInfo {
    pub const fn new(saturated: u32, cached: u32) -> Self {
        Self { saturated, cached }
    }

    pub fn total(&self) -> u32 {
        self.saturated + self.cached
    }

    pub fn is_empty(&self) -> bool {
        self.total() == 0
    }
}

/// Function → instance counts of everything sharing one node.
pub type Colocation = BTreeMap<FunctionId, ConcurrencyInfo>;

/// Maximum admissible saturated concurrency of a function on a node.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CapacityEntry {
    pub capacity: u32,
    pub computed_at: SimTime,
    /// An asynchronous update covering this entry is in flight.
    pub stale: bool,
    /// Node roster the capacity was computed against.
    pub basis: Colocation,
}

impl CapacityEntry {
    pub fn fresh(capacity: u32, now: SimTime, basis: Colocation) -> Self {
        Self {
            capacity,
            computed_at: now,
            stale: false,
            basis,
        }
    }

    /// The entry still bounds `f` safely under `roster`: no other count grew
    /// and `f`'s own cached count did not grow since the computation.
    pub fn covers(&self, f: &FunctionId, roster: &Colocation) -> bool {
        roster.iter().all(|(g, now)| {
            let then = self.basis.get(g).copied().unwrap_or_default();
            now.cached <= then.cached && (g == f || now.saturated <= then.saturated)
        })
    }
}

/// One worker node: its roster, capacity table and pending admissions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NodeState {
    pub id: NodeId,
    pub capacity: Resources,
    pub roster: Colocation,
    pub capacity_table: BTreeMap<FunctionId, CapacityEntry>,
    /// Admissions made since the last table refresh, per function.
    pub pending: BTreeMap<FunctionId, u32>,
    /// Node reserved for functions scheduled by the conservative policy.
    pub conservative: bool,
    pub ready_at: SimTime,
    pub empty_since: Option<SimTime>,
}

impl NodeState {
    pub fn new(id: NodeId, capacity: Resources, now: SimTime) -> Self {
        Self {
            id,
            capacity,
            roster: Colocation::new(),
            capacity_table: BTreeMap::new(),
            pending: BTreeMap::new(),
            conservative: false,
            ready_at: now,
            empty_since: Some(now),
        }
    }

    pub fn counts(&self, f: &FunctionId) -> ConcurrencyInfo {
        self.roster.get(f).copied().unwrap_or_default()
    }

    pub fn saturated(&self, f: &FunctionId) -> u32 {
        self.counts(f).saturated
    }

    pub fn cached(&self, f: &FunctionId) -> u32 {
        self.counts(f).cached
    }

    pub fn instance_count(&self) -> u32 {
        self.roster.values().map(ConcurrencyInfo::total).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.instance_count() == 0
    }

    pub fn is_ready(&self, now: SimTime) -> bool {
        self.ready_at <= now
    }

    pub fn pending(&self, f: &FunctionId) -> u32 {
        self.pending.get(f).copied().unwrap_or(0)
    }

    /// Σ configured resources of every live instance on the node.
    pub fn configured_usage(&self, specs: &FunctionRegistry) -> Resources {
        let mut used = Resources::zeros(self.capacity.len());
        for (f, c) in &self.roster {
            if let Some(spec) = specs.get(f) {
                used.add_scaled(&spec.configured_resources, c.total() as f64);
            }
        }
        used
    }

    /// Free configured resources on the bottleneck axis.
    pub fn free_configured(&self, specs: &FunctionRegistry) -> f64 {
        let used = self.configured_usage(specs);
        self.capacity
            .0
            .iter()
            .zip(&used.0)
            .map(|(c, u)| c - u)
            .fold(f64::INFINITY, f64::min)
    }

    /// Table capacity minus live saturated count, if an entry exists.
    pub fn headroom(&self, f: &FunctionId) -> Option<i64> {
        self.capacity_table
            .get(f)
            .map(|e| e.capacity as i64 - self.saturated(f) as i64)
    }

    /// Headroom usable for an inference-free admission: the entry must exist
    /// and its basis must still describe the node.
    pub fn fast_path_headroom(&self, f: &FunctionId) -> Option<u32> {
        let entry = self.capacity_table.get(f)?;
        if !entry.covers(f, &self.roster) {
            return None;
        }
        Some(entry.capacity.saturating_sub(self.saturated(f)))
    }

    /// No further saturated instance of `f` fits under the table capacity.
    pub fn is_full_for(&self, f: &FunctionId) -> bool {
        self.capacity_table
            .get(f)
            .is_some_and(|e| e.capacity <= self.saturated(f))
    }
}

/// Lifecycle state of an instance.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum InstanceState {
    Saturated,
    Cached,
    Evicted,
}

impl InstanceState {
    /// Legal transitions; `from == None` is instance creation.
    pub fn is_legal_transition(from: Option<InstanceState>, to: InstanceState) -> bool {
        use InstanceState::*;
        matches!(
            (from, to),
            (None, Saturated)
                | (None, Cached)
                | (Some(Saturated), Cached)
                | (Some(Cached), Saturated)
                | (Some(Cached), Evicted)
        )
    }
}

/// One instance and where it lives.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstanceRecord {
    pub id: InstanceId,
    pub function: FunctionId,
    pub node: NodeId,
    pub state: InstanceState,
    pub state_since: SimTime,
    /// Keep-alive deadline of a cached instance.
    pub evict_at: Option<SimTime>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn spec(solo: f64, mult: f64, configured: Vec<f64>) -> FunctionSpec {
        FunctionSpec {
            id: "f1".into(),
            solo_latency_ms: solo,
            profile: ProfileVector(vec![0.1; DEFAULT_PROFILE_LEN]),
            saturated_load_rps: 10.0,
            qos_multiplier: mult,
            configured_resources: Resources(configured),
            max_capacity_bound: 16,
        }
    }

    #[test]
    fn zero_solo_latency_is_rejected() {
        let errs = validate_spec(spec(0.0, 1.2, vec![8.0, 8.0]), &Resources(vec![1.0, 1.0]))
            .unwrap_err();
        assert_eq!(errs, vec![SpecViolation::NonPositiveSoloLatency]);
        assert_eq!(errs[0].to_string(), "solo latency must be positive");
    }

    #[test]
    fn configured_below_demand_names_the_axis() {
        let errs = validate_spec(spec(100.0, 1.2, vec![8.0, 8.0]), &Resources(vec![9.0, 4.0]))
            .unwrap_err();
        assert_eq!(errs.len(), 1);
        assert_eq!(errs[0].to_string(), "configured below demand on resource 0");
    }

    #[test]
    fn every_violation_is_reported() {
        let mut s = spec(-1.0, 0.5, vec![1.0]);
        s.saturated_load_rps = 0.0;
        s.max_capacity_bound = 0;
        s.profile.0[0] = f64::NAN;
        let errs = validate_spec(s, &Resources(vec![2.0])).unwrap_err();
        assert_eq!(errs.len(), 6);
    }

    #[test]
    fn qos_threshold_examples() {
        assert_eq!(qos_threshold(&spec(100.0, 1.2, vec![8.0])), 1.2 * 100.0);
        assert!((qos_threshold(&spec(100.0, 1.2, vec![8.0])) - 120.0).abs() < 1e-12);
        assert_eq!(qos_threshold(&spec(50.0, 1.0, vec![8.0])), 50.0);
        assert_eq!(qos_threshold(&spec(80.0, 1.5, vec![8.0])), 120.0);
        let ok = validate_spec(spec(100.0, 1.2, vec![8.0, 8.0]), &Resources(vec![8.0, 2.0])).unwrap();
        assert!((ok.qos_threshold_ms() - 120.0).abs() < 1e-12);
    }

    #[test]
    fn legal_transitions() {
        use InstanceState::*;
        assert!(InstanceState::is_legal_transition(None, Saturated));
        assert!(InstanceState::is_legal_transition(Some(Saturated), Cached));
        assert!(InstanceState::is_legal_transition(Some(Cached), Saturated));
        assert!(InstanceState::is_legal_transition(Some(Cached), Evicted));
        assert!(!InstanceState::is_legal_transition(Some(Saturated), Evicted));
        assert!(!InstanceState::is_legal_transition(Some(Evicted), Saturated));
        assert!(!InstanceState::is_legal_transition(None, Evicted));
    }
}
