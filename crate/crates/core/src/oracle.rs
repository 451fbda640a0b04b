//! Synthetic contention ground truth.
//!
//! Each function has a hidden per-instance demand vector (fraction of one
//! node, per resource axis) and a sensitivity vector. A colocation loads axis
//! `r` with `u_r = Σ_f (sat_f + γ·cached_f)·demand_{f,r}` and a function's p90
//! latency is
//!
//! ```text
//! solo · (1 + Σ_r sensitivity_r · max(0, u_r − θ_r)^α)
//! ```
//!
//! The form is monotone in every instance count and contention-free below the
//! thresholds, so capacities have an exact brute-force answer.

use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{
    meets_qos, qos_threshold, Colocation, ConcurrencyInfo, FunctionId, FunctionRegistry, ProfileVector,
    DEFAULT_PROFILE_LEN,
};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum OracleError {
    #[error("unknown function {0}")]
    UnknownFunction(FunctionId),
    #[error("invalid oracle parameters: {0}")]
    InvalidParams(&'static str),
    #[error("invalid ground truth for {0}: {1}")]
    InvalidGroundTruth(FunctionId, &'static str),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OracleParams {
    pub resource_axes: usize,
    /// Per-axis contention threshold in [0, 1].
    pub theta: Vec<f64>,
    pub alpha: f64,
    /// Fraction of a saturated instance's demand held by a cached instance.
    pub gamma: f64,
    pub noise_sigma: f64,
    pub seed: u64,
    pub profile_len: usize,
}

impl Default for OracleParams {
    fn default() -> Self {
        Self {
            resource_axes: 4,
            theta: vec![0.6; 4],
            alpha: 2.0,
            gamma: 0.1,
            noise_sigma: 0.05,
            seed: 0,
            profile_len: DEFAULT_PROFILE_LEN,
        }
    }
}

impl OracleParams {
    pub fn validate(&self) -> Result<(), OracleError> {
        if self.resource_axes == 0 {
            return Err(OracleError::InvalidParams("resource_axes must be positive"));
        }
        if self.theta.len() != self.resource_axes {
            return Err(OracleError::InvalidParams("theta length must equal resource_axes"));
        }
        if self.theta.iter().any(|t| !(0.0..=1.0).contains(t)) {
            return Err(OracleError::InvalidParams("theta must lie in [0, 1]"));
        }
        if !(self.alpha > 0.0) {
            return Err(OracleError::InvalidParams("alpha must be positive"));
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(OracleError::InvalidParams("gamma must lie in [0, 1)"));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(OracleError::InvalidParams("noise_sigma must be non-negative"));
        }
        if self.profile_len == 0 {
            return Err(OracleError::InvalidParams("profile_len must be positive"));
        }
        Ok(())
    }
}

/// Hidden truth about one function.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FunctionGroundTruth {
    pub demand: Vec<f64>,
    pub sensitivity: Vec<f64>,
    pub solo_latency_ms: f64,
}

/// Ranges used to draw synthetic ground truths.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GroundTruthRanges {
    /// Demand on the function's dominant axis.
    pub dominant_demand: (f64, f64),
    /// Demand on every other axis.
    pub minor_demand: (f64, f64),
    pub sensitivity: (f64, f64),
    pub solo_latency_ms: (f64, f64),
}

impl Default for GroundTruthRanges {
    fn default() -> Self {
        Self {
            dominant_demand: (0.06, 0.10),
            minor_demand: (0.01, 0.04),
            sensitivity: (2.0, 6.0),
            solo_latency_ms: (20.0, 200.0),
        }
    }
}

impl FunctionGroundTruth {
    /// Draws a ground truth whose dominant axis is `index % axes`.
    pub fn sample<R: Rng + ?Sized>(
        index: usize,
        axes: usize,
        ranges: &GroundTruthRanges,
        rng: &mut R,
    ) -> Self {
        let dominant = index % axes;
        let mut uniform = |(lo, hi): (f64, f64)| lo + (hi - lo) * rng.random::<f64>();
        let demand = (0..axes)
            .map(|r| {
                if r == dominant {
                    uniform(ranges.dominant_demand)
                } else {
                    uniform(ranges.minor_demand)
                }
            })
            .collect();
        let sensitivity = (0..axes).map(|_| uniform(ranges.sensitivity)).collect();
        let solo_latency_ms = uniform(ranges.solo_latency_ms);
        Self {
            demand,
            sensitivity,
            solo_latency_ms,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ContentionOracle {
    pub params: OracleParams,
    pub truths: BTreeMap<FunctionId, FunctionGroundTruth>,
}

impl ContentionOracle {
    pub fn new(params: OracleParams) -> Result<Self, OracleError> {
        params.validate()?;
        Ok(Self {
            params,
            truths: BTreeMap::new(),
        })
    }

    pub fn register(&mut self, id: FunctionId, truth: FunctionGroundTruth) -> Result<(), OracleError> {
        let axes = self.params.resource_axes;
        if truth.demand.len() != axes || truth.sensitivity.len() != axes {
            return Err(OracleError::InvalidGroundTruth(id, "vector length differs from resource_axes"));
        }
        if truth.demand.iter().any(|d| !(*d > 0.0 && *d <= 1.0)) {
            return Err(OracleError::InvalidGroundTruth(id, "demand entries must lie in (0, 1]"));
        }
        if truth.sensitivity.iter().any(|s| !s.is_finite() || *s < 0.0) {
            return Err(OracleError::InvalidGroundTruth(id, "sensitivity must be finite and non-negative"));
        }
        if !(truth.solo_latency_ms > 0.0) {
            return Err(OracleError::InvalidGroundTruth(id, "solo latency must be positive"));
        }
        self.truths.insert(id, truth);
        Ok(())
    }

    pub fn truth(&self, id: &FunctionId) -> Result<&FunctionGroundTruth, OracleError> {
        self.truths
            .get(id)
            .ok_or_else(|| OracleError::UnknownFunction(id.clone()))
    }

    /// Per-axis load `u_r` of a colocation.
    pub fn utilization(&self, colocation: &Colocation) -> Result<Vec<f64>, OracleError> {
        let mut u = vec![0.0; self.params.resource_axes];
        for (f, c) in colocation {
            let truth = self.truth(f)?;
            let weight = c.saturated as f64 + self.params.gamma * c.cached as f64;
            for (acc, d) in u.iter_mut().zip(&truth.demand) {
                *acc += weight * d;
            }
        }
        Ok(u)
    }

    fn slowdown(&self, truth: &FunctionGroundTruth, u: &[f64]) -> f64 {
        let penalty: f64 = u
            .iter()
            .zip(&self.params.theta)
            .zip(&truth.sensitivity)
            .map(|((u, theta), s)| {
                let over = u - theta;
                if over > 0.0 {
                    s * libm::pow(over, self.params.alpha)
                } else {
                    0.0
                }
            })
            .sum();
        1.0 + penalty
    }

    /// Noise-free p90 latency of `target` under `colocation`.
    pub fn true_latency(&self, target: &FunctionId, colocation: &Colocation) -> Result<f64, OracleError> {
        let truth = self.truth(target)?;
        let u = self.utilization(colocation)?;
        Ok(truth.solo_latency_ms * self.slowdown(truth, &u))
    }

    /// One profiled latency observation with multiplicative Gaussian noise,
    /// clamped at 1% of the true value.
    pub fn observe_sample<R: Rng + ?Sized>(
        &self,
        target: &FunctionId,
        colocation: &Colocation,
        rng: &mut R,
    ) -> Result<f64, OracleError> {
        let truth = self.true_latency(target, colocation)?;
        Ok(truth * self.noise_factor(rng))
    }

    fn noise_factor<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        if self.params.noise_sigma == 0.0 {
            return 1.0;
        }
        let normal = Normal::new(0.0, self.params.noise_sigma).expect("sigma validated");
        f64::max(0.01, 1.0 + normal.sample(rng))
    }

    /// Deterministic expansion of a ground truth into profile features.
    ///
    /// Layout: demand (one per axis), demand⊙sensitivity (one per axis), then
    /// Σ demand, max demand, Σ demand·sensitivity, max sensitivity, mean
    /// sensitivity. Truncated or zero-padded to `profile_len`.
    pub fn profile_expansion(&self, truth: &FunctionGroundTruth) -> ProfileVector {
        let mut features: Vec<f64> = truth.demand.clone();
        features.extend(truth.demand.iter().zip(&truth.sensitivity).map(|(d, s)| d * s));
        let sum_d: f64 = truth.demand.iter().sum();
        let max_d = truth.demand.iter().copied().fold(0.0, f64::max);
        let sum_ds: f64 = truth.demand.iter().zip(&truth.sensitivity).map(|(d, s)| d * s).sum();
        let max_s = truth.sensitivity.iter().copied().fold(0.0, f64::max);
        let mean_s = truth.sensitivity.iter().sum::<f64>() / truth.sensitivity.len() as f64;
        features.extend([sum_d, max_d, sum_ds, max_s, mean_s]);
        features.resize(self.params.profile_len, 0.0);
        ProfileVector(features)
    }

    /// Solo-run profiling: noisy profile features plus one solo latency
    /// observation.
    pub fn solo_profile<R: Rng + ?Sized>(
        &self,
        target: &FunctionId,
        rng: &mut R,
    ) -> Result<(ProfileVector, f64), OracleError> {
        let truth = self.truth(target)?;
        let mut profile = self.profile_expansion(truth);
        for v in profile.0.iter_mut() {
            *v *= self.noise_factor(rng);
        }
        let mut solo = Colocation::new();
        solo.insert(target.clone(), ConcurrencyInfo::new(1, 0));
        let latency = self.observe_sample(target, &solo, rng)?;
        Ok((profile, latency))
    }

    /// Every function with a saturated instance meets its QoS threshold.
    pub fn is_feasible(&self, colocation: &Colocation, specs: &FunctionRegistry) -> Result<bool, OracleError> {
        for (g, c) in colocation {
            if c.saturated == 0 {
                continue;
            }
            let spec = specs
                .get(g)
                .ok_or_else(|| OracleError::UnknownFunction(g.clone()))?;
            if !meets_qos(self.true_latency(g, colocation)?, qos_threshold(spec)) {
                return Ok(false);
            }
        }
        Ok(true)
    }

    /// Largest saturated count `c ≤ max_capacity_bound` of `target` such that
    /// every colocated function (target included) meets its QoS; the target's
    /// cached count and all other counts are held fixed.
    pub fn brute_force_capacity(
        &self,
        colocation: &Colocation,
        target: &FunctionId,
        specs: &FunctionRegistry,
    ) -> Result<u32, OracleError> {
        let spec = specs
            .get(target)
            .ok_or_else(|| OracleError::UnknownFunction(target.clone()))?;
        self.truth(target)?;
        let mut trial = colocation.clone();
        let cached = colocation.get(target).map_or(0, |c| c.cached);
        let mut best = 0;
        for c in 0..=spec.max_capacity_bound {
            trial.insert(target.clone(), ConcurrencyInfo::new(c, cached));
            if self.is_feasible(&trial, specs)? {
                best = c;
            }
        }
        Ok(best)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{FunctionSpec, Resources};
    use crate::rng;
    use proptest::prelude::*;

    fn one_axis_oracle(sigma: f64) -> ContentionOracle {
        let params = OracleParams {
            resource_axes: 1,
            theta: vec![0.6],
            noise_sigma: sigma,
            ..OracleParams::default()
        };
        let mut o = ContentionOracle::new(params).unwrap();
        o.register(
            "f".into(),
            FunctionGroundTruth {
                demand: vec![0.1],
                sensitivity: vec![5.0],
                solo_latency_ms: 100.0,
            },
        )
        .unwrap();
        o
    }

    fn spec_for(id: &str, solo: f64, bound: u32) -> FunctionSpec {
        FunctionSpec {
            id: id.into(),
            solo_latency_ms: solo,
            profile: ProfileVector(vec![0.0; 13]),
            saturated_load_rps: 10.0,
            qos_multiplier: 1.2,
            configured_resources: Resources(vec![8.0, 8.0]),
            max_capacity_bound: bound,
        }
    }

    fn coloc(entries: &[(&str, u32, u32)]) -> Colocation {
        entries
            .iter()
            .map(|(f, s, c)| (FunctionId::from(*f), ConcurrencyInfo::new(*s, *c)))
            .collect()
    }

    #[test]
    fn no_contention_returns_solo_latency() {
        let o = one_axis_oracle(0.0);
        assert_eq!(o.true_latency(&"f".into(), &coloc(&[("f", 1, 0)])).unwrap(), 100.0);
        assert_eq!(o.true_latency(&"f".into(), &coloc(&[("f", 6, 0)])).unwrap(), 100.0);
    }

    #[test]
    fn boundary_example_hits_the_qos_threshold() {
        // u = 0.8, 1 + 5 * 0.2^2 = 1.2
        let o = one_axis_oracle(0.0);
        let lat = o.true_latency(&"f".into(), &coloc(&[("f", 8, 0)])).unwrap();
        assert!((lat - 120.0).abs() < 1e-9, "{lat}");
    }

    #[test]
    fn brute_force_boundary_capacity_is_eight() {
        let o = one_axis_oracle(0.0);
        let mut specs = FunctionRegistry::new();
        // Threshold computed as 1.2 * 100 exactly, as the accessor does.
        specs.insert("f".into(), spec_for("f", 100.0, 16));
        let c = o.brute_force_capacity(&Colocation::new(), &"f".into(), &specs).unwrap();
        assert_eq!(c, 8);
    }

    #[test]
    fn insensitive_tiny_function_reaches_the_bound() {
        let mut o = ContentionOracle::new(OracleParams::default()).unwrap();
        o.register(
            "tiny".into(),
            FunctionGroundTruth {
                demand: vec![0.001; 4],
                sensitivity: vec![0.0; 4],
                solo_latency_ms: 10.0,
            },
        )
        .unwrap();
        let mut specs = FunctionRegistry::new();
        specs.insert("tiny".into(), spec_for("tiny", 10.0, 12));
        assert_eq!(o.brute_force_capacity(&Colocation::new(), &"tiny".into(), &specs).unwrap(), 12);
    }

    #[test]
    fn neighbour_never_raises_capacity() {
        let mut o = one_axis_oracle(0.0);
        o.register(
            "g".into(),
            FunctionGroundTruth {
                demand: vec![0.15],
                sensitivity: vec![3.0],
                solo_latency_ms: 50.0,
            },
        )
        .unwrap();
        let mut specs = FunctionRegistry::new();
        specs.insert("f".into(), spec_for("f", 100.0, 16));
        specs.insert("g".into(), spec_for("g", 50.0, 16));
        let alone = o.brute_force_capacity(&Colocation::new(), &"f".into(), &specs).unwrap();
        let shared = o.brute_force_capacity(&coloc(&[("g", 2, 0)]), &"f".into(), &specs).unwrap();
        assert!(shared <= alone);
        assert!(shared < alone);
    }

    #[test]
    fn unknown_function_is_an_error() {
        let o = one_axis_oracle(0.0);
        assert_eq!(
            o.true_latency(&"zz".into(), &Colocation::new()),
            Err(OracleError::UnknownFunction("zz".into()))
        );
        assert!(o.true_latency(&"f".into(), &coloc(&[("zz", 1, 0)])).is_err());
    }

    #[test]
    fn zero_noise_observation_is_exact() {
        let o = one_axis_oracle(0.0);
        let mut r = rng::stream(1, "t");
        let c = coloc(&[("f", 9, 0)]);
        assert_eq!(
            o.observe_sample(&"f".into(), &c, &mut r).unwrap(),
            o.true_latency(&"f".into(), &c).unwrap()
        );
    }

    #[test]
    fn noisy_observations_average_to_truth() {
        let o = one_axis_oracle(0.05);
        let mut r = rng::stream(3, "lln");
        let c = coloc(&[("f", 9, 0)]);
        let truth = o.true_latency(&"f".into(), &c).unwrap();
        let n = 10_000;
        let mean: f64 = (0..n)
            .map(|_| o.observe_sample(&"f".into(), &c, &mut r).unwrap())
            .sum::<f64>()
            / n as f64;
        assert!((mean - truth).abs() / truth < 0.01, "{mean} vs {truth}");
    }

    #[test]
    fn fixed_seed_gives_identical_sequences() {
        let o = one_axis_oracle(0.05);
        let c = coloc(&[("f", 3, 1)]);
        let draw = |seed| {
            let mut r = rng::stream(seed, "obs");
            (0..20)
                .map(|_| o.observe_sample(&"f".into(), &c, &mut r).unwrap())
                .collect::<Vec<_>>()
        };
        assert_eq!(draw(11), draw(11));
        assert_ne!(draw(11), draw(12));
    }

    #[test]
    fn noise_free_profiles_are_the_expansion() {
        let mut o = ContentionOracle::new(OracleParams {
            noise_sigma: 0.0,
            ..OracleParams::default()
        })
        .unwrap();
        let truth = FunctionGroundTruth {
            demand: vec![0.1, 0.02, 0.03, 0.04],
            sensitivity: vec![2.0, 3.0, 4.0, 5.0],
            solo_latency_ms: 42.0,
        };
        o.register("a".into(), truth.clone()).unwrap();
        o.register("b".into(), truth.clone()).unwrap();
        let mut r = rng::stream(0, "p");
        let (pa, la) = o.solo_profile(&"a".into(), &mut r).unwrap();
        let (pb, _) = o.solo_profile(&"b".into(), &mut r).unwrap();
        assert_eq!(pa, o.profile_expansion(&truth));
        assert_eq!(pa, pb);
        assert_eq!(pa.len(), DEFAULT_PROFILE_LEN);
        assert_eq!(&pa.0[..4], truth.demand.as_slice());
        assert_eq!(la, 42.0);
    }

    #[test]
    fn params_are_validated() {
        let bad = OracleParams {
            gamma: 1.0,
            ..OracleParams::default()
        };
        assert!(ContentionOracle::new(bad).is_err());
        let bad = OracleParams {
            theta: vec![0.6, 1.5, 0.6, 0.6],
            ..OracleParams::default()
        };
        assert!(ContentionOracle::new(bad).is_err());
    }

    fn random_oracle() -> ContentionOracle {
        let mut o = ContentionOracle::new(OracleParams::default()).unwrap();
        let mut r = rng::stream(5, "truths");
        for i in 0..4 {
            let t = FunctionGroundTruth::sample(i, 4, &GroundTruthRanges::default(), &mut r);
            o.register(FunctionId::new(alloc::format!("f{i}")), t).unwrap();
        }
        o
    }

    proptest! {
        #[test]
        fn latency_is_monotone_in_every_count(
            counts in proptest::collection::vec((0u32..12, 0u32..6), 4),
            target in 0usize..4,
            bump in 0usize..4,
            bump_cached in any::<bool>(),
        ) {
            let o = random_oracle();
            let ids: Vec<FunctionId> = (0..4).map(|i| FunctionId::new(alloc::format!("f{i}"))).collect();
            let base: Colocation = ids.iter().cloned().zip(counts.iter().map(|(s, c)| ConcurrencyInfo::new(*s, *c))).collect();
            let mut grown = base.clone();
            let e = grown.get_mut(&ids[bump]).unwrap();
            if bump_cached { e.cached += 1 } else { e.saturated += 1 }
            let before = o.true_latency(&ids[target], &base).unwrap();
            let after = o.true_latency(&ids[target], &grown).unwrap();
            prop_assert!(after >= before);
        }

        #[test]
        fn cached_instances_are_free_when_gamma_is_zero(
            counts in proptest::collection::vec((0u32..12, 0u32..12), 4),
            target in 0usize..4,
        ) {
            let mut o = random_oracle();
            o.params.gamma = 0.0;
            let ids: Vec<FunctionId> = (0..4).map(|i| FunctionId::new(alloc::format!("f{i}"))).collect();
            let with: Colocation = ids.iter().cloned().zip(counts.iter().map(|(s, c)| ConcurrencyInfo::new(*s, *c))).collect();
            let without: Colocation = ids.iter().cloned().zip(counts.iter().map(|(s, _)| ConcurrencyInfo::new(*s, 0))).collect();
            prop_assert_eq!(o.true_latency(&ids[target], &with).unwrap(), o.true_latency(&ids[target], &without).unwrap());
        }
    }
}
