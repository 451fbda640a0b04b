//! Function-granularity feature rows.
//!
//! Instances of the same function are merged into one (saturated, cached)
//! pair; neighbour functions are pooled into a fixed-width aggregate so the
//! row width does not depend on how many functions share the node.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::PredictorError;
use crate::model::{Colocation, FunctionId, FunctionRegistry};

/// One model input. Layout for a profile of width `P`:
///
/// | offset        | len | content                                   |
/// |---------------|-----|-------------------------------------------|
/// | 0             | 1   | target solo latency (ms)                  |
/// | 1             | P   | target profile                            |
/// | 1+P           | 2   | target saturated, cached                  |
/// | 3+P           | P   | Σ_g (sat_g + γ·cached_g)·profile_g         |
/// | 3+2P          | P   | max_g profile_g                           |
/// | 3+3P          | 2   | Σ_g sat_g, Σ_g cached_g                    |
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FeatureRow(pub Vec<f64>);

impl FeatureRow {
    pub fn width(&self) -> usize {
        self.0.len()
    }

    /// The pooled neighbour block (everything after the target's fields).
    pub fn neighbor_aggregate(&self, profile_len: usize) -> &[f64] {
        &self.0[3 + profile_len..]
    }
}

/// Row width for a given profile width.
pub const fn row_width(profile_len: usize) -> usize {
    3 * profile_len + 5
}

pub fn assemble_features(
    target: &FunctionId,
    colocation: &Colocation,
    specs: &FunctionRegistry,
    gamma_feat: f64,
) -> Result<FeatureRow, PredictorError> {
    let spec = specs
        .get(target)
        .ok_or_else(|| PredictorError::UnknownFunction(target.clone()))?;
    let p = spec.profile.len();
    let mut row = Vec::with_capacity(row_width(p));
    row.push(spec.solo_latency_ms);
    row.extend_from_slice(&spec.profile.0);
    let own = colocation.get(target).copied().unwrap_or_default();
    row.push(own.saturated as f64);
    row.push(own.cached as f64);

    let mut sum = alloc::vec![0.0; p];
    let mut max = alloc::vec![0.0; p];
    let (mut sat, mut cached) = (0.0, 0.0);
    for (g, c) in colocation {
        if g == target || c.is_empty() {
            continue;
        }
        let neighbour = specs
            .get(g)
            .ok_or_else(|| PredictorError::UnknownFunction(g.clone()))?;
        if neighbour.profile.len() != p {
            return Err(PredictorError::ProfileWidth {
                expected: p,
                got: neighbour.profile.len(),
            });
        }
        let weight = c.saturated as f64 + gamma_feat * c.cached as f64;
        for ((s, m), v) in sum.iter_mut().zip(max.iter_mut()).zip(&neighbour.profile.0) {
            *s += weight * v;
            *m = f64::max(*m, *v);
        }
        sat += c.saturated as f64;
        cached += c.cached as f64;
    }
    row.extend(sum);
    row.extend(max);
    row.push(sat);
    row.push(cached);
    if row.iter().any(|v| !v.is_finite()) {
        return Err(PredictorError::NonFiniteFeature);
    }
    Ok(FeatureRow(row))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ConcurrencyInfo, FunctionSpec, ProfileVector, Resources};
    use alloc::vec;

    fn specs() -> FunctionRegistry {
        let mk = |id: &str, solo: f64, profile: Vec<f64>| FunctionSpec {
            id: id.into(),
            solo_latency_ms: solo,
            profile: ProfileVector(profile),
            saturated_load_rps: 10.0,
            qos_multiplier: 1.2,
            configured_resources: Resources(vec![8.0]),
            max_capacity_bound: 16,
        };
        [
            mk("t", 50.0, vec![0.1, 0.2, 0.3]),
            mk("a", 60.0, vec![0.4, 0.1, 0.0]),
            mk("b", 70.0, vec![0.4, 0.1, 0.0]),
            mk("c", 80.0, vec![0.0, 0.5, 0.2]),
        ]
        .into_iter()
        .map(|s| (s.id.clone(), s))
        .collect()
    }

    fn coloc(entries: &[(&str, u32, u32)]) -> Colocation {
        entries
            .iter()
            .map(|(f, s, c)| (FunctionId::from(*f), ConcurrencyInfo::new(*s, *c)))
            .collect()
    }

    #[test]
    fn lone_target_has_zero_aggregate() {
        let row = assemble_features(&"t".into(), &coloc(&[("t", 3, 1)]), &specs(), 0.1).unwrap();
        assert_eq!(row.width(), row_width(3));
        assert_eq!(&row.0[..6], &[50.0, 0.1, 0.2, 0.3, 3.0, 1.0]);
        assert!(row.neighbor_aggregate(3).iter().all(|v| *v == 0.0));
    }

    #[test]
    fn sum_pool_is_linear_in_instances() {
        // a and b carry identical profiles.
        let s = specs();
        let two = assemble_features(&"t".into(), &coloc(&[("t", 1, 0), ("a", 1, 0), ("b", 1, 0)]), &s, 0.1).unwrap();
        let one = assemble_features(&"t".into(), &coloc(&[("t", 1, 0), ("a", 2, 0)]), &s, 0.1).unwrap();
        assert_eq!(two.neighbor_aggregate(3)[..3], one.neighbor_aggregate(3)[..3]);
    }

    #[test]
    fn neighbour_order_does_not_matter() {
        let s = specs();
        let mut forward = Colocation::new();
        forward.insert("c".into(), ConcurrencyInfo::new(2, 1));
        forward.insert("a".into(), ConcurrencyInfo::new(1, 3));
        forward.insert("t".into(), ConcurrencyInfo::new(1, 0));
        let mut backward = Colocation::new();
        backward.insert("t".into(), ConcurrencyInfo::new(1, 0));
        backward.insert("a".into(), ConcurrencyInfo::new(1, 3));
        backward.insert("c".into(), ConcurrencyInfo::new(2, 1));
        assert_eq!(
            assemble_features(&"t".into(), &forward, &s, 0.1).unwrap(),
            assemble_features(&"t".into(), &backward, &s, 0.1).unwrap()
        );
    }

    #[test]
    fn empty_neighbours_are_ignored_and_unknown_ids_rejected() {
        let s = specs();
        let a = assemble_features(&"t".into(), &coloc(&[("t", 1, 0), ("a", 0, 0)]), &s, 0.1).unwrap();
        let b = assemble_features(&"t".into(), &coloc(&[("t", 1, 0)]), &s, 0.1).unwrap();
        assert_eq!(a, b);
        assert!(matches!(
            assemble_features(&"t".into(), &coloc(&[("zz", 1, 0)]), &s, 0.1),
            Err(PredictorError::UnknownFunction(_))
        ));
    }

    #[test]
    fn mismatched_profile_width_is_rejected() {
        let mut s = specs();
        s.get_mut(&FunctionId::from("a")).unwrap().profile = ProfileVector(vec![0.1; 5]);
        assert!(matches!(
            assemble_features(&"t".into(), &coloc(&[("t", 1, 0), ("a", 1, 0)]), &s, 0.1),
            Err(PredictorError::ProfileWidth { expected: 3, got: 5 })
        ));
    }
}
