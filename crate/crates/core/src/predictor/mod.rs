//! Learned performance model: feature assembly, forest training, batched
//! inference with simulated cost, and accuracy monitoring.

pub mod features;
pub mod forest;
pub mod monitor;

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{Colocation, FunctionId, FunctionRegistry};
use crate::oracle::{ContentionOracle, OracleError};

pub use features::{assemble_features, row_width, FeatureRow};
pub use forest::{train, ForestModel, ForestParams, IncrementalLearner, Sample};
pub use monitor::{PredictabilityMonitor, Verdict};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PredictorError {
    #[error("unknown function {0}")]
    UnknownFunction(FunctionId),
    #[error("profile width {got} differs from {expected}")]
    ProfileWidth { expected: usize, got: usize },
    #[error("feature row contains a non-finite value")]
    NonFiniteFeature,
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("label is not finite")]
    NonFiniteLabel,
    #[error("row width {got} differs from model width {expected}")]
    WidthMismatch { expected: usize, got: usize },
    #[error("batch is empty")]
    EmptyBatch,
    #[error("invalid parameters: {0}")]
    InvalidParams(&'static str),
    #[error(transparent)]
    Oracle(#[from] OracleError),
}

/// Simulated inference latency: `c0 + c1 · rows`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InferenceCostModel {
    pub c0_ms: f64,
    pub c1_ms_per_row: f64,
}

impl Default for InferenceCostModel {
    fn default() -> Self {
        Self {
            c0_ms: 20.0,
            c1_ms_per_row: 0.02,
        }
    }
}

impl InferenceCostModel {
    pub fn cost_ms(&self, rows: usize) -> f64 {
        self.c0_ms + self.c1_ms_per_row * rows as f64
    }

    pub fn validate(&self) -> Result<(), PredictorError> {
        if !(self.c0_ms >= 0.0 && self.c1_ms_per_row >= 0.0) {
            return Err(PredictorError::InvalidParams("inference costs must be non-negative"));
        }
        Ok(())
    }
}

/// Result of one batched inference call.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchPrediction {
    pub predictions: Vec<f64>,
    pub rows: usize,
    pub cost_ms: f64,
    pub inference_events: u32,
}

/// "Latency of `target` if the node held exactly `colocation`."
#[derive(Clone, Copy, Debug)]
pub struct LatencyQuery<'a> {
    pub target: &'a FunctionId,
    pub colocation: &'a Colocation,
}

/// Anything that can predict colocated latencies.
pub trait LatencyModel {
    fn predict_queries(
        &self,
        queries: &[LatencyQuery<'_>],
        specs: &FunctionRegistry,
    ) -> Result<Vec<f64>, PredictorError>;
}

/// Runs `queries` as a single inference: one event, cost affine in rows.
pub fn predict_batch<M: LatencyModel + ?Sized>(
    model: &M,
    queries: &[LatencyQuery<'_>],
    specs: &FunctionRegistry,
    cost: &InferenceCostModel,
) -> Result<BatchPrediction, PredictorError> {
    if queries.is_empty() {
        return Err(PredictorError::EmptyBatch);
    }
    let predictions = model.predict_queries(queries, specs)?;
    Ok(BatchPrediction {
        predictions,
        rows: queries.len(),
        cost_ms: cost.cost_ms(queries.len()),
        inference_events: 1,
    })
}

/// Trained forest behind the latency-model interface.
#[derive(Clone, Debug, PartialEq)]
pub struct ForestPredictor {
    pub model: ForestModel,
    /// Weight of cached neighbour instances in the pooled features.
    pub gamma_feat: f64,
}

impl LatencyModel for ForestPredictor {
    fn predict_queries(
        &self,
        queries: &[LatencyQuery<'_>],
        specs: &FunctionRegistry,
    ) -> Result<Vec<f64>, PredictorError> {
        queries
            .iter()
            .map(|q| {
                let row = assemble_features(q.target, q.colocation, specs, self.gamma_feat)?;
                self.model.predict_row(&row)
            })
            .collect()
    }
}

/// Ground truth behind the latency-model interface.
#[derive(Clone, Debug, PartialEq)]
pub struct PerfectPredictor {
    pub oracle: ContentionOracle,
}

impl LatencyModel for PerfectPredictor {
    fn predict_queries(
        &self,
        queries: &[LatencyQuery<'_>],
        _specs: &FunctionRegistry,
    ) -> Result<Vec<f64>, PredictorError> {
        queries
            .iter()
            .map(|q| Ok(self.oracle.true_latency(q.target, q.colocation)?))
            .collect()
    }
}

impl<T: LatencyModel + ?Sized> LatencyModel for &T {
    fn predict_queries(
        &self,
        queries: &[LatencyQuery<'_>],
        specs: &FunctionRegistry,
    ) -> Result<Vec<f64>, PredictorError> {
        (**self).predict_queries(queries, specs)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ConcurrencyInfo;
    use crate::oracle::{FunctionGroundTruth, OracleParams};
    use alloc::vec;

    #[test]
    fn cost_is_affine() {
        let c = InferenceCostModel::default();
        assert!((c.cost_ms(1) - 20.02).abs() < 1e-12);
        assert!((c.cost_ms(100) - 22.0).abs() < 1e-12);
        assert!((c.cost_ms(7) - c.cost_ms(6) - (c.cost_ms(2) - c.cost_ms(1))).abs() < 1e-12);
    }

    #[test]
    fn perfect_predictor_matches_oracle() {
        let mut oracle = ContentionOracle::new(OracleParams {
            resource_axes: 1,
            theta: vec![0.6],
            noise_sigma: 0.0,
            ..OracleParams::default()
        })
        .unwrap();
        let f: FunctionId = "f".into();
        oracle
            .register(
                f.clone(),
                FunctionGroundTruth {
                    demand: vec![0.1],
                    sensitivity: vec![5.0],
                    solo_latency_ms: 100.0,
                },
            )
            .unwrap();
        let mut coloc = Colocation::new();
        coloc.insert(f.clone(), ConcurrencyInfo::new(8, 0));
        let p = PerfectPredictor { oracle };
        let q = [LatencyQuery { target: &f, colocation: &coloc }; 3];
        let out = predict_batch(&p, &q, &FunctionRegistry::new(), &InferenceCostModel::default()).unwrap();
        assert_eq!(out.inference_events, 1);
        assert_eq!(out.rows, 3);
        assert!((out.predictions[0] - 120.0).abs() < 1e-9);
        assert!(predict_batch(&p, &[], &FunctionRegistry::new(), &InferenceCostModel::default()).is_err());
    }
}
