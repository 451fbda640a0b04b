//! Bagged CART regression forest.
//!
//! Trees are grown on bootstrap resamples with variance-reduction splits and a
//! random feature subset per split. Everything is driven by one seeded
//! ChaCha stream, so a (dataset, params) pair always yields the same model.

use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::features::FeatureRow;
use super::{BatchPrediction, InferenceCostModel, PredictorError};
use crate::rng::{self, StreamRng};

/// One labelled observation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub row: FeatureRow,
    pub latency_ms: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ForestParams {
    pub n_trees: usize,
    pub max_depth: usize,
    pub min_leaf: usize,
    /// Fraction of features considered at each split.
    pub feature_subsample: f64,
    pub seed: u64,
    /// Trees learn `label / row[k]` and predictions are scaled back by
    /// `row[k]`; `row[k]` must be positive.
    pub scale_feature: Option<usize>,
}

impl Default for ForestParams {
    fn default() -> Self {
        Self {
            n_trees: 50,
            max_depth: 12,
            min_leaf: 2,
            feature_subsample: 1.0 / 3.0,
            seed: 0,
            scale_feature: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TreeNode {
    Leaf {
        value: f64,
        samples: u32,
    },
    /// Rows with `row[feature] <= threshold` go left.
    Split {
        feature: u32,
        threshold: f64,
        left: u32,
        right: u32,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegressionTree {
    pub nodes: Vec<TreeNode>,
}

impl RegressionTree {
    pub fn predict(&self, row: &[f64]) -> f64 {
        let mut at = 0usize;
        loop {
            match &self.nodes[at] {
                TreeNode::Leaf { value, .. } => return *value,
                TreeNode::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => {
                    at = if row[*feature as usize] <= *threshold {
                        *left as usize
                    } else {
                        *right as usize
                    };
                }
            }
        }
    }

    pub fn leaves(&self) -> impl Iterator<Item = (f64, u32)> + '_ {
        self.nodes.iter().filter_map(|n| match n {
            TreeNode::Leaf { value, samples } => Some((*value, *samples)),
            TreeNode::Split { .. } => None,
        })
    }

    pub fn depth(&self) -> usize {
        fn walk(nodes: &[TreeNode], at: usize) -> usize {
            match &nodes[at] {
                TreeNode::Leaf { .. } => 0,
                TreeNode::Split { left, right, .. } => {
                    1 + walk(nodes, *left as usize).max(walk(nodes, *right as usize))
                }
            }
        }
        walk(&self.nodes, 0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForestModel {
    pub params: ForestParams,
    pub width: usize,
    pub trees: Vec<RegressionTree>,
}

/// Mean that is exact when every value is identical.
fn stable_mean(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let mut it = values.clone();
    let Some(first) = it.next() else { return 0.0 };
    let (n, dev) = values.fold((0usize, 0.0), |(n, d), v| (n + 1, d + (v - first)));
    first + dev / n as f64
}

pub fn train(dataset: &[Sample], params: &ForestParams) -> Result<ForestModel, PredictorError> {
    let first = dataset.first().ok_or(PredictorError::EmptyDataset)?;
    let width = first.row.width();
    for s in dataset {
        if s.row.width() != width {
            return Err(PredictorError::WidthMismatch {
                expected: width,
                got: s.row.width(),
            });
        }
        if !s.latency_ms.is_finite() {
            return Err(PredictorError::NonFiniteLabel);
        }
        if s.row.0.iter().any(|v| !v.is_finite()) {
            return Err(PredictorError::NonFiniteFeature);
        }
        if let Some(k) = params.scale_feature {
            if !s.row.0.get(k).is_some_and(|v| *v > 0.0) {
                return Err(PredictorError::InvalidParams("scale feature must be present and positive"));
            }
        }
    }
    if params.n_trees == 0 {
        return Err(PredictorError::InvalidParams("n_trees must be positive"));
    }
    if params.min_leaf == 0 {
        return Err(PredictorError::InvalidParams("min_leaf must be positive"));
    }
    if !(params.feature_subsample > 0.0 && params.feature_subsample <= 1.0) {
        return Err(PredictorError::InvalidParams("feature_subsample must lie in (0, 1]"));
    }

    // Column-major copy for cache-friendly split scans.
    let n = dataset.len();
    let columns: Vec<Vec<f64>> = (0..width)
        .map(|j| dataset.iter().map(|s| s.row.0[j]).collect())
        .collect();
    let labels: Vec<f64> = dataset
        .iter()
        .map(|s| match params.scale_feature {
            Some(k) => s.latency_ms / s.row.0[k],
            None => s.latency_ms,
        })
        .collect();
    let mtry = (libm::ceil(width as f64 * params.feature_subsample) as usize).clamp(1, width);

    let mut rng = rng::stream(params.seed, "forest");
    let trees = (0..params.n_trees)
        .map(|_| {
            let bootstrap: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
            let grower = TreeGrower {
                columns: &columns,
                labels: &labels,
                params,
                mtry,
                rng: &mut rng,
                nodes: Vec::new(),
                scratch: Vec::with_capacity(n),
            };
            grower.grow(bootstrap)
        })
        .collect();
    Ok(ForestModel {
        params: params.clone(),
        width,
        trees,
    })
}

struct TreeGrower<'a> {
    columns: &'a [Vec<f64>],
    labels: &'a [f64],
    params: &'a ForestParams,
    mtry: usize,
    rng: &'a mut StreamRng,
    nodes: Vec<TreeNode>,
    scratch: Vec<(f64, f64)>,
}

struct BestSplit {
    feature: usize,
    threshold: f64,
    gain: f64,
}

impl TreeGrower<'_> {
    fn grow(mut self, mut rows: Vec<usize>) -> RegressionTree {
        let len = rows.len();
        self.build(&mut rows[..], 0, len);
        RegressionTree { nodes: self.nodes }
    }

    fn leaf(&mut self, rows: &[usize]) -> u32 {
        let value = stable_mean(rows.iter().map(|&i| self.labels[i]));
        self.nodes.push(TreeNode::Leaf {
            value,
            samples: rows.len() as u32,
        });
        (self.nodes.len() - 1) as u32
    }

    fn build(&mut self, rows: &mut [usize], depth: usize, _len: usize) -> u32 {
        let n = rows.len();
        let min_leaf = self.params.min_leaf;
        if depth >= self.params.max_depth || n < 2 * min_leaf {
            return self.leaf(rows);
        }
        let first = self.labels[rows[0]];
        if rows.iter().all(|&i| self.labels[i] == first) {
            return self.leaf(rows);
        }
        let Some(best) = self.best_split(rows) else {
            return self.leaf(rows);
        };

        // Partition in place: left block first.
        let column = &self.columns[best.feature];
        let mut split_at = 0;
        for k in 0..n {
            if column[rows[k]] <= best.threshold {
                rows.swap(k, split_at);
                split_at += 1;
            }
        }
        debug_assert!(split_at >= min_leaf && n - split_at >= min_leaf);

        let me = self.nodes.len();
        self.nodes.push(TreeNode::Leaf { value: 0.0, samples: 0 });
        let (left_rows, right_rows) = rows.split_at_mut(split_at);
        let left = self.build(left_rows, depth + 1, split_at);
        let right = self.build(right_rows, depth + 1, n - split_at);
        self.nodes[me] = TreeNode::Split {
            feature: best.feature as u32,
            threshold: best.threshold,
            left,
            right,
        };
        me as u32
    }

    fn best_split(&mut self, rows: &[usize]) -> Option<BestSplit> {
        let width = self.columns.len();
        let min_leaf = self.params.min_leaf;
        let n = rows.len();

        // Partial Fisher-Yates for the candidate feature subset.
        let mut features: Vec<usize> = (0..width).collect();
        for k in 0..self.mtry {
            let pick = self.rng.random_range(k..width);
            features.swap(k, pick);
        }

        let total: f64 = rows.iter().map(|&i| self.labels[i]).sum();
        let base = total * total / n as f64;
        let mut best: Option<BestSplit> = None;
        for &feature in &features[..self.mtry] {
            let column = &self.columns[feature];
            self.scratch.clear();
            self.scratch
                .extend(rows.iter().map(|&i| (column[i], self.labels[i])));
            self.scratch
                .sort_unstable_by(|a, b| a.0.partial_cmp(&b.0).expect("finite features"));
            if self.scratch[0].0 == self.scratch[n - 1].0 {
                continue;
            }
            let mut left_sum = 0.0;
            for k in 1..n {
                left_sum += self.scratch[k - 1].1;
                if k < min_leaf || n - k < min_leaf {
                    continue;
                }
                let (lo, hi) = (self.scratch[k - 1].0, self.scratch[k].0);
                if lo == hi {
                    continue;
                }
                let right_sum = total - left_sum;
                let gain = left_sum * left_sum / k as f64
                    + right_sum * right_sum / (n - k) as f64
                    - base;
                if best.as_ref().is_none_or(|b| gain > b.gain) {
                    let mut threshold = lo + (hi - lo) / 2.0;
                    if threshold >= hi {
                        threshold = lo;
                    }
                    best = Some(BestSplit {
                        feature,
                        threshold,
                        gain,
                    });
                }
            }
        }
        best.filter(|b| b.gain > 0.0)
    }
}

impl ForestModel {
    pub fn predict_row(&self, row: &FeatureRow) -> Result<f64, PredictorError> {
        if row.width() != self.width {
            return Err(PredictorError::WidthMismatch {
                expected: self.width,
                got: row.width(),
            });
        }
        let mean = stable_mean(self.trees.iter().map(|t| t.predict(&row.0)));
        Ok(match self.params.scale_feature {
            Some(k) => mean * row.0[k],
            None => mean,
        })
    }

    pub fn predict_rows(&self, rows: &[FeatureRow]) -> Result<Vec<f64>, PredictorError> {
        rows.iter().map(|r| self.predict_row(r)).collect()
    }

    /// Predicts a batch of rows as one inference: the charged cost is affine
    /// in the row count and exactly one inference event is recorded.
    pub fn predict_batch(
        &self,
        rows: &[FeatureRow],
        cost: &InferenceCostModel,
    ) -> Result<BatchPrediction, PredictorError> {
        if rows.is_empty() {
            return Err(PredictorError::EmptyBatch);
        }
        let predictions = self.predict_rows(rows)?;
        Ok(BatchPrediction {
            cost_ms: cost.cost_ms(rows.len()),
            rows: rows.len(),
            predictions,
            inference_events: 1,
        })
    }
}

/// Relative error |predicted − observed| / observed.
pub fn relative_error(predicted: f64, observed: f64) -> f64 {
    (predicted - observed).abs() / observed
}

/// Median of a slice (mean of the middle pair for even lengths).
pub fn median(values: &[f64]) -> f64 {
    percentile(values, 0.5)
}

/// Linear-interpolated percentile, `q` in [0, 1].
pub fn percentile(values: &[f64], q: f64) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    let pos = q.clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let lo = libm::floor(pos) as usize;
    let hi = libm::ceil(pos) as usize;
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

/// Keeps the cumulative training set so new observations can be folded in by
/// a seeded full retrain.
#[derive(Clone, Debug)]
pub struct IncrementalLearner {
    pub params: ForestParams,
    dataset: Vec<Sample>,
    model: ForestModel,
}

impl IncrementalLearner {
    pub fn new(dataset: Vec<Sample>, params: ForestParams) -> Result<Self, PredictorError> {
        let model = train(&dataset, &params)?;
        Ok(Self {
            params,
            dataset,
            model,
        })
    }

    /// Wraps an already trained model and the dataset it was trained on.
    pub fn from_trained(model: ForestModel, dataset: Vec<Sample>) -> Self {
        Self {
            params: model.params.clone(),
            dataset,
            model,
        }
    }

    pub fn model(&self) -> &ForestModel {
        &self.model
    }

    pub fn dataset(&self) -> &[Sample] {
        &self.dataset
    }

    /// Appends `new_samples` and retrains on the cumulative dataset.
    pub fn incremental_update(&mut self, new_samples: &[Sample]) -> Result<&ForestModel, PredictorError> {
        if new_samples.is_empty() {
            return Err(PredictorError::EmptyDataset);
        }
        let mut cumulative = self.dataset.clone();
        cumulative.extend_from_slice(new_samples);
        self.model = train(&cumulative, &self.params)?;
        self.dataset = cumulative;
        Ok(&self.model)
    }
}

/// Fraction of training rows per leaf never drops below `min_leaf` when the
/// tree had at least `2·min_leaf` rows to split.
#[cfg(test)]
fn min_leaf_holds(tree: &RegressionTree, min_leaf: usize) -> bool {
    tree.leaves().all(|(_, n)| n as usize >= min_leaf)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{prop_assert, proptest};
    use alloc::vec;

    fn sample(x: &[f64], y: f64) -> Sample {
        Sample {
            row: FeatureRow(x.to_vec()),
            latency_ms: y,
        }
    }

    fn synthetic(n: usize, seed: u64) -> Vec<Sample> {
        let mut r = rng::stream(seed, "data");
        (0..n)
            .map(|_| {
                let a: f64 = r.random_range(0.0..1.0);
                let b: f64 = r.random_range(0.0..1.0);
                let c: f64 = r.random_range(0.0..1.0);
                sample(&[a, b, c], 10.0 + 5.0 * a + if b > 0.5 { 3.0 } else { 0.0 })
            })
            .collect()
    }

    #[test]
    fn constant_labels_predict_the_constant() {
        let data: Vec<Sample> = (0..40)
            .map(|i| sample(&[i as f64, (i % 3) as f64], 0.1))
            .collect();
        let model = train(&data, &ForestParams::default()).unwrap();
        for probe in [[0.0, 0.0], [17.5, 2.0], [-4.0, 9.0]] {
            assert_eq!(model.predict_row(&FeatureRow(probe.to_vec())).unwrap(), 0.1);
        }
    }

    #[test]
    fn same_seed_same_model() {
        let data = synthetic(200, 1);
        let p = ForestParams {
            seed: 9,
            ..ForestParams::default()
        };
        assert_eq!(train(&data, &p).unwrap(), train(&data, &p).unwrap());
        let other = ForestParams { seed: 10, ..p };
        assert_ne!(train(&data, &ForestParams { seed: 9, ..other.clone() }).unwrap(), train(&data, &other).unwrap());
    }

    #[test]
    fn learns_a_simple_function() {
        let data = synthetic(600, 2);
        let test = synthetic(100, 3);
        let model = train(&data, &ForestParams::default()).unwrap();
        let errs: Vec<f64> = test
            .iter()
            .map(|s| relative_error(model.predict_row(&s.row).unwrap(), s.latency_ms))
            .collect();
        assert!(median(&errs) < 0.03, "median {}", median(&errs));
    }

    #[test]
    fn structure_respects_params() {
        let data = synthetic(300, 4);
        let p = ForestParams {
            n_trees: 7,
            max_depth: 4,
            min_leaf: 5,
            ..ForestParams::default()
        };
        let model = train(&data, &p).unwrap();
        assert_eq!(model.trees.len(), 7);
        for t in &model.trees {
            assert!(t.depth() <= 4);
            assert!(min_leaf_holds(t, 5));
        }
    }

    #[test]
    fn dataset_errors() {
        assert_eq!(train(&[], &ForestParams::default()), Err(PredictorError::EmptyDataset));
        assert_eq!(
            train(&[sample(&[1.0], f64::NAN)], &ForestParams::default()),
            Err(PredictorError::NonFiniteLabel)
        );
        let mixed = [sample(&[1.0], 1.0), sample(&[1.0, 2.0], 1.0)];
        assert!(matches!(
            train(&mixed, &ForestParams::default()),
            Err(PredictorError::WidthMismatch { .. })
        ));
    }

    #[test]
    fn batch_cost_and_events() {
        let model = train(&synthetic(50, 5), &ForestParams::default()).unwrap();
        let cost = InferenceCostModel::default();
        let one = model.predict_batch(&[FeatureRow(vec![0.5, 0.2, 0.1])], &cost).unwrap();
        assert!((one.cost_ms - 20.02).abs() < 1e-9);
        assert_eq!(one.inference_events, 1);
        let rows: Vec<FeatureRow> = (0..100).map(|i| FeatureRow(vec![i as f64 / 100.0, 0.7, 0.0])).collect();
        let many = model.predict_batch(&rows, &cost).unwrap();
        assert!((many.cost_ms - 22.0).abs() < 1e-9);
        assert_eq!(many.inference_events, 1);
        assert_eq!(many.predictions.len(), 100);
        let dup = model
            .predict_batch(&[FeatureRow(vec![0.3, 0.9, 0.2]), FeatureRow(vec![0.3, 0.9, 0.2])], &cost)
            .unwrap();
        assert_eq!(dup.predictions[0], dup.predictions[1]);
        assert!(matches!(
            model.predict_batch(&[FeatureRow(vec![1.0])], &cost),
            Err(PredictorError::WidthMismatch { expected: 3, got: 1 })
        ));
        assert_eq!(model.predict_batch(&[], &cost), Err(PredictorError::EmptyBatch));
    }

    #[test]
    fn incremental_update_retrains_on_cumulative_data() {
        let base = synthetic(100, 6);
        let extra = synthetic(10, 7);
        let mut learner = IncrementalLearner::new(base.clone(), ForestParams::default()).unwrap();
        assert_eq!(learner.incremental_update(&[]), Err(PredictorError::EmptyDataset));
        let updated = learner.incremental_update(&extra).unwrap().clone();
        let mut all = base;
        all.extend(extra);
        assert_eq!(updated, train(&all, &ForestParams::default()).unwrap());
        assert_eq!(learner.dataset().len(), 110);
    }

    #[test]
    fn percentiles() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
        assert_eq!(percentile(&[1.0, 2.0, 3.0, 4.0, 5.0], 1.0), 5.0);
    }

    proptest! {
        #[test]
        fn predictions_stay_within_label_range(seed in 0u64..1000) {
            let data = synthetic(60, seed);
            let model = train(&data, &ForestParams { n_trees: 5, ..ForestParams::default() }).unwrap();
            let lo = data.iter().map(|s| s.latency_ms).fold(f64::INFINITY, f64::min);
            let hi = data.iter().map(|s| s.latency_ms).fold(f64::NEG_INFINITY, f64::max);
            for s in synthetic(10, seed + 1) {
                let p = model.predict_row(&s.row).unwrap();
                prop_assert!(p >= lo - 1e-9 && p <= hi + 1e-9);
            }
        }
    }
}
