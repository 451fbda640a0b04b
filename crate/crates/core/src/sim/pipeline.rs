//! Offline profiling and training: random colocations labelled by the oracle,
//! a held-out split, and the leave-one-function-out convergence protocol.

use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::config::ScenarioConfig;
use super::workload::{build_workload, Workload};
use super::SimError;
use crate::model::{Colocation, ConcurrencyInfo, FunctionId};
use crate::predictor::forest::{median, percentile, relative_error};
use crate::predictor::{assemble_features, train, ForestModel, ForestParams, IncrementalLearner, Sample};
use crate::rng::{self, StreamRng};

/// Row position of the target's solo latency.
const SOLO_FEATURE: usize = 0;
/// Largest saturated count drawn per function.
const MAX_SATURATED: u32 = 14;
/// Largest cached count drawn per function.
const MAX_CACHED: u32 = 4;
/// Colocations loading any axis beyond this are far outside every capacity
/// scan and are redrawn.
const MAX_UTILIZATION: f64 = 1.1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccuracyReport {
    pub train_rows: usize,
    pub test_rows: usize,
    pub median_rel_error: f64,
    pub p90_rel_error: f64,
    pub mean_rel_error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceReport {
    pub function: FunctionId,
    /// Held-out median error after 0, 1, 2, ... new samples.
    pub median_error_by_samples: Vec<f64>,
    /// Fewest new samples after which the median error is at or below the
    /// target.
    pub converged_after: Option<usize>,
}

/// One random deployable colocation over `pool` with a saturated `target`.
pub fn random_colocation(
    workload: &Workload,
    pool: &[FunctionId],
    target: &FunctionId,
    r: &mut StreamRng,
) -> Result<Colocation, SimError> {
    loop {
        let mut others: Vec<&FunctionId> = pool.iter().filter(|f| *f != target).collect();
        others.shuffle(r);
        let k = r.random_range(0..=others.len());
        let mut coloc = Colocation::new();
        coloc.insert(
            target.clone(),
            ConcurrencyInfo::new(r.random_range(1..=MAX_SATURATED), r.random_range(0..=MAX_CACHED)),
        );
        for g in others.into_iter().take(k) {
            let c = ConcurrencyInfo::new(r.random_range(0..=MAX_SATURATED), r.random_range(0..=MAX_CACHED));
            if !c.is_empty() {
                coloc.insert(g.clone(), c);
            }
        }
        let u = workload.oracle.utilization(&coloc)?;
        if u.iter().all(|x| *x <= MAX_UTILIZATION) {
            return Ok(coloc);
        }
    }
}

/// `n` profiled samples whose targets are drawn from `targets` and whose
/// neighbours come from `pool`.
pub fn sample_dataset(
    workload: &Workload,
    pool: &[FunctionId],
    targets: &[FunctionId],
    n: usize,
    gamma_feat: f64,
    r: &mut StreamRng,
) -> Result<Vec<Sample>, SimError> {
    (0..n)
        .map(|_| {
            let target = &targets[r.random_range(0..targets.len())];
            let coloc = random_colocation(workload, pool, target, r)?;
            let latency_ms = workload.oracle.observe_sample(target, &coloc, r)?;
            let row = assemble_features(target, &coloc, &workload.specs, gamma_feat)?;
            Ok(Sample { row, latency_ms })
        })
        .collect()
}

fn evaluate(model: &ForestModel, test: &[Sample]) -> Result<Vec<f64>, SimError> {
    test.iter()
        .map(|s| Ok(relative_error(model.predict_row(&s.row)?, s.latency_ms)))
        .collect()
}

/// Profiles `training_samples` colocations and splits them into the training
/// and held-out sets.
pub fn training_split(cfg: &ScenarioConfig, workload: &Workload) -> Result<(Vec<Sample>, Vec<Sample>), SimError> {
    let ids = workload.ids();
    let mut r = rng::stream(cfg.seed, "training");
    let mut data = sample_dataset(workload, &ids, &ids, cfg.predictor.training_samples, cfg.gamma_feat(), &mut r)?;
    let split = ((data.len() as f64) * cfg.predictor.train_fraction) as usize;
    if split == 0 || split == data.len() {
        return Err(SimError::Config("training split leaves an empty side"));
    }
    let test = data.split_off(split);
    Ok((data, test))
}

/// Forest parameters of a scenario with the derived seed and label scaling.
pub fn forest_params(cfg: &ScenarioConfig) -> ForestParams {
    ForestParams {
        seed: rng::stream_seed(cfg.seed, "forest"),
        scale_feature: Some(SOLO_FEATURE),
        ..cfg.predictor.forest.clone()
    }
}

/// Trains on the training split and reports the error on the held-out set.
pub fn train_pipeline(cfg: &ScenarioConfig, workload: &Workload) -> Result<(ForestModel, AccuracyReport), SimError> {
    let (train_set, test_set) = training_split(cfg, workload)?;
    let model = train(&train_set, &forest_params(cfg))?;
    let errors = evaluate(&model, &test_set)?;
    let report = AccuracyReport {
        train_rows: train_set.len(),
        test_rows: test_set.len(),
        median_rel_error: median(&errors),
        p90_rel_error: percentile(&errors, 0.9),
        mean_rel_error: errors.iter().sum::<f64>() / errors.len() as f64,
    };
    Ok((model, report))
}

/// Trains without the last function, then feeds samples targeting it one at
/// a time and tracks the held-out median error on that function.
pub fn incremental_convergence(
    cfg: &ScenarioConfig,
    max_samples: usize,
    target_error: f64,
) -> Result<ConvergenceReport, SimError> {
    let workload = build_workload(cfg, cfg.functions.count + 1)?;
    let ids = workload.ids();
    let (newcomer, known) = ids.split_last().expect("at least two functions");
    let gamma = cfg.gamma_feat();
    let mut r = rng::stream(cfg.seed, "incremental");
    let base = sample_dataset(&workload, known, known, cfg.predictor.training_samples, gamma, &mut r)?;
    let fresh = sample_dataset(&workload, &ids, core::slice::from_ref(newcomer), max_samples, gamma, &mut r)?;
    let test = sample_dataset(&workload, &ids, core::slice::from_ref(newcomer), 200, gamma, &mut r)?;
    let mut learner = IncrementalLearner::new(base, forest_params(cfg))?;
    let mut curve = Vec::with_capacity(max_samples + 1);
    curve.push(median(&evaluate(learner.model(), &test)?));
    for s in &fresh {
        learner.incremental_update(core::slice::from_ref(s))?;
        curve.push(median(&evaluate(learner.model(), &test)?));
    }
    let converged_after = curve.iter().position(|e| *e <= target_error);
    Ok(ConvergenceReport {
        function: newcomer.clone(),
        median_error_by_samples: curve,
        converged_after,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(noise: f64) -> ScenarioConfig {
        let mut c = ScenarioConfig::default();
        c.oracle.noise_sigma = noise;
        c
    }

    #[test]
    fn noise_free_median_error_within_five_percent() {
        let c = cfg(0.0);
        let w = build_workload(&c, 6).unwrap();
        let (_, report) = train_pipeline(&c, &w).unwrap();
        std::println!("{report:?}");
        assert!(report.median_rel_error <= 0.05);
    }

    #[test]
    fn noisy_median_error_within_ten_percent() {
        let c = cfg(0.05);
        let w = build_workload(&c, 6).unwrap();
        let (_, report) = train_pipeline(&c, &w).unwrap();
        std::println!("{report:?}");
        assert!(report.median_rel_error <= 0.10);
    }

    #[test]
    fn newcomer_converges_within_thirty_samples() {
        let report = incremental_convergence(&cfg(0.05), 30, 0.15).unwrap();
        std::println!("{report:?}");
        assert!(report.converged_after.is_some_and(|n| n <= 30));
    }
}
