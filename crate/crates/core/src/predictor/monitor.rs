//! Per-function prediction-error tracking with retrain and fallback verdicts.

use alloc::collections::{BTreeMap, BTreeSet, VecDeque};

use serde::{Deserialize, Serialize};

use crate::model::FunctionId;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Ok,
    Retrain,
    Fallback,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
struct FunctionTrack {
    window: VecDeque<f64>,
    bad_streak: u32,
    failed_retrains: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictabilityMonitor {
    pub error_threshold: f64,
    pub consecutive_bad_limit: u32,
    pub retrain_limit: u32,
    pub window_len: usize,
    tracks: BTreeMap<FunctionId, FunctionTrack>,
    fallback: BTreeSet<FunctionId>,
}

impl Default for PredictabilityMonitor {
    fn default() -> Self {
        Self::new(0.15, 3, 5)
    }
}

impl PredictabilityMonitor {
    pub fn new(error_threshold: f64, consecutive_bad_limit: u32, retrain_limit: u32) -> Self {
        Self {
            error_threshold,
            consecutive_bad_limit: consecutive_bad_limit.max(1),
            retrain_limit,
            window_len: 32,
            tracks: BTreeMap::new(),
            fallback: BTreeSet::new(),
        }
    }

    /// Records one (predicted, observed) pair.
    ///
    /// A streak of `consecutive_bad_limit` errors above the threshold asks for
    /// a retrain; a streak that follows `retrain_limit` retrains without an
    /// intervening good observation moves the function to fallback for good.
    pub fn record_observation(&mut self, f: &FunctionId, predicted: f64, observed: f64) -> Verdict {
        if self.fallback.contains(f) {
            return Verdict::Fallback;
        }
        let error = (predicted - observed).abs() / observed;
        let track = self.tracks.entry(f.clone()).or_default();
        track.window.push_back(error);
        while track.window.len() > self.window_len {
            track.window.pop_front();
        }
        if !(error > self.error_threshold) {
            track.bad_streak = 0;
            track.failed_retrains = 0;
            return Verdict::Ok;
        }
        track.bad_streak += 1;
        if track.bad_streak < self.consecutive_bad_limit {
            return Verdict::Ok;
        }
        track.bad_streak = 0;
        if track.failed_retrains >= self.retrain_limit {
            self.fallback.insert(f.clone());
            return Verdict::Fallback;
        }
        track.failed_retrains += 1;
        Verdict::Retrain
    }

    pub fn is_fallback(&self, f: &FunctionId) -> bool {
        self.fallback.contains(f)
    }

    pub fn fallback_functions(&self) -> impl Iterator<Item = &FunctionId> {
        self.fallback.iter()
    }

    /// Recent relative errors of `f`, oldest first.
    pub fn recent_errors(&self, f: &FunctionId) -> impl Iterator<Item = f64> + '_ {
        self.tracks.get(f).into_iter().flat_map(|t| t.window.iter().copied())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_prediction_is_ok() {
        let mut m = PredictabilityMonitor::default();
        assert_eq!(m.record_observation(&"f".into(), 50.0, 50.0), Verdict::Ok);
        assert_eq!(m.recent_errors(&"f".into()).next(), Some(0.0));
    }

    #[test]
    fn three_bad_windows_request_retrain() {
        let mut m = PredictabilityMonitor::default();
        let f: FunctionId = "f".into();
        assert_eq!(m.record_observation(&f, 130.0, 100.0), Verdict::Ok);
        assert_eq!(m.record_observation(&f, 130.0, 100.0), Verdict::Ok);
        assert_eq!(m.record_observation(&f, 130.0, 100.0), Verdict::Retrain);
    }

    #[test]
    fn good_observation_resets_streak() {
        let mut m = PredictabilityMonitor::default();
        let f: FunctionId = "f".into();
        m.record_observation(&f, 130.0, 100.0);
        m.record_observation(&f, 130.0, 100.0);
        m.record_observation(&f, 100.0, 100.0);
        assert_eq!(m.record_observation(&f, 130.0, 100.0), Verdict::Ok);
    }

    #[test]
    fn five_failed_retrains_fall_back() {
        let mut m = PredictabilityMonitor::default();
        let f: FunctionId = "f".into();
        let verdicts: alloc::vec::Vec<Verdict> =
            (0..18).map(|_| m.record_observation(&f, 130.0, 100.0)).collect();
        assert_eq!(verdicts.iter().filter(|v| **v == Verdict::Retrain).count(), 5);
        assert_eq!(verdicts[17], Verdict::Fallback);
        assert!(m.is_fallback(&f));
        assert_eq!(m.record_observation(&f, 100.0, 100.0), Verdict::Fallback);
        assert!(!m.is_fallback(&"g".into()));
    }
}
