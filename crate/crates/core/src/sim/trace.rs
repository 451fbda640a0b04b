//! Stepwise RPS traces and their seeded generators.

use alloc::collections::BTreeMap;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use super::SimError;
use crate::model::FunctionId;
use crate::rng;

/// One step of a signal: from `t_ms` on, the function receives `rps`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub t_ms: u64,
    pub function: FunctionId,
    pub rps: f64,
}

/// Per-function stepwise RPS over `[0, horizon_ms)`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TraceSignal {
    pub horizon_ms: u64,
    pub functions: BTreeMap<FunctionId, Vec<(u64, f64)>>,
}

impl TraceSignal {
    /// Builds a signal from records, checking that breakpoints strictly
    /// increase per function and that every rate is finite and non-negative.
    pub fn from_records(records: &[TraceRecord], horizon_ms: u64) -> Result<Self, SimError> {
        let mut functions: BTreeMap<FunctionId, Vec<(u64, f64)>> = BTreeMap::new();
        for r in records {
            if !(r.rps >= 0.0 && r.rps.is_finite()) {
                return Err(SimError::Trace("rps must be finite and non-negative"));
            }
            let points = functions.entry(r.function.clone()).or_default();
            if points.last().is_some_and(|(t, _)| *t >= r.t_ms) {
                return Err(SimError::Trace("breakpoints must strictly increase in time"));
            }
            points.push((r.t_ms, r.rps));
        }
        Ok(Self { horizon_ms, functions })
    }

    /// Records ordered by time, then function id.
    pub fn records(&self) -> Vec<TraceRecord> {
        let mut out: Vec<TraceRecord> = self
            .functions
            .iter()
            .flat_map(|(f, pts)| {
                pts.iter().map(move |(t, rps)| TraceRecord {
                    t_ms: *t,
                    function: f.clone(),
                    rps: *rps,
                })
            })
            .collect();
        out.sort_by(|a, b| a.t_ms.cmp(&b.t_ms).then_with(|| a.function.cmp(&b.function)));
        out
    }

    /// Rate of `f` at `t_ms` (zero before its first breakpoint).
    pub fn rps_at(&self, f: &FunctionId, t_ms: u64) -> f64 {
        let Some(points) = self.functions.get(f) else { return 0.0 };
        match points.partition_point(|(t, _)| *t <= t_ms) {
            0 => 0.0,
            i => points[i - 1].1,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.functions.values().all(|p| p.iter().all(|(_, r)| *r == 0.0))
    }

    /// Share of time-weighted instance mass carried by steps whose expected
    /// concurrency exceeds `threshold`.
    pub fn high_concurrency_mass_share(&self, saturated_load_rps: f64, threshold: u32) -> f64 {
        let (mut high, mut total) = (0.0, 0.0);
        for points in self.functions.values() {
            for (i, (t, rps)) in points.iter().enumerate() {
                let end = points.get(i + 1).map_or(self.horizon_ms, |(n, _)| *n).min(self.horizon_ms);
                if end <= *t {
                    continue;
                }
                let conc = libm::ceil(rps / saturated_load_rps);
                let mass = conc * (end - t) as f64;
                total += mass;
                if conc > threshold as f64 {
                    high += mass;
                }
            }
        }
        if total == 0.0 {
            0.0
        } else {
            high / total
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TraceKind {
    Timer,
    Alternating,
    Poisson,
    Bursty,
}

/// Square wave between `lo` and `hi` expected instances of one function.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TimerParams {
    pub lo: u32,
    pub hi: u32,
    pub period_s: f64,
}

impl Default for TimerParams {
    fn default() -> Self {
        Self {
            lo: 0,
            hi: 5,
            period_s: 100.0,
        }
    }
}

/// One function toggling between zero and one saturated instance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AlternatingParams {
    pub period_s: f64,
}

impl Default for AlternatingParams {
    fn default() -> Self {
        Self { period_s: 300.0 }
    }
}

/// Poisson arrivals counted per window and turned into a rate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PoissonParams {
    pub mean_rps: f64,
    pub window_s: f64,
}

impl Default for PoissonParams {
    fn default() -> Self {
        Self {
            mean_rps: 40.0,
            window_s: 10.0,
        }
    }
}

/// Mean-reverting log random walks; the first third of the functions form a
/// high-concurrency group scaled so that `high_mass_share` of the instance
/// mass comes from steps above `concurrency_threshold`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BurstyParams {
    pub step_s: f64,
    pub reversion: f64,
    pub volatility: f64,
    pub small_base: f64,
    pub high_mass_share: f64,
    pub concurrency_threshold: u32,
    /// Per-step probability that a small function goes idle / wakes up.
    pub idle_probability: f64,
    pub wake_probability: f64,
}

impl Default for BurstyParams {
    fn default() -> Self {
        Self {
            step_s: 10.0,
            reversion: 0.97,
            volatility: 0.1,
            small_base: 3.0,
            high_mass_share: 0.56,
            concurrency_threshold: 12,
            idle_probability: 0.01,
            wake_probability: 0.2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TraceConfig {
    pub kind: TraceKind,
    pub timer: TimerParams,
    pub alternating: AlternatingParams,
    pub poisson: PoissonParams,
    pub bursty: BurstyParams,
}

impl Default for TraceConfig {
    fn default() -> Self {
        Self {
            kind: TraceKind::Bursty,
            timer: TimerParams::default(),
            alternating: AlternatingParams::default(),
            poisson: PoissonParams::default(),
            bursty: BurstyParams::default(),
        }
    }
}

impl TraceConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: &'static str| Err(SimError::Config(m));
        match self.kind {
            TraceKind::Timer => {
                if !(self.timer.period_s > 0.0) || self.timer.lo > self.timer.hi {
                    return bad("timer needs period_s > 0 and lo <= hi");
                }
            }
            TraceKind::Alternating => {
                if !(self.alternating.period_s > 0.0) {
                    return bad("alternating.period_s must be positive");
                }
            }
            TraceKind::Poisson => {
                if !(self.poisson.mean_rps >= 0.0 && self.poisson.window_s > 0.0) {
                    return bad("poisson needs mean_rps >= 0 and window_s > 0");
                }
            }
            TraceKind::Bursty => {
                let b = &self.bursty;
                if !(b.step_s > 0.0
                    && (0.0..1.0).contains(&b.reversion)
                    && b.volatility >= 0.0
                    && b.small_base > 0.0
                    && (0.0..1.0).contains(&b.high_mass_share)
                    && (0.0..=1.0).contains(&b.idle_probability)
                    && (0.0..=1.0).contains(&b.wake_probability))
                {
                    return bad("invalid bursty parameters");
                }
            }
        }
        Ok(())
    }

    /// Functions driven by this trace kind out of `available`.
    pub fn driven_functions<'a>(&self, available: &'a [FunctionId]) -> &'a [FunctionId] {
        match self.kind {
            TraceKind::Timer | TraceKind::Alternating => &available[..available.len().min(1)],
            TraceKind::Poisson | TraceKind::Bursty => available,
        }
    }
}

fn secs_to_ms(s: f64) -> u64 {
    libm::round(s * 1000.0) as u64
}

/// Generates the trace for `functions` over `horizon_ms`.
pub fn gen_trace(
    config: &TraceConfig,
    functions: &[FunctionId],
    saturated_load_rps: f64,
    horizon_ms: u64,
    seed: u64,
) -> Result<TraceSignal, SimError> {
    config.validate()?;
    let driven = config.driven_functions(functions);
    if driven.is_empty() {
        return Err(SimError::Trace("trace needs at least one function"));
    }
    let mut signal = TraceSignal {
        horizon_ms,
        functions: BTreeMap::new(),
    };
    match config.kind {
        TraceKind::Timer => {
            let p = &config.timer;
            let half = secs_to_ms(p.period_s / 2.0).max(1);
            let levels = [p.hi, p.lo].map(|c| c as f64 * saturated_load_rps);
            signal.functions.insert(driven[0].clone(), square_wave(levels, half, horizon_ms));
        }
        TraceKind::Alternating => {
            let half = secs_to_ms(config.alternating.period_s / 2.0).max(1);
            signal
                .functions
                .insert(driven[0].clone(), square_wave([saturated_load_rps, 0.0], half, horizon_ms));
        }
        TraceKind::Poisson => {
            let p = &config.poisson;
            let window = secs_to_ms(p.window_s).max(1);
            for f in driven {
                let mut r = rng::stream(seed, &alloc::format!("trace/poisson/{f}"));
                let mean = p.mean_rps * p.window_s;
                let mut points = Vec::new();
                let mut t = 0;
                while t < horizon_ms {
                    let count = if mean > 0.0 {
                        Poisson::new(mean).expect("positive mean").sample(&mut r)
                    } else {
                        0.0
                    };
                    push_level(&mut points, t, count / p.window_s);
                    t += window;
                }
                signal.functions.insert(f.clone(), points);
            }
        }
        TraceKind::Bursty => {
            if driven.len() < 6 {
                return Err(SimError::Trace("bursty traces need at least six functions"));
            }
            bursty(&config.bursty, driven, saturated_load_rps, horizon_ms, seed, &mut signal)?;
        }
    }
    Ok(signal)
}

fn push_level(points: &mut Vec<(u64, f64)>, t: u64, rps: f64) {
    if points.last().is_none_or(|(_, last)| *last != rps) {
        points.push((t, rps));
    }
}

fn square_wave(levels: [f64; 2], half_ms: u64, horizon_ms: u64) -> Vec<(u64, f64)> {
    let mut points = Vec::new();
    let mut t = 0;
    let mut k = 0;
    while t < horizon_ms {
        push_level(&mut points, t, levels[k % 2]);
        t += half_ms;
        k += 1;
    }
    points
}

/// Per-function multiplicative shape shared by every scale of the large group.
struct BurstyShape {
    phase_ms: u64,
    factors: Vec<f64>,
}

fn bursty(
    p: &BurstyParams,
    functions: &[FunctionId],
    saturated_load_rps: f64,
    horizon_ms: u64,
    seed: u64,
    signal: &mut TraceSignal,
) -> Result<(), SimError> {
    let step = secs_to_ms(p.step_s).max(1);
    let steps = (horizon_ms / step + 2) as usize;
    let n_large = (functions.len() / 3).max(1);
    let stationary = p.volatility / libm::sqrt(1.0 - p.reversion * p.reversion);
    let shapes: Vec<BurstyShape> = functions
        .iter()
        .enumerate()
        .map(|(i, f)| {
            let mut r = rng::stream(seed, &alloc::format!("trace/bursty/{f}"));
            let phase_ms = r.random_range(0..step);
            let noise = Normal::new(0.0, 1.0).expect("unit normal");
            let mut x = stationary * noise.sample(&mut r);
            let mut awake = true;
            let factors = (0..steps)
                .map(|_| {
                    x = p.reversion * x + p.volatility * noise.sample(&mut r);
                    if i >= n_large {
                        let flip: f64 = r.random();
                        awake = if awake { flip >= p.idle_probability } else { flip < p.wake_probability };
                    }
                    if awake {
                        libm::exp(x - stationary * stationary / 2.0)
                    } else {
                        0.0
                    }
                })
                .collect();
            BurstyShape { phase_ms, factors }
        })
        .collect();

    let build = |large_base: f64| -> TraceSignal {
        let mut s = TraceSignal {
            horizon_ms,
            functions: BTreeMap::new(),
        };
        for (i, (f, shape)) in functions.iter().zip(&shapes).enumerate() {
            let base = if i < n_large { large_base } else { p.small_base };
            let mut points = Vec::new();
            // The first step covers [0, phase); later ones are offset by phase.
            for (k, factor) in shape.factors.iter().enumerate() {
                let t = if k == 0 { 0 } else { shape.phase_ms + (k as u64 - 1) * step };
                if t >= horizon_ms {
                    break;
                }
                let level = libm::round(base * factor * saturated_load_rps * 100.0) / 100.0;
                push_level(&mut points, t, level);
            }
            s.functions.insert(f.clone(), points);
        }
        s
    };

    let share = |s: &TraceSignal| s.high_concurrency_mass_share(saturated_load_rps, p.concurrency_threshold);
    let (mut lo, mut hi) = (1.0_f64, 200.0_f64);
    if share(&build(hi)) < p.high_mass_share {
        return Err(SimError::Trace("bursty mass share unreachable"));
    }
    for _ in 0..60 {
        let mid = (lo + hi) / 2.0;
        if share(&build(mid)) < p.high_mass_share {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    *signal = build(hi);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn ids(n: usize) -> Vec<FunctionId> {
        (0..n).map(|i| FunctionId::new(alloc::format!("f{i:02}"))).collect()
    }

    fn expected(rps: f64) -> u32 {
        libm::ceil(rps / 10.0) as u32
    }

    #[test]
    fn timer_alternates_between_levels() {
        let cfg = TraceConfig {
            kind: TraceKind::Timer,
            timer: TimerParams { lo: 0, hi: 5, period_s: 120.0 },
            ..TraceConfig::default()
        };
        let s = gen_trace(&cfg, &ids(3), 10.0, 600_000, 1).unwrap();
        assert_eq!(s.functions.len(), 1);
        let f = FunctionId::from("f00");
        let levels: Vec<u32> = (0..10).map(|k| expected(s.rps_at(&f, k * 60_000 + 1))).collect();
        assert_eq!(levels, vec![5, 0, 5, 0, 5, 0, 5, 0, 5, 0]);
    }

    #[test]
    fn alternating_toggles_one_instance() {
        let cfg = TraceConfig {
            kind: TraceKind::Alternating,
            ..TraceConfig::default()
        };
        let s = gen_trace(&cfg, &ids(1), 10.0, 900_000, 1).unwrap();
        let f = FunctionId::from("f00");
        assert_eq!(s.rps_at(&f, 0), 10.0);
        assert_eq!(s.rps_at(&f, 150_000), 0.0);
        assert_eq!(s.rps_at(&f, 300_000), 10.0);
    }

    #[test]
    fn bursty_matches_mass_share() {
        for seed in [1, 2, 3] {
            let s = gen_trace(&TraceConfig::default(), &ids(6), 10.0, 3_600_000, seed).unwrap();
            let share = s.high_concurrency_mass_share(10.0, 12);
            assert!((share - 0.56).abs() <= 0.05, "seed {seed}: {share}");
            for pts in s.functions.values() {
                assert!(pts.windows(2).all(|w| w[0].0 < w[1].0));
            }
        }
    }

    #[test]
    fn poisson_is_deterministic_and_centred() {
        let cfg = TraceConfig {
            kind: TraceKind::Poisson,
            ..TraceConfig::default()
        };
        let a = gen_trace(&cfg, &ids(2), 10.0, 3_600_000, 5).unwrap();
        assert_eq!(a, gen_trace(&cfg, &ids(2), 10.0, 3_600_000, 5).unwrap());
        let f = FunctionId::from("f01");
        let mean: f64 = (0..360).map(|k| a.rps_at(&f, k * 10_000)).sum::<f64>() / 360.0;
        assert!((mean - 40.0).abs() < 2.0, "{mean}");
    }

    #[test]
    fn record_round_trip_and_validation() {
        let s = gen_trace(&TraceConfig::default(), &ids(6), 10.0, 600_000, 9).unwrap();
        assert_eq!(TraceSignal::from_records(&s.records(), s.horizon_ms).unwrap(), s);
        let bad = [
            TraceRecord { t_ms: 5, function: "f".into(), rps: 1.0 },
            TraceRecord { t_ms: 5, function: "f".into(), rps: 2.0 },
        ];
        assert!(TraceSignal::from_records(&bad, 10).is_err());
        let negative = [TraceRecord { t_ms: 0, function: "f".into(), rps: -1.0 }];
        assert!(TraceSignal::from_records(&negative, 10).is_err());
    }
}
