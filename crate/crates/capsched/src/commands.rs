//! Subcommand bodies. Each writes its outputs under `out` and returns the
//! document it wrote last.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use capsched_core::sim::metrics::MetricsReport;
use capsched_core::sim::pipeline::{train_pipeline, AccuracyReport};
use capsched_core::sim::run::scenario_trace;
use capsched_core::sim::{self, build_workload, replay, ComparisonRatios, EventRecord, Prepared, ScenarioConfig};
use capsched_core::SimTime;
use serde::{Deserialize, Serialize};

use crate::error::CliError;
use crate::formats;

pub const TRACE_FILE: &str = "trace.jsonl";
pub const MODEL_FILE: &str = "model.json";
pub const EVENTS_FILE: &str = "events.jsonl";
pub const REPORT_FILE: &str = "report.json";
pub const SUMMARY_FILE: &str = "summary.csv";

/// Oracle replay of a run's event log next to what the run reported.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReplaySummary {
    pub violation_rate: f64,
    pub raw_density: f64,
    /// Replayed figures equal the reported ones bit for bit.
    pub matches_report: bool,
    pub admissions_checked: u64,
    pub over_admissions: usize,
    /// Creations, re-activations and migrations in the log equal the
    /// cold-start ledger.
    pub ledger_balanced: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunDocument {
    pub command: String,
    pub config: ScenarioConfig,
    pub accuracy: Option<AccuracyReport>,
    pub report: MetricsReport,
    pub replay: ReplaySummary,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompareDocument {
    pub command: String,
    pub config: ScenarioConfig,
    pub accuracy: Option<AccuracyReport>,
    pub ratios: ComparisonRatios,
    pub reports: BTreeMap<String, MetricsReport>,
    pub replay: BTreeMap<String, ReplaySummary>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainDocument {
    pub command: String,
    pub config: ScenarioConfig,
    pub accuracy: AccuracyReport,
    pub model_file: PathBuf,
}

pub fn audit_run(
    cfg: &ScenarioConfig,
    prepared: &Prepared,
    report: &MetricsReport,
    events: &[EventRecord],
) -> Result<ReplaySummary, CliError> {
    let r = replay(
        events,
        &prepared.workload.oracle,
        &prepared.workload.specs,
        SimTime::from_secs_f64(cfg.horizon_s),
        SimTime::from_secs_f64(cfg.warmup_s),
        SimTime::from_secs_f64(cfg.window_s),
        true,
    )?;
    let c = &report.cold_starts;
    Ok(ReplaySummary {
        violation_rate: r.violation_rate,
        raw_density: r.raw_density,
        matches_report: r.violation_rate.to_bits() == report.qos.violation_rate.to_bits()
            && r.raw_density.to_bits() == report.density.raw.to_bits(),
        admissions_checked: r.admissions,
        over_admissions: r.over_admissions.len(),
        ledger_balanced: r.creations_saturated == c.real
            && r.creations_cached == c.migrations
            && r.reactivations == c.logical,
    })
}

pub fn gen_trace(cfg: &ScenarioConfig, out: &Path) -> Result<PathBuf, CliError> {
    let workload = build_workload(cfg, cfg.functions.count)?;
    let trace = scenario_trace(cfg, &workload)?;
    let path = out.join(TRACE_FILE);
    formats::write_trace(&path, &trace)?;
    Ok(path)
}

pub fn train(cfg: &ScenarioConfig, out: &Path) -> Result<TrainDocument, CliError> {
    let workload = build_workload(cfg, cfg.functions.count)?;
    let (model, accuracy) = train_pipeline(cfg, &workload)?;
    let model_file = out.join(MODEL_FILE);
    formats::write_model(&model_file, &model, Some(&accuracy))?;
    let doc = TrainDocument {
        command: "train".into(),
        config: cfg.clone(),
        accuracy,
        model_file: PathBuf::from(MODEL_FILE),
    };
    formats::write_json(&out.join(REPORT_FILE), &doc)?;
    Ok(doc)
}

fn prepare(cfg: &ScenarioConfig, trace: Option<&Path>, model: Option<&Path>) -> Result<Prepared, CliError> {
    let trace = trace.map(formats::read_trace).transpose()?;
    let model = model.map(formats::read_model).transpose()?;
    Ok(sim::prepare_with(cfg, trace, model)?)
}

pub fn run(cfg: &ScenarioConfig, out: &Path, trace: Option<&Path>, model: Option<&Path>) -> Result<RunDocument, CliError> {
    let prepared = prepare(cfg, trace, model)?;
    let output = sim::run(cfg, &prepared)?;
    let replay = audit_run(cfg, &prepared, &output.report, &output.events)?;
    formats::write_events(&out.join(EVENTS_FILE), &output.events)?;
    formats::write_summary(&out.join(SUMMARY_FILE), [&output.report])?;
    let doc = RunDocument {
        command: "run".into(),
        config: cfg.clone(),
        accuracy: prepared.accuracy.clone(),
        report: output.report,
        replay,
    };
    formats::write_json(&out.join(REPORT_FILE), &doc)?;
    Ok(doc)
}

pub fn compare(
    cfg: &ScenarioConfig,
    out: &Path,
    trace: Option<&Path>,
    model: Option<&Path>,
) -> Result<CompareDocument, CliError> {
    let prepared = prepare(cfg, trace, model)?;
    let cmp = sim::compare(cfg, &prepared)?;
    let mut replays = BTreeMap::new();
    for (policy, report) in &cmp.reports {
        let policy_cfg = ScenarioConfig {
            policy: *policy,
            ..cfg.clone()
        };
        replays.insert(
            policy.name().to_owned(),
            audit_run(&policy_cfg, &prepared, report, &cmp.events[policy])?,
        );
    }
    formats::write_tagged_events(
        &out.join(EVENTS_FILE),
        cmp.events.iter().map(|(p, e)| (p.name(), e.as_slice())),
    )?;
    formats::write_summary(&out.join(SUMMARY_FILE), cmp.reports.values())?;
    let doc = CompareDocument {
        command: "compare".into(),
        config: cfg.clone(),
        accuracy: prepared.accuracy.clone(),
        ratios: cmp.ratios,
        reports: cmp.reports.into_iter().map(|(p, r)| (p.name().to_owned(), r)).collect(),
        replay: replays,
    };
    formats::write_json(&out.join(REPORT_FILE), &doc)?;
    Ok(doc)
}

/// Renders the summary of a finished `run` or `compare` as an aligned table.
pub fn report(dir: &Path) -> Result<String, CliError> {
    let rows = formats::read_summary(&dir.join(SUMMARY_FILE))?;
    let mut text = format!(
        "{:<9} {:>9} {:>8} {:>9} {:>6} {:>10} {:>9} {:>7} {:>7} {:>6} {:>10}\n",
        "policy", "viol", "density", "schedules", "fast", "crit_ms", "inf/sched", "real", "logical", "migr", "e2e_ms"
    );
    for r in &rows {
        text.push_str(&format!(
            "{:<9} {:>9.4} {:>8.3} {:>9} {:>6.3} {:>10.3} {:>9.3} {:>7} {:>7} {:>6} {:>10.3}\n",
            r.policy,
            r.qos_violation_rate,
            r.normalized_density,
            r.schedules,
            r.fast_path_fraction,
            r.mean_critical_path_ms,
            r.inference_events_per_schedule,
            r.real_cold_starts,
            r.logical_starts,
            r.migrations,
            r.mean_end_to_end_cold_start_ms
        ));
    }
    if let Ok(doc) = formats::read_json::<serde_json::Value>(&dir.join(REPORT_FILE)) {
        if let Some(ratios) = doc.get("ratios").and_then(|r| r.as_object()) {
            for (k, v) in ratios {
                text.push_str(&format!("{k}: {v}\n"));
            }
        }
    }
    Ok(text)
}
