//! On-disk formats.
//!
//! * `trace.jsonl`: one `{"t_ms", "function", "rps"}` object per line; a
//!   first line `{"horizon_ms": ...}` carries the horizon.
//! * `events.jsonl`: one tagged event record per line (`"event"` field),
//!   times in microseconds (`t_us`), costs in milliseconds.
//! * `model.json`: `{"format", "model", "accuracy"}`.
//! * `report.json`: a single document embedding the effective config.
//! * `summary.csv`: one row per policy.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use capsched_core::predictor::ForestModel;
use capsched_core::sim::metrics::MetricsReport;
use capsched_core::sim::pipeline::AccuracyReport;
use capsched_core::sim::{EventRecord, TraceRecord, TraceSignal};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

pub const MODEL_FORMAT: &str = "capsched-forest/1";

#[derive(Serialize, Deserialize)]
struct TraceHeader {
    horizon_ms: u64,
}

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    Ok(BufWriter::new(File::create(path).map_err(|e| CliError::io(path, e))?))
}

fn write_lines<T: Serialize>(path: &Path, header: Option<&impl Serialize>, items: &[T]) -> Result<(), CliError> {
    let mut w = create(path)?;
    let io = |e: std::io::Error| CliError::io(path, e);
    if let Some(h) = header {
        serde_json::to_writer(&mut w, h).map_err(|e| CliError::input(e.to_string()))?;
        w.write_all(b"\n").map_err(io)?;
    }
    for item in items {
        serde_json::to_writer(&mut w, item).map_err(|e| CliError::input(e.to_string()))?;
        w.write_all(b"\n").map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn write_json(path: &Path, value: &impl Serialize) -> Result<(), CliError> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value).map_err(|e| CliError::input(e.to_string()))?;
    w.write_all(b"\n").map_err(|e| CliError::io(path, e))?;
    w.flush().map_err(|e| CliError::io(path, e))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::input(format!("{}: {e}", path.display())))
}

pub fn write_trace(path: &Path, trace: &TraceSignal) -> Result<(), CliError> {
    let header = TraceHeader {
        horizon_ms: trace.horizon_ms,
    };
    write_lines(path, Some(&header), &trace.records())
}

pub fn read_trace(path: &Path) -> Result<TraceSignal, CliError> {
    let file = File::open(path).map_err(|e| CliError::io(path, e))?;
    let mut lines = BufReader::new(file).lines();
    let bad = |n: usize, e: &dyn std::fmt::Display| CliError::input(format!("{}:{n}: {e}", path.display()));
    let first = lines
        .next()
        .ok_or_else(|| CliError::input(format!("{}: empty trace file", path.display())))?
        .map_err(|e| CliError::io(path, e))?;
    let header: TraceHeader = serde_json::from_str(&first).map_err(|e| bad(1, &e))?;
    let mut records = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line.map_err(|e| CliError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: TraceRecord = serde_json::from_str(&line).map_err(|e| bad(i + 2, &e))?;
        records.push(rec);
    }
    Ok(TraceSignal::from_records(&records, header.horizon_ms)?)
}

pub fn write_events(path: &Path, events: &[EventRecord]) -> Result<(), CliError> {
    write_lines(path, None::<&()>, events)
}

/// Events of several runs in one file, each line tagged with its policy.
pub fn write_tagged_events<'a>(
    path: &Path,
    runs: impl IntoIterator<Item = (&'a str, &'a [EventRecord])>,
) -> Result<(), CliError> {
    let mut lines = Vec::new();
    for (policy, events) in runs {
        for e in events {
            let mut v = serde_json::to_value(e).map_err(|e| CliError::input(e.to_string()))?;
            v.as_object_mut()
                .expect("records serialize to objects")
                .insert("policy".into(), policy.into());
            lines.push(v);
        }
    }
    write_lines(path, None::<&()>, &lines)
}

pub fn read_events(path: &Path) -> Result<Vec<EventRecord>, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| CliError::input(format!("{}:{}: {e}", path.display(), i + 1))))
        .collect()
}

#[derive(Serialize, Deserialize)]
pub struct ModelFile {
    pub format: String,
    pub model: ForestModel,
    pub accuracy: Option<AccuracyReport>,
}

pub fn write_model(path: &Path, model: &ForestModel, accuracy: Option<&AccuracyReport>) -> Result<(), CliError> {
    let file = ModelFile {
        format: MODEL_FORMAT.into(),
        model: model.clone(),
        accuracy: accuracy.cloned(),
    };
    let mut w = create(path)?;
    serde_json::to_writer(&mut w, &file).map_err(|e| CliError::input(e.to_string()))?;
    w.flush().map_err(|e| CliError::io(path, e))
}

pub fn read_model(path: &Path) -> Result<ForestModel, CliError> {
    let file: ModelFile = read_json(path)?;
    if file.format != MODEL_FORMAT {
        return Err(CliError::input(format!("{}: unsupported model format {}", path.display(), file.format)));
    }
    Ok(file.model)
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct SummaryRow {
    pub policy: String,
    pub qos_violation_rate: f64,
    pub normalized_density: f64,
    pub schedules: u64,
    pub fast_path_fraction: f64,
    pub mean_critical_path_ms: f64,
    pub p99_critical_path_ms: f64,
    pub inference_events_per_schedule: f64,
    pub total_inference_events: u64,
    pub real_cold_starts: u64,
    pub logical_starts: u64,
    pub migrations: u64,
    pub mean_end_to_end_cold_start_ms: f64,
}

impl From<&MetricsReport> for SummaryRow {
    fn from(r: &MetricsReport) -> Self {
        Self {
            policy: r.policy.name().into(),
            qos_violation_rate: r.qos.violation_rate,
            normalized_density: r.density.normalized,
            schedules: r.scheduling.schedules,
            fast_path_fraction: r.scheduling.fast_path_fraction,
            mean_critical_path_ms: r.scheduling.mean_critical_path_ms,
            p99_critical_path_ms: r.scheduling.p99_critical_path_ms,
            inference_events_per_schedule: r.scheduling.inference_events_per_schedule,
            total_inference_events: r.scheduling.total_inference_events,
            real_cold_starts: r.cold_starts.real,
            logical_starts: r.cold_starts.logical,
            migrations: r.cold_starts.migrations,
            mean_end_to_end_cold_start_ms: r.cold_starts.mean_end_to_end_ms,
        }
    }
}

pub fn write_summary<'a>(path: &Path, reports: impl IntoIterator<Item = &'a MetricsReport>) -> Result<(), CliError> {
    let w = create(path)?;
    let mut csv = csv::Writer::from_writer(w);
    for r in reports {
        csv.serialize(SummaryRow::from(r)).map_err(|e| CliError::input(e.to_string()))?;
    }
    csv.flush().map_err(|e| CliError::io(path, e))
}

pub fn read_summary(path: &Path) -> Result<Vec<SummaryRow>, CliError> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| CliError::input(format!("{}: {e}", path.display())))?;
    rdr.deserialize()
        .map(|r| r.map_err(|e| CliError::input(format!("{}: {e}", path.display()))))
        .collect()
}
