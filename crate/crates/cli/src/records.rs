//! Metrics stream: one JSON object per line, a CSV series per run, and an
//! aligned summary table.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use scl_core::losses::Component;
use scl_core::trainer::TrainingTrace;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Training objectives that produce loss records.
pub const OBJECTIVES: [&str; 3] = ["pretrain", "d", "g"];

/// Names of metric records.
pub const METRIC_NAMES: [&str; 10] = [
    "is_mean",
    "is_std",
    "fid",
    "within_cos",
    "between_cos",
    "cluster_gap",
    "fallback_count",
    "skipped_anchors",
    "classifier_accuracy",
    "lambda2",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Kind {
    Loss,
    Metric,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub run: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub step: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub epoch: Option<usize>,
    pub name: String,
    pub value: f64,
    pub kind: Kind,
}

#[derive(Debug, Error)]
pub enum RecordError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("line {line}: unknown record name `{name}`")]
    UnknownName { line: usize, name: String },
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

/// Loss names are `<objective>.<component>` or `<objective>.total`.
pub fn is_known_name(name: &str, kind: Kind) -> bool {
    match kind {
        Kind::Metric => METRIC_NAMES.contains(&name),
        Kind::Loss => match name.split_once('.') {
            Some((obj, part)) => {
                OBJECTIVES.contains(&obj) && (part == "total" || Component::ALL.iter().any(|c| c.as_str() == part))
            }
            None => false,
        },
    }
}

pub fn loss_records(run: &str, trace: &TrainingTrace) -> Vec<MetricsRecord> {
    let mut out = Vec::new();
    for s in &trace.steps {
        let rec = |name: String, value: f64| MetricsRecord {
            run: run.to_string(),
            step: Some(s.step),
            epoch: Some(s.epoch),
            name,
            value,
            kind: Kind::Loss,
        };
        out.push(rec(format!("{}.total", s.objective), s.report.total));
        for (c, v) in &s.report.components {
            out.push(rec(format!("{}.{}", s.objective, c.as_str()), *v));
        }
    }
    out.push(metric(run, "fallback_count", trace.fallback_total as f64));
    let skipped: usize = trace.steps.iter().map(|s| s.report.skipped_anchor_count).sum();
    out.push(metric(run, "skipped_anchors", skipped as f64));
    out
}

pub fn metric(run: &str, name: &str, value: f64) -> MetricsRecord {
    MetricsRecord {
        run: run.to_string(),
        step: None,
        epoch: None,
        name: name.to_string(),
        value,
        kind: Kind::Metric,
    }
}

pub fn write_records(path: &Path, records: &[MetricsRecord]) -> Result<(), RecordError> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut w, r).map_err(std::io::Error::from)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_records(path: &Path) -> Result<Vec<MetricsRecord>, RecordError> {
    let reader = BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let r: MetricsRecord = serde_json::from_str(&line).map_err(|e| RecordError::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        if !is_known_name(&r.name, r.kind) {
            return Err(RecordError::UnknownName {
                line: i + 1,
                name: r.name,
            });
        }
        out.push(r);
    }
    Ok(out)
}

/// Plot-ready per-step series: `step, epoch, objective, total`, then one
/// column per loss component.
pub fn write_series(path: &Path, trace: &TrainingTrace) -> Result<(), RecordError> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["step".to_string(), "epoch".into(), "objective".into(), "total".into()];
    header.extend(Component::ALL.iter().map(|c| c.as_str().to_string()));
    w.write_record(&header)?;
    for s in &trace.steps {
        let mut row = vec![s.step.to_string(), s.epoch.to_string(), s.objective.clone(), s.report.total.to_string()];
        row.extend(
            Component::ALL
                .iter()
                .map(|c| s.report.get(*c).map_or(String::new(), |v| v.to_string())),
        );
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Wall-clock seconds per epoch; kept apart from the metrics stream, which
/// must be reproducible bit for bit.
pub fn write_timing(path: &Path, trace: &TrainingTrace) -> Result<(), RecordError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["epoch", "seconds"])?;
    for e in &trace.epochs {
        w.write_record([e.epoch.to_string(), format!("{:.6}", e.wall_clock_secs)])?;
    }
    w.flush()?;
    Ok(())
}

/// Left-aligned first column, right-aligned numeric columns.
pub fn format_table(header: &[&str], rows: &[Vec<String>]) -> String {
    let mut widths: Vec<usize> = header.iter().map(|h| h.len()).collect();
    for r in rows {
        for (w, cell) in widths.iter_mut().zip(r) {
            *w = (*w).max(cell.len());
        }
    }
    let fmt_row = |cells: Vec<&str>| {
        cells
            .iter()
            .enumerate()
            .map(|(i, c)| {
                if i == 0 {
                    format!("{c:<w$}", w = widths[i])
                } else {
                    format!("{c:>w$}", w = widths[i])
                }
            })
            .collect::<Vec<_>>()
            .join("  ")
            .trim_end()
            .to_string()
    };
    let mut out = fmt_row(header.to_vec());
    out.push('\n');
    out.push_str(&"-".repeat(widths.iter().sum::<usize>() + 2 * (widths.len() - 1)));
    out.push('\n');
    for r in rows {
        out.push_str(&fmt_row(r.iter().map(String::as_str).collect()));
        out.push('\n');
    }
    out
}

/// Table of the metric records, one row per run.
pub fn summary_table(records: &[MetricsRecord]) -> String {
    let metrics: Vec<&MetricsRecord> = records.iter().filter(|r| r.kind == Kind::Metric).collect();
    let mut runs: Vec<&str> = Vec::new();
    let mut names: Vec<&str> = Vec::new();
    for r in &metrics {
        if !runs.contains(&r.run.as_str()) {
            runs.push(&r.run);
        }
        if !names.contains(&r.name.as_str()) {
            names.push(&r.name);
        }
    }
    let mut header = vec!["run"];
    header.extend(&names);
    let rows: Vec<Vec<String>> = runs
        .iter()
        .map(|run| {
            std::iter::once(run.to_string())
                .chain(names.iter().map(|n| {
                    metrics
                        .iter()
                        .rev()
                        .find(|r| r.run == *run && r.name == *n)
                        .map_or("-".into(), |r| format!("{:.4}", r.value))
                }))
                .collect()
        })
        .collect();
    format_table(&header, &rows)
}
