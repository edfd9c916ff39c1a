//! Experiment runner behind the `accordion` binary.

pub mod config;
pub mod verify;

use std::path::{Path, PathBuf};

use serde::Serialize;

use accordion_core::simulator::{self, RunOptions, RunResult};
use accordion_core::{Error, MetricsRow};

pub use config::{ConfigError, PolicyKind, RunSpec};
pub use verify::{Check, VerifyReport, Which};

/// Frozen metrics CSV header.
pub const CSV_HEADER: [&str; 7] = [
    "epoch",
    "train_loss",
    "eval_metric",
    "lr",
    "levels",
    "floats_cumulative",
    "iters_cumulative",
];

/// Environment variable holding the worker thread count (0 or unset: all cores).
pub const THREADS_ENV: &str = "ACCORDION_THREADS";

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("training diverged at epoch {epoch}, iteration {iteration}")]
    Divergence { epoch: usize, iteration: usize },
    #[error(transparent)]
    Core(Error),
    #[error("{0}")]
    Assertion(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::Divergence { epoch, iteration } => CliError::Divergence { epoch, iteration },
            Error::Config(m) | Error::Shape(m) => CliError::Config(ConfigError::Invalid(m)),
            other => CliError::Core(other),
        }
    }
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Assertion(_) | CliError::Core(_) => 1,
            CliError::Config(_) | CliError::Io { .. } => 2,
            CliError::Divergence { .. } => 3,
        }
    }
}

pub fn threads_from_env() -> usize {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.trim().parse().ok())
        .unwrap_or(0)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Summary {
    pub final_metric: f64,
    pub total_floats: u64,
    /// Per-epoch level summary, one entry per epoch.
    pub level_trace: Vec<String>,
    pub seed: u64,
}

pub struct TrainOutput {
    pub result: RunResult,
    pub summary: Summary,
}

impl TrainOutput {
    pub fn csv(&self) -> String {
        metrics_csv(&self.result.metrics)
    }

    pub fn json(&self) -> String {
        #[derive(Serialize)]
        struct Row {
            epoch: usize,
            train_loss: f64,
            eval_metric: f64,
            lr: f64,
            levels: String,
            floats_cumulative: u64,
            iters_cumulative: u64,
        }
        let rows: Vec<Row> = self
            .result
            .metrics
            .iter()
            .map(|m| Row {
                epoch: m.epoch,
                train_loss: m.train_loss,
                eval_metric: m.eval_metric,
                lr: m.lr,
                levels: m.level_summary(),
                floats_cumulative: m.floats_cumulative,
                iters_cumulative: m.iterations_cumulative,
            })
            .collect();
        let doc = serde_json::json!({ "summary": self.summary, "metrics": rows });
        serde_json::to_string_pretty(&doc).expect("metrics serialize") + "\n"
    }
}

pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(CSV_HEADER).expect("in-memory write");
    for m in rows {
        w.write_record([
            m.epoch.to_string(),
            m.train_loss.to_string(),
            m.eval_metric.to_string(),
            m.lr.to_string(),
            m.level_summary(),
            m.floats_cumulative.to_string(),
            m.iterations_cumulative.to_string(),
        ])
        .expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("csv is utf-8")
}

pub fn summarize(result: &RunResult, seed: u64) -> Summary {
    Summary {
        final_metric: result.final_metric(),
        total_floats: result.total_floats(),
        level_trace: result.metrics.iter().map(MetricsRow::level_summary).collect(),
        seed,
    }
}

/// Runs the spec's training job.
pub fn train(spec: &RunSpec, threads: usize, keep_checkpoints: bool) -> Result<TrainOutput, CliError> {
    let config = spec.train_config()?;
    let data = spec.dataset()?;
    let model = spec.build_model()?;
    log::info!(
        "training {} on {} samples: {} workers, {} epochs, policy {}",
        spec.model.name(),
        data.len(),
        config.workers,
        config.epochs,
        spec.policy.name()
    );
    let result = simulator::run_with(
        &config,
        model,
        &data,
        RunOptions {
            threads,
            keep_checkpoints,
        },
    )?;
    let summary = summarize(&result, spec.seed);
    Ok(TrainOutput { result, summary })
}

pub fn write_file(path: &Path, contents: &str) -> Result<(), CliError> {
    std::fs::write(path, contents).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Writes a training run's outputs; returns what should go to stdout.
///
/// CSV format writes the metrics to the output path and the summary next to
/// it with a `.json` extension; without a path the CSV is returned for stdout
/// and the summary logged. JSON format writes one document with both.
pub fn emit_train(spec: &RunSpec, out: &TrainOutput) -> Result<String, CliError> {
    let summary = serde_json::to_string_pretty(&out.summary).expect("summary serializes") + "\n";
    match (spec.format, &spec.output_path) {
        (config::Format::Csv, Some(path)) => {
            write_file(path, &out.csv())?;
            write_file(&path.with_extension("json"), &summary)?;
            Ok(summary)
        }
        (config::Format::Csv, None) => {
            eprintln!("{}", serde_json::to_string(&out.summary).expect("summary serializes"));
            Ok(out.csv())
        }
        (config::Format::Json, Some(path)) => {
            write_file(path, &out.json())?;
            Ok(summary)
        }
        (config::Format::Json, None) => Ok(out.json()),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CompareRow {
    pub label: String,
    pub final_metric: f64,
    pub total_floats: u64,
    /// Floats relative to the first row.
    pub ratio: f64,
}

/// Runs every labelled spec and tabulates metric against floats sent.
pub fn compare(specs: &[(String, RunSpec)], threads: usize) -> Result<Vec<CompareRow>, CliError> {
    let Some((_, first)) = specs.first() else {
        return Err(ConfigError::Invalid("compare needs at least one spec".into()).into());
    };
    if let Some((label, _)) = specs.iter().find(|(_, s)| s.data_key() != first.data_key()) {
        return Err(ConfigError::Invalid(format!(
            "`{label}` uses different data or seed; comparisons must share both"
        ))
        .into());
    }
    let mut rows: Vec<CompareRow> = Vec::with_capacity(specs.len());
    for (label, spec) in specs {
        let out = train(spec, threads, false)?;
        rows.push(CompareRow {
            label: label.clone(),
            final_metric: out.summary.final_metric,
            total_floats: out.summary.total_floats,
            ratio: 1.0,
        });
    }
    let base = rows[0].total_floats as f64;
    for r in &mut rows {
        r.ratio = if base > 0.0 { r.total_floats as f64 / base } else { 1.0 };
    }
    Ok(rows)
}

pub fn compare_table(rows: &[CompareRow]) -> String {
    let width = rows.iter().map(|r| r.label.len()).max().unwrap_or(0).max(5);
    let mut s = format!(
        "{:<width$}  {:>12}  {:>14}  {:>8}\n",
        "label", "final_metric", "total_floats", "ratio"
    );
    for r in rows {
        s += &format!(
            "{:<width$}  {:>12.6}  {:>14}  {:>7.3}x\n",
            r.label, r.final_metric, r.total_floats, r.ratio
        );
    }
    s
}

pub fn compare_csv(rows: &[CompareRow]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["label", "final_metric", "total_floats", "ratio"])
        .expect("in-memory write");
    for r in rows {
        w.write_record([
            r.label.clone(),
            r.final_metric.to_string(),
            r.total_floats.to_string(),
            r.ratio.to_string(),
        ])
        .expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("csv is utf-8")
}
