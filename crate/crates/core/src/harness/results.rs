//! Result files: a column-stable results table, long-format plot tables, a JSON summary
//! per run and seed aggregates.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::engine::MetricsRecord;
use crate::error::{Error, Result};

pub const RESULTS_VERSION_LINE: &str = "# semevo-results v1";

pub const RESULT_COLUMNS: &[&str] = &[
    "solver",
    "oracle",
    "seed",
    "sweep_key",
    "sweep_value",
    "last_accuracy",
    "old_accuracy",
    "new_accuracy",
    "streamed_accuracy",
    "excluded_accuracy",
    "mean_drift_similarity",
    "final_residual",
    "samples",
    "solves",
    "ridge_fallbacks",
    "config_hash",
];

/// One row of `results.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub solver: String,
    pub oracle: bool,
    pub seed: u64,
    pub sweep_key: String,
    pub sweep_value: String,
    pub last_accuracy: f64,
    pub old_accuracy: Option<f64>,
    pub new_accuracy: Option<f64>,
    pub streamed_accuracy: Option<f64>,
    pub excluded_accuracy: Option<f64>,
    pub mean_drift_similarity: Option<f64>,
    pub final_residual: Option<f64>,
    pub samples: usize,
    pub solves: usize,
    pub ridge_fallbacks: usize,
    pub config_hash: String,
}

impl From<&MetricsRecord> for ResultRow {
    fn from(m: &MetricsRecord) -> Self {
        Self {
            solver: m.solver.clone(),
            oracle: m.oracle,
            seed: m.seed,
            sweep_key: m.sweep_key.clone(),
            sweep_value: m.sweep_value.clone(),
            last_accuracy: m.last_accuracy,
            old_accuracy: m.old_accuracy,
            new_accuracy: m.new_accuracy,
            streamed_accuracy: m.streamed_accuracy,
            excluded_accuracy: m.excluded_accuracy,
            mean_drift_similarity: m.mean_drift_similarity,
            final_residual: m.final_residual,
            samples: m.samples,
            solves: m.solves,
            ridge_fallbacks: m.ridge_fallbacks,
            config_hash: m.config_hash.clone(),
        }
    }
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Serialize(format!("{}: {other:?}", path.display())),
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path).map(BufWriter::new).map_err(|e| Error::io(path, e))
}

/// Writes a versioned CSV file: the version comment line, a header and the rows.
fn write_table<S: Serialize>(path: &Path, columns: &[&str], rows: impl IntoIterator<Item = S>) -> Result<()> {
    let mut out = create(path)?;
    writeln!(out, "{RESULTS_VERSION_LINE}").map_err(|e| Error::io(path, e))?;
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    w.write_record(columns).map_err(|e| csv_err(path, e))?;
    for row in rows {
        w.serialize(row).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn run_label(m: &MetricsRecord) -> String {
    let mut label = format!("{}_seed{}", m.solver, m.seed);
    if !m.sweep_key.is_empty() {
        label.push_str(&format!("_{}-{}", m.sweep_key, m.sweep_value.replace(['/', '\\', ' '], "_")));
    }
    label
}

/// Paths of the files written by [`emit_results`].
#[derive(Debug, Clone)]
pub struct EmittedFiles {
    pub results: PathBuf,
    pub aggregate: PathBuf,
    pub summaries: Vec<PathBuf>,
}

/// Writes all result files for `records` into `dir`.
///
/// Everything except the JSON summaries and `timing.csv` is a deterministic function of
/// the records' non-timing fields.
pub fn emit_results(dir: &Path, records: &[MetricsRecord]) -> Result<EmittedFiles> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let results = dir.join("results.csv");
    let rows: Vec<ResultRow> = records.iter().map(ResultRow::from).collect();
    write_table(&results, RESULT_COLUMNS, &rows)?;

    write_table(
        &dir.join("task_accuracy.csv"),
        &["solver", "seed", "sweep_key", "sweep_value", "task", "accuracy"],
        records.iter().flat_map(|m| {
            m.per_task_accuracy
                .iter()
                .enumerate()
                .map(move |(t, a)| (&m.solver, m.seed, &m.sweep_key, &m.sweep_value, t + 1, a))
        }),
    )?;
    write_table(
        &dir.join("curves.csv"),
        &[
            "solver",
            "seed",
            "sweep_key",
            "sweep_value",
            "task",
            "samples",
            "samples_per_class",
            "accuracy",
        ],
        records.iter().flat_map(|m| {
            m.curve.iter().map(move |p| {
                (
                    &m.solver,
                    m.seed,
                    &m.sweep_key,
                    &m.sweep_value,
                    p.task,
                    p.samples,
                    p.samples_per_class,
                    p.accuracy,
                )
            })
        }),
    )?;
    write_table(
        &dir.join("drift_similarity.csv"),
        &["solver", "seed", "sweep_key", "sweep_value", "class_id", "similarity", "zero_drift"],
        records.iter().flat_map(|m| {
            m.drift_similarity.iter().map(move |(c, s)| {
                (&m.solver, m.seed, &m.sweep_key, &m.sweep_value, c, s.similarity, s.zero_drift)
            })
        }),
    )?;
    write_table(
        &dir.join("old_new.csv"),
        &["solver", "seed", "sweep_key", "sweep_value", "group", "accuracy"],
        records.iter().flat_map(|m| {
            [("old", m.old_accuracy), ("new", m.new_accuracy)]
                .into_iter()
                .filter_map(move |(g, a)| a.map(|a| (&m.solver, m.seed, &m.sweep_key, &m.sweep_value, g, a)))
        }),
    )?;
    write_table(
        &dir.join("timing.csv"),
        &[
            "solver",
            "seed",
            "sweep_key",
            "sweep_value",
            "forward_s",
            "queue_s",
            "solve_s",
            "predict_s",
            "total_s",
        ],
        records.iter().map(|m| {
            (
                &m.solver,
                m.seed,
                &m.sweep_key,
                &m.sweep_value,
                m.timing.forward,
                m.timing.queue,
                m.timing.solve,
                m.timing.predict,
                m.timing.total(),
            )
        }),
    )?;

    let mut summaries = Vec::new();
    for m in records {
        let path = dir.join(format!("run_{}.json", run_label(m)));
        let doc = serde_json::json!({ "format": "semevo-run-summary/1", "metrics": m });
        let text = serde_json::to_string_pretty(&doc).map_err(|e| Error::Serialize(e.to_string()))?;
        std::fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
        summaries.push(path);
    }

    let aggregate = dir.join("aggregate.csv");
    write_aggregate(&aggregate, &aggregate_rows(&rows))?;
    Ok(EmittedFiles {
        results,
        aggregate,
        summaries,
    })
}

pub fn read_results(path: &Path) -> Result<Vec<ResultRow>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    if lines.next() != Some(RESULTS_VERSION_LINE) {
        return Err(Error::Serialize(format!(
            "{} does not start with `{RESULTS_VERSION_LINE}`",
            path.display()
        )));
    }
    let body = &text[RESULTS_VERSION_LINE.len() + 1..];
    let mut reader = csv::Reader::from_reader(body.as_bytes());
    reader.deserialize().map(|r| r.map_err(|e| csv_err(path, e))).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AggregateRow {
    pub solver: String,
    pub sweep_key: String,
    pub sweep_value: String,
    pub runs: usize,
    pub last_accuracy_mean: f64,
    pub last_accuracy_std: f64,
    pub old_accuracy_mean: Option<f64>,
    pub old_accuracy_std: Option<f64>,
    pub new_accuracy_mean: Option<f64>,
    pub new_accuracy_std: Option<f64>,
    pub config_hash: String,
}

const AGGREGATE_COLUMNS: &[&str] = &[
    "solver",
    "sweep_key",
    "sweep_value",
    "runs",
    "last_accuracy_mean",
    "last_accuracy_std",
    "old_accuracy_mean",
    "old_accuracy_std",
    "new_accuracy_mean",
    "new_accuracy_std",
    "config_hash",
];

/// Mean and sample standard deviation (zero for a single value).
pub fn mean_std(values: &[f64]) -> Option<(f64, f64)> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = if values.len() > 1 {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    Some((mean, std))
}

/// Groups rows by configuration, solver and sweep value; aggregates across seeds.
pub fn aggregate_rows(rows: &[ResultRow]) -> Vec<AggregateRow> {
    let mut groups: BTreeMap<(String, String, String, String), Vec<&ResultRow>> = BTreeMap::new();
    for r in rows {
        groups
            .entry((r.config_hash.clone(), r.solver.clone(), r.sweep_key.clone(), r.sweep_value.clone()))
            .or_default()
            .push(r);
    }
    groups
        .into_iter()
        .map(|((hash, solver, key, value), rows)| {
            let last: Vec<f64> = rows.iter().map(|r| r.last_accuracy).collect();
            let old: Vec<f64> = rows.iter().filter_map(|r| r.old_accuracy).collect();
            let new: Vec<f64> = rows.iter().filter_map(|r| r.new_accuracy).collect();
            let (lm, ls) = mean_std(&last).expect("group is non-empty");
            let (om, os) = mean_std(&old).unzip();
            let (nm, ns) = mean_std(&new).unzip();
            AggregateRow {
                solver,
                sweep_key: key,
                sweep_value: value,
                runs: rows.len(),
                last_accuracy_mean: lm,
                last_accuracy_std: ls,
                old_accuracy_mean: om,
                old_accuracy_std: os,
                new_accuracy_mean: nm,
                new_accuracy_std: ns,
                config_hash: hash,
            }
        })
        .collect()
}

pub fn write_aggregate(path: &Path, rows: &[AggregateRow]) -> Result<()> {
    write_table(path, AGGREGATE_COLUMNS, rows)
}

/// Merges the `results.csv` files of several run directories and writes `aggregate.csv`
/// into `out_dir`.
pub fn report(inputs: &[PathBuf], out_dir: &Path) -> Result<Vec<AggregateRow>> {
    let mut rows = Vec::new();
    for input in inputs {
        let path = if input.is_dir() {
            input.join("results.csv")
        } else {
            input.clone()
        };
        rows.extend(read_results(&path)?);
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let agg = aggregate_rows(&rows);
    write_aggregate(&out_dir.join("aggregate.csv"), &agg)?;
    Ok(agg)
}
