use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// CSV columns, in order.
pub const CSV_COLUMNS: [&str; 9] =
    ["regime", "prior", "gated", "seed", "n_tasks", "avg_accuracy", "gated_ratio", "task_accuracies", "elbo_trace"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub regime: String,
    pub prior: String,
    pub gated: bool,
    pub seed: u64,
    pub task_accuracies: Vec<f64>,
    pub avg_accuracy: f64,
    pub gated_ratio: f64,
    /// Per-epoch training objective on a fixed probe set.
    pub elbo_trace: Vec<f64>,
}

fn join(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x:.6}")).collect::<Vec<_>>().join(";")
}

fn split(s: &str) -> std::result::Result<Vec<f64>, std::num::ParseFloatError> {
    if s.is_empty() {
        return Ok(Vec::new());
    }
    s.split(';').map(str::parse).collect()
}

impl MetricsRecord {
    pub fn csv_row(&self) -> Vec<String> {
        vec![
            self.regime.clone(),
            self.prior.clone(),
            self.gated.to_string(),
            self.seed.to_string(),
            self.task_accuracies.len().to_string(),
            format!("{:.6}", self.avg_accuracy),
            format!("{:.6}", self.gated_ratio),
            join(&self.task_accuracies),
            join(&self.elbo_trace),
        ]
    }
}

pub fn write_metrics_csv(path: &Path, records: &[MetricsRecord]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(CSV_COLUMNS).map_err(|e| csv_err(path, e))?;
    for r in records {
        w.write_record(r.csv_row()).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Malformed { path: path.to_path_buf(), message: format!("{other:?}") },
    }
}

pub fn read_metrics_csv(path: &Path) -> Result<Vec<MetricsRecord>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let bad = |message: String| Error::Malformed { path: path.to_path_buf(), message };
    let header = r.headers().map_err(|e| csv_err(path, e))?.clone();
    if header.iter().collect::<Vec<_>>() != CSV_COLUMNS {
        return Err(bad(format!("unexpected header {:?}", header.iter().collect::<Vec<_>>())));
    }
    let mut out = Vec::new();
    for (line, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let field = |i: usize| rec.get(i).unwrap_or("");
        let num = |i: usize| field(i).parse::<f64>().map_err(|e| bad(format!("row {}: {}: {e}", line + 1, CSV_COLUMNS[i])));
        let record = MetricsRecord {
            regime: field(0).to_string(),
            prior: field(1).to_string(),
            gated: field(2).parse().map_err(|e| bad(format!("row {}: gated: {e}", line + 1)))?,
            seed: field(3).parse().map_err(|e| bad(format!("row {}: seed: {e}", line + 1)))?,
            avg_accuracy: num(5)?,
            gated_ratio: num(6)?,
            task_accuracies: split(field(7)).map_err(|e| bad(format!("row {}: task_accuracies: {e}", line + 1)))?,
            elbo_trace: split(field(8)).map_err(|e| bad(format!("row {}: elbo_trace: {e}", line + 1)))?,
        };
        let n: usize = field(4).parse().map_err(|e| bad(format!("row {}: n_tasks: {e}", line + 1)))?;
        if n != record.task_accuracies.len() {
            return Err(bad(format!("row {}: n_tasks {n} but {} accuracies", line + 1, record.task_accuracies.len())));
        }
        if !(0.0..=1.0).contains(&record.avg_accuracy) || !(0.0..=1.0).contains(&record.gated_ratio) {
            return Err(bad(format!("row {}: accuracy or gated ratio outside [0, 1]", line + 1)));
        }
        out.push(record);
    }
    Ok(out)
}
