//! Metric records and their CSV form.

use std::fs::File;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Layer index used by accuracy rows.
pub const ACCURACY_ROW: i64 = -1;

/// One CSV row. Layer rows carry `objective`; accuracy rows (`layer = -1`)
/// carry the accuracies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub trial: usize,
    pub epoch: usize,
    pub layer: i64,
    pub objective: Option<f64>,
    pub train_acc: Option<f64>,
    pub test_acc: Option<f64>,
    /// Wall-clock seconds since the trial started.
    pub seconds: f64,
}

impl MetricsRecord {
    pub fn layer(trial: usize, epoch: usize, layer: usize, objective: f64, seconds: f64) -> Self {
        Self {
            trial,
            epoch,
            layer: layer as i64,
            objective: Some(objective),
            train_acc: None,
            test_acc: None,
            seconds,
        }
    }

    pub fn accuracy(trial: usize, epoch: usize, train_acc: f64, test_acc: f64, seconds: f64) -> Self {
        Self {
            trial,
            epoch,
            layer: ACCURACY_ROW,
            objective: None,
            train_acc: Some(train_acc),
            test_acc: Some(test_acc),
            seconds,
        }
    }

    pub fn is_accuracy(&self) -> bool {
        self.layer == ACCURACY_ROW
    }

    /// Equal in everything except the wall-clock time.
    pub fn same_outcome(&self, other: &Self) -> bool {
        Self { seconds: 0.0, ..self.clone() } == Self { seconds: 0.0, ..other.clone() }
    }
}

pub const METRICS_HEADER: &str = "trial,epoch,layer,objective,train_acc,test_acc,seconds";

fn csv_err(path: &Path, source: csv::Error) -> Error {
    Error::Csv {
        path: path.to_path_buf(),
        source,
    }
}

/// Writes `records` as CSV, creating parent directories as needed.
pub fn emit_metrics(records: &[MetricsRecord], path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut file = File::create(path).map_err(|e| Error::io(path, e))?;
    writeln!(file, "{METRICS_HEADER}").map_err(|e| Error::io(path, e))?;
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(file);
    for r in records {
        w.serialize(r).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRecord>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let header = r.headers().map_err(|e| csv_err(path, e))?.iter().collect::<Vec<_>>().join(",");
    if header != METRICS_HEADER {
        return Err(Error::invalid(format!("{}: unexpected header {header}", path.display())));
    }
    r.deserialize().map(|row| row.map_err(|e| csv_err(path, e))).collect()
}

/// Final test accuracy of each trial, in trial order.
pub fn final_test_accuracy(records: &[MetricsRecord]) -> Vec<f64> {
    let mut by_trial: Vec<(usize, usize, f64)> = Vec::new();
    for r in records.iter().filter(|r| r.is_accuracy()) {
        let acc = r.test_acc.unwrap_or(f64::NAN);
        match by_trial.iter_mut().find(|(t, _, _)| *t == r.trial) {
            Some(e) if r.epoch >= e.1 => *e = (r.trial, r.epoch, acc),
            Some(_) => {}
            None => by_trial.push((r.trial, r.epoch, acc)),
        }
    }
    by_trial.sort_by_key(|e| e.0);
    by_trial.into_iter().map(|e| e.2).collect()
}

/// Test accuracy of every trial at `epoch`, in trial order.
pub fn test_accuracy_at(records: &[MetricsRecord], epoch: usize) -> Vec<f64> {
    let mut rows: Vec<&MetricsRecord> = records.iter().filter(|r| r.is_accuracy() && r.epoch == epoch).collect();
    rows.sort_by_key(|r| r.trial);
    rows.iter().map(|r| r.test_acc.unwrap_or(f64::NAN)).collect()
}

pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}
