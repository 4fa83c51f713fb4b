//! Accuracy over a grid of effective batch sizes and training lengths.

use std::collections::BTreeSet;

use crate::error::{Error, Result};

use super::config::{ExperimentConfig, Rule};
use super::experiment::{load_mnist_split, run_trial};
use super::metrics::{mean_std, test_accuracy_at};

#[derive(Debug, Clone, PartialEq)]
pub struct SweepResult {
    pub n_effs: Vec<usize>,
    pub epochs: Vec<usize>,
    /// `[n_eff][epochs][trial]` test accuracy.
    pub per_trial: Vec<Vec<Vec<f64>>>,
    /// `[n_eff][epochs]` mean over trials.
    pub accuracy: Vec<Vec<f64>>,
    /// `accuracy` divided by its largest entry.
    pub normalized: Vec<Vec<f64>>,
}

/// Each batch size is trained once for the longest requested length, with
/// accuracy read off at every requested epoch count. For the pHSIC rule the
/// batch size sets its sample window.
pub fn run_sweep(base: &ExperimentConfig, n_effs: &[usize], epochs: &[usize]) -> Result<SweepResult> {
    if n_effs.is_empty() || epochs.is_empty() {
        return Err(Error::invalid("sweep grid must not be empty"));
    }
    let max_epochs = *epochs.iter().max().expect("nonempty");
    let checkpoints: BTreeSet<usize> = epochs.iter().copied().collect();
    let mnist = if base.is_mnist() { Some(load_mnist_split(base)?) } else { None };
    let mut per_trial = Vec::with_capacity(n_effs.len());
    for &n in n_effs {
        let mut cfg = base.clone();
        cfg.n_eff = n;
        if cfg.rule == Rule::Phsic {
            cfg.phsic.batch = n;
        }
        cfg.epochs = max_epochs;
        cfg.validate()?;
        let records: Vec<_> = (0..cfg.trials)
            .map(|t| run_trial(&cfg, t, mnist.as_ref(), &checkpoints))
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .flat_map(|t| t.records)
            .collect();
        per_trial.push(epochs.iter().map(|&e| test_accuracy_at(&records, e)).collect::<Vec<_>>());
    }
    let accuracy: Vec<Vec<f64>> = per_trial
        .iter()
        .map(|row: &Vec<Vec<f64>>| row.iter().map(|cell| mean_std(cell).0).collect())
        .collect();
    let max = accuracy.iter().flatten().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let normalized = accuracy
        .iter()
        .map(|row| row.iter().map(|&v| if max > 0.0 { v / max } else { f64::NAN }).collect())
        .collect();
    Ok(SweepResult {
        n_effs: n_effs.to_vec(),
        epochs: epochs.to_vec(),
        per_trial,
        accuracy,
        normalized,
    })
}
