//! Experiment configuration, read from TOML.

use std::path::{Path, PathBuf};

use serde::Deserialize;

use crate::data::LinearBoundary;
use crate::error::{Error, Result};
use crate::network::{DECODER_EPOCHS, DECODER_LR, DEFAULT_NOISE_AMP};
use crate::reservoir::ReservoirParams;

/// Environment variable overriding the MNIST directory.
pub const DATA_DIR_ENV: &str = "HSICLAB_DATA_DIR";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    ReservoirSignal,
    Linear2d,
    Tanh2d,
    Mnist,
    MnistSubset,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Rule {
    OursReservoir,
    #[default]
    OursAnalytic,
    Phsic,
    Backprop,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Euler-integrated LIF dynamics for `presentation_ms` per sample.
    #[default]
    Dynamical,
    /// Fixed-point rates `tanh(W z)`.
    Steady,
}

/// `value` for `epochs` epochs; the last segment may leave `epochs` out to
/// run until the end.
#[derive(Debug, Clone, Copy, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LrSegment {
    pub value: f64,
    pub epochs: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct SigmaOverrides {
    pub x: Option<f64>,
    pub y: Option<f64>,
    /// One per layer, or a single value for all layers.
    pub z: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub n_train: usize,
    pub n_test: usize,
    /// `[a, b, c]` of `a*x1 + b*x2 + c = 0`.
    pub boundary: [f64; 3],
    /// MNIST directory, relative to the working directory.
    pub dir: PathBuf,
    /// Digits kept; empty keeps all.
    pub digits: Vec<usize>,
    /// Stratified fraction of the training set.
    pub fraction: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        let b = LinearBoundary::default();
        Self {
            n_train: 100,
            n_test: 100,
            boundary: [b.a, b.b, b.c],
            dir: PathBuf::from("data/mnist"),
            digits: Vec::new(),
            fraction: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReservoirConfig {
    pub n_rec: usize,
    pub tau_r: f64,
    pub lambda: f64,
    pub zeta_r: f64,
    pub zeta_o: f64,
    pub tau_lpf: f64,
    pub eta0: f64,
    pub tau_decay_s: f64,
    /// Unplastic run before pre-training.
    pub warmup_s: f64,
    pub pretrain_s: f64,
}

impl Default for ReservoirConfig {
    fn default() -> Self {
        let p = ReservoirParams::small_task(1000);
        Self {
            n_rec: p.n_rec,
            tau_r: p.tau_r,
            lambda: p.lambda_chaos,
            zeta_r: p.zeta_r,
            zeta_o: p.zeta_o,
            tau_lpf: p.tau_lpf,
            eta0: p.eta0,
            tau_decay_s: p.tau_decay,
            warmup_s: 50.0,
            pretrain_s: 500.0,
        }
    }
}

impl ReservoirConfig {
    pub fn params(&self, dt: f64) -> ReservoirParams {
        ReservoirParams {
            n_rec: self.n_rec,
            tau_r: self.tau_r,
            lambda_chaos: self.lambda,
            zeta_r: self.zeta_r,
            zeta_o: self.zeta_o,
            tau_lpf: self.tau_lpf,
            eta0: self.eta0,
            tau_decay: self.tau_decay_s,
            dt,
        }
    }

    /// Values of the signal-learning experiment.
    pub fn signal_experiment() -> Self {
        let p = ReservoirParams::signal_experiment(2000);
        Self {
            n_rec: p.n_rec,
            tau_r: p.tau_r,
            lambda: p.lambda_chaos,
            zeta_r: p.zeta_r,
            zeta_o: p.zeta_o,
            tau_lpf: p.tau_lpf,
            eta0: p.eta0,
            tau_decay_s: p.tau_decay,
            warmup_s: 0.0,
            pretrain_s: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SignalConfig {
    pub n_samples: usize,
    pub dx: usize,
    pub dy: usize,
    pub dz: usize,
    pub train_s: f64,
    pub test_s: f64,
}

impl Default for SignalConfig {
    fn default() -> Self {
        Self {
            n_samples: 100,
            dx: 100,
            dy: 1,
            dz: 10,
            train_s: 500.0,
            test_s: 100.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhsicConfig {
    pub batch: usize,
}

impl Default for PhsicConfig {
    fn default() -> Self {
        Self { batch: 2 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecoderConfig {
    pub epochs: usize,
    pub lr: f64,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            epochs: DECODER_EPOCHS,
            lr: DECODER_LR,
        }
    }
}

fn default_n_eff() -> usize {
    10
}
fn default_dt() -> f64 {
    1.0
}
fn default_tau_ff() -> f64 {
    5.0
}
fn default_noise() -> f64 {
    DEFAULT_NOISE_AMP
}
fn default_trials() -> usize {
    4
}
fn default_eval_every() -> usize {
    1
}
fn default_batch() -> usize {
    32
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub task: Task,
    #[serde(default)]
    pub rule: Rule,
    /// Layer widths after the input.
    #[serde(default)]
    pub arch: Vec<usize>,
    #[serde(default = "default_n_eff")]
    pub n_eff: usize,
    /// One per layer, or a single value for all layers.
    #[serde(default)]
    pub gamma: Vec<f64>,
    #[serde(default)]
    pub epochs: usize,
    #[serde(default)]
    pub lr: Vec<LrSegment>,
    /// When set, the segment value is divided by `1 + t / lr_decay_s` with
    /// `t` the simulated training time.
    pub lr_decay_s: Option<f64>,
    #[serde(default)]
    pub momentum: f64,
    /// Back-propagation minibatch size.
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_dt")]
    pub dt: f64,
    /// Defaults to 50 ms for synthetic tasks and 20 ms for MNIST.
    pub presentation_ms: Option<f64>,
    #[serde(default)]
    pub mode: Mode,
    #[serde(default = "default_tau_ff")]
    pub tau_ff: f64,
    /// Firing-rate noise half-width of the network neurons.
    #[serde(default = "default_noise")]
    pub noise: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_trials")]
    pub trials: usize,
    /// Metrics are recorded every this many epochs and after the last one.
    #[serde(default = "default_eval_every")]
    pub eval_every: usize,
    #[serde(default)]
    pub sigma: SigmaOverrides,
    #[serde(default)]
    pub data: DataConfig,
    pub reservoir: Option<ReservoirConfig>,
    #[serde(default)]
    pub signal: SignalConfig,
    #[serde(default)]
    pub phsic: PhsicConfig,
    #[serde(default)]
    pub decoder: DecoderConfig,
    pub output: Option<PathBuf>,
}

fn cfg_err(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| cfg_err(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn is_mnist(&self) -> bool {
        matches!(self.task, Task::Mnist | Task::MnistSubset)
    }

    pub fn presentation_ms(&self) -> f64 {
        self.presentation_ms
            .unwrap_or(if self.is_mnist() { 20.0 } else { 50.0 })
    }

    /// `gamma` for `layer`, broadcasting a single value.
    pub fn gamma_for(&self, layer: usize) -> f64 {
        if self.gamma.len() == 1 {
            self.gamma[0]
        } else {
            self.gamma[layer]
        }
    }

    pub fn sigma_z_for(&self, layer: usize) -> Option<f64> {
        self.sigma.z.as_ref().map(|z| if z.len() == 1 { z[0] } else { z[layer] })
    }

    pub fn reservoir_config(&self) -> ReservoirConfig {
        self.reservoir.clone().unwrap_or_else(|| {
            if self.task == Task::ReservoirSignal {
                ReservoirConfig::signal_experiment()
            } else {
                ReservoirConfig::default()
            }
        })
    }

    /// Digits kept for the MNIST tasks.
    pub fn digits(&self) -> Vec<usize> {
        match (self.task, self.data.digits.is_empty()) {
            (_, false) => self.data.digits.clone(),
            (Task::MnistSubset, true) => vec![0, 1, 2, 4],
            _ => (0..10).collect(),
        }
    }

    /// Learning rate of the segment covering `epoch` (0-based).
    pub fn lr_at_epoch(&self, epoch: usize) -> f64 {
        let mut start = 0;
        for seg in &self.lr {
            match seg.epochs {
                Some(n) if epoch >= start + n => start += n,
                _ => return seg.value,
            }
        }
        self.lr.last().map_or(0.0, |s| s.value)
    }

    /// Learning rate at `epoch` after `t_s` seconds of simulated training.
    pub fn lr_at(&self, epoch: usize, t_s: f64) -> f64 {
        let base = self.lr_at_epoch(epoch);
        match self.lr_decay_s {
            Some(tau) => base / (1.0 + t_s / tau),
            None => base,
        }
    }

    /// The MNIST directory: `HSICLAB_DATA_DIR` if set, else `data.dir`.
    pub fn data_dir(&self) -> PathBuf {
        std::env::var_os(DATA_DIR_ENV)
            .map(PathBuf::from)
            .unwrap_or_else(|| self.data.dir.clone())
    }

    pub fn validate(&self) -> Result<()> {
        if self.trials == 0 {
            return Err(cfg_err("trials must be at least 1"));
        }
        if !(self.dt > 0.0) {
            return Err(cfg_err("dt must be positive"));
        }
        if self.task == Task::ReservoirSignal {
            if self.n_eff < 2 {
                return Err(cfg_err("n_eff must be at least 2 for the signal task"));
            }
            if self.gamma.len() > 1 {
                return Err(cfg_err("the signal task takes a single gamma"));
            }
            return self.reservoir_config().params(self.dt).validate().map_err(|e| cfg_err(e.to_string()));
        }
        if self.arch.is_empty() || self.arch.contains(&0) {
            return Err(cfg_err("arch must list at least one nonzero layer width"));
        }
        if self.n_eff == 0 {
            return Err(cfg_err("n_eff must be at least 1"));
        }
        if self.rule != Rule::Backprop {
            if self.gamma.len() != 1 && self.gamma.len() != self.arch.len() {
                return Err(cfg_err(format!(
                    "gamma needs 1 or {} entries, got {}",
                    self.arch.len(),
                    self.gamma.len()
                )));
            }
            if self.gamma.iter().any(|g| !(*g >= 0.0)) {
                return Err(cfg_err("gamma must be nonnegative"));
            }
            if let Some(z) = &self.sigma.z {
                if z.len() != 1 && z.len() != self.arch.len() {
                    return Err(cfg_err("sigma.z needs 1 entry or one per layer"));
                }
            }
            if self.mode == Mode::Dynamical && self.dt > self.tau_ff {
                return Err(cfg_err("dt must not exceed tau_ff"));
            }
        }
        let sigmas = [self.sigma.x, self.sigma.y]
            .into_iter()
            .flatten()
            .chain(self.sigma.z.iter().flatten().copied());
        for s in sigmas {
            if !(s > 0.0 && s.is_finite()) {
                return Err(cfg_err("sigma overrides must be positive"));
            }
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(cfg_err("momentum must lie in [0, 1)"));
        }
        if self.epochs > 0 {
            if self.lr.is_empty() {
                return Err(cfg_err("lr segments are required when epochs > 0"));
            }
            let open = self.lr.last().is_some_and(|s| s.epochs.is_none());
            if self.lr[..self.lr.len() - 1].iter().any(|s| s.epochs.is_none()) {
                return Err(cfg_err("only the last lr segment may omit epochs"));
            }
            let covered: usize = self.lr.iter().filter_map(|s| s.epochs).sum();
            if !open && covered < self.epochs {
                return Err(cfg_err(format!(
                    "lr segments cover {covered} epochs, {} configured",
                    self.epochs
                )));
            }
        }
        if self.lr.iter().any(|s| !(s.value >= 0.0)) {
            return Err(cfg_err("learning rates must be nonnegative"));
        }
        if self.lr_decay_s.is_some_and(|t| !(t > 0.0)) {
            return Err(cfg_err("lr_decay_s must be positive"));
        }
        if !(self.presentation_ms() >= self.dt) {
            return Err(cfg_err("presentation_ms must be at least dt"));
        }
        if self.eval_every == 0 {
            return Err(cfg_err("eval_every must be at least 1"));
        }
        if self.rule == Rule::Phsic && self.phsic.batch < 2 {
            return Err(cfg_err("phsic.batch must be at least 2"));
        }
        if self.rule == Rule::Backprop && self.batch_size == 0 {
            return Err(cfg_err("batch_size must be at least 1"));
        }
        if self.rule == Rule::OursReservoir {
            self.reservoir_config().params(self.dt).validate().map_err(|e| cfg_err(e.to_string()))?;
        }
        if !(self.data.fraction > 0.0 && self.data.fraction <= 1.0) {
            return Err(cfg_err("data.fraction must lie in (0, 1]"));
        }
        let [a, b, _] = self.data.boundary;
        if a == 0.0 && b == 0.0 {
            return Err(cfg_err("data.boundary needs a or b nonzero"));
        }
        if self.decoder.epochs == 0 || !(self.decoder.lr > 0.0) {
            return Err(cfg_err("decoder needs epochs >= 1 and lr > 0"));
        }
        Ok(())
    }
}
