//! Feedforward LIF rate network and the post-hoc linear decoder.
//!
//! Each layer integrates `tau_ff du/dt = -u + W z_prev` with explicit Euler and
//! emits the noisy rate `z = tanh(u) + zeta`, `zeta ~ Unif(-a, a)`. The steady
//! mode skips the integration and evaluates the fixed point `z = tanh(W z_prev)`
//! directly.

use ndarray::{Array1, Array2, ArrayView1};
use rand::Rng;

use crate::error::{Error, Result};

pub const DEFAULT_NOISE_AMP: f64 = 0.05;

#[inline]
pub(crate) fn uniform_noise<R: Rng + ?Sized>(rng: &mut R, amp: f64) -> f64 {
    if amp > 0.0 {
        rng.random_range(-amp..=amp)
    } else {
        0.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LifLayer {
    /// `out_dim x in_dim`
    pub weights: Array2<f64>,
    /// Membrane potentials.
    pub u: Array1<f64>,
    /// Membrane time constant in ms.
    pub tau_ff: f64,
    /// Half-width of the uniform rate noise.
    pub noise_amp: f64,
}

impl LifLayer {
    pub fn new(weights: Array2<f64>, tau_ff: f64, noise_amp: f64) -> Result<Self> {
        if !(tau_ff > 0.0) {
            return Err(Error::invalid(format!("tau_ff must be positive, got {tau_ff}")));
        }
        if !(noise_amp >= 0.0) {
            return Err(Error::invalid(format!(
                "noise amplitude must be nonnegative, got {noise_amp}"
            )));
        }
        if weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::invalid("layer weights must be finite"));
        }
        let u = Array1::zeros(weights.nrows());
        Ok(Self {
            weights,
            u,
            tau_ff,
            noise_amp,
        })
    }

    /// Weights drawn i.i.d. from `Unif(-1/sqrt(in_dim), 1/sqrt(in_dim))`.
    pub fn random<R: Rng + ?Sized>(
        in_dim: usize,
        out_dim: usize,
        tau_ff: f64,
        noise_amp: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if in_dim == 0 || out_dim == 0 {
            return Err(Error::invalid("layer dimensions must be at least 1"));
        }
        let bound = 1.0 / (in_dim as f64).sqrt();
        let weights = Array2::from_shape_simple_fn((out_dim, in_dim), || {
            rng.random_range(-bound..=bound)
        });
        Self::new(weights, tau_ff, noise_amp)
    }

    pub fn in_dim(&self) -> usize {
        self.weights.ncols()
    }

    pub fn out_dim(&self) -> usize {
        self.weights.nrows()
    }

    fn drive(&self, input: &[f64]) -> Result<Array1<f64>> {
        if input.len() != self.in_dim() {
            return Err(Error::invalid(format!(
                "layer expects input of dimension {}, got {}",
                self.in_dim(),
                input.len()
            )));
        }
        Ok(self.weights.dot(&ArrayView1::from(input)))
    }

    /// One Euler step of the membrane dynamics; returns the noisy rate.
    pub fn step<R: Rng + ?Sized>(&mut self, input: &[f64], dt: f64, rng: &mut R) -> Result<Vec<f64>> {
        if !(dt > 0.0 && dt <= self.tau_ff) {
            return Err(Error::invalid(format!(
                "time step {dt} must lie in (0, tau_ff = {}]",
                self.tau_ff
            )));
        }
        let drive = self.drive(input)?;
        let a = dt / self.tau_ff;
        self.u.zip_mut_with(&drive, |u, &c| *u += a * (c - *u));
        Ok(self
            .u
            .iter()
            .map(|&u| u.tanh() + uniform_noise(rng, self.noise_amp))
            .collect())
    }

    /// Fixed-point rate `tanh(W input) + zeta`.
    pub fn steady<R: Rng + ?Sized>(&self, input: &[f64], rng: &mut R) -> Result<Vec<f64>> {
        let drive = self.drive(input)?;
        Ok(drive
            .iter()
            .map(|&c| c.tanh() + uniform_noise(rng, self.noise_amp))
            .collect())
    }

    /// Noise-free fixed-point rate.
    pub fn steady_clean(&self, input: &[f64]) -> Result<Vec<f64>> {
        Ok(self.drive(input)?.iter().map(|c| c.tanh()).collect())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeedforwardNet {
    pub layers: Vec<LifLayer>,
    /// Simulation step in ms.
    pub dt: f64,
}

impl FeedforwardNet {
    pub fn new(layers: Vec<LifLayer>, dt: f64) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::invalid("network needs at least one layer"));
        }
        for (l, pair) in layers.windows(2).enumerate() {
            if pair[1].in_dim() != pair[0].out_dim() {
                return Err(Error::invalid(format!(
                    "layer {} expects {} inputs but layer {} emits {}",
                    l + 1,
                    pair[1].in_dim(),
                    l,
                    pair[0].out_dim()
                )));
            }
        }
        if !(dt > 0.0) {
            return Err(Error::invalid(format!("dt must be positive, got {dt}")));
        }
        Ok(Self { layers, dt })
    }

    /// Builds `input_dim -> widths[0] -> widths[1] -> ...` with random weights.
    pub fn random<R: Rng + ?Sized>(
        input_dim: usize,
        widths: &[usize],
        tau_ff: f64,
        noise_amp: f64,
        dt: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let mut layers = Vec::with_capacity(widths.len());
        let mut in_dim = input_dim;
        for &w in widths {
            layers.push(LifLayer::random(in_dim, w, tau_ff, noise_amp, rng)?);
            in_dim = w;
        }
        Self::new(layers, dt)
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, LifLayer::out_dim)
    }

    pub fn set_noise(&mut self, amp: f64) {
        for layer in &mut self.layers {
            layer.noise_amp = amp;
        }
    }

    pub fn reset_state(&mut self) {
        for layer in &mut self.layers {
            layer.u.fill(0.0);
        }
    }

    /// Presents `x` for `duration` ms, stepping every layer each `dt` in
    /// feedforward order. Returns the rates of the final step.
    pub fn forward_dynamical<R: Rng + ?Sized>(
        &mut self,
        x: &[f64],
        duration: f64,
        rng: &mut R,
    ) -> Result<Vec<Vec<f64>>> {
        if !(duration >= self.dt) {
            return Err(Error::invalid(format!(
                "presentation of {duration} ms is shorter than dt = {} ms",
                self.dt
            )));
        }
        let steps = (duration / self.dt).round().max(1.0) as usize;
        let dt = self.dt;
        let mut rates = Vec::new();
        for _ in 0..steps {
            rates.clear();
            let mut input = x.to_vec();
            for layer in &mut self.layers {
                let z = layer.step(&input, dt, rng)?;
                input.clone_from(&z);
                rates.push(z);
            }
        }
        Ok(rates)
    }

    pub fn forward_steady<R: Rng + ?Sized>(&self, x: &[f64], rng: &mut R) -> Result<Vec<Vec<f64>>> {
        let mut rates = Vec::with_capacity(self.layers.len());
        let mut input = x.to_vec();
        for layer in &self.layers {
            let z = layer.steady(&input, rng)?;
            input.clone_from(&z);
            rates.push(z);
        }
        Ok(rates)
    }

    pub fn forward_clean(&self, x: &[f64]) -> Result<Vec<Vec<f64>>> {
        let mut rates = Vec::with_capacity(self.layers.len());
        let mut input = x.to_vec();
        for layer in &self.layers {
            let z = layer.steady_clean(&input)?;
            input.clone_from(&z);
            rates.push(z);
        }
        Ok(rates)
    }
}

/// Softmax readout from the last layer's rates to class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearDecoder {
    /// `classes x features`
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
}

pub const DECODER_EPOCHS: usize = 1000;
pub const DECODER_LR: f64 = 0.1;

impl LinearDecoder {
    pub fn zeros(classes: usize, features: usize) -> Self {
        Self {
            weights: Array2::zeros((classes, features)),
            bias: Array1::zeros(classes),
        }
    }

    pub fn n_classes(&self) -> usize {
        self.bias.len()
    }

    pub fn logits(&self, feature: &[f64]) -> Array1<f64> {
        self.weights.dot(&ArrayView1::from(feature)) + &self.bias
    }

    /// Index of the largest logit, lowest index on ties.
    pub fn predict(&self, feature: &[f64]) -> usize {
        argmax(self.logits(feature).iter().copied())
    }

    /// Full-batch gradient descent on mean softmax cross-entropy for exactly
    /// `epochs` iterations.
    pub fn fit(
        &mut self,
        features: &[Vec<f64>],
        onehot: &[Vec<f64>],
        epochs: usize,
        lr: f64,
    ) -> Result<()> {
        if features.is_empty() {
            return Err(Error::invalid("cannot fit a decoder on an empty dataset"));
        }
        if features.len() != onehot.len() {
            return Err(Error::invalid(format!(
                "{} feature rows but {} label rows",
                features.len(),
                onehot.len()
            )));
        }
        let (c, d) = self.weights.dim();
        if features.iter().any(|f| f.len() != d) || onehot.iter().any(|y| y.len() != c) {
            return Err(Error::invalid("decoder dimensions do not match the data"));
        }
        let n = features.len() as f64;
        let mut gw = Array2::<f64>::zeros((c, d));
        let mut gb = Array1::<f64>::zeros(c);
        for _ in 0..epochs {
            gw.fill(0.0);
            gb.fill(0.0);
            for (f, y) in features.iter().zip(onehot) {
                let p = softmax(&self.logits(f));
                for k in 0..c {
                    let e = p[k] - y[k];
                    gb[k] += e;
                    for (g, &fj) in gw.row_mut(k).iter_mut().zip(f) {
                        *g += e * fj;
                    }
                }
            }
            self.weights.scaled_add(-lr / n, &gw);
            self.bias.scaled_add(-lr / n, &gb);
        }
        Ok(())
    }

    pub fn accuracy(&self, features: &[Vec<f64>], labels: &[usize]) -> f64 {
        if features.is_empty() {
            return 0.0;
        }
        let hits = features
            .iter()
            .zip(labels)
            .filter(|(f, &l)| self.predict(f) == l)
            .count();
        hits as f64 / features.len() as f64
    }
}

pub(crate) fn softmax(logits: &Array1<f64>) -> Array1<f64> {
    let m = logits.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let e = logits.mapv(|v| (v - m).exp());
    let s = e.sum();
    e / s
}

pub(crate) fn argmax(values: impl Iterator<Item = f64>) -> usize {
    let mut best = 0;
    let mut best_v = f64::NEG_INFINITY;
    for (i, v) in values.enumerate() {
        if v > best_v {
            best = i;
            best_v = v;
        }
    }
    best
}
