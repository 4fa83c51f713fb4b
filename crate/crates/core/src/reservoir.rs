//! Recurrent LIF reservoir whose linear readout learns a target signal by
//! reward-modulated Hebbian plasticity.
//!
//! Dynamics, integrated with explicit Euler:
//!
//! ```text
//! tau_r du/dt = -u + lambda W_r r + W_i r_in + W_fb r_o
//! r   = tanh(u) + zeta_r
//! r_o = W_o u + zeta_o
//! ```
//!
//! Readout plasticity: `P = -|r_o - xi|^2`, `M = [P > P_bar]`,
//! `dW_o = eta(t) M (r_o - r_o_bar) r^T` with `eta(t) = eta0 / (1 + t / tau_decay)`.
//! `P_bar` and `r_o_bar` are exponential low-pass filters updated after the
//! weight change of each tick.

use ndarray::{Array1, Array2, ArrayView1};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::network::uniform_noise;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReservoirParams {
    pub n_rec: usize,
    /// Membrane time constant in ms.
    pub tau_r: f64,
    /// Gain on the recurrent weights.
    pub lambda_chaos: f64,
    /// Recurrent rate noise half-width.
    pub zeta_r: f64,
    /// Readout exploration noise half-width.
    pub zeta_o: f64,
    /// Low-pass filter time constant in ms.
    pub tau_lpf: f64,
    pub eta0: f64,
    /// Learning-rate decay time constant in s.
    pub tau_decay: f64,
    /// Simulation step in ms.
    pub dt: f64,
}

impl ReservoirParams {
    /// Signal-learning experiment values with a configurable population size.
    pub fn signal_experiment(n_rec: usize) -> Self {
        Self {
            n_rec,
            tau_r: 50.0,
            lambda_chaos: 1.2,
            zeta_r: 5e-6,
            zeta_o: 1e-2,
            tau_lpf: 5.0,
            eta0: 1e-4,
            tau_decay: 20.0,
            dt: 1.0,
        }
    }

    /// Values shared by the small synthetic-task experiments.
    pub fn small_task(n_rec: usize) -> Self {
        Self {
            lambda_chaos: 1.7,
            zeta_r: 5e-2,
            zeta_o: 2.5e-1,
            ..Self::signal_experiment(n_rec)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("tau_r", self.tau_r),
            ("lambda_chaos", self.lambda_chaos),
            ("tau_lpf", self.tau_lpf),
            ("tau_decay", self.tau_decay),
            ("dt", self.dt),
        ];
        for (name, v) in positive {
            if !(v > 0.0) {
                return Err(Error::invalid(format!("{name} must be positive, got {v}")));
            }
        }
        if self.n_rec == 0 {
            return Err(Error::invalid("reservoir needs at least one neuron"));
        }
        if !(self.zeta_r >= 0.0 && self.zeta_o >= 0.0 && self.eta0 >= 0.0) {
            return Err(Error::invalid("noise amplitudes and eta0 must be nonnegative"));
        }
        if self.dt > self.tau_r || self.dt >= self.tau_lpf {
            return Err(Error::invalid("dt must not exceed tau_r and must be below tau_lpf"));
        }
        Ok(())
    }

    /// `eta(t)` for `t` seconds of training.
    pub fn learning_rate(&self, t_s: f64) -> f64 {
        self.eta0 / (1.0 + t_s / self.tau_decay)
    }

    pub fn dt_s(&self) -> f64 {
        self.dt * 1e-3
    }
}

/// Exponential low-pass filter, `v <- (1 - dt/tau) v + (dt/tau) f`.
#[derive(Debug, Clone, PartialEq)]
pub struct LpfState {
    pub value: Vec<f64>,
    pub tau: f64,
}

impl LpfState {
    pub fn zeros(dim: usize, tau: f64) -> Self {
        Self {
            value: vec![0.0; dim],
            tau,
        }
    }

    pub fn step(&mut self, sample: &[f64], dt: f64) {
        debug_assert_eq!(sample.len(), self.value.len());
        let a = dt / self.tau;
        for (v, &f) in self.value.iter_mut().zip(sample) {
            *v = (1.0 - a) * *v + a * f;
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReservoirState {
    /// `n_rec x n_rec`
    pub w_rec: Array2<f64>,
    /// `n_rec x d_in`
    pub w_in: Array2<f64>,
    /// `n_rec x d_out`
    pub w_fb: Array2<f64>,
    /// `d_out x n_rec`
    pub w_out: Array2<f64>,
    pub u: Array1<f64>,
    /// Rates of the last tick.
    pub r: Array1<f64>,
    /// Readout of the last tick.
    pub r_o: Array1<f64>,
    pub r_o_bar: LpfState,
    pub p_bar: LpfState,
    /// Seconds of plastic training so far; drives the learning-rate decay.
    pub learn_time: f64,
}

impl ReservoirState {
    pub fn init<R: Rng + ?Sized>(
        params: &ReservoirParams,
        d_in: usize,
        d_out: usize,
        rng: &mut R,
    ) -> Result<Self> {
        params.validate()?;
        if d_in == 0 || d_out == 0 {
            return Err(Error::invalid("reservoir input and output dims must be at least 1"));
        }
        let n = params.n_rec;
        let normal = Normal::new(0.0, 1.0 / (n as f64).sqrt()).expect("valid std");
        let w_rec = Array2::from_shape_simple_fn((n, n), || normal.sample(rng));
        let w_in = Array2::from_shape_simple_fn((n, d_in), || rng.random_range(-1.0..=1.0));
        let w_fb = Array2::from_shape_simple_fn((n, d_out), || rng.random_range(-1.0..=1.0));
        let u = Array1::from_shape_simple_fn(n, || rng.random_range(-0.1..=0.1));
        let r = u.mapv(f64::tanh);
        Ok(Self {
            w_rec,
            w_in,
            w_fb,
            w_out: Array2::zeros((d_out, n)),
            u,
            r,
            r_o: Array1::zeros(d_out),
            r_o_bar: LpfState::zeros(d_out, params.tau_lpf),
            p_bar: LpfState::zeros(1, params.tau_lpf),
            learn_time: 0.0,
        })
    }

    pub fn d_in(&self) -> usize {
        self.w_in.ncols()
    }

    pub fn d_out(&self) -> usize {
        self.w_out.nrows()
    }

    /// Advances the dynamics by one `dt` and returns the new readout.
    pub fn step<R: Rng + ?Sized>(
        &mut self,
        input: &[f64],
        params: &ReservoirParams,
        rng: &mut R,
    ) -> Result<Vec<f64>> {
        if input.len() != self.d_in() {
            return Err(Error::invalid(format!(
                "reservoir expects {} inputs, got {}",
                self.d_in(),
                input.len()
            )));
        }
        if input.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("reservoir input must be finite"));
        }
        let mut drive = self.w_rec.dot(&self.r);
        drive *= params.lambda_chaos;
        drive += &self.w_in.dot(&ArrayView1::from(input));
        drive += &self.w_fb.dot(&self.r_o);
        let a = params.dt / params.tau_r;
        self.u.zip_mut_with(&drive, |u, &d| *u += a * (d - *u));
        for (r, &u) in self.r.iter_mut().zip(&self.u) {
            *r = u.tanh() + uniform_noise(rng, params.zeta_r);
        }
        self.r_o = self.w_out.dot(&self.u);
        for v in self.r_o.iter_mut() {
            *v += uniform_noise(rng, params.zeta_o);
        }
        Ok(self.r_o.to_vec())
    }

    /// Reward-modulated Hebbian readout update for the current tick; returns
    /// the gate `M`.
    pub fn rm_hebb_update(&mut self, xi_true: &[f64], t_s: f64, params: &ReservoirParams) -> Result<bool> {
        if xi_true.len() != self.d_out() {
            return Err(Error::invalid(format!(
                "target has {} entries, readout has {}",
                xi_true.len(),
                self.d_out()
            )));
        }
        let perf = -self
            .r_o
            .iter()
            .zip(xi_true)
            .map(|(o, x)| (o - x) * (o - x))
            .sum::<f64>();
        let gate = perf > self.p_bar.value[0];
        if gate {
            let eta = params.learning_rate(t_s);
            for (k, mut row) in self.w_out.rows_mut().into_iter().enumerate() {
                let e = eta * (self.r_o[k] - self.r_o_bar.value[k]);
                if e != 0.0 {
                    row.scaled_add(e, &self.r);
                }
            }
        }
        self.p_bar.step(&[perf], params.dt);
        let r_o = self.r_o.to_vec();
        self.r_o_bar.step(&r_o, params.dt);
        Ok(gate)
    }
}

/// Supplies `(input, target)` pairs, one per held sample.
pub trait SignalSource {
    fn next_sample(&mut self) -> Result<(Vec<f64>, Vec<f64>)>;
}

/// What a training or evaluation run observed.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunStats {
    /// Performance `P` per tick (training only).
    pub performance: Vec<f64>,
    /// Number of ticks with an open gate.
    pub gated_ticks: usize,
    pub ticks: usize,
    sq_err: f64,
    sum: Vec<f64>,
    sum_sq: Vec<f64>,
}

impl RunStats {
    fn record(&mut self, r_o: &[f64], xi: &[f64]) {
        if self.sum.is_empty() {
            self.sum = vec![0.0; xi.len()];
            self.sum_sq = vec![0.0; xi.len()];
        }
        self.sq_err += r_o.iter().zip(xi).map(|(o, x)| (o - x) * (o - x)).sum::<f64>();
        for (k, &x) in xi.iter().enumerate() {
            self.sum[k] += x;
            self.sum_sq[k] += x * x;
        }
        self.ticks += 1;
    }

    /// Mean of `|r_o - xi|^2` over ticks.
    pub fn mse(&self) -> f64 {
        self.sq_err / self.ticks.max(1) as f64
    }

    /// Total variance of the target, summed over components.
    pub fn signal_variance(&self) -> f64 {
        let n = self.ticks.max(1) as f64;
        self.sum
            .iter()
            .zip(&self.sum_sq)
            .map(|(s, q)| (q / n - (s / n) * (s / n)).max(0.0))
            .sum()
    }

    pub fn normalized_mse(&self) -> f64 {
        self.mse() / self.signal_variance()
    }
}

/// Number of `dt` ticks in `duration_s`.
fn ticks_in(duration_s: f64, params: &ReservoirParams) -> usize {
    (duration_s / params.dt_s()).round().max(0.0) as usize
}

/// Runs the reservoir for `duration_s`, fetching a new sample every
/// `hold_ms`. With `learn` set, the readout is trained each tick.
pub fn run_reservoir<S: SignalSource + ?Sized, R: Rng + ?Sized>(
    state: &mut ReservoirState,
    source: &mut S,
    duration_s: f64,
    hold_ms: f64,
    learn: bool,
    params: &ReservoirParams,
    rng: &mut R,
) -> Result<RunStats> {
    if !(hold_ms >= params.dt) {
        return Err(Error::invalid(format!(
            "sample hold of {hold_ms} ms is shorter than dt"
        )));
    }
    let hold = (hold_ms / params.dt).round() as usize;
    let mut stats = RunStats::default();
    let mut sample = None;
    for tick in 0..ticks_in(duration_s, params) {
        if tick % hold == 0 || sample.is_none() {
            sample = Some(source.next_sample()?);
        }
        let (input, xi) = sample.as_ref().expect("fetched above");
        let r_o = state.step(input, params, rng)?;
        if learn {
            let gate = state.rm_hebb_update(xi, state.learn_time, params)?;
            stats.gated_ticks += usize::from(gate);
            stats.performance.push(-r_o.iter().zip(xi).map(|(o, x)| (o - x) * (o - x)).sum::<f64>());
            state.learn_time += params.dt_s();
        }
        stats.record(&r_o, xi);
    }
    Ok(stats)
}

/// Plastic run; returns the per-tick performance trace and error statistics.
pub fn train_reservoir<S: SignalSource + ?Sized, R: Rng + ?Sized>(
    state: &mut ReservoirState,
    source: &mut S,
    duration_s: f64,
    hold_ms: f64,
    params: &ReservoirParams,
    rng: &mut R,
) -> Result<RunStats> {
    run_reservoir(state, source, duration_s, hold_ms, true, params, rng)
}
