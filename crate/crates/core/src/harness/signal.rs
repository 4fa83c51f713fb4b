//! Signal-learning experiment: a reservoir learns the global signal of a
//! fixed random dataset presented in a cycle.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

use crate::error::{Error, Result};
use crate::kernels::{median_bandwidth, KernelParams, ObjectiveKernels, SampleMatrix};
use crate::memory::{Sample, SampleBuffer};
use crate::reservoir::{run_reservoir, ReservoirParams, ReservoirState, RunStats, SignalSource};
use crate::rules::{global_xi, RuleParams};

/// Dimensions and batch settings of the random dataset.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SignalTaskSpec {
    pub n_samples: usize,
    pub dx: usize,
    pub dy: usize,
    pub dz: usize,
    pub n_eff: usize,
    pub gamma: f64,
}

impl Default for SignalTaskSpec {
    fn default() -> Self {
        Self {
            n_samples: 100,
            dx: 100,
            dy: 1,
            dz: 10,
            n_eff: 6,
            gamma: 2.0,
        }
    }
}

/// Cycles through `Unif(0,1)` samples; the target for each is the analytic
/// signal over the buffer of the most recent samples.
#[derive(Debug, Clone)]
pub struct RandomSignalTask {
    samples: Vec<Sample>,
    buffer: SampleBuffer,
    rule: RuleParams,
    cursor: usize,
}

impl RandomSignalTask {
    pub fn new<R: Rng + ?Sized>(spec: &SignalTaskSpec, rng: &mut R) -> Result<Self> {
        if spec.n_samples < spec.n_eff || spec.n_eff < 2 {
            return Err(Error::invalid(format!(
                "need 2 <= n_eff <= n_samples, got n_eff {} with {} samples",
                spec.n_eff, spec.n_samples
            )));
        }
        if spec.dx == 0 || spec.dy == 0 || spec.dz == 0 {
            return Err(Error::invalid("signal task dimensions must be at least 1"));
        }
        let mut draw = |d: usize| -> Vec<f64> { (0..d).map(|_| rng.random::<f64>()).collect() };
        let samples: Vec<Sample> = (0..spec.n_samples)
            .map(|_| {
                let x = draw(spec.dx);
                let y = draw(spec.dy);
                let z = draw(spec.dz);
                Sample::new(x, y, vec![z])
            })
            .collect();
        let width = |f: &dyn Fn(&Sample) -> &[f64]| -> Result<KernelParams> {
            let rows: Vec<&[f64]> = samples[..spec.n_eff].iter().map(f).collect();
            KernelParams::new(median_bandwidth(&SampleMatrix::from_rows(&rows)?))
        };
        let kernels = ObjectiveKernels {
            x: width(&|s| &s.x)?,
            y: width(&|s| &s.y)?,
            z: width(&|s| &s.z[0])?,
        };
        let rule = RuleParams {
            gamma: spec.gamma,
            kernels,
            lr: 0.0,
            momentum: 0.0,
        };
        let mut buffer = SampleBuffer::new(spec.n_eff)?;
        // Start as if the previous cycle had just ended.
        for s in &samples[spec.n_samples - (spec.n_eff - 1)..] {
            buffer.push(s.clone())?;
        }
        Ok(Self {
            samples,
            buffer,
            rule,
            cursor: 0,
        })
    }

    pub fn input_dim(&self) -> usize {
        let s = &self.samples[0];
        s.x.len() + s.y.len() + s.z[0].len()
    }

    pub fn output_dim(&self) -> usize {
        self.samples[0].z[0].len()
    }

    pub fn kernels(&self) -> ObjectiveKernels {
        self.rule.kernels
    }
}

impl SignalSource for RandomSignalTask {
    fn next_sample(&mut self) -> Result<(Vec<f64>, Vec<f64>)> {
        let s = self.samples[self.cursor].clone();
        self.cursor = (self.cursor + 1) % self.samples.len();
        let input = [s.x.as_slice(), &s.y, &s.z[0]].concat();
        self.buffer.push(s)?;
        let xi = global_xi(&self.buffer, 0, &self.rule)?;
        Ok((input, xi))
    }
}

/// Timing of the signal-learning protocol, in seconds and ms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SignalProtocol {
    pub train_s: f64,
    pub test_s: f64,
    pub hold_ms: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SignalReport {
    pub train: RunStats,
    pub test: RunStats,
}

impl SignalReport {
    pub fn test_nmse(&self) -> f64 {
        self.test.normalized_mse()
    }
}

/// Trains the readout on the random signal task, then freezes it and
/// measures the test-phase error. The task and the reservoir draw from
/// separate streams of the same seed.
pub fn run_signal_experiment(
    spec: &SignalTaskSpec,
    params: &ReservoirParams,
    protocol: &SignalProtocol,
    seed: u64,
) -> Result<SignalReport> {
    let mut data_rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sim_rng = ChaCha8Rng::seed_from_u64(seed);
    sim_rng.set_stream(1);
    let mut task = RandomSignalTask::new(spec, &mut data_rng)?;
    let mut state = ReservoirState::init(params, task.input_dim(), task.output_dim(), &mut sim_rng)?;
    let train = run_reservoir(&mut state, &mut task, protocol.train_s, protocol.hold_ms, true, params, &mut sim_rng)?;
    let test = run_reservoir(&mut state, &mut task, protocol.test_s, protocol.hold_ms, false, params, &mut sim_rng)?;
    Ok(SignalReport { train, test })
}
