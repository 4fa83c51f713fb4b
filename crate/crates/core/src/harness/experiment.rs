//! Training loops for every rule, with per-epoch evaluation.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::baselines::{phsic_xi, BackpropNet, PhsicParams};
use crate::data::{
    filter_digits, gen_linear2d, gen_tanh2d, load_mnist_idx, stratified_subsample, Dataset, LinearBoundary,
};
use crate::error::{Error, Result};
use crate::kernels::{hsic_objective, median_bandwidth, KernelParams, ObjectiveKernels, SampleMatrix};
use crate::memory::{Sample, SampleBuffer};
use crate::network::{FeedforwardNet, LinearDecoder};
use crate::reservoir::{ReservoirParams, ReservoirState};
use crate::rules::{apply_three_factor, global_xi, xi_from_bracket, BracketColumns, MomentumState, RuleParams};

use super::config::{ExperimentConfig, Mode, Rule, Task};
use super::metrics::MetricsRecord;
use super::signal::{run_signal_experiment, SignalProtocol, SignalTaskSpec};

/// Training and test data of one trial.
#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub train: Dataset,
    pub test: Dataset,
}

/// Largest number of training samples used for the per-layer objective.
const PROBE_SIZE: usize = 256;

// Independent random streams of a trial.
const DATA_STREAM: u64 = 0;
const INIT_STREAM: u64 = 1;
const NOISE_STREAM: u64 = 2;
const ORDER_STREAM: u64 = 3;
const RESERVOIR_STREAM: u64 = 4;

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Seed of trial `trial`.
pub fn trial_seed(cfg: &ExperimentConfig, trial: usize) -> u64 {
    cfg.seed.wrapping_add(trial as u64)
}

fn find_idx(dir: &Path, stem: &str) -> Result<PathBuf> {
    let plain = dir.join(stem);
    if plain.exists() {
        return Ok(plain);
    }
    let gz = dir.join(format!("{stem}.gz"));
    if gz.exists() {
        return Ok(gz);
    }
    Err(Error::io(
        plain,
        std::io::Error::new(std::io::ErrorKind::NotFound, "MNIST file not found (also tried .gz)"),
    ))
}

/// Reads the MNIST files of the configured directory, filtered to the
/// configured digits. Subsampling happens per trial.
pub fn load_mnist_split(cfg: &ExperimentConfig) -> Result<Split> {
    let dir = cfg.data_dir();
    let train = load_mnist_idx(
        &find_idx(&dir, "train-images-idx3-ubyte")?,
        &find_idx(&dir, "train-labels-idx1-ubyte")?,
    )?;
    let test = load_mnist_idx(
        &find_idx(&dir, "t10k-images-idx3-ubyte")?,
        &find_idx(&dir, "t10k-labels-idx1-ubyte")?,
    )?;
    let digits = cfg.digits();
    Ok(Split {
        train: filter_digits(&train, &digits)?,
        test: filter_digits(&test, &digits)?,
    })
}

/// Data for one trial. `mnist` is the pre-loaded split for the MNIST tasks.
pub fn trial_data(cfg: &ExperimentConfig, seed: u64, mnist: Option<&Split>) -> Result<Split> {
    let mut rng = stream(seed, DATA_STREAM);
    match cfg.task {
        Task::Linear2d => {
            let [a, b, c] = cfg.data.boundary;
            let boundary = LinearBoundary { a, b, c };
            Ok(Split {
                train: gen_linear2d(cfg.data.n_train, boundary, &mut rng)?,
                test: gen_linear2d(cfg.data.n_test, boundary, &mut rng)?,
            })
        }
        Task::Tanh2d => Ok(Split {
            train: gen_tanh2d(cfg.data.n_train, &mut rng),
            test: gen_tanh2d(cfg.data.n_test, &mut rng),
        }),
        Task::Mnist | Task::MnistSubset => {
            let base = mnist.ok_or_else(|| Error::Precondition("MNIST data not loaded".into()))?;
            Ok(Split {
                train: stratified_subsample(&base.train, cfg.data.fraction, &mut rng)?,
                test: base.test.clone(),
            })
        }
        Task::ReservoirSignal => Err(Error::invalid("the signal task has no dataset")),
    }
}

/// Everything a trial produced.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrialOutput {
    pub records: Vec<MetricsRecord>,
    /// `(epoch, w0 / w1)` after every epoch for a single neuron with two inputs.
    pub weight_ratios: Vec<(usize, f64)>,
    /// Test-phase normalized error of the signal task.
    pub signal_nmse: Option<f64>,
}

/// Epochs after which metrics are recorded: 0, every `eval_every`, and the last.
pub fn default_checkpoints(cfg: &ExperimentConfig) -> BTreeSet<usize> {
    let mut set: BTreeSet<usize> = (0..=cfg.epochs).step_by(cfg.eval_every).collect();
    set.insert(cfg.epochs);
    set
}

/// Runs every trial and returns their records in trial order.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<Vec<MetricsRecord>> {
    Ok(run_trials(cfg, &default_checkpoints(cfg))?
        .into_iter()
        .flat_map(|t| t.records)
        .collect())
}

/// Runs every trial recording metrics at `checkpoints`.
pub fn run_trials(cfg: &ExperimentConfig, checkpoints: &BTreeSet<usize>) -> Result<Vec<TrialOutput>> {
    cfg.validate()?;
    let mnist = if cfg.is_mnist() { Some(load_mnist_split(cfg)?) } else { None };
    (0..cfg.trials)
        .map(|trial| run_trial(cfg, trial, mnist.as_ref(), checkpoints))
        .collect()
}

pub fn run_trial(
    cfg: &ExperimentConfig,
    trial: usize,
    mnist: Option<&Split>,
    checkpoints: &BTreeSet<usize>,
) -> Result<TrialOutput> {
    let seed = trial_seed(cfg, trial);
    if cfg.task == Task::ReservoirSignal {
        return signal_trial(cfg, trial, seed);
    }
    let data = trial_data(cfg, seed, mnist)?;
    if data.train.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    match cfg.rule {
        Rule::Backprop => backprop_trial(cfg, trial, seed, &data, checkpoints),
        _ => lif_trial(cfg, trial, seed, &data, checkpoints),
    }
}

fn signal_trial(cfg: &ExperimentConfig, trial: usize, seed: u64) -> Result<TrialOutput> {
    let start = Instant::now();
    let s = &cfg.signal;
    let spec = SignalTaskSpec {
        n_samples: s.n_samples,
        dx: s.dx,
        dy: s.dy,
        dz: s.dz,
        n_eff: cfg.n_eff,
        gamma: cfg.gamma.first().copied().unwrap_or(2.0),
    };
    let protocol = SignalProtocol {
        train_s: s.train_s,
        test_s: s.test_s,
        hold_ms: cfg.presentation_ms(),
    };
    let params = cfg.reservoir_config().params(cfg.dt);
    let report = run_signal_experiment(&spec, &params, &protocol, seed)?;
    let nmse = report.test_nmse();
    Ok(TrialOutput {
        records: vec![MetricsRecord::layer(trial, 0, 0, nmse, start.elapsed().as_secs_f64())],
        weight_ratios: Vec::new(),
        signal_nmse: Some(nmse),
    })
}

fn present(net: &mut FeedforwardNet, x: &[f64], cfg: &ExperimentConfig, rng: &mut ChaCha8Rng) -> Result<Vec<Vec<f64>>> {
    match cfg.mode {
        Mode::Dynamical => net.forward_dynamical(x, cfg.presentation_ms(), rng),
        Mode::Steady => net.forward_steady(x, rng),
    }
}

fn bandwidth<'a>(rows: impl Iterator<Item = &'a [f64]>, over: Option<f64>) -> Result<KernelParams> {
    match over {
        Some(s) => KernelParams::new(s),
        None => {
            let rows: Vec<&[f64]> = rows.collect();
            KernelParams::new(median_bandwidth(&SampleMatrix::from_rows(&rows)?))
        }
    }
}

/// Per-layer rule parameters with kernel widths taken from the warm buffer.
fn layer_rules(cfg: &ExperimentConfig, buffer: &SampleBuffer) -> Result<Vec<RuleParams>> {
    let kx = bandwidth(buffer.iter().map(|s| s.x.as_slice()), cfg.sigma.x)?;
    let ky = bandwidth(buffer.iter().map(|s| s.y.as_slice()), cfg.sigma.y)?;
    (0..cfg.arch.len())
        .map(|l| {
            let kz = bandwidth(buffer.iter().map(|s| s.z[l].as_slice()), cfg.sigma_z_for(l))?;
            Ok(RuleParams {
                gamma: cfg.gamma_for(l),
                kernels: ObjectiveKernels { x: kx, y: ky, z: kz },
                lr: 0.0,
                momentum: cfg.momentum,
            })
        })
        .collect()
}

struct Evaluation {
    train_acc: f64,
    test_acc: f64,
    objectives: Vec<f64>,
}

/// Fits a fresh decoder on noise-free final-layer rates and scores it; the
/// layer objectives are computed on the first training samples.
fn evaluate(net: &FeedforwardNet, data: &Split, rules: &[RuleParams], cfg: &ExperimentConfig) -> Result<Evaluation> {
    let train_rates = data
        .train
        .inputs
        .iter()
        .map(|x| net.forward_clean(x))
        .collect::<Result<Vec<_>>>()?;
    let features: Vec<Vec<f64>> = train_rates.iter().map(|r| r.last().expect("layers").clone()).collect();
    let test_features = data
        .test
        .inputs
        .iter()
        .map(|x| net.forward_clean(x).map(|mut r| r.pop().expect("layers")))
        .collect::<Result<Vec<_>>>()?;
    let mut decoder = LinearDecoder::zeros(data.train.n_classes, net.output_dim());
    decoder.fit(&features, &data.train.encoded_labels(), cfg.decoder.epochs, cfg.decoder.lr)?;

    let m = data.train.len().min(PROBE_SIZE);
    let objectives = if m >= 2 {
        let x = SampleMatrix::from_rows(&data.train.inputs[..m])?;
        let y = SampleMatrix::from_rows(&data.train.encoded_labels()[..m])?;
        rules
            .iter()
            .enumerate()
            .map(|(l, r)| {
                let z: Vec<&[f64]> = train_rates[..m].iter().map(|rates| rates[l].as_slice()).collect();
                hsic_objective(&x, &y, &SampleMatrix::from_rows(&z)?, r.gamma, r.kernels)
            })
            .collect::<Result<Vec<_>>>()?
    } else {
        vec![f64::NAN; rules.len()]
    };
    Ok(Evaluation {
        train_acc: decoder.accuracy(&features, &data.train.labels),
        test_acc: decoder.accuracy(&test_features, &data.test.labels),
        objectives,
    })
}

/// One reservoir per layer, driven by `[x; y; z_l]` and read out as `xi_l`.
struct ReservoirBank {
    params: ReservoirParams,
    states: Vec<ReservoirState>,
    hold: usize,
}

impl ReservoirBank {
    fn new(cfg: &ExperimentConfig, input: usize, label: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        let params = cfg.reservoir_config().params(cfg.dt);
        let states = cfg
            .arch
            .iter()
            .map(|&w| ReservoirState::init(&params, input + label + w, w, rng))
            .collect::<Result<Vec<_>>>()?;
        let hold = (cfg.presentation_ms() / cfg.dt).round().max(1.0) as usize;
        Ok(Self { params, states, hold })
    }

    /// Runs every reservoir for one presentation of the buffer's current
    /// sample. With `teach`, readouts are trained toward the analytic signal.
    /// Returns the mean readout of each reservoir over the presentation.
    fn present(
        &mut self,
        buffer: &SampleBuffer,
        rules: &[RuleParams],
        teach: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Vec<Vec<f64>>> {
        let cur = buffer.current().expect("warm buffer");
        let mut out = Vec::with_capacity(self.states.len());
        for (l, state) in self.states.iter_mut().enumerate() {
            let input = [cur.x.as_slice(), &cur.y, &cur.z[l]].concat();
            let target = if teach { Some(global_xi(buffer, l, &rules[l])?) } else { None };
            let mut mean = vec![0.0; state.d_out()];
            for _ in 0..self.hold {
                let r_o = state.step(&input, &self.params, rng)?;
                if let Some(xi) = &target {
                    state.rm_hebb_update(xi, state.learn_time, &self.params)?;
                    state.learn_time += self.params.dt_s();
                }
                for (m, v) in mean.iter_mut().zip(&r_o) {
                    *m += v / self.hold as f64;
                }
            }
            out.push(mean);
        }
        Ok(out)
    }
}

fn lif_trial(
    cfg: &ExperimentConfig,
    trial: usize,
    seed: u64,
    data: &Split,
    checkpoints: &BTreeSet<usize>,
) -> Result<TrialOutput> {
    let start = Instant::now();
    let mut init_rng = stream(seed, INIT_STREAM);
    let mut noise_rng = stream(seed, NOISE_STREAM);
    let mut order_rng = stream(seed, ORDER_STREAM);
    let train = &data.train;
    let labels = train.encoded_labels();
    let mut net = FeedforwardNet::random(train.input_dim(), &cfg.arch, cfg.tau_ff, cfg.noise, cfg.dt, &mut init_rng)?;
    let capacity = if cfg.rule == Rule::Phsic { cfg.phsic.batch } else { cfg.n_eff };
    let mut buffer = SampleBuffer::new(capacity)?;
    let mut order: Vec<usize> = (0..train.len()).collect();

    // Fill the buffer without plasticity.
    order.shuffle(&mut order_rng);
    for &i in order.iter().cycle().take(capacity) {
        let z = present(&mut net, &train.inputs[i], cfg, &mut noise_rng)?;
        buffer.push(Sample::new(train.inputs[i].clone(), labels[i].clone(), z))?;
    }
    let rules = layer_rules(cfg, &buffer)?;

    let mut bank = None;
    if cfg.rule == Rule::OursReservoir {
        let mut res_rng = stream(seed, RESERVOIR_STREAM);
        let mut b = ReservoirBank::new(cfg, train.input_dim(), train.n_classes, &mut res_rng)?;
        let rc = cfg.reservoir_config();
        let per_sample = cfg.presentation_ms() * 1e-3;
        for (duration, teach) in [(rc.warmup_s, false), (rc.pretrain_s, true)] {
            let count = (duration / per_sample).round() as usize;
            let mut k = 0;
            while k < count {
                order.shuffle(&mut order_rng);
                for &i in order.iter().take(count - k) {
                    let z = present(&mut net, &train.inputs[i], cfg, &mut noise_rng)?;
                    buffer.push(Sample::new(train.inputs[i].clone(), labels[i].clone(), z))?;
                    b.present(&buffer, &rules, teach, &mut res_rng)?;
                    k += 1;
                }
            }
        }
        bank = Some((b, res_rng));
    }

    let mut out = TrialOutput::default();
    let ratio_tracked = cfg.arch == [1] && train.input_dim() == 2;
    let record = |net: &FeedforwardNet, epoch: usize, out: &mut TrialOutput| -> Result<()> {
        let ev = evaluate(net, data, &rules, cfg)?;
        let secs = start.elapsed().as_secs_f64();
        for (l, &obj) in ev.objectives.iter().enumerate() {
            out.records.push(MetricsRecord::layer(trial, epoch, l, obj, secs));
        }
        out.records.push(MetricsRecord::accuracy(trial, epoch, ev.train_acc, ev.test_acc, secs));
        Ok(())
    };
    let log_ratio = |net: &FeedforwardNet, epoch: usize, out: &mut TrialOutput| {
        if ratio_tracked {
            let w = &net.layers[0].weights;
            out.weight_ratios.push((epoch, w[[0, 0]] / w[[0, 1]]));
        }
    };
    if checkpoints.contains(&0) {
        record(&net, 0, &mut out)?;
    }
    log_ratio(&net, 0, &mut out);

    let mut momentum = MomentumState::for_net(&net);
    let per_sample = cfg.presentation_ms() * 1e-3;
    let mut t_s = 0.0;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut order_rng);
        for &i in &order {
            let z = present(&mut net, &train.inputs[i], cfg, &mut noise_rng)?;
            buffer.push(Sample::new(train.inputs[i].clone(), labels[i].clone(), z))?;
            let lr = cfg.lr_at(epoch, t_s);
            let signals: Vec<Vec<f64>> = match cfg.rule {
                Rule::OursAnalytic => {
                    let cols = BracketColumns::from_buffer(&buffer, rules[0].kernels.x, rules[0].kernels.y)?;
                    rules
                        .iter()
                        .enumerate()
                        .map(|(l, r)| xi_from_bracket(&cols.bracket(r.gamma), &buffer, l, r.kernels.z))
                        .collect::<Result<_>>()?
                }
                Rule::OursReservoir => {
                    let (b, rng) = bank.as_mut().expect("built above");
                    b.present(&buffer, &rules, false, rng)?
                }
                Rule::Phsic => rules
                    .iter()
                    .enumerate()
                    .map(|(l, r)| {
                        let p = PhsicParams {
                            gamma: r.gamma,
                            sigma_z: r.kernels.z.sigma(),
                            sigma_y: r.kernels.y.sigma(),
                            batch: cfg.phsic.batch,
                        };
                        phsic_xi(&buffer, l, &p)
                    })
                    .collect::<Result<_>>()?,
                Rule::Backprop => unreachable!("handled separately"),
            };
            let current = buffer.current().expect("just pushed").clone();
            for (l, xi) in signals.into_iter().enumerate() {
                apply_three_factor(&mut net, l, &current, xi, lr, cfg.momentum, &mut momentum)?;
            }
            t_s += per_sample;
        }
        if net.layers.iter().any(|l| l.weights.iter().any(|w| !w.is_finite())) {
            return Err(Error::Precondition(format!(
                "weights diverged in epoch {}; lower the learning rate",
                epoch + 1
            )));
        }
        if checkpoints.contains(&(epoch + 1)) {
            record(&net, epoch + 1, &mut out)?;
        }
        log_ratio(&net, epoch + 1, &mut out);
    }
    Ok(out)
}

fn backprop_trial(
    cfg: &ExperimentConfig,
    trial: usize,
    seed: u64,
    data: &Split,
    checkpoints: &BTreeSet<usize>,
) -> Result<TrialOutput> {
    let start = Instant::now();
    let train = &data.train;
    if cfg.arch.last() != Some(&train.n_classes) {
        return Err(Error::Config(format!(
            "backprop arch must end in {} outputs (one per class)",
            train.n_classes
        )));
    }
    let mut init_rng = stream(seed, INIT_STREAM);
    let mut order_rng = stream(seed, ORDER_STREAM);
    let mut net = BackpropNet::random(train.input_dim(), &cfg.arch, &mut init_rng)?;
    let labels = train.encoded_labels();
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut out = TrialOutput::default();
    let record = |net: &BackpropNet, epoch: usize, out: &mut TrialOutput| {
        let train_acc = net.accuracy(&train.inputs, &train.labels);
        let test_acc = net.accuracy(&data.test.inputs, &data.test.labels);
        out.records.push(MetricsRecord::accuracy(
            trial,
            epoch,
            train_acc,
            test_acc,
            start.elapsed().as_secs_f64(),
        ));
    };
    if checkpoints.contains(&0) {
        record(&net, 0, &mut out);
    }
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut order_rng);
        for chunk in order.chunks(cfg.batch_size) {
            let xs: Vec<Vec<f64>> = chunk.iter().map(|&i| train.inputs[i].clone()).collect();
            let ys: Vec<Vec<f64>> = chunk.iter().map(|&i| labels[i].clone()).collect();
            net.train_step(&xs, &ys, cfg.lr_at_epoch(epoch), cfg.momentum)?;
        }
        if checkpoints.contains(&(epoch + 1)) {
            record(&net, epoch + 1, &mut out);
        }
    }
    Ok(out)
}
