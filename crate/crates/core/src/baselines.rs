//! Comparison learners: a back-propagation MLP and the two-sample pHSIC rule
//! with uncentered kernels.

use ndarray::{Array1, Array2, ArrayView1};
use rand::Rng;

use crate::error::{Error, Result};
use crate::kernels::{sq_dist, KernelParams};
use crate::memory::SampleBuffer;
use crate::network::{argmax, softmax, FeedforwardNet};
use crate::rules::{apply_three_factor, MomentumState, UpdateDecomposition};

/// Fully connected ReLU network with a softmax cross-entropy head.
#[derive(Debug, Clone, PartialEq)]
pub struct BackpropNet {
    /// `(W, b)` per layer, `W` is `out x in`.
    pub layers: Vec<(Array2<f64>, Array1<f64>)>,
    velocity: Vec<(Array2<f64>, Array1<f64>)>,
}

/// Parameter gradients in the layout of [`BackpropNet::layers`].
pub type Gradients = Vec<(Array2<f64>, Array1<f64>)>;

impl BackpropNet {
    /// `widths` excludes the input; the last entry is the number of classes.
    /// Weights are `Unif(-1/sqrt(in), 1/sqrt(in))`, biases zero.
    pub fn random<R: Rng + ?Sized>(input_dim: usize, widths: &[usize], rng: &mut R) -> Result<Self> {
        if input_dim == 0 || widths.is_empty() || widths.contains(&0) {
            return Err(Error::invalid("backprop net needs nonzero input and layer widths"));
        }
        let mut layers = Vec::with_capacity(widths.len());
        let mut fan_in = input_dim;
        for &w in widths {
            let a = 1.0 / (fan_in as f64).sqrt();
            let weights = Array2::from_shape_simple_fn((w, fan_in), || rng.random_range(-a..=a));
            layers.push((weights, Array1::zeros(w)));
            fan_in = w;
        }
        let velocity = layers
            .iter()
            .map(|(w, b)| (Array2::zeros(w.dim()), Array1::zeros(b.len())))
            .collect();
        Ok(Self { layers, velocity })
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].0.ncols()
    }

    pub fn n_classes(&self) -> usize {
        self.layers.last().expect("nonempty").0.nrows()
    }

    /// Activations of every layer, input first, logits last.
    fn activations(&self, x: &[f64]) -> Vec<Array1<f64>> {
        let mut acts = vec![Array1::from(x.to_vec())];
        let last = self.layers.len() - 1;
        for (l, (w, b)) in self.layers.iter().enumerate() {
            let mut a = w.dot(acts.last().expect("nonempty")) + b;
            if l < last {
                a.mapv_inplace(|v| v.max(0.0));
            }
            acts.push(a);
        }
        acts
    }

    pub fn logits(&self, x: &[f64]) -> Array1<f64> {
        self.activations(x).pop().expect("nonempty")
    }

    pub fn predict(&self, x: &[f64]) -> usize {
        argmax(self.logits(x).iter().copied())
    }

    pub fn accuracy(&self, xs: &[Vec<f64>], labels: &[usize]) -> f64 {
        if xs.is_empty() {
            return 0.0;
        }
        let hits = xs.iter().zip(labels).filter(|(x, &l)| self.predict(x) == l).count();
        hits as f64 / xs.len() as f64
    }

    fn check_batch(&self, xs: &[Vec<f64>], ys: &[Vec<f64>]) -> Result<()> {
        if xs.is_empty() {
            return Err(Error::invalid("batch must not be empty"));
        }
        if xs.len() != ys.len() {
            return Err(Error::invalid("batch inputs and labels differ in length"));
        }
        if xs.iter().any(|x| x.len() != self.input_dim()) || ys.iter().any(|y| y.len() != self.n_classes()) {
            return Err(Error::invalid("batch shape does not match the network"));
        }
        Ok(())
    }

    /// Mean cross-entropy over the batch.
    pub fn loss(&self, xs: &[Vec<f64>], ys: &[Vec<f64>]) -> Result<f64> {
        self.check_batch(xs, ys)?;
        let total: f64 = xs
            .iter()
            .zip(ys)
            .map(|(x, y)| cross_entropy(&self.logits(x), y))
            .sum();
        Ok(total / xs.len() as f64)
    }

    /// Mean loss and its gradient over the batch.
    pub fn gradients(&self, xs: &[Vec<f64>], ys: &[Vec<f64>]) -> Result<(f64, Gradients)> {
        self.check_batch(xs, ys)?;
        let mut grads: Gradients = self
            .layers
            .iter()
            .map(|(w, b)| (Array2::zeros(w.dim()), Array1::zeros(b.len())))
            .collect();
        let mut loss = 0.0;
        let scale = 1.0 / xs.len() as f64;
        for (x, y) in xs.iter().zip(ys) {
            let acts = self.activations(x);
            let logits = acts.last().expect("nonempty");
            loss += cross_entropy(logits, y);
            let mut delta = softmax(logits) - &ArrayView1::from(y.as_slice());
            for l in (0..self.layers.len()).rev() {
                let input = &acts[l];
                let (gw, gb) = &mut grads[l];
                for (i, &d) in delta.iter().enumerate() {
                    if d != 0.0 {
                        gw.row_mut(i).scaled_add(d * scale, input);
                    }
                }
                gb.scaled_add(scale, &delta);
                if l > 0 {
                    let mut back = self.layers[l].0.t().dot(&delta);
                    back.zip_mut_with(input, |g, &a| {
                        if a <= 0.0 {
                            *g = 0.0;
                        }
                    });
                    delta = back;
                }
            }
        }
        Ok((loss * scale, grads))
    }

    /// One minibatch step of SGD with momentum; returns the loss before the
    /// step.
    pub fn train_step(&mut self, xs: &[Vec<f64>], ys: &[Vec<f64>], lr: f64, momentum: f64) -> Result<f64> {
        if !(0.0..1.0).contains(&momentum) || !(lr >= 0.0) {
            return Err(Error::invalid("need lr >= 0 and momentum in [0, 1)"));
        }
        let (loss, grads) = self.gradients(xs, ys)?;
        for (((w, b), (vw, vb)), (gw, gb)) in self.layers.iter_mut().zip(&mut self.velocity).zip(grads) {
            vw.zip_mut_with(&gw, |v, &g| *v = momentum * *v + g);
            vb.zip_mut_with(&gb, |v, &g| *v = momentum * *v + g);
            w.scaled_add(-lr, vw);
            b.scaled_add(-lr, vb);
        }
        Ok(loss)
    }
}

fn cross_entropy(logits: &Array1<f64>, onehot: &[f64]) -> f64 {
    let max = logits.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let lse = max + logits.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    logits.iter().zip(onehot).map(|(l, y)| y * (lse - l)).sum()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhsicParams {
    pub gamma: f64,
    pub sigma_z: f64,
    pub sigma_y: f64,
    /// Number of newest buffer samples the rule sees.
    pub batch: usize,
}

impl PhsicParams {
    pub fn validate(&self) -> Result<()> {
        if self.batch < 2 {
            return Err(Error::invalid(format!("pHSIC batch must be at least 2, got {}", self.batch)));
        }
        KernelParams::new(self.sigma_z)?;
        KernelParams::new(self.sigma_y)?;
        Ok(())
    }
}

/// Modulating signal of the pHSIC variant:
/// `sum_p [k(z_0, z_p) - gamma k(y_0, y_p)] alpha_i(p)` over the `batch`
/// newest samples, with uncentered kernels and uncentered `alpha`.
pub fn phsic_xi(buffer: &SampleBuffer, layer: usize, params: &PhsicParams) -> Result<Vec<f64>> {
    params.validate()?;
    if buffer.len() < params.batch {
        return Err(Error::Precondition(format!(
            "pHSIC needs {} buffered samples, have {}",
            params.batch,
            buffer.len()
        )));
    }
    let current = buffer.current().expect("nonempty");
    if layer >= current.z.len() {
        return Err(Error::invalid(format!("no layer {layer}")));
    }
    let kz = KernelParams::new(params.sigma_z)?;
    let ky = KernelParams::new(params.sigma_y)?;
    let z0 = &current.z[layer];
    let s2 = params.sigma_z * params.sigma_z;
    let mut xi = vec![0.0; z0.len()];
    for s in buffer.iter().take(params.batch).skip(1) {
        let zp = &s.z[layer];
        let k = kz.eval_sq(sq_dist(z0, zp));
        let bracket = k - params.gamma * ky.eval_sq(sq_dist(&current.y, &s.y));
        for ((x, a), b) in xi.iter_mut().zip(z0).zip(zp) {
            *x += bracket * (-2.0 * k / s2 * (a - b));
        }
    }
    Ok(xi)
}

/// Applies the pHSIC update to `layer` with the same momentum and sign
/// convention as the three-factor rule.
pub fn phsic_update(
    net: &mut FeedforwardNet,
    layer: usize,
    buffer: &SampleBuffer,
    params: &PhsicParams,
    lr: f64,
    momentum: f64,
    state: &mut MomentumState,
) -> Result<UpdateDecomposition> {
    let xi = phsic_xi(buffer, layer, params)?;
    let current = buffer.current().expect("checked length");
    apply_three_factor(net, layer, current, xi, lr, momentum, state)
}
