//! Randomized checks of the estimator and the learning rule against
//! independent reference computations.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::kernels::{gaussian_kernel, hsic, KernelParams, ObjectiveKernels, SampleMatrix};
use crate::memory::{Sample, SampleBuffer};
use crate::network::FeedforwardNet;
use crate::rules::{finite_diff_gradient, full_gradient, global_xi, local_beta, relative_error, restricted_gradient, RuleParams};

/// HSIC as the plain double sum
/// `(N-1)^-2 sum_pq kbar_x(p,q) kbar_z(q,p)` with `kbar(p,q) = k(p,q) - mean_n k(p,n)`.
pub fn hsic_double_sum(x: &SampleMatrix, z: &SampleMatrix, kx: KernelParams, kz: KernelParams) -> Result<f64> {
    let n = x.n_samples();
    let kernel = |m: &SampleMatrix, k: KernelParams, p: usize, q: usize| -> Result<f64> {
        gaussian_kernel(m.row(p).as_slice().expect("row"), m.row(q).as_slice().expect("row"), k)
    };
    let centered = |m: &SampleMatrix, k: KernelParams| -> Result<Vec<Vec<f64>>> {
        let mut rows = Vec::with_capacity(n);
        for p in 0..n {
            let row: Vec<f64> = (0..n).map(|q| kernel(m, k, p, q)).collect::<Result<_>>()?;
            let mean = row.iter().sum::<f64>() / n as f64;
            rows.push(row.into_iter().map(|v| v - mean).collect());
        }
        Ok(rows)
    };
    let a = centered(x, kx)?;
    let b = centered(z, kz)?;
    let mut s = 0.0;
    for p in 0..n {
        for q in 0..n {
            s += a[p][q] * b[q][p];
        }
    }
    Ok(s / ((n - 1) * (n - 1)) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CheckOutcome {
    pub instances: usize,
    /// Largest error seen across instances.
    pub max_error: f64,
    pub tolerance: f64,
}

impl CheckOutcome {
    pub fn passed(&self) -> bool {
        self.max_error <= self.tolerance
    }
}

fn random_matrix(rng: &mut impl Rng, n: usize, d: usize) -> Result<SampleMatrix> {
    let rows: Vec<Vec<f64>> = (0..n).map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
    SampleMatrix::from_rows(&rows)
}

fn random_kernel(rng: &mut impl Rng) -> Result<KernelParams> {
    KernelParams::new(rng.random_range(0.5..2.0))
}

/// Trace-form estimator vs [`hsic_double_sum`] with `N` in 2..=8 and `d` in
/// 1..=5; error is relative to the larger magnitude (absolute below 1).
pub fn check_hsic_estimator(instances: usize, seed: u64) -> Result<CheckOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut max_error: f64 = 0.0;
    for _ in 0..instances {
        let n = rng.random_range(2..=8);
        let (dx, dz) = (rng.random_range(1..=5), rng.random_range(1..=5));
        let x = random_matrix(&mut rng, n, dx)?;
        let z = random_matrix(&mut rng, n, dz)?;
        let (kx, kz) = (random_kernel(&mut rng)?, random_kernel(&mut rng)?);
        let a = hsic(&x, &z, kx, kz)?;
        let b = hsic_double_sum(&x, &z, kx, kz)?;
        max_error = max_error.max((a - b).abs() / a.abs().max(b.abs()).max(1.0));
    }
    Ok(CheckOutcome {
        instances,
        max_error,
        tolerance: 1e-10,
    })
}

fn random_rule(rng: &mut impl Rng) -> Result<RuleParams> {
    Ok(RuleParams {
        gamma: rng.random_range(0.0..4.0),
        kernels: ObjectiveKernels {
            x: random_kernel(rng)?,
            y: random_kernel(rng)?,
            z: random_kernel(rng)?,
        },
        lr: 0.0,
        momentum: 0.0,
    })
}

fn random_vec(rng: &mut impl Rng, d: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..d).map(|_| rng.random_range(lo..hi)).collect()
}

/// Exact layer gradient vs central differences (`h = 1e-5`) of the objective
/// on noise-free two-layer networks.
pub fn check_full_gradient(instances: usize, seed: u64) -> Result<CheckOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut max_error: f64 = 0.0;
    for _ in 0..instances {
        let n = rng.random_range(2..=6);
        let dx = rng.random_range(1..=4);
        let widths = [rng.random_range(1..=3), rng.random_range(1..=3)];
        let dy = rng.random_range(1..=3);
        let net = FeedforwardNet::random(dx, &widths, 5.0, 0.0, 1.0, &mut rng)?;
        let mut buffer = SampleBuffer::new(n)?;
        for _ in 0..n {
            let x = random_vec(&mut rng, dx, 0.0, 1.0);
            let z = net.forward_clean(&x)?;
            buffer.push(Sample::new(x, random_vec(&mut rng, dy, 0.0, 1.0), z))?;
        }
        let params = random_rule(&mut rng)?;
        for layer in 0..widths.len() {
            let g = full_gradient(&buffer, layer, &params, &net)?;
            let f = finite_diff_gradient(&buffer, layer, &params, &net, 1e-5)?;
            // both vanish when the objective is flat along this layer
            let scale = g.iter().chain(f.iter()).fold(0.0f64, |m, v| m.max(v.abs()));
            if scale > 1e-9 {
                max_error = max_error.max(relative_error(&g, &f));
            }
        }
    }
    Ok(CheckOutcome {
        instances,
        max_error,
        tolerance: 1e-5,
    })
}

/// The exact double sum with past derivatives zeroed vs
/// `(N-1)^-2 * beta_ij * xi_i`; error relative per entry (absolute below 1e-3).
pub fn check_reduction(instances: usize, seed: u64) -> Result<CheckOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut max_error: f64 = 0.0;
    for _ in 0..instances {
        let n = rng.random_range(2..=8);
        let dims = [rng.random_range(1..=5), rng.random_range(1..=4), rng.random_range(1..=4)];
        let dy = rng.random_range(1..=3);
        let mut buffer = SampleBuffer::new(n)?;
        for _ in 0..n {
            let x = random_vec(&mut rng, dims[0], 0.0, 1.0);
            let z = dims[1..].iter().map(|&d| random_vec(&mut rng, d, -0.95, 0.95)).collect();
            buffer.push(Sample::new(x, random_vec(&mut rng, dy, 0.0, 1.0), z))?;
        }
        let params = random_rule(&mut rng)?;
        let norm = ((n - 1) * (n - 1)) as f64;
        for layer in 0..2 {
            let r = restricted_gradient(&buffer, layer, &params)?;
            let xi = global_xi(&buffer, layer, &params)?;
            let cur = buffer.current().expect("filled");
            let beta = local_beta(cur.layer_input(layer), &cur.z[layer]);
            for ((i, j), &v) in r.indexed_iter() {
                let want = beta[[i, j]] * xi[i] / norm;
                max_error = max_error.max((v - want).abs() / want.abs().max(1e-3));
            }
        }
    }
    Ok(CheckOutcome {
        instances,
        max_error,
        tolerance: 1e-12,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradcheckReport {
    pub estimator: CheckOutcome,
    pub gradient: CheckOutcome,
    pub reduction: CheckOutcome,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.estimator.passed() && self.gradient.passed() && self.reduction.passed()
    }
}

/// All three checks with the default instance counts.
pub fn run_gradcheck(seed: u64) -> Result<GradcheckReport> {
    Ok(GradcheckReport {
        estimator: check_hsic_estimator(50, seed)?,
        gradient: check_full_gradient(20, seed.wrapping_add(1))?,
        reduction: check_reduction(20, seed.wrapping_add(2))?,
    })
}
