//! Gaussian kernels, the HSIC estimator and the layer-wise HSIC objective.
//!
//! The kernel is `k(a, b) = exp(-|a - b|^2 / (2 sigma^2))`. Centering is
//! one-sided: the centered matrix is `K H` with `H = I - (1/N) 1 1^T`, so each
//! row of a centered Gram matrix sums to zero. HSIC uses the biased
//! `(N - 1)^-2` normalization:
//!
//! ```text
//! HSIC(X, Y) = (N - 1)^-2 tr(K_X H K_Y H)
//! ```

use ndarray::{Array2, ArrayView1, ArrayView2, Axis};

use crate::error::{Error, Result};

/// Gaussian kernel bandwidth.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KernelParams {
    sigma: f64,
}

impl KernelParams {
    pub fn new(sigma: f64) -> Result<Self> {
        if !(sigma.is_finite() && sigma > 0.0) {
            return Err(Error::invalid(format!(
                "kernel bandwidth must be positive and finite, got {sigma}"
            )));
        }
        Ok(Self { sigma })
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    /// Kernel value for a precomputed squared distance.
    #[inline]
    pub fn eval_sq(&self, sq_dist: f64) -> f64 {
        (-sq_dist / (2.0 * self.sigma * self.sigma)).exp()
    }
}

/// N samples of dimension d, one sample per row.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleMatrix(Array2<f64>);

impl SampleMatrix {
    pub fn new(values: Array2<f64>) -> Result<Self> {
        let (n, d) = values.dim();
        if n == 0 || d == 0 {
            return Err(Error::invalid(format!(
                "sample matrix must be at least 1x1, got {n}x{d}"
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("sample matrix contains non-finite entries"));
        }
        Ok(Self(values))
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let n = rows.len();
        let d = rows.first().map_or(0, |r| r.as_ref().len());
        if rows.iter().any(|r| r.as_ref().len() != d) {
            return Err(Error::invalid("rows have differing dimensions"));
        }
        let flat: Vec<f64> = rows.iter().flat_map(|r| r.as_ref().iter().copied()).collect();
        let values = Array2::from_shape_vec((n, d), flat)
            .map_err(|e| Error::invalid(e.to_string()))?;
        Self::new(values)
    }

    pub fn n_samples(&self) -> usize {
        self.0.nrows()
    }

    pub fn dim(&self) -> usize {
        self.0.ncols()
    }

    pub fn row(&self, i: usize) -> ArrayView1<'_, f64> {
        self.0.row(i)
    }

    pub fn view(&self) -> ArrayView2<'_, f64> {
        self.0.view()
    }

    pub fn into_inner(self) -> Array2<f64> {
        self.0
    }
}

/// Square kernel matrix; `centered` records whether `H` has been applied.
#[derive(Debug, Clone, PartialEq)]
pub struct GramMatrix {
    pub values: Array2<f64>,
    pub centered: bool,
}

impl GramMatrix {
    pub fn n(&self) -> usize {
        self.values.nrows()
    }
}

#[inline]
pub(crate) fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn sq_dist_view(a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

pub fn gaussian_kernel(a: &[f64], b: &[f64], params: KernelParams) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::invalid(format!(
            "kernel arguments differ in dimension ({} vs {})",
            a.len(),
            b.len()
        )));
    }
    Ok(params.eval_sq(sq_dist(a, b)))
}

/// Uncentered Gram matrix of the rows of `samples`.
pub fn gram(samples: &SampleMatrix, params: KernelParams) -> GramMatrix {
    let n = samples.n_samples();
    let mut values = Array2::<f64>::ones((n, n));
    for p in 0..n {
        for q in (p + 1)..n {
            let k = params.eval_sq(sq_dist_view(samples.row(p), samples.row(q)));
            values[[p, q]] = k;
            values[[q, p]] = k;
        }
    }
    GramMatrix {
        values,
        centered: false,
    }
}

/// Right-multiplies by `H`: subtracts each row's mean from that row.
pub fn center(g: &GramMatrix) -> GramMatrix {
    let n = g.n() as f64;
    let mut values = g.values.clone();
    for mut row in values.axis_iter_mut(Axis(0)) {
        let mean = row.sum() / n;
        row.mapv_inplace(|v| v - mean);
    }
    GramMatrix {
        values,
        centered: true,
    }
}

/// `tr(A B)` for square matrices of equal size.
fn trace_of_product(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    let n = a.nrows();
    let mut acc = 0.0;
    for p in 0..n {
        for q in 0..n {
            acc += a[[p, q]] * b[[q, p]];
        }
    }
    acc
}

/// HSIC from already-centered Gram matrices.
pub fn hsic_from_centered(kx: &GramMatrix, ky: &GramMatrix) -> Result<f64> {
    let n = kx.n();
    if ky.n() != n {
        return Err(Error::invalid(format!(
            "Gram matrices differ in size ({n} vs {})",
            ky.n()
        )));
    }
    if n < 2 {
        return Err(Error::invalid("HSIC needs at least 2 samples"));
    }
    let norm = ((n - 1) * (n - 1)) as f64;
    Ok(trace_of_product(&kx.values, &ky.values) / norm)
}

pub fn hsic(
    x: &SampleMatrix,
    y: &SampleMatrix,
    px: KernelParams,
    py: KernelParams,
) -> Result<f64> {
    if x.n_samples() != y.n_samples() {
        return Err(Error::invalid(format!(
            "sample counts differ ({} vs {})",
            x.n_samples(),
            y.n_samples()
        )));
    }
    if x.n_samples() < 2 {
        return Err(Error::invalid("HSIC needs at least 2 samples"));
    }
    hsic_from_centered(&center(&gram(x, px)), &center(&gram(y, py)))
}

/// Bandwidths for the three entities entering one layer's objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectiveKernels {
    pub x: KernelParams,
    pub y: KernelParams,
    pub z: KernelParams,
}

/// `HSIC(X, Z) - gamma * HSIC(Y, Z)`.
pub fn hsic_objective(
    x: &SampleMatrix,
    y: &SampleMatrix,
    z: &SampleMatrix,
    gamma: f64,
    kernels: ObjectiveKernels,
) -> Result<f64> {
    if !(gamma >= 0.0) {
        return Err(Error::invalid(format!("gamma must be nonnegative, got {gamma}")));
    }
    let n = z.n_samples();
    if x.n_samples() != n || y.n_samples() != n {
        return Err(Error::invalid("x, y and z must share a sample count"));
    }
    let kz = center(&gram(z, kernels.z));
    let hx = hsic_from_centered(&center(&gram(x, kernels.x)), &kz)?;
    let hy = hsic_from_centered(&center(&gram(y, kernels.y)), &kz)?;
    Ok(hx - gamma * hy)
}

/// Median of the pairwise Euclidean distances between distinct rows.
///
/// Returns `None` for fewer than two rows or when every distance is zero.
pub fn median_pairwise_distance(samples: &SampleMatrix) -> Option<f64> {
    let n = samples.n_samples();
    let mut d: Vec<f64> = Vec::with_capacity(n * n.saturating_sub(1) / 2);
    for p in 0..n {
        for q in (p + 1)..n {
            d.push(sq_dist_view(samples.row(p), samples.row(q)).sqrt());
        }
    }
    if d.is_empty() {
        return None;
    }
    d.sort_by(|a, b| a.total_cmp(b));
    let m = d.len();
    let med = if m % 2 == 1 {
        d[m / 2]
    } else {
        0.5 * (d[m / 2 - 1] + d[m / 2])
    };
    (med > 0.0).then_some(med)
}

/// Kernel width for `samples`: the median pairwise distance, falling back to
/// the median over nonzero distances (many repeated rows, e.g. one-hot labels
/// in a small batch) and finally to 1.
pub fn median_bandwidth(samples: &SampleMatrix) -> f64 {
    if let Some(m) = median_pairwise_distance(samples) {
        return m;
    }
    let n = samples.n_samples();
    let mut d = Vec::new();
    for p in 0..n {
        for q in (p + 1)..n {
            let v = sq_dist_view(samples.row(p), samples.row(q)).sqrt();
            if v > 0.0 {
                d.push(v);
            }
        }
    }
    if d.is_empty() {
        return 1.0;
    }
    d.sort_by(|a, b| a.total_cmp(b));
    d[(d.len() - 1) / 2]
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn kp(s: f64) -> KernelParams {
        KernelParams::new(s).unwrap()
    }

    fn random_samples(rng: &mut impl Rng, n: usize, d: usize) -> SampleMatrix {
        let v: Vec<f64> = (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect();
        SampleMatrix::new(Array2::from_shape_vec((n, d), v).unwrap()).unwrap()
    }

    /// Straight double sum over centered kernel values, written without
    /// matrices.
    fn hsic_double_sum(x: &SampleMatrix, y: &SampleMatrix, sx: f64, sy: f64) -> f64 {
        let n = x.n_samples();
        let k = |m: &SampleMatrix, s: f64, p: usize, q: usize| {
            let a = m.row(p).to_vec();
            let b = m.row(q).to_vec();
            let d2: f64 = a.iter().zip(&b).map(|(u, v)| (u - v).powi(2)).sum();
            (-d2 / (2.0 * s * s)).exp()
        };
        let kbar = |m: &SampleMatrix, s: f64, p: usize, q: usize| {
            let mean: f64 = (0..n).map(|j| k(m, s, p, j)).sum::<f64>() / n as f64;
            k(m, s, p, q) - mean
        };
        let mut acc = 0.0;
        for p in 0..n {
            for q in 0..n {
                acc += kbar(x, sx, p, q) * kbar(y, sy, q, p);
            }
        }
        acc / ((n - 1) as f64).powi(2)
    }

    /// Cyclic Jacobi eigenvalues of a small symmetric matrix.
    fn jacobi_eigenvalues(m: &Array2<f64>) -> Vec<f64> {
        let n = m.nrows();
        let mut a = m.clone();
        for _sweep in 0..100 {
            let off: f64 = (0..n)
                .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
                .map(|(i, j)| a[[i, j]].powi(2))
                .sum();
            if off < 1e-22 {
                break;
            }
            for p in 0..n {
                for q in (p + 1)..n {
                    if a[[p, q]].abs() < 1e-300 {
                        continue;
                    }
                    let theta = (a[[q, q]] - a[[p, p]]) / (2.0 * a[[p, q]]);
                    let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                    let t = if theta == 0.0 { 1.0 } else { t };
                    let c = 1.0 / (t * t + 1.0).sqrt();
                    let s = t * c;
                    for k in 0..n {
                        let akp = a[[k, p]];
                        let akq = a[[k, q]];
                        a[[k, p]] = c * akp - s * akq;
                        a[[k, q]] = s * akp + c * akq;
                    }
                    for k in 0..n {
                        let apk = a[[p, k]];
                        let aqk = a[[q, k]];
                        a[[p, k]] = c * apk - s * aqk;
                        a[[q, k]] = s * apk + c * aqk;
                    }
                }
            }
        }
        (0..n).map(|i| a[[i, i]]).collect()
    }

    #[test]
    fn kernel_of_identical_points_is_one() {
        let a = [0.3, -1.2, 4.0];
        assert_eq!(gaussian_kernel(&a, &a, kp(0.7)).unwrap(), 1.0);
    }

    #[test]
    fn kernel_at_one_bandwidth_is_exp_minus_half() {
        let v = gaussian_kernel(&[1.0, 0.0], &[1.0, 2.0], kp(2.0)).unwrap();
        assert!((v - (-0.5f64).exp()).abs() < 1e-15);
        assert!((v - 0.606531).abs() < 1e-6);
    }

    #[test]
    fn kernel_three_four_five() {
        let v = gaussian_kernel(&[0.0, 0.0], &[3.0, 4.0], kp(5.0)).unwrap();
        // 25 / (2 * 25)
        assert!((v - (-25.0f64 / 50.0).exp()).abs() < 1e-15);
    }

    #[test]
    fn kernel_rejects_dimension_mismatch() {
        assert!(matches!(
            gaussian_kernel(&[0.0], &[0.0, 1.0], kp(1.0)),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn bandwidth_must_be_positive() {
        assert!(KernelParams::new(0.0).is_err());
        assert!(KernelParams::new(-1.0).is_err());
        assert!(KernelParams::new(f64::NAN).is_err());
    }

    #[test]
    fn gram_of_identical_rows_is_all_ones() {
        let s = SampleMatrix::from_rows(&[[0.5, 0.5]; 4]).unwrap();
        let g = gram(&s, kp(1.0));
        assert!(g.values.iter().all(|&v| v == 1.0));
        assert!(!g.centered);
    }

    #[test]
    fn gram_single_sample() {
        let s = SampleMatrix::from_rows(&[[2.0, 1.0]]).unwrap();
        let g = gram(&s, kp(1.0));
        assert_eq!(g.values, Array2::from_elem((1, 1), 1.0));
    }

    #[test]
    fn gram_matches_scalar_kernel() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = random_samples(&mut rng, 3, 4);
        let g = gram(&s, kp(0.8));
        for p in 0..3 {
            for q in 0..3 {
                let want =
                    gaussian_kernel(&s.row(p).to_vec(), &s.row(q).to_vec(), kp(0.8)).unwrap();
                assert!((g.values[[p, q]] - want).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn centering_constant_gram_gives_zero() {
        let g = GramMatrix {
            values: Array2::ones((3, 3)),
            centered: false,
        };
        let c = center(&g);
        assert!(c.values.iter().all(|&v| v == 0.0));
        assert!(c.centered);
        let one = GramMatrix {
            values: Array2::ones((1, 1)),
            centered: false,
        };
        assert_eq!(center(&one).values[[0, 0]], 0.0);
    }

    #[test]
    fn centering_equals_product_with_h() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let g = gram(&random_samples(&mut rng, 4, 3), kp(1.0));
        let n = 4;
        let h = Array2::from_shape_fn((n, n), |(i, j)| {
            (if i == j { 1.0 } else { 0.0 }) - 1.0 / n as f64
        });
        let want = g.values.dot(&h);
        let got = center(&g).values;
        for (a, b) in got.iter().zip(want.iter()) {
            assert!((a - b).abs() < 1e-14);
        }
        for row in got.axis_iter(Axis(0)) {
            assert!(row.sum().abs() < 1e-14);
        }
    }

    #[test]
    fn hsic_with_constant_labels_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random_samples(&mut rng, 5, 2);
        let y = SampleMatrix::from_rows(&[[1.0]; 5]).unwrap();
        assert!(hsic(&x, &y, kp(1.0), kp(1.0)).unwrap().abs() < 1e-15);
    }

    #[test]
    fn hsic_self_dependence_is_positive() {
        let x = SampleMatrix::from_rows(&[[0.0], [1.0], [3.0]]).unwrap();
        assert!(hsic(&x, &x, kp(1.0), kp(1.0)).unwrap() > 0.0);
    }

    #[test]
    fn hsic_matches_double_sum_n4() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random_samples(&mut rng, 4, 3);
        let y = random_samples(&mut rng, 4, 2);
        let got = hsic(&x, &y, kp(1.0), kp(1.0)).unwrap();
        let want = hsic_double_sum(&x, &y, 1.0, 1.0);
        assert!((got - want).abs() <= 1e-10 * want.abs().max(1e-300));
    }

    #[test]
    fn hsic_needs_two_samples() {
        let x = SampleMatrix::from_rows(&[[1.0]]).unwrap();
        assert!(matches!(
            hsic(&x, &x, kp(1.0), kp(1.0)),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn objective_special_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random_samples(&mut rng, 5, 3);
        let y = random_samples(&mut rng, 5, 2);
        let z = random_samples(&mut rng, 5, 2);
        let ks = ObjectiveKernels {
            x: kp(1.1),
            y: kp(0.9),
            z: kp(0.7),
        };
        let at0 = hsic_objective(&x, &y, &z, 0.0, ks).unwrap();
        assert_eq!(at0, hsic(&x, &z, ks.x, ks.z).unwrap());

        let zc = SampleMatrix::from_rows(&[[0.2, 0.2]; 5]).unwrap();
        assert!(hsic_objective(&x, &y, &zc, 3.0, ks).unwrap().abs() < 1e-15);

        let got = hsic_objective(&x, &y, &z, 2.5, ks).unwrap();
        let want = hsic_double_sum(&x, &z, 1.1, 0.7) - 2.5 * hsic_double_sum(&y, &z, 0.9, 0.7);
        assert!((got - want).abs() <= 1e-10 * want.abs());
        assert!(hsic_objective(&x, &y, &z, -1.0, ks).is_err());
    }

    #[test]
    fn median_distance_heuristic() {
        let s = SampleMatrix::from_rows(&[[0.0], [1.0], [3.0]]).unwrap();
        // distances 1, 2, 3
        assert_eq!(median_pairwise_distance(&s), Some(2.0));
        let same = SampleMatrix::from_rows(&[[1.0], [1.0]]).unwrap();
        assert_eq!(median_pairwise_distance(&same), None);
        assert_eq!(median_bandwidth(&same), 1.0);
        let onehot = SampleMatrix::from_rows(&[
            vec![1.0, 0.0],
            vec![1.0, 0.0],
            vec![1.0, 0.0],
            vec![1.0, 0.0],
            vec![0.0, 1.0],
        ])
        .unwrap();
        assert_eq!(median_pairwise_distance(&onehot), None);
        assert!((median_bandwidth(&onehot) - 2f64.sqrt()).abs() < 1e-15);
    }

    fn instance() -> impl Strategy<Value = (usize, usize, usize, u64, f64, f64)> {
        (2usize..=8, 1usize..=5, 1usize..=5, any::<u64>(), 0.3f64..3.0, 0.3f64..3.0)
    }

    proptest! {
        #[test]
        fn hsic_is_symmetric((n, dx, dy, seed, sx, sy) in instance()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = random_samples(&mut rng, n, dx);
            let y = random_samples(&mut rng, n, dy);
            let a = hsic(&x, &y, kp(sx), kp(sy)).unwrap();
            let b = hsic(&y, &x, kp(sy), kp(sx)).unwrap();
            prop_assert!((a - b).abs() <= 1e-12);
        }

        #[test]
        fn hsic_is_jointly_permutation_invariant((n, dx, dy, seed, sx, sy) in instance()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = random_samples(&mut rng, n, dx);
            let y = random_samples(&mut rng, n, dy);
            let mut perm: Vec<usize> = (0..n).collect();
            for i in (1..n).rev() {
                perm.swap(i, rng.random_range(0..=i));
            }
            let xp = SampleMatrix::new(x.view().select(Axis(0), &perm)).unwrap();
            let yp = SampleMatrix::new(y.view().select(Axis(0), &perm)).unwrap();
            let a = hsic(&x, &y, kp(sx), kp(sy)).unwrap();
            let b = hsic(&xp, &yp, kp(sx), kp(sy)).unwrap();
            prop_assert!((a - b).abs() <= 1e-10 * a.abs().max(1e-12));
        }

        #[test]
        fn trace_form_matches_double_sum((n, dx, dy, seed, sx, sy) in instance()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = random_samples(&mut rng, n, dx);
            let y = random_samples(&mut rng, n, dy);
            let got = hsic(&x, &y, kp(sx), kp(sy)).unwrap();
            let want = hsic_double_sum(&x, &y, sx, sy);
            prop_assert!((got - want).abs() <= 1e-10 * want.abs().max(1e-12));
        }

        #[test]
        fn gram_is_psd(n in 1usize..=16, d in 1usize..=5, seed in any::<u64>(), s in 0.2f64..3.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let g = gram(&random_samples(&mut rng, n, d), kp(s));
            for i in 0..n {
                prop_assert_eq!(g.values[[i, i]], 1.0);
                for j in 0..n {
                    prop_assert_eq!(g.values[[i, j]], g.values[[j, i]]);
                }
            }
            let min = jacobi_eigenvalues(&g.values).into_iter().fold(f64::INFINITY, f64::min);
            prop_assert!(min >= -1e-8, "smallest eigenvalue {}", min);
        }

        #[test]
        fn recentering_is_idempotent(n in 1usize..=8, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let c = center(&gram(&random_samples(&mut rng, n, 2), kp(1.0)));
            let again = center(&GramMatrix { values: c.values.clone(), centered: false });
            for (a, b) in c.values.iter().zip(again.values.iter()) {
                prop_assert!((a - b).abs() < 1e-15);
            }
        }
    }
}
