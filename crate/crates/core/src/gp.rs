//! Gaussian-process reference measure for the flow source.
//!
//! The kernel is `k(a, b) = variance * exp(-(a - b)² / (4 ℓ²))`. Prior draws
//! serve population synthesis; posterior draws conditioned on an observed
//! prefix serve forecasting. Both are pushed through softplus so the flow
//! starts from positive concentrations.

use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct RBFKernel {
    pub variance: f64,
    pub length_scale: f64,
}

impl RBFKernel {
    pub fn new(variance: f64, length_scale: f64) -> Result<Self> {
        if !(variance > 0.0 && variance.is_finite()) {
            return Err(Error::validation(format!(
                "kernel variance must be positive, got {variance}"
            )));
        }
        if !(length_scale > 0.0 && length_scale.is_finite()) {
            return Err(Error::validation(format!(
                "kernel length scale must be positive, got {length_scale}"
            )));
        }
        Ok(Self {
            variance,
            length_scale,
        })
    }

    #[inline]
    pub fn eval(&self, a: f64, b: f64) -> f64 {
        let d = a - b;
        self.variance * (-(d * d) / (4.0 * self.length_scale * self.length_scale)).exp()
    }
}

/// Dense row-major matrix, `rows x cols`.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }
}

pub fn kernel_matrix(a: &[f64], b: &[f64], kernel: &RBFKernel) -> Matrix {
    let mut m = Matrix::zeros(a.len(), b.len());
    for (i, &x) in a.iter().enumerate() {
        for (j, &y) in b.iter().enumerate() {
            m.set(i, j, kernel.eval(x, y));
        }
    }
    m
}

/// In-place lower Cholesky factor of a symmetric matrix. Returns `false` when
/// a pivot is not strictly positive.
fn cholesky_in_place(a: &mut Matrix) -> bool {
    let n = a.rows;
    for j in 0..n {
        let mut d = a.get(j, j);
        for k in 0..j {
            let l = a.get(j, k);
            d -= l * l;
        }
        if !(d > 0.0) || !d.is_finite() {
            return false;
        }
        let d = d.sqrt();
        a.set(j, j, d);
        for i in j + 1..n {
            let mut s = a.get(i, j);
            for k in 0..j {
                s -= a.get(i, k) * a.get(j, k);
            }
            a.set(i, j, s / d);
        }
        for k in j + 1..n {
            a.set(j, k, 0.0);
        }
    }
    true
}

/// Cholesky of `m + jitter * I`, escalating the jitter to 10x and 100x
/// before giving up. Returns the factor and the jitter that succeeded.
pub fn cholesky_with_jitter(m: &Matrix, jitter: f64) -> Result<(Matrix, f64)> {
    debug_assert_eq!(m.rows, m.cols);
    for scale in [1.0, 10.0, 100.0] {
        let eps = jitter * scale;
        let mut a = m.clone();
        for i in 0..a.rows {
            a.data[i * a.cols + i] += eps;
        }
        if cholesky_in_place(&mut a) {
            return Ok((a, eps));
        }
    }
    Err(Error::Numerical(format!(
        "Cholesky failed for a {n}x{n} covariance even with jitter {}",
        jitter * 100.0,
        n = m.rows
    )))
}

/// Solve `L x = b` for lower-triangular `L`.
fn solve_lower(l: &Matrix, b: &[f64]) -> Vec<f64> {
    let n = l.rows;
    let mut x = b.to_vec();
    for i in 0..n {
        let mut s = x[i];
        for k in 0..i {
            s -= l.get(i, k) * x[k];
        }
        x[i] = s / l.get(i, i);
    }
    x
}

/// Solve `Lᵀ x = b` for lower-triangular `L`.
fn solve_upper_t(l: &Matrix, b: &[f64]) -> Vec<f64> {
    let n = l.rows;
    let mut x = b.to_vec();
    for i in (0..n).rev() {
        let mut s = x[i];
        for k in i + 1..n {
            s -= l.get(k, i) * x[k];
        }
        x[i] = s / l.get(i, i);
    }
    x
}

fn check_increasing(times: &[f64], what: &str) -> Result<()> {
    if times.iter().any(|t| !t.is_finite()) {
        return Err(Error::validation(format!("{what}: non-finite time")));
    }
    if times.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::validation(format!(
            "{what}: times must be strictly increasing"
        )));
    }
    Ok(())
}

fn sample_with_factor(mean: &[f64], l: &Matrix, rng: &mut Rng) -> Vec<f64> {
    let n = mean.len();
    let xi: Vec<f64> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    (0..n)
        .map(|i| mean[i] + (0..=i).map(|k| l.get(i, k) * xi[k]).sum::<f64>())
        .collect()
}

/// Draw from `N(0, K + jitter I)` on `times`.
pub fn gp_prior_sample(
    times: &[f64],
    kernel: &RBFKernel,
    jitter: f64,
    rng: &mut Rng,
) -> Result<Vec<f64>> {
    check_increasing(times, "GP prior")?;
    if times.is_empty() {
        return Ok(Vec::new());
    }
    let k = kernel_matrix(times, times, kernel);
    let (l, _) = cholesky_with_jitter(&k, jitter)?;
    Ok(sample_with_factor(&vec![0.0; times.len()], &l, rng))
}

/// Exact GP regression on noise-free training values (regularised by `jitter`).
#[derive(Debug, Clone)]
pub struct GPPosterior {
    pub train_times: Vec<f64>,
    /// Lower Cholesky factor of `K(T, T) + jitter I`.
    pub chol: Matrix,
    /// `(K + jitter I)^{-1} y`.
    pub alpha: Vec<f64>,
    pub kernel: RBFKernel,
    pub jitter: f64,
}

pub fn gp_posterior(
    train_times: &[f64],
    train_values: &[f64],
    kernel: &RBFKernel,
    jitter: f64,
) -> Result<GPPosterior> {
    if train_times.is_empty() {
        return Err(Error::validation(
            "GP posterior needs at least one training point",
        ));
    }
    if train_times.len() != train_values.len() {
        return Err(Error::validation(
            "GP posterior: times and values differ in length",
        ));
    }
    check_increasing(train_times, "GP posterior")?;
    let k = kernel_matrix(train_times, train_times, kernel);
    let (chol, used) = cholesky_with_jitter(&k, jitter)?;
    let alpha = solve_upper_t(&chol, &solve_lower(&chol, train_values));
    Ok(GPPosterior {
        train_times: train_times.to_vec(),
        chol,
        alpha,
        kernel: *kernel,
        jitter: used,
    })
}

impl GPPosterior {
    pub fn mean(&self, query: &[f64]) -> Vec<f64> {
        query
            .iter()
            .map(|&q| {
                self.train_times
                    .iter()
                    .zip(&self.alpha)
                    .map(|(&t, &a)| self.kernel.eval(q, t) * a)
                    .sum()
            })
            .collect()
    }

    /// Posterior covariance `K(q, q) - K(q, T)(K + jitter I)^{-1} K(T, q)`.
    pub fn covariance(&self, query: &[f64]) -> Matrix {
        let m = query.len();
        // columns v_j = L^{-1} K(T, q_j)
        let vs: Vec<Vec<f64>> = query
            .iter()
            .map(|&q| {
                let kq: Vec<f64> = self
                    .train_times
                    .iter()
                    .map(|&t| self.kernel.eval(q, t))
                    .collect();
                solve_lower(&self.chol, &kq)
            })
            .collect();
        let mut cov = Matrix::zeros(m, m);
        for i in 0..m {
            for j in 0..=i {
                let dot: f64 = vs[i].iter().zip(&vs[j]).map(|(a, b)| a * b).sum();
                let c = self.kernel.eval(query[i], query[j]) - dot;
                cov.set(i, j, c);
                cov.set(j, i, c);
            }
        }
        cov
    }

    pub fn variance(&self, query: &[f64]) -> Vec<f64> {
        let cov = self.covariance(query);
        (0..query.len()).map(|i| cov.get(i, i)).collect()
    }
}

/// Draw from `N(mu*, Sigma* + jitter I)` at `query`.
pub fn gp_posterior_sample(post: &GPPosterior, query: &[f64], rng: &mut Rng) -> Result<Vec<f64>> {
    check_increasing(query, "GP posterior sample")?;
    if query.is_empty() {
        return Ok(Vec::new());
    }
    let mean = post.mean(query);
    let cov = post.covariance(query);
    let (l, _) = cholesky_with_jitter(&cov, post.jitter)?;
    Ok(sample_with_factor(&mean, &l, rng))
}

#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 20.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub fn softplus_transform(values: &[f64]) -> Vec<f64> {
    values.iter().map(|&x| softplus(x)).collect()
}

/// Source sample on the future grid: softplus of a GP prior draw without a
/// prefix, or of a GP posterior draw conditioned on the raw prefix values.
/// The prefix itself is left to the caller, unchanged.
pub fn reference_sample(
    prefix: Option<(&[f64], &[f64])>,
    future_times: &[f64],
    kernel: &RBFKernel,
    jitter: f64,
    rng: &mut Rng,
) -> Result<Vec<f64>> {
    let raw = match prefix {
        Some((times, values)) if !times.is_empty() => {
            if let (Some(&last), Some(&first)) = (times.last(), future_times.first()) {
                if first <= last {
                    return Err(Error::validation("future times must follow the prefix"));
                }
            }
            let post = gp_posterior(times, values, kernel, jitter)?;
            gp_posterior_sample(&post, future_times, rng)?
        }
        _ => gp_prior_sample(future_times, kernel, jitter, rng)?,
    };
    Ok(softplus_transform(&raw))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    const TABLE_VARIANCE: f64 = 1e-4;
    const TABLE_LENGTH: f64 = 1.7e-3;
    const TABLE_JITTER: f64 = 1e-7;

    #[test]
    fn kernel_values() {
        let k = RBFKernel::new(TABLE_VARIANCE, TABLE_LENGTH).unwrap();
        assert_eq!(k.eval(0.3, 0.3), TABLE_VARIANCE);
        let v = k.eval(0.0, 2.0 * TABLE_LENGTH);
        assert!((v - TABLE_VARIANCE * (-1.0f64).exp()).abs() < 1e-18);
        let mut prev = f64::INFINITY;
        for i in 0..50 {
            let v = k.eval(0.0, i as f64 * 1e-3);
            assert!(v <= prev);
            prev = v;
        }
        assert!(k.eval(0.0, 1.0) < 1e-300);
        assert!(RBFKernel::new(0.0, 1.0).is_err());
        assert!(RBFKernel::new(1.0, -1.0).is_err());
    }

    #[test]
    fn single_point_prior_variance() {
        let k = RBFKernel::new(0.5, 0.1).unwrap();
        let mut rng = stream(1, &[]);
        let n = 10_000;
        let xs: Vec<f64> = (0..n)
            .map(|_| gp_prior_sample(&[0.2], &k, TABLE_JITTER, &mut rng).unwrap()[0])
            .collect();
        let var = xs.iter().map(|x| x * x).sum::<f64>() / n as f64;
        let target = 0.5 + TABLE_JITTER;
        assert!((var - target).abs() / target < 0.05, "{var}");
    }

    #[test]
    fn close_points_are_highly_correlated() {
        let k = RBFKernel::new(1.0, 0.5).unwrap();
        let mut rng = stream(2, &[]);
        let mut corr = Vec::new();
        for lag in [0.5, 0.05, 0.005] {
            let n = 4000;
            let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
            for _ in 0..n {
                let s = gp_prior_sample(&[0.0, lag], &k, 1e-9, &mut rng).unwrap();
                sxy += s[0] * s[1];
                sxx += s[0] * s[0];
                syy += s[1] * s[1];
            }
            corr.push(sxy / (sxx * syy).sqrt());
        }
        assert!(
            corr[2] > 0.99 && corr[2] > corr[1] && corr[1] > corr[0],
            "{corr:?}"
        );
    }

    #[test]
    fn prior_sample_reproducible() {
        let k = RBFKernel::new(TABLE_VARIANCE, TABLE_LENGTH).unwrap();
        let t = [0.0, 0.001, 0.01, 0.5];
        let a = gp_prior_sample(&t, &k, TABLE_JITTER, &mut stream(3, &[])).unwrap();
        let b = gp_prior_sample(&t, &k, TABLE_JITTER, &mut stream(3, &[])).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn posterior_interpolates_and_reverts() {
        let k = RBFKernel::new(1.0, 0.2).unwrap();
        let t = [0.0, 0.3, 0.45, 1.0];
        let y = [0.5, 1.2, -0.3, 0.8];
        let post = gp_posterior(&t, &y, &k, TABLE_JITTER).unwrap();
        for (m, yi) in post.mean(&t).iter().zip(&y) {
            assert!(((m - yi) / yi).abs() <= 1e-4, "{m} vs {yi}");
        }
        for v in post.variance(&t) {
            assert!(v <= TABLE_JITTER * (1.0 + 1e-6), "{v}");
        }
        let far = post.mean(&[50.0])[0];
        let far_var = post.variance(&[50.0])[0];
        assert!(far.abs() < 1e-12);
        assert!((far_var - 1.0).abs() < 1e-12);
    }

    #[test]
    fn posterior_variance_bounded_by_prior() {
        let k = RBFKernel::new(2.0, 0.1).unwrap();
        let t = [0.1, 0.2, 0.7];
        let post = gp_posterior(&t, &[1.0, 2.0, 3.0], &k, TABLE_JITTER).unwrap();
        let q: Vec<f64> = (0..40).map(|i| i as f64 * 0.025).collect();
        for v in post.variance(&q) {
            assert!(v <= 2.0 + TABLE_JITTER && v >= -1e-12);
        }
    }

    #[test]
    fn posterior_sample_mean_matches_clt() {
        let k = RBFKernel::new(1.0, 0.3).unwrap();
        let post = gp_posterior(&[0.0, 0.4], &[1.0, -0.5], &k, TABLE_JITTER).unwrap();
        let q = [0.6, 0.9];
        let mu = post.mean(&q);
        let sd: Vec<f64> = post.variance(&q).iter().map(|v| v.sqrt()).collect();
        let mut rng = stream(4, &[]);
        let n = 10_000;
        let mut acc = [0.0; 2];
        for _ in 0..n {
            let s = gp_posterior_sample(&post, &q, &mut rng).unwrap();
            acc[0] += s[0];
            acc[1] += s[1];
        }
        for i in 0..2 {
            let m = acc[i] / n as f64;
            assert!(
                (m - mu[i]).abs() <= 3.0 * sd[i] / (n as f64).sqrt(),
                "{m} vs {}",
                mu[i]
            );
        }
        let a = gp_posterior_sample(&post, &q, &mut stream(8, &[])).unwrap();
        let b = gp_posterior_sample(&post, &q, &mut stream(8, &[])).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn posterior_sample_at_training_points_returns_data() {
        let k = RBFKernel::new(1.0, 0.3).unwrap();
        let t = [0.1, 0.5];
        let y = [0.4, 0.9];
        let post = gp_posterior(&t, &y, &k, 1e-12).unwrap();
        let s = gp_posterior_sample(&post, &t, &mut stream(0, &[])).unwrap();
        for (a, b) in s.iter().zip(&y) {
            assert!((a - b).abs() < 1e-4);
        }
    }

    #[test]
    fn softplus_values() {
        assert!((softplus(0.0) - std::f64::consts::LN_2).abs() < 1e-16);
        assert!((softplus(50.0) - 50.0).abs() < 1e-12);
        assert!(softplus_transform(&[-40.0, -1.0, 0.0, 3.0, 700.0])
            .iter()
            .all(|&v| v > 0.0));
    }

    #[test]
    fn reference_sample_branches() {
        let k = RBFKernel::new(TABLE_VARIANCE, TABLE_LENGTH).unwrap();
        let fut = [0.2, 0.5, 0.9];
        let a = reference_sample(None, &fut, &k, TABLE_JITTER, &mut stream(5, &[])).unwrap();
        let raw = gp_prior_sample(&fut, &k, TABLE_JITTER, &mut stream(5, &[])).unwrap();
        assert_eq!(a, softplus_transform(&raw));

        // prefix at a constant c: the adjacent query inherits c
        let c = 0.7;
        let kk = RBFKernel::new(1.0, 0.1).unwrap();
        let prefix_t = [0.0, 0.05, 0.1];
        let mut rng = stream(6, &[]);
        let n = 2000;
        let mean = (0..n)
            .map(|_| {
                reference_sample(
                    Some((&prefix_t, &[c, c, c])),
                    &[0.1 + 1e-4],
                    &kk,
                    TABLE_JITTER,
                    &mut rng,
                )
                .unwrap()[0]
            })
            .sum::<f64>()
            / n as f64;
        assert!(
            (mean - softplus(c)).abs() < 1e-3,
            "{mean} vs {}",
            softplus(c)
        );

        assert!(reference_sample(
            Some((&prefix_t, &[c, c, c])),
            &[0.05],
            &kk,
            TABLE_JITTER,
            &mut rng
        )
        .is_err());
    }
}
