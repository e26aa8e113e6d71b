//! Continuum operator attention on irregular grids.
//!
//! Softmax normalisation is replaced by quadrature: for query `i`
//!
//! ```text
//!            Σ_k e^{S_ik} w_k V_k
//! out_i = ───────────────────────────────────────
//!         ½ Σ_{k≥2} (e^{S_ik} + e^{S_i,k-1}) Δτ_k
//! ```
//!
//! with trapezoidal weights `w_k` normalised to unit sum per key segment
//! (one segment per subject) and increments `Δτ_k` rescaled by the same
//! constant, so the ratio equals the unnormalised formula. Scores are
//! stabilised by subtracting the row maximum, which cancels in the ratio.

use crate::error::{Error, Result};
use crate::nn::tensor::{dot, Tensor};
use crate::nn::{linear, register_linear, ParamStore, Tape, Var};
use crate::rng::Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct QuadratureWeights {
    pub weights: Vec<f64>,
    pub valid: Vec<bool>,
}

/// Raw trapezoid weights over the valid positions of one grid, before
/// normalisation. Padding positions are skipped when forming increments.
fn raw_trapezoid(times: &[f64], valid: &[bool]) -> Vec<f64> {
    let idx: Vec<usize> = (0..times.len()).filter(|&i| valid[i]).collect();
    let mut raw = vec![0.0; times.len()];
    for (pos, &k) in idx.iter().enumerate() {
        let left = if pos > 0 {
            times[k] - times[idx[pos - 1]]
        } else {
            0.0
        };
        let right = if pos + 1 < idx.len() {
            times[idx[pos + 1]] - times[k]
        } else {
            0.0
        };
        raw[k] = 0.5 * (left + right);
    }
    raw
}

/// Trapezoidal quadrature weights normalised to unit sum over the valid
/// positions. A grid of one valid point, or of coincident points, gets
/// uniform weights.
pub fn trapezoid_weights(times: &[f64], valid: &[bool]) -> Result<QuadratureWeights> {
    if times.len() != valid.len() {
        return Err(Error::shape(
            "quadrature mask",
            &[times.len()],
            &[valid.len()],
        ));
    }
    let count = valid.iter().filter(|&&v| v).count();
    if count == 0 {
        return Err(Error::validation("quadrature grid has no valid positions"));
    }
    let raw = raw_trapezoid(times, valid);
    let total: f64 = raw.iter().sum();
    let weights = if total > 0.0 {
        raw.iter().map(|w| w / total).collect()
    } else {
        valid
            .iter()
            .map(|&v| if v { 1.0 / count as f64 } else { 0.0 })
            .collect()
    };
    Ok(QuadratureWeights {
        weights,
        valid: valid.to_vec(),
    })
}

/// Key-side quadrature for attention: numerator weights and the linear
/// coefficients of the trapezoidal partition-function estimate.
#[derive(Debug, Clone, PartialEq)]
pub struct KeyGrid {
    pub weights: Vec<f64>,
    /// Rescaled increment `Δτ_k / c_s` to the previous valid key of the same
    /// segment; zero for the first key of a segment and for padding.
    pub increments: Vec<f64>,
    /// Previous valid key of the same segment.
    pub prev: Vec<Option<usize>>,
    /// `β_k` such that the trapezoid sum equals `Σ_k e_k β_k`.
    pub denom_coef: Vec<f64>,
    pub valid: Vec<bool>,
}

impl KeyGrid {
    /// One segment per distinct `segment` id; segments must be contiguous
    /// and sorted by time within themselves.
    pub fn from_segments(times: &[f64], valid: &[bool], segment: &[usize]) -> Result<Self> {
        let n = times.len();
        if valid.len() != n || segment.len() != n {
            return Err(Error::shape(
                "key grid",
                &[n],
                &[valid.len().min(segment.len())],
            ));
        }
        let mut weights = vec![0.0; n];
        let mut increments = vec![0.0; n];
        let mut prev = vec![None; n];
        let mut denom_coef = vec![0.0; n];
        let mut start = 0;
        while start < n {
            let mut end = start + 1;
            while end < n && segment[end] == segment[start] {
                end += 1;
            }
            let seg_valid = &valid[start..end];
            if seg_valid.iter().any(|&v| v) {
                let q = trapezoid_weights(&times[start..end], seg_valid)?;
                let raw = raw_trapezoid(&times[start..end], seg_valid);
                let total: f64 = raw.iter().sum();
                let mut last = None;
                for k in start..end {
                    weights[k] = q.weights[k - start];
                    if !valid[k] {
                        continue;
                    }
                    if let Some(p) = last {
                        if total > 0.0 {
                            increments[k] = (times[k] - times[p]) / total;
                        }
                        prev[k] = Some(p);
                    }
                    last = Some(k);
                }
                for k in start..end {
                    if !valid[k] {
                        continue;
                    }
                    denom_coef[k] = if total > 0.0 {
                        let next = (k + 1..end)
                            .find(|&j| valid[j])
                            .map_or(0.0, |j| increments[j]);
                        0.5 * (increments[k] + next)
                    } else {
                        // degenerate segment: empty trapezoid sum, use the weights
                        weights[k]
                    };
                }
            }
            start = end;
        }
        Ok(Self {
            weights,
            increments,
            prev,
            denom_coef,
            valid: valid.to_vec(),
        })
    }

    pub fn single(times: &[f64], valid: &[bool]) -> Result<Self> {
        Self::from_segments(times, valid, &vec![0; times.len()])
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    /// The trapezoid partition estimate written term by term.
    pub fn trapezoid_denominator(&self, e: &[f64]) -> f64 {
        let mut s = 0.0;
        for k in 0..self.len() {
            if let Some(p) = self.prev[k] {
                s += 0.5 * (e[k] + e[p]) * self.increments[k];
            } else if self.valid[k]
                && self.denom_coef[k] == self.weights[k]
                && self.increments[k] == 0.0
            {
                // only degenerate segments contribute without an increment
                let seg_degenerate = !(0..self.len()).any(|j| self.prev[j] == Some(k));
                if seg_degenerate {
                    s += e[k] * self.weights[k];
                }
            }
        }
        s
    }
}

/// Which keys each query may attend to. Rows of padded queries are empty
/// and produce zero output.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMask {
    pub rows: usize,
    pub cols: usize,
    pub row_keys: Vec<Vec<usize>>,
    pub query_valid: Vec<bool>,
}

impl AttentionMask {
    /// Every valid query sees every valid key.
    pub fn dense(query_valid: &[bool], key_valid: &[bool]) -> Self {
        let keys: Vec<usize> = (0..key_valid.len()).filter(|&k| key_valid[k]).collect();
        Self {
            rows: query_valid.len(),
            cols: key_valid.len(),
            row_keys: query_valid
                .iter()
                .map(|&q| if q { keys.clone() } else { Vec::new() })
                .collect(),
            query_valid: query_valid.to_vec(),
        }
    }

    pub fn allowed(&self, i: usize, j: usize) -> bool {
        self.row_keys[i].binary_search(&j).is_ok()
    }

    /// Additive score mask: 0 where allowed, -inf elsewhere.
    pub fn additive(&self) -> Vec<f64> {
        let mut m = vec![f64::NEG_INFINITY; self.rows * self.cols];
        for (i, keys) in self.row_keys.iter().enumerate() {
            for &k in keys {
                m[i * self.cols + k] = 0.0;
            }
        }
        m
    }

    pub fn validate(&self) -> Result<()> {
        for (i, keys) in self.row_keys.iter().enumerate() {
            if self.query_valid[i] && keys.is_empty() {
                return Err(Error::validation(format!(
                    "attention row {i} has every key masked"
                )));
            }
        }
        Ok(())
    }

    fn total_allowed(&self) -> usize {
        self.row_keys.iter().map(Vec::len).sum()
    }
}

/// Unmasked iff both positions are valid and belong to the same subject.
pub fn block_diagonal_mask(subject: &[usize], valid: &[bool]) -> AttentionMask {
    let n = subject.len();
    let row_keys = (0..n)
        .map(|i| {
            if !valid[i] {
                return Vec::new();
            }
            (0..n)
                .filter(|&j| valid[j] && subject[j] == subject[i])
                .collect()
        })
        .collect();
    AttentionMask {
        rows: n,
        cols: n,
        row_keys,
        query_valid: valid.to_vec(),
    }
}

/// Cached forward state needed by the backward pass.
#[derive(Debug, Clone)]
pub(crate) struct AttnCache {
    /// `e_ik / D_i` per head over the allowed keys of each row, row-major.
    pub probs: Vec<f64>,
    /// Per head and row: true when the zero-denominator fallback was used.
    pub fallback: Vec<bool>,
}

/// Multi-head operator attention. `q: n_q×d`, `k, v: n_k×d` row-major; heads
/// split the feature dimension into contiguous blocks.
pub(crate) fn attention_forward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    n_q: usize,
    n_k: usize,
    d: usize,
    heads: usize,
    mask: &AttentionMask,
    grid: &KeyGrid,
) -> Result<(Vec<f64>, AttnCache)> {
    if d % heads != 0 {
        return Err(Error::validation(format!(
            "dimension {d} not divisible by {heads} heads"
        )));
    }
    if mask.rows != n_q || mask.cols != n_k || grid.len() != n_k {
        return Err(Error::shape(
            "attention mask",
            &[n_q, n_k],
            &[mask.rows, mask.cols],
        ));
    }
    mask.validate()?;
    let da = d / heads;
    let scale = 1.0 / (da as f64).sqrt();
    let total = mask.total_allowed();
    let mut out = vec![0.0; n_q * d];
    let mut probs = vec![0.0; heads * total];
    let mut fallback = vec![false; heads * n_q];
    let mut e = Vec::new();

    for h in 0..heads {
        let off = h * da;
        let mut p_off = h * total;
        for i in 0..n_q {
            let keys = &mask.row_keys[i];
            if keys.is_empty() {
                continue;
            }
            let qi = &q[i * d + off..i * d + off + da];
            e.clear();
            e.extend(
                keys.iter()
                    .map(|&j| dot(qi, &k[j * d + off..j * d + off + da]) * scale),
            );
            let mx = e.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut denom = 0.0;
            for (ej, &j) in e.iter_mut().zip(keys) {
                *ej = (*ej - mx).exp();
                denom += *ej * grid.denom_coef[j];
            }
            if !(denom > 0.0) {
                denom = e
                    .iter()
                    .zip(keys)
                    .map(|(ej, &j)| ej * grid.weights[j])
                    .sum();
                fallback[h * n_q + i] = true;
                if !(denom > 0.0) {
                    return Err(Error::Numerical(format!(
                        "attention row {i} has zero quadrature mass"
                    )));
                }
            }
            let oi = &mut out[i * d + off..i * d + off + da];
            for (pj, (&ej, &j)) in probs[p_off..p_off + keys.len()]
                .iter_mut()
                .zip(e.iter().zip(keys))
            {
                let p = ej / denom;
                *pj = p;
                let a = p * grid.weights[j];
                for (o, &vv) in oi.iter_mut().zip(&v[j * d + off..j * d + off + da]) {
                    *o += a * vv;
                }
            }
            p_off += keys.len();
        }
    }
    Ok((out, AttnCache { probs, fallback }))
}

/// Accumulates gradients of `attention_forward` into `gq, gk, gv`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn attention_backward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    out: &[f64],
    g_out: &[f64],
    n_q: usize,
    d: usize,
    heads: usize,
    mask: &AttentionMask,
    grid: &KeyGrid,
    cache: &AttnCache,
    gq: &mut [f64],
    gk: &mut [f64],
    gv: &mut [f64],
) {
    let da = d / heads;
    let scale = 1.0 / (da as f64).sqrt();
    let total = mask.total_allowed();
    for h in 0..heads {
        let off = h * da;
        let mut p_off = h * total;
        for i in 0..n_q {
            let keys = &mask.row_keys[i];
            if keys.is_empty() {
                continue;
            }
            let go = &g_out[i * d + off..i * d + off + da];
            let oi = &out[i * d + off..i * d + off + da];
            let go_dot_o = dot(go, oi);
            let use_w = cache.fallback[h * n_q + i];
            let qi = &q[i * d + off..i * d + off + da];
            for (&p, &j) in cache.probs[p_off..p_off + keys.len()].iter().zip(keys) {
                let a = p * grid.weights[j];
                let b = p * if use_w {
                    grid.weights[j]
                } else {
                    grid.denom_coef[j]
                };
                let vj = &v[j * d + off..j * d + off + da];
                for (g, &x) in gv[j * d + off..j * d + off + da].iter_mut().zip(go) {
                    *g += a * x;
                }
                let gs = (a * dot(go, vj) - b * go_dot_o) * scale;
                if gs != 0.0 {
                    let kj = &k[j * d + off..j * d + off + da];
                    for (g, &x) in gq[i * d + off..i * d + off + da].iter_mut().zip(kj) {
                        *g += gs * x;
                    }
                    for (g, &x) in gk[j * d + off..j * d + off + da].iter_mut().zip(qi) {
                        *g += gs * x;
                    }
                }
            }
            p_off += keys.len();
        }
    }
}

/// Single-head operator attention on explicit `Q, K, V` matrices.
pub fn operator_attention(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    mask: &AttentionMask,
    grid: &KeyGrid,
) -> Result<Tensor> {
    let d = q.cols();
    if k.cols() != d || v.cols() != d || k.rows() != v.rows() {
        return Err(Error::shape(
            "operator attention",
            &[k.rows(), d],
            &[v.rows(), v.cols()],
        ));
    }
    let (out, _) = attention_forward(
        &q.data,
        &k.data,
        &v.data,
        q.rows(),
        k.rows(),
        d,
        1,
        mask,
        grid,
    )?;
    Ok(Tensor::matrix(q.rows(), d, out))
}

/// Register `W_Q, W_K, W_V` (no bias) and the output projection under `name`.
pub fn register_attention(
    store: &mut ParamStore,
    name: &str,
    d: usize,
    rng: &mut Rng,
) -> Result<()> {
    for proj in ["q", "k", "v"] {
        register_linear(store, &format!("{name}.{proj}"), d, d, false, rng)?;
    }
    register_linear(store, &format!("{name}.o"), d, d, true, rng)
}

/// Multi-head operator self-attention: projections of `x`, attention per head,
/// heads concatenated and output-projected.
pub fn self_op_attn<'a>(
    tape: &mut Tape<'a>,
    x: Var,
    name: &str,
    heads: usize,
    mask: &'a AttentionMask,
    grid: &'a KeyGrid,
) -> Result<Var> {
    cross_op_attn(tape, x, x, name, heads, mask, grid)
}

/// Queries from `x`, keys and values from `y` with quadrature over `y`'s grid.
pub fn cross_op_attn<'a>(
    tape: &mut Tape<'a>,
    x: Var,
    y: Var,
    name: &str,
    heads: usize,
    mask: &'a AttentionMask,
    grid: &'a KeyGrid,
) -> Result<Var> {
    let q = linear(tape, x, &format!("{name}.q"), false)?;
    let k = linear(tape, y, &format!("{name}.k"), false)?;
    let v = linear(tape, y, &format!("{name}.v"), false)?;
    let a = tape.attention(q, k, v, heads, mask, grid)?;
    linear(tape, a, &format!("{name}.o"), true)
}

/// Standard scaled dot-product softmax attention, single head.
pub fn softmax_attention(q: &Tensor, k: &Tensor, v: &Tensor) -> Tensor {
    let d = q.cols();
    let scale = 1.0 / (d as f64).sqrt();
    let mut out = vec![0.0; q.rows() * d];
    for i in 0..q.rows() {
        let s: Vec<f64> = (0..k.rows())
            .map(|j| dot(q.row(i), k.row(j)) * scale)
            .collect();
        let mx = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = s.iter().map(|x| (x - mx).exp()).collect();
        let z: f64 = e.iter().sum();
        for j in 0..k.rows() {
            for c in 0..d {
                out[i * d + c] += e[j] / z * v.get(j, c);
            }
        }
    }
    Tensor::matrix(q.rows(), d, out)
}

/// Keys and values sampled as random smooth functions of time: each column
/// is `Σ_f a_f sin(2π f τ) + b_f cos(2π f τ)` for `f ≤ 3` with standard
/// normal coefficients. Refining the grid then refines one fixed continuum
/// problem, which is what convergence to softmax attention refers to.
pub fn smooth_keys_values(times: &[f64], d: usize, seed: u64) -> (Tensor, Tensor) {
    use rand_distr::{Distribution, StandardNormal};
    let mut rng = crate::rng::stream(seed, &[]);
    let mut coef =
        |n: usize| -> Vec<f64> { (0..n).map(|_| StandardNormal.sample(&mut rng)).collect() };
    let (ck, cv) = (coef(d * 8), coef(d * 8));
    let eval = |c: &[f64]| -> Tensor {
        let mut data = Vec::with_capacity(times.len() * d);
        for &t in times {
            for col in 0..d {
                let mut x = 0.0;
                for f in 0..4 {
                    let w = 2.0 * std::f64::consts::PI * f as f64 * t;
                    x += c[col * 8 + 2 * f] * w.sin() + c[col * 8 + 2 * f + 1] * w.cos();
                }
                data.push(x / 2.0);
            }
        }
        Tensor::matrix(times.len(), d, data)
    };
    (eval(&ck), eval(&cv))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use rand_distr::{Distribution, StandardNormal};

    fn random(rows: usize, cols: usize, seed: u64) -> Tensor {
        let mut rng = stream(seed, &[]);
        Tensor::matrix(
            rows,
            cols,
            (0..rows * cols)
                .map(|_| StandardNormal.sample(&mut rng))
                .collect(),
        )
    }

    #[test]
    fn three_point_weights() {
        let w = trapezoid_weights(&[0.0, 1.0, 2.0], &[true; 3]).unwrap();
        assert_eq!(w.weights, vec![0.25, 0.5, 0.25]);
    }

    #[test]
    fn uniform_grid_weights() {
        let m = 9;
        let t: Vec<f64> = (0..m).map(|i| i as f64 * 0.3).collect();
        let w = trapezoid_weights(&t, &vec![true; m]).unwrap().weights;
        let interior = w[1];
        for x in &w[1..m - 1] {
            assert!((x - interior).abs() < 1e-15);
        }
        assert!((w[0] - interior / 2.0).abs() < 1e-15);
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn single_and_padded_weights() {
        assert_eq!(
            trapezoid_weights(&[3.0], &[true]).unwrap().weights,
            vec![1.0]
        );
        let w = trapezoid_weights(&[0.0, 1.0, 0.0, 3.0], &[true, true, false, true]).unwrap();
        assert_eq!(w.weights[2], 0.0);
        assert!((w.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        // increments skip the padded slot: raw [0.5, 1.5, 0, 1.0] / 3
        assert!((w.weights[1] - 0.5).abs() < 1e-15);
        assert!(trapezoid_weights(&[0.0, 1.0], &[false, false]).is_err());
    }

    #[test]
    fn denominator_coefficients_expand_the_trapezoid() {
        let times = [0.0, 0.4, 1.1, 2.0, 0.0, 0.5, 3.0, 9.0];
        let valid = [true, true, true, true, true, true, false, true];
        let seg = [0, 0, 0, 0, 1, 1, 1, 2];
        let g = KeyGrid::from_segments(&times, &valid, &seg).unwrap();
        let e: Vec<f64> = (0..8).map(|i| 0.3 + (i as f64).sin().abs()).collect();
        let lin: f64 = e.iter().zip(&g.denom_coef).map(|(a, b)| a * b).sum();
        assert!((lin - g.trapezoid_denominator(&e)).abs() < 1e-14);
        // each segment's weights sum to one
        assert!((g.weights[..4].iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!((g.weights[4..7].iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(g.weights[7], 1.0);
    }

    #[test]
    fn single_key_returns_its_value() {
        let q = random(3, 4, 1);
        let k = random(1, 4, 2);
        let v = random(1, 4, 3);
        let grid = KeyGrid::single(&[0.7], &[true]).unwrap();
        let mask = AttentionMask::dense(&[true; 3], &[true]);
        let out = operator_attention(&q, &k, &v, &mask, &grid).unwrap();
        for i in 0..3 {
            for c in 0..4 {
                assert!((out.get(i, c) - v.get(0, c)).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn identical_values_pass_through() {
        let m = 7;
        let q = random(2, 3, 4);
        let krow = random(1, 3, 5);
        let vrow = random(1, 3, 6);
        let k = Tensor::matrix(m, 3, krow.data.repeat(m));
        let v = Tensor::matrix(m, 3, vrow.data.repeat(m));
        let times = [0.0, 0.1, 0.15, 0.6, 0.61, 0.9, 2.0];
        let grid = KeyGrid::single(&times, &[true; 7]).unwrap();
        let mask = AttentionMask::dense(&[true; 2], &[true; 7]);
        let out = operator_attention(&q, &k, &v, &mask, &grid).unwrap();
        for i in 0..2 {
            for c in 0..3 {
                assert!((out.get(i, c) - vrow.data[c]).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn converges_to_softmax_on_uniform_grids() {
        let d = 8;
        let mut devs = Vec::new();
        for m in [16, 64, 256] {
            let q = random(5, d, 10);
            let times: Vec<f64> = (0..m).map(|i| i as f64 / (m - 1) as f64).collect();
            let (k, v) = smooth_keys_values(&times, d, 11);
            let grid = KeyGrid::single(&times, &vec![true; m]).unwrap();
            let mask = AttentionMask::dense(&[true; 5], &vec![true; m]);
            let op = operator_attention(&q, &k, &v, &mask, &grid).unwrap();
            let sm = softmax_attention(&q, &k, &v);
            let num: f64 = op
                .data
                .iter()
                .zip(&sm.data)
                .map(|(a, b)| (a - b).powi(2))
                .sum();
            devs.push((num / sm.norm_sq()).sqrt());
        }
        assert!(devs[1] <= 0.05, "{devs:?}");
        assert!(devs[0] > devs[1] && devs[1] > devs[2], "{devs:?}");
    }

    #[test]
    fn score_shift_invariance() {
        // adding a constant to every key's score for a query leaves the output unchanged;
        // shift along the query direction: k_j + c q_i / |q_i|² * sqrt(d) raises S_ij by c.
        let q = random(1, 4, 20);
        let k = random(5, 4, 21);
        let v = random(5, 4, 22);
        let times = [0.0, 0.2, 0.5, 0.55, 1.0];
        let grid = KeyGrid::single(&times, &[true; 5]).unwrap();
        let mask = AttentionMask::dense(&[true], &[true; 5]);
        let base = operator_attention(&q, &k, &v, &mask, &grid).unwrap();
        let qn = q.norm_sq();
        let c = 37.0;
        let shifted: Vec<f64> = (0..5)
            .flat_map(|j| (0..4).map(move |col| (j, col)))
            .map(|(j, col)| k.get(j, col) + c * q.data[col] / qn * 2.0)
            .collect();
        let k2 = Tensor::matrix(5, 4, shifted);
        let out = operator_attention(&q, &k2, &v, &mask, &grid).unwrap();
        for (a, b) in out.data.iter().zip(&base.data) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn block_mask_structure() {
        let m = block_diagonal_mask(&[0, 0, 0, 1, 1], &[true; 5]);
        for i in 0..5 {
            for j in 0..5 {
                assert_eq!(m.allowed(i, j), (i < 3) == (j < 3));
            }
        }
        let single = block_diagonal_mask(&[4, 4, 4], &[true, false, true]);
        assert_eq!(single.row_keys[0], vec![0, 2]);
        assert!(single.row_keys[1].is_empty());
        assert!(!single.allowed(2, 1));
        let add = single.additive();
        assert_eq!(add[1], f64::NEG_INFINITY);
        assert_eq!(add[0], 0.0);
    }

    #[test]
    fn all_masked_valid_row_is_an_error() {
        let mask = AttentionMask {
            rows: 1,
            cols: 2,
            row_keys: vec![vec![]],
            query_valid: vec![true],
        };
        let grid = KeyGrid::single(&[0.0, 1.0], &[true, true]).unwrap();
        let t = random(1, 2, 0);
        let kv = random(2, 2, 1);
        assert!(operator_attention(&t, &kv, &kv, &mask, &grid).is_err());
    }

    #[test]
    fn gradients_match_finite_differences() {
        let (nq, nk, d, heads) = (2, 3, 4, 2);
        let q = random(nq, d, 30);
        let k = random(nk, d, 31);
        let v = random(nk, d, 32);
        let grid = KeyGrid::single(&[0.0, 0.3, 1.0], &[true; 3]).unwrap();
        let mask = AttentionMask::dense(&[true; 2], &[true; 3]);
        let w = random(nq, d, 33);
        let loss = |q: &[f64], k: &[f64], v: &[f64]| -> f64 {
            let (o, _) = attention_forward(q, k, v, nq, nk, d, heads, &mask, &grid).unwrap();
            o.iter().zip(&w.data).map(|(a, b)| a * b).sum()
        };
        let (out, cache) =
            attention_forward(&q.data, &k.data, &v.data, nq, nk, d, heads, &mask, &grid).unwrap();
        let (mut gq, mut gk, mut gv) = (vec![0.0; nq * d], vec![0.0; nk * d], vec![0.0; nk * d]);
        attention_backward(
            &q.data, &k.data, &v.data, &out, &w.data, nq, d, heads, &mask, &grid, &cache, &mut gq,
            &mut gk, &mut gv,
        );
        let h = 1e-6;
        let check = |which: usize, grad: &[f64]| {
            for idx in 0..grad.len() {
                let mut args = [q.data.clone(), k.data.clone(), v.data.clone()];
                args[which][idx] += h;
                let up = loss(&args[0], &args[1], &args[2]);
                args[which][idx] -= 2.0 * h;
                let dn = loss(&args[0], &args[1], &args[2]);
                let fd = (up - dn) / (2.0 * h);
                let rel = (fd - grad[idx]).abs() / fd.abs().max(grad[idx].abs()).max(1e-8);
                assert!(
                    rel <= 1e-5,
                    "arg {which} idx {idx}: fd {fd} vs {}",
                    grad[idx]
                );
            }
        };
        check(0, &gq);
        check(1, &gk);
        check(2, &gv);
    }

    #[test]
    fn identity_projections_reduce_to_raw_attention() {
        let d = 4;
        let mut ps = ParamStore::new();
        let eye: Vec<f64> = (0..d * d)
            .map(|i| if i % (d + 1) == 0 { 1.0 } else { 0.0 })
            .collect();
        for p in ["q", "k", "v", "o"] {
            ps.insert(format!("a.{p}.w"), Tensor::matrix(d, d, eye.clone()))
                .unwrap();
        }
        ps.insert("a.o.b", Tensor::zeros(&[d])).unwrap();
        let x = random(5, d, 40);
        let times = [0.0, 0.1, 0.3, 0.35, 0.9];
        let grid = KeyGrid::single(&times, &[true; 5]).unwrap();
        let mask = AttentionMask::dense(&[true; 5], &[true; 5]);
        let mut tape = Tape::new(&ps);
        let xv = tape.input(5, d, x.data.clone()).unwrap();
        let out = self_op_attn(&mut tape, xv, "a", 1, &mask, &grid).unwrap();
        let raw = operator_attention(&x, &x, &x, &mask, &grid).unwrap();
        assert_eq!(tape.shape(out), (5, d));
        for (a, b) in tape.value(out).iter().zip(&raw.data) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn block_masked_self_attention_isolates_subjects() {
        let d = 4;
        let mut ps = ParamStore::new();
        register_attention(&mut ps, "a", d, &mut stream(3, &[])).unwrap();
        let subject = [0, 0, 0, 1, 1];
        let times = [0.0, 0.5, 1.0, 0.0, 2.0];
        let grid = KeyGrid::from_segments(&times, &[true; 5], &subject).unwrap();
        let mask = block_diagonal_mask(&subject, &[true; 5]);
        let run = |x: &[f64]| {
            let mut tape = Tape::new(&ps);
            let xv = tape.input(5, d, x.to_vec()).unwrap();
            let o = self_op_attn(&mut tape, xv, "a", 2, &mask, &grid).unwrap();
            tape.value(o).to_vec()
        };
        let x = random(5, d, 41).data;
        let mut x2 = x.clone();
        for v in &mut x2[3 * d..] {
            *v += 0.7;
        }
        let (a, b) = (run(&x), run(&x2));
        assert_eq!(a[..3 * d], b[..3 * d]);
        assert_ne!(a[3 * d..], b[3 * d..]);
    }

    #[test]
    fn cross_attention_to_a_single_key_and_masked_subjects() {
        let d = 4;
        let mut ps = ParamStore::new();
        register_attention(&mut ps, "c", d, &mut stream(4, &[])).unwrap();
        let x = random(3, d, 42).data;
        let y = random(4, d, 43).data;
        let grid =
            KeyGrid::from_segments(&[0.0, 1.0, 0.0, 1.0], &[true; 4], &[0, 0, 1, 1]).unwrap();
        // only the first subject is visible
        let mask = AttentionMask::dense(&[true; 3], &[true, true, false, false]);
        let run = |y: &[f64]| {
            let mut tape = Tape::new(&ps);
            let xv = tape.input(3, d, x.clone()).unwrap();
            let yv = tape.input(4, d, y.to_vec()).unwrap();
            let o = cross_op_attn(&mut tape, xv, yv, "c", 2, &mask, &grid).unwrap();
            assert_eq!(tape.shape(o), (3, d));
            tape.value(o).to_vec()
        };
        let mut y2 = y.clone();
        y2[2 * d..].iter_mut().for_each(|v| *v = -v.abs() * 3.0);
        assert_eq!(run(&y), run(&y2));

        // a single valid key: every query sees that key's value row through the output map
        let single = AttentionMask::dense(&[true; 3], &[false, true, false, false]);
        let mut tape = Tape::new(&ps);
        let xv = tape.input(3, d, x.clone()).unwrap();
        let yv = tape.input(4, d, y.clone()).unwrap();
        let o = cross_op_attn(&mut tape, xv, yv, "c", 2, &single, &grid).unwrap();
        let out = tape.value(o).to_vec();
        for i in 1..3 {
            for c in 0..d {
                assert!((out[i * d + c] - out[c]).abs() < 1e-15);
            }
        }
    }
}
