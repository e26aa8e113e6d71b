//! Reverse-mode autodiff over row-major f64 matrices.
//!
//! A tape is built per example; parameters are read from the store by index
//! without copying. `backward` returns gradients shaped like the store.

use rand::Rng as _;

use crate::attention::{attention_backward, attention_forward, AttentionMask, AttnCache, KeyGrid};
use crate::error::{Error, Result};
use crate::nn::params::ParamStore;
use crate::nn::tensor::{matmul_acc, matmul_at_acc, matmul_bt_acc};
use crate::rng::Rng;

pub const LAYER_NORM_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op<'a> {
    Input,
    Param(usize),
    MatMul(Var, Var),
    AddRow(Var, Var),
    Add(Var, Var),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        shift: Var,
        rstd: Vec<f64>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        mask: &'a AttentionMask,
        grid: &'a KeyGrid,
        cache: AttnCache,
    },
    MulConst(Var, Vec<f64>),
    MaskedMse {
        pred: Var,
        target: Vec<f64>,
        weight: Vec<f64>,
        total: f64,
    },
}

impl Op<'_> {
    fn name(&self) -> &'static str {
        match self {
            Op::Input => "input",
            Op::Param(_) => "param",
            Op::MatMul(..) => "matmul",
            Op::AddRow(..) => "add_row",
            Op::Add(..) => "add",
            Op::Gelu(_) => "gelu",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Attention { .. } => "operator_attention",
            Op::MulConst(..) => "mul_const",
            Op::MaskedMse { .. } => "masked_mse",
        }
    }
}

struct Node<'a> {
    op: Op<'a>,
    rows: usize,
    cols: usize,
    value: Vec<f64>,
}

pub struct Tape<'a> {
    params: &'a ParamStore,
    nodes: Vec<Node<'a>>,
    first_non_finite: Option<&'static str>,
}

/// Gradients of one backward pass.
pub struct Gradients {
    pub params: ParamStore,
    nodes: Vec<Vec<f64>>,
}

impl Gradients {
    /// Gradient with respect to any node; zeros if it did not influence the loss.
    pub fn wrt(&self, v: Var) -> &[f64] {
        &self.nodes[v.0]
    }
}

impl<'a> Tape<'a> {
    pub fn new(params: &'a ParamStore) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            first_non_finite: None,
        }
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        (self.nodes[v.0].rows, self.nodes[v.0].cols)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        match self.nodes[v.0].op {
            Op::Param(i) => &self.params.by_index(i).data,
            _ => &self.nodes[v.0].value,
        }
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v)[0]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Error naming the first op that produced a non-finite value.
    pub fn check_finite(&self) -> Result<()> {
        match self.first_non_finite {
            Some(op) => Err(Error::NonFinite { op: op.to_string() }),
            None => Ok(()),
        }
    }

    fn push(&mut self, op: Op<'a>, rows: usize, cols: usize, value: Vec<f64>) -> Var {
        debug_assert!(matches!(op, Op::Param(_)) || value.len() == rows * cols);
        if self.first_non_finite.is_none() && value.iter().any(|v| !v.is_finite()) {
            self.first_non_finite = Some(op.name());
        }
        self.nodes.push(Node {
            op,
            rows,
            cols,
            value,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn input(&mut self, rows: usize, cols: usize, data: Vec<f64>) -> Result<Var> {
        if data.len() != rows * cols {
            return Err(Error::shape("tape input", &[rows, cols], &[data.len()]));
        }
        Ok(self.push(Op::Input, rows, cols, data))
    }

    pub fn param(&mut self, name: &str) -> Result<Var> {
        let idx = self
            .params
            .index_of(name)
            .ok_or_else(|| Error::validation(format!("unknown parameter `{name}`")))?;
        let t = self.params.by_index(idx);
        let (rows, cols) = if t.shape.len() == 1 {
            (1, t.shape[0])
        } else {
            (t.rows(), t.cols())
        };
        Ok(self.push(Op::Param(idx), rows, cols, Vec::new()))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, k) = self.shape(a);
        let (k2, m) = self.shape(b);
        if k != k2 {
            return Err(Error::shape("matmul", &[n, k], &[k2, m]));
        }
        let mut out = vec![0.0; n * m];
        matmul_acc(self.value(a), self.value(b), &mut out, n, k, m);
        Ok(self.push(Op::MatMul(a, b), n, m, out))
    }

    /// `x + 1·row` with `row` broadcast over the rows of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (n, m) = self.shape(x);
        if self.shape(row) != (1, m) {
            let (r, c) = self.shape(row);
            return Err(Error::shape("add_row", &[1, m], &[r, c]));
        }
        let b = self.value(row);
        let out: Vec<f64> = self
            .value(x)
            .chunks(m)
            .flat_map(|r| r.iter().zip(b).map(|(a, b)| a + b))
            .collect();
        Ok(self.push(Op::AddRow(x, row), n, m, out))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            let (r, c) = self.shape(b);
            let (ra, ca) = self.shape(a);
            return Err(Error::shape("add", &[ra, ca], &[r, c]));
        }
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x + y)
            .collect();
        let (n, m) = self.shape(a);
        Ok(self.push(Op::Add(a, b), n, m, out))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|&v| gelu(v)).collect();
        let (n, m) = self.shape(x);
        self.push(Op::Gelu(x), n, m, out)
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, shift: Var) -> Result<Var> {
        let (n, m) = self.shape(x);
        if self.shape(gain) != (1, m) || self.shape(shift) != (1, m) {
            return Err(Error::shape(
                "layer_norm",
                &[1, m],
                &[self.shape(gain).0, self.shape(gain).1],
            ));
        }
        let (g, s) = (self.value(gain), self.value(shift));
        let mut out = vec![0.0; n * m];
        let mut rstd = vec![0.0; n];
        for (i, row) in self.value(x).chunks(m).enumerate() {
            let mean = row.iter().sum::<f64>() / m as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / m as f64;
            let r = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            rstd[i] = r;
            for j in 0..m {
                out[i * m + j] = (row[j] - mean) * r * g[j] + s[j];
            }
        }
        Ok(self.push(
            Op::LayerNorm {
                x,
                gain,
                shift,
                rstd,
            },
            n,
            m,
            out,
        ))
    }

    /// Multi-head operator attention on already projected `q, k, v`.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        mask: &'a AttentionMask,
        grid: &'a KeyGrid,
    ) -> Result<Var> {
        let (nq, d) = self.shape(q);
        let (nk, dk) = self.shape(k);
        if dk != d || self.shape(v) != (nk, d) {
            return Err(Error::shape("attention keys", &[nk, d], &[nk, dk]));
        }
        let (out, cache) = attention_forward(
            self.value(q),
            self.value(k),
            self.value(v),
            nq,
            nk,
            d,
            heads,
            mask,
            grid,
        )?;
        Ok(self.push(
            Op::Attention {
                q,
                k,
                v,
                heads,
                mask,
                grid,
                cache,
            },
            nq,
            d,
            out,
        ))
    }

    /// Elementwise product with a constant of the same shape.
    pub fn mul_const(&mut self, x: Var, c: Vec<f64>) -> Result<Var> {
        let (n, m) = self.shape(x);
        if c.len() != n * m {
            return Err(Error::shape("mul_const", &[n, m], &[c.len()]));
        }
        let out = self.value(x).iter().zip(&c).map(|(a, b)| a * b).collect();
        Ok(self.push(Op::MulConst(x, c), n, m, out))
    }

    /// Scale each row by a constant factor.
    pub fn mul_rows(&mut self, x: Var, factors: &[f64]) -> Result<Var> {
        let (n, m) = self.shape(x);
        if factors.len() != n {
            return Err(Error::shape("mul_rows", &[n], &[factors.len()]));
        }
        let c = factors
            .iter()
            .flat_map(|&f| std::iter::repeat_n(f, m))
            .collect();
        self.mul_const(x, c)
    }

    /// Inverted dropout; identity when `p == 0`.
    pub fn dropout(&mut self, x: Var, p: f64, rng: &mut Rng) -> Result<Var> {
        if p <= 0.0 {
            return Ok(x);
        }
        let (n, m) = self.shape(x);
        let keep = 1.0 / (1.0 - p);
        let c = (0..n * m)
            .map(|_| if rng.random_bool(p) { 0.0 } else { keep })
            .collect();
        self.mul_const(x, c)
    }

    /// `Σ w (pred − target)² / Σ w` as a 1×1 node.
    pub fn masked_mse(&mut self, pred: Var, target: Vec<f64>, weight: Vec<f64>) -> Result<Var> {
        let (n, m) = self.shape(pred);
        if target.len() != n * m || weight.len() != n * m {
            return Err(Error::shape("masked_mse", &[n, m], &[target.len()]));
        }
        let total: f64 = weight.iter().sum();
        if !(total > 0.0) {
            return Err(Error::validation("loss mask selects no entries"));
        }
        let p = self.value(pred);
        let s: f64 = (0..n * m)
            .map(|i| weight[i] * (p[i] - target[i]).powi(2))
            .sum();
        Ok(self.push(
            Op::MaskedMse {
                pred,
                target,
                weight,
                total,
            },
            1,
            1,
            vec![s / total],
        ))
    }

    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.shape(loss) != (1, 1) {
            let (r, c) = self.shape(loss);
            return Err(Error::shape("loss", &[1, 1], &[r, c]));
        }
        let mut grads: Vec<Vec<f64>> = self
            .nodes
            .iter()
            .map(|n| vec![0.0; n.rows * n.cols])
            .collect();
        grads[loss.0][0] = 1.0;
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if matches!(node.op, Op::Input | Op::Param(_)) {
                continue;
            }
            let g = std::mem::take(&mut grads[idx]);
            if g.iter().all(|&v| v == 0.0) {
                grads[idx] = g;
                continue;
            }
            let (n, m) = (node.rows, node.cols);
            match &node.op {
                Op::Input | Op::Param(_) => unreachable!(),
                Op::MatMul(a, b) => {
                    let k = self.nodes[a.0].cols;
                    matmul_bt_acc(&g, self.value(*b), &mut grads[a.0], n, m, k);
                    matmul_at_acc(self.value(*a), &g, &mut grads[b.0], n, k, m);
                }
                Op::AddRow(x, row) => {
                    add_into(&mut grads[x.0], &g);
                    let gr = &mut grads[row.0];
                    for r in g.chunks(m) {
                        add_into(gr, r);
                    }
                }
                Op::Add(a, b) => {
                    add_into(&mut grads[a.0], &g);
                    add_into(&mut grads[b.0], &g);
                }
                Op::Gelu(x) => {
                    let xv = self.value(*x);
                    for ((gx, &gy), &v) in grads[x.0].iter_mut().zip(&g).zip(xv) {
                        *gx += gy * gelu_grad(v);
                    }
                }
                Op::LayerNorm {
                    x,
                    gain,
                    shift,
                    rstd,
                } => {
                    let xv = self.value(*x);
                    let gamma = self.value(*gain);
                    let mut gg = vec![0.0; m];
                    let mut gs = vec![0.0; m];
                    let mut gx = vec![0.0; n * m];
                    let mut xhat = vec![0.0; m];
                    let mut gh = vec![0.0; m];
                    for i in 0..n {
                        let row = &xv[i * m..(i + 1) * m];
                        let mean = row.iter().sum::<f64>() / m as f64;
                        let r = rstd[i];
                        let (mut sum_gh, mut sum_ghx) = (0.0, 0.0);
                        for j in 0..m {
                            xhat[j] = (row[j] - mean) * r;
                            let gy = g[i * m + j];
                            gg[j] += gy * xhat[j];
                            gs[j] += gy;
                            gh[j] = gy * gamma[j];
                            sum_gh += gh[j];
                            sum_ghx += gh[j] * xhat[j];
                        }
                        for j in 0..m {
                            gx[i * m + j] =
                                r / m as f64 * (m as f64 * gh[j] - sum_gh - xhat[j] * sum_ghx);
                        }
                    }
                    add_into(&mut grads[x.0], &gx);
                    add_into(&mut grads[gain.0], &gg);
                    add_into(&mut grads[shift.0], &gs);
                }
                Op::Attention {
                    q,
                    k,
                    v,
                    heads,
                    mask,
                    grid,
                    cache,
                } => {
                    let mut gq = vec![0.0; self.nodes[q.0].value.len().max(n * m)];
                    let nk = self.nodes[k.0].rows;
                    let mut gk = vec![0.0; nk * m];
                    let mut gv = vec![0.0; nk * m];
                    attention_backward(
                        self.value(*q),
                        self.value(*k),
                        self.value(*v),
                        &node.value,
                        &g,
                        n,
                        m,
                        *heads,
                        mask,
                        grid,
                        cache,
                        &mut gq,
                        &mut gk,
                        &mut gv,
                    );
                    add_into(&mut grads[q.0], &gq);
                    add_into(&mut grads[k.0], &gk);
                    add_into(&mut grads[v.0], &gv);
                }
                Op::MulConst(x, c) => {
                    for ((gx, &gy), &cv) in grads[x.0].iter_mut().zip(&g).zip(c) {
                        *gx += gy * cv;
                    }
                }
                Op::MaskedMse {
                    pred,
                    target,
                    weight,
                    total,
                } => {
                    let p = self.value(*pred);
                    let scale = 2.0 * g[0] / total;
                    for (i, gp) in grads[pred.0].iter_mut().enumerate() {
                        *gp += scale * weight[i] * (p[i] - target[i]);
                    }
                }
            }
            grads[idx] = g;
        }
        let mut params = self.params.zeros_like();
        for (node, g) in self.nodes.iter().zip(&grads) {
            if let Op::Param(i) = node.op {
                add_into(&mut params.by_index_mut(i).data, g);
            }
        }
        Ok(Gradients {
            params,
            nodes: grads,
        })
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::tensor::Tensor;
    use crate::rng::stream;
    use rand_distr::{Distribution, StandardNormal};

    fn randn(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = stream(seed, &[]);
        (0..n).map(|_| StandardNormal.sample(&mut rng)).collect()
    }

    fn rel(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
    }

    #[test]
    fn layer_norm_gradient_matches_finite_differences() {
        let (n, m) = (3, 6);
        let mut ps = ParamStore::new();
        ps.insert("g", Tensor::vector(randn(m, 1))).unwrap();
        ps.insert("s", Tensor::vector(randn(m, 2))).unwrap();
        let x0 = randn(n * m, 3);
        let w = randn(n * m, 4);
        let loss_at = |ps: &ParamStore, x: &[f64]| -> (f64, Gradients, Var) {
            let mut t = Tape::new(ps);
            let xv = t.input(n, m, x.to_vec()).unwrap();
            let g = t.param("g").unwrap();
            let s = t.param("s").unwrap();
            let y = t.layer_norm(xv, g, s).unwrap();
            let l = t.masked_mse(y, w.clone(), vec![1.0; n * m]).unwrap();
            let grads = t.backward(l).unwrap();
            (t.scalar(l), grads, xv)
        };
        let (_, grads, xv) = loss_at(&ps, &x0);
        let h = 1e-6;
        for i in 0..n * m {
            let mut xp = x0.clone();
            xp[i] += h;
            let mut xm = x0.clone();
            xm[i] -= h;
            let fd = (loss_at(&ps, &xp).0 - loss_at(&ps, &xm).0) / (2.0 * h);
            assert!(
                rel(fd, grads.wrt(xv)[i]) <= 1e-6,
                "x[{i}] fd {fd} vs {}",
                grads.wrt(xv)[i]
            );
        }
        for name in ["g", "s"] {
            for i in 0..m {
                let mut p = ps.clone();
                p.get_mut(name).unwrap().data[i] += h;
                let up = loss_at(&p, &x0).0;
                p.get_mut(name).unwrap().data[i] -= 2.0 * h;
                let dn = loss_at(&p, &x0).0;
                let fd = (up - dn) / (2.0 * h);
                let an = grads.params.get(name).unwrap().data[i];
                assert!(rel(fd, an) <= 1e-6, "{name}[{i}] fd {fd} vs {an}");
            }
        }
    }

    #[test]
    fn linear_chain_matches_hand_gradient() {
        // L = ½·mean((x W1 W2 − y)²) has dL/dW2 = (x W1)ᵀ r · 2/N and dL/dW1 = xᵀ r W2ᵀ · 2/N.
        let (n, a, b, c) = (4, 3, 5, 2);
        let mut ps = ParamStore::new();
        ps.insert("w1", Tensor::matrix(a, b, randn(a * b, 5)))
            .unwrap();
        ps.insert("w2", Tensor::matrix(b, c, randn(b * c, 6)))
            .unwrap();
        let x = randn(n * a, 7);
        let y = randn(n * c, 8);
        let mut t = Tape::new(&ps);
        let xv = t.input(n, a, x.clone()).unwrap();
        let w1 = t.param("w1").unwrap();
        let w2 = t.param("w2").unwrap();
        let h = t.matmul(xv, w1).unwrap();
        let o = t.matmul(h, w2).unwrap();
        let l = t.masked_mse(o, y.clone(), vec![1.0; n * c]).unwrap();
        let g = t.backward(l).unwrap();

        let hv = t.value(h).to_vec();
        let r: Vec<f64> = t
            .value(o)
            .iter()
            .zip(&y)
            .map(|(p, q)| 2.0 * (p - q) / (n * c) as f64)
            .collect();
        let mut gw2 = vec![0.0; b * c];
        matmul_at_acc(&hv, &r, &mut gw2, n, b, c);
        let mut rw2t = vec![0.0; n * b];
        matmul_bt_acc(&r, &ps.get("w2").unwrap().data, &mut rw2t, n, c, b);
        let mut gw1 = vec![0.0; a * b];
        matmul_at_acc(&x, &rw2t, &mut gw1, n, a, b);
        for (p, q) in g.params.get("w2").unwrap().data.iter().zip(&gw2) {
            assert!((p - q).abs() <= 1e-12);
        }
        for (p, q) in g.params.get("w1").unwrap().data.iter().zip(&gw1) {
            assert!((p - q).abs() <= 1e-12);
        }
    }

    #[test]
    fn gelu_and_row_ops_gradients() {
        let (n, m) = (3, 4);
        let mut ps = ParamStore::new();
        ps.insert("b", Tensor::vector(randn(m, 9))).unwrap();
        let x0 = randn(n * m, 10);
        let y = randn(n * m, 11);
        let run = |ps: &ParamStore, x: &[f64]| {
            let mut t = Tape::new(ps);
            let xv = t.input(n, m, x.to_vec()).unwrap();
            let b = t.param("b").unwrap();
            let z = t.add_row(xv, b).unwrap();
            let z = t.gelu(z);
            let z2 = t.add(z, xv).unwrap();
            let z3 = t.mul_rows(z2, &[1.0, 0.0, 2.0]).unwrap();
            let l = t.masked_mse(z3, y.clone(), vec![1.0; n * m]).unwrap();
            let g = t.backward(l).unwrap();
            let gx = g.wrt(xv).to_vec();
            (t.scalar(l), g.params, gx)
        };
        let (_, gp, gx) = run(&ps, &x0);
        let h = 1e-6;
        for i in 0..n * m {
            let mut xp = x0.clone();
            xp[i] += h;
            let mut xm = x0.clone();
            xm[i] -= h;
            let fd = (run(&ps, &xp).0 - run(&ps, &xm).0) / (2.0 * h);
            assert!(
                rel(fd, gx[i]) <= 1e-6 || (fd - gx[i]).abs() < 1e-10,
                "{i}: {fd} vs {}",
                gx[i]
            );
        }
        for i in 0..m {
            let mut p = ps.clone();
            p.get_mut("b").unwrap().data[i] += h;
            let up = run(&p, &x0).0;
            p.get_mut("b").unwrap().data[i] -= 2.0 * h;
            let fd = (up - run(&p, &x0).0) / (2.0 * h);
            assert!(rel(fd, gp.get("b").unwrap().data[i]) <= 1e-6);
        }
    }

    #[test]
    fn non_finite_op_is_named() {
        let ps = ParamStore::new();
        let mut t = Tape::new(&ps);
        let x = t.input(1, 2, vec![1.0, 2.0]).unwrap();
        let y = t.mul_const(x, vec![f64::INFINITY, 1.0]).unwrap();
        let _ = t.gelu(y);
        match t.check_finite() {
            Err(Error::NonFinite { op }) => assert_eq!(op, "mul_const"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn dropout_zero_is_identity_and_scales_otherwise() {
        let ps = ParamStore::new();
        let mut t = Tape::new(&ps);
        let x = t.input(1, 1000, vec![1.0; 1000]).unwrap();
        let mut rng = stream(1, &[]);
        assert_eq!(t.dropout(x, 0.0, &mut rng).unwrap(), x);
        let y = t.dropout(x, 0.5, &mut rng).unwrap();
        let v = t.value(y);
        assert!(v.iter().all(|&a| a == 0.0 || a == 2.0));
        let mean = v.iter().sum::<f64>() / 1000.0;
        assert!((mean - 1.0).abs() < 0.15);
    }

    #[test]
    fn unknown_param_and_bad_shapes() {
        let ps = ParamStore::new();
        let mut t = Tape::new(&ps);
        assert!(t.param("nope").is_err());
        let a = t.input(2, 3, vec![0.0; 6]).unwrap();
        let b = t.input(2, 3, vec![0.0; 6]).unwrap();
        assert!(t.matmul(a, b).is_err());
        assert!(t.input(2, 2, vec![0.0; 3]).is_err());
        assert!(t.backward(a).is_err());
    }
}
