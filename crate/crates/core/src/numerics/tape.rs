//! Tape-based reverse-mode differentiation over dense matrices.
//!
//! A [`Tape`] records every operation of a forward pass as a node holding its
//! value and the operand indices. [`Tape::backward`] walks the nodes in reverse
//! creation order, so the recorded graph is acyclic by construction.
//!
//! Parameters are borrowed leaves registered with [`Tape::param`]; the returned
//! [`Gradients`] exposes their gradients in registration order, which is the
//! order models use to enumerate their tensors for the optimizer.

use std::borrow::Cow;

use super::matrix::{gemm, shape_str, Matrix};
use crate::error::{Error, Result};

const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Extremal singular pairs frozen into a spectral hinge node.
#[derive(Clone, Debug)]
pub(crate) struct HingeState {
    pub lower: f64,
    pub upper: f64,
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub u_min: Vec<f64>,
    pub v_min: Vec<f64>,
    pub u_max: Vec<f64>,
    pub v_max: Vec<f64>,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    AddRow(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    LeakyRelu(Var, f64),
    Exp(Var),
    Clamp(Var, f64, f64),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    MeanRows(Var),
    BroadcastRows(Var),
    Sum(Var),
    PairwiseDist(Var, Var),
    SoftmaxRows(Var),
    LogSumExpMix(Var, Var),
    GaussianLogProb(Var, Var, Var),
    KlDiag(Var, Var, Var, Var),
    SpectralHinge(Var, Box<HingeState>),
}

struct Node<'a> {
    value: Cow<'a, Matrix>,
    op: Op,
}

/// Recording of one forward computation.
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
    params: Vec<Var>,
}

impl Default for Tape<'_> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Matrix, op: Op) -> Var {
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op,
        });
        Var(self.nodes.len() - 1)
    }

    /// Differentiable leaf borrowed from a parameter tensor.
    pub fn param(&mut self, value: &'a Matrix) -> Var {
        self.nodes.push(Node {
            value: Cow::Borrowed(value),
            op: Op::Leaf,
        });
        let v = Var(self.nodes.len() - 1);
        self.params.push(v);
        v
    }

    /// Owned differentiable leaf (registered like a parameter).
    pub fn variable(&mut self, value: Matrix) -> Var {
        let v = self.push(value, Op::Leaf);
        self.params.push(v);
        v
    }

    /// Leaf that is not reported as a parameter.
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn constant_ref(&mut self, value: &'a Matrix) -> Var {
        self.nodes.push(Node {
            value: Cow::Borrowed(value),
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v).data()[0]
    }

    pub fn param_vars(&self) -> &[Var] {
        &self.params
    }

    fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).shape()
    }

    fn mismatch(&self, op: &'static str, a: Var, b: Var) -> Error {
        Error::dim(op, shape_str(self.value(a)), shape_str(self.value(b)))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a).1 != self.shape(b).0 {
            return Err(self.mismatch("matmul", a, b));
        }
        let out = gemm(self.value(a), false, self.value(b), false);
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    /// `a · bᵀ`, the layout of a dense layer applied to row-stacked inputs.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a).1 != self.shape(b).1 {
            return Err(self.mismatch("matmul_t", a, b));
        }
        let out = gemm(self.value(a), false, self.value(b), true);
        Ok(self.push(out, Op::MatMulT(a, b)))
    }

    /// Add a `1×c` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (r, c) = self.shape(a);
        if self.shape(row) != (1, c) {
            return Err(self.mismatch("add_row", a, row));
        }
        let mut out = self.value(a).clone();
        let b = self.value(row).data().to_vec();
        for i in 0..r {
            for (o, bv) in out.row_mut(i).iter_mut().zip(&b) {
                *o += bv;
            }
        }
        Ok(self.push(out, Op::AddRow(a, row)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(self.value(b))?;
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).sub(self.value(b))?;
        Ok(self.push(out, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(self.mismatch("mul", a, b));
        }
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y);
        Ok(self.push(out, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).scale(s);
        self.push(out, Op::Scale(a, s))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let out = self.value(a).map(|x| if x > 0.0 { x } else { slope * x });
        self.push(out, Op::LeakyRelu(a, slope))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::exp);
        self.push(out, Op::Exp(a))
    }

    /// Elementwise clamp; gradient passes only strictly inside the range.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let out = self.value(a).map(|x| x.clamp(lo, hi));
        self.push(out, Op::Clamp(a, lo, hi))
    }

    /// Column-wise concatenation of equally tall blocks.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = parts
            .first()
            .map(|&p| self.shape(p).0)
            .ok_or_else(|| Error::Contract("concat of zero blocks".into()))?;
        for &p in parts {
            if self.shape(p).0 != rows {
                return Err(self.mismatch("concat_cols", parts[0], p));
            }
        }
        let cols: usize = parts.iter().map(|&p| self.shape(p).1).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        Ok(self.push(Matrix::from_vec(rows, cols, data), Op::ConcatCols(parts.to_vec())))
    }

    /// Columns `start..end` of `a`.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (r, c) = self.shape(a);
        if start > end || end > c {
            return Err(Error::dim("slice_cols", format!("{r}x{c}"), format!("{start}..{end}")));
        }
        let src = self.value(a);
        let out = Matrix::from_fn(r, end - start, |i, j| src.get(i, start + j));
        Ok(self.push(out, Op::SliceCols(a, start)))
    }

    /// Column means (`1×c`). Each column is summed pairwise over its values in
    /// sorted order, so the result is bit-identical under any row permutation.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.shape(a);
        if r == 0 {
            return Err(Error::Contract("mean over an empty set".into()));
        }
        let src = self.value(a);
        let mut col = Vec::with_capacity(r);
        let mut out = Vec::with_capacity(c);
        for j in 0..c {
            col.clear();
            col.extend((0..r).map(|i| src.get(i, j)));
            col.sort_by(f64::total_cmp);
            out.push(pairwise_sum(&col) / r as f64);
        }
        Ok(self.push(Matrix::from_vec(1, c, out), Op::MeanRows(a)))
    }

    /// Repeat a `1×c` row `n` times.
    pub fn broadcast_rows(&mut self, a: Var, n: usize) -> Result<Var> {
        let (r, c) = self.shape(a);
        if r != 1 {
            return Err(Error::dim("broadcast_rows", format!("{r}x{c}"), "1xc"));
        }
        let row = self.value(a).data().to_vec();
        let mut data = Vec::with_capacity(n * c);
        for _ in 0..n {
            data.extend_from_slice(&row);
        }
        Ok(self.push(Matrix::from_vec(n, c, data), Op::BroadcastRows(a)))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = pairwise_sum(self.value(a).data());
        self.push(Matrix::scalar(s), Op::Sum(a))
    }

    /// Euclidean distances between the rows of `a` (`n×d`) and `b` (`m×d`).
    pub fn pairwise_dist(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a).1 != self.shape(b).1 {
            return Err(self.mismatch("pairwise_dist", a, b));
        }
        let (av, bv) = (self.value(a), self.value(b));
        let out = Matrix::from_fn(av.rows(), bv.rows(), |i, j| {
            super::matrix::euclidean_distance(av.row(i), bv.row(j))
        });
        Ok(self.push(out, Op::PairwiseDist(a, b)))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let src = self.value(a);
        let mut out = src.clone();
        for i in 0..out.rows() {
            let row = out.row_mut(i);
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                total += *v;
            }
            for v in row.iter_mut() {
                *v /= total;
            }
        }
        self.push(out, Op::SoftmaxRows(a))
    }

    /// `out[t][k] = ln Σ_c exp(w[t][c] · s[c][k])` for weights `w` (`n×m`) and
    /// per-context log-variances `s` (`m×k`).
    pub fn log_sum_exp_mix(&mut self, w: Var, s: Var) -> Result<Var> {
        if self.shape(w).1 != self.shape(s).0 {
            return Err(self.mismatch("log_sum_exp_mix", w, s));
        }
        let (wv, sv) = (self.value(w), self.value(s));
        let (n, m, k) = (wv.rows(), wv.cols(), sv.cols());
        let mut out = Matrix::zeros(n, k);
        for t in 0..n {
            for j in 0..k {
                let mx = (0..m)
                    .map(|c| wv.get(t, c) * sv.get(c, j))
                    .fold(f64::NEG_INFINITY, f64::max);
                let acc: f64 = (0..m).map(|c| (wv.get(t, c) * sv.get(c, j) - mx).exp()).sum();
                out.set(t, j, mx + acc.ln());
            }
        }
        Ok(self.push(out, Op::LogSumExpMix(w, s)))
    }

    /// Summed diagonal-Gaussian log density of `y` under `(mean, log_var)`.
    pub fn gaussian_log_prob(&mut self, y: Var, mean: Var, log_var: Var) -> Result<Var> {
        if self.shape(y) != self.shape(mean) {
            return Err(self.mismatch("gaussian_log_prob", y, mean));
        }
        if self.shape(mean) != self.shape(log_var) {
            return Err(self.mismatch("gaussian_log_prob", mean, log_var));
        }
        let (yv, mv, lv) = (self.value(y), self.value(mean), self.value(log_var));
        let terms: Vec<f64> = (0..yv.len())
            .map(|i| {
                let d = yv.data()[i] - mv.data()[i];
                -0.5 * LN_2PI - 0.5 * lv.data()[i] - 0.5 * d * d * (-lv.data()[i]).exp()
            })
            .collect();
        Ok(self.push(
            Matrix::scalar(pairwise_sum(&terms)),
            Op::GaussianLogProb(y, mean, log_var),
        ))
    }

    /// Summed `KL(q ‖ p)` between diagonal Gaussians given as mean/log-variance blocks.
    pub fn kl_diag(&mut self, mq: Var, lq: Var, mp: Var, lp: Var) -> Result<Var> {
        let s = self.shape(mq);
        for other in [lq, mp, lp] {
            if self.shape(other) != s {
                return Err(self.mismatch("kl_diag", mq, other));
            }
        }
        let (a, b, c, d) = (self.value(mq), self.value(lq), self.value(mp), self.value(lp));
        let terms: Vec<f64> = (0..a.len())
            .map(|i| {
                let (mq, lq, mp, lp) = (a.data()[i], b.data()[i], c.data()[i], d.data()[i]);
                let dm = mq - mp;
                0.5 * ((lq - lp).exp() + dm * dm * (-lp).exp() - 1.0 + lp - lq)
            })
            .collect();
        Ok(self.push(Matrix::scalar(pairwise_sum(&terms)), Op::KlDiag(mq, lq, mp, lp)))
    }

    /// Hinge penalty on the extremal singular values of `w`, with the singular
    /// vectors held fixed during differentiation.
    pub(crate) fn spectral_hinge(&mut self, w: Var, state: HingeState) -> Var {
        let lo = (state.lower - state.sigma_min).max(0.0);
        let hi = (state.sigma_max - state.upper).max(0.0);
        self.push(Matrix::scalar(lo * lo + hi * hi), Op::SpectralHinge(w, Box::new(state)))
    }

    /// Reverse pass from a scalar root.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        if self.shape(root) != (1, 1) {
            return Err(Error::Contract(format!(
                "backward root must be scalar, got {}",
                shape_str(self.value(root))
            )));
        }
        let mut grads: Vec<Option<Matrix>> = vec![None; root.0 + 1];
        grads[root.0] = Some(Matrix::scalar(1.0));

        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    let ga = gemm(&g, false, self.value(*b), true);
                    let gb = gemm(self.value(*a), true, &g, false);
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::MatMulT(a, b) => {
                    let ga = gemm(&g, false, self.value(*b), false);
                    let gb = gemm(&g, true, self.value(*a), false);
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::AddRow(a, row) => {
                    let c = g.cols();
                    let mut gr = vec![0.0; c];
                    for i in 0..g.rows() {
                        for (acc, v) in gr.iter_mut().zip(g.row(i)) {
                            *acc += v;
                        }
                    }
                    accumulate(&mut grads, *row, Matrix::from_vec(1, c, gr));
                    accumulate(&mut grads, *a, g);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *b, g.clone());
                    accumulate(&mut grads, *a, g);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *b, g.scale(-1.0));
                    accumulate(&mut grads, *a, g);
                }
                Op::Mul(a, b) => {
                    let ga = g.zip_map(self.value(*b), |x, y| x * y);
                    let gb = g.zip_map(self.value(*a), |x, y| x * y);
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Scale(a, s) => accumulate(&mut grads, *a, g.scale(*s)),
                Op::LeakyRelu(a, slope) => {
                    let s = *slope;
                    let ga = g.zip_map(self.value(*a), |gv, x| if x > 0.0 { gv } else { s * gv });
                    accumulate(&mut grads, *a, ga);
                }
                Op::Exp(a) => {
                    let ga = g.zip_map(&node.value, |gv, y| gv * y);
                    accumulate(&mut grads, *a, ga);
                }
                Op::Clamp(a, lo, hi) => {
                    let (lo, hi) = (*lo, *hi);
                    let ga = g.zip_map(self.value(*a), |gv, x| if x > lo && x < hi { gv } else { 0.0 });
                    accumulate(&mut grads, *a, ga);
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let (r, c) = self.shape(p);
                        let gp = Matrix::from_fn(r, c, |i, j| g.get(i, offset + j));
                        offset += c;
                        accumulate(&mut grads, p, gp);
                    }
                }
                Op::SliceCols(a, start) => {
                    let (r, c) = self.shape(*a);
                    let mut ga = Matrix::zeros(r, c);
                    for i in 0..r {
                        for j in 0..g.cols() {
                            ga.set(i, start + j, g.get(i, j));
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::MeanRows(a) => {
                    let (r, c) = self.shape(*a);
                    let inv = 1.0 / r as f64;
                    let ga = Matrix::from_fn(r, c, |_, j| g.get(0, j) * inv);
                    accumulate(&mut grads, *a, ga);
                }
                Op::BroadcastRows(a) => {
                    let c = g.cols();
                    let sums = (0..c)
                        .map(|j| (0..g.rows()).map(|i| g.get(i, j)).sum())
                        .collect();
                    accumulate(&mut grads, *a, Matrix::from_vec(1, c, sums));
                }
                Op::Sum(a) => {
                    let (r, c) = self.shape(*a);
                    accumulate(&mut grads, *a, Matrix::filled(r, c, g.data()[0]));
                }
                Op::PairwiseDist(a, b) => {
                    let (av, bv, dv) = (self.value(*a), self.value(*b), &node.value);
                    let mut ga = Matrix::zeros(av.rows(), av.cols());
                    let mut gb = Matrix::zeros(bv.rows(), bv.cols());
                    for i in 0..av.rows() {
                        for j in 0..bv.rows() {
                            let d = dv.get(i, j);
                            if d <= 0.0 {
                                continue;
                            }
                            let coef = g.get(i, j) / d;
                            for k in 0..av.cols() {
                                let diff = coef * (av.get(i, k) - bv.get(j, k));
                                ga.data_mut()[i * av.cols() + k] += diff;
                                gb.data_mut()[j * bv.cols() + k] -= diff;
                            }
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::SoftmaxRows(a) => {
                    let y = &node.value;
                    let mut ga = Matrix::zeros(y.rows(), y.cols());
                    for i in 0..y.rows() {
                        let inner: f64 = y.row(i).iter().zip(g.row(i)).map(|(p, q)| p * q).sum();
                        for j in 0..y.cols() {
                            ga.set(i, j, y.get(i, j) * (g.get(i, j) - inner));
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::LogSumExpMix(w, s) => {
                    let (wv, sv, out) = (self.value(*w), self.value(*s), &node.value);
                    let (n, m, k) = (wv.rows(), wv.cols(), sv.cols());
                    let mut gw = Matrix::zeros(n, m);
                    let mut gs = Matrix::zeros(m, k);
                    for t in 0..n {
                        for j in 0..k {
                            let go = g.get(t, j);
                            if go == 0.0 {
                                continue;
                            }
                            for c in 0..m {
                                let p = (wv.get(t, c) * sv.get(c, j) - out.get(t, j)).exp();
                                gw.data_mut()[t * m + c] += go * p * sv.get(c, j);
                                gs.data_mut()[c * k + j] += go * p * wv.get(t, c);
                            }
                        }
                    }
                    accumulate(&mut grads, *w, gw);
                    accumulate(&mut grads, *s, gs);
                }
                Op::GaussianLogProb(y, mean, log_var) => {
                    let go = g.data()[0];
                    let (yv, mv, lv) = (self.value(*y), self.value(*mean), self.value(*log_var));
                    let (r, c) = yv.shape();
                    let mut gy = Matrix::zeros(r, c);
                    let mut gm = Matrix::zeros(r, c);
                    let mut gl = Matrix::zeros(r, c);
                    for i in 0..yv.len() {
                        let prec = (-lv.data()[i]).exp();
                        let d = yv.data()[i] - mv.data()[i];
                        gm.data_mut()[i] = go * d * prec;
                        gy.data_mut()[i] = -go * d * prec;
                        gl.data_mut()[i] = go * (-0.5 + 0.5 * d * d * prec);
                    }
                    accumulate(&mut grads, *y, gy);
                    accumulate(&mut grads, *mean, gm);
                    accumulate(&mut grads, *log_var, gl);
                }
                Op::KlDiag(mq, lq, mp, lp) => {
                    let go = g.data()[0];
                    let (a, b, c, d) = (self.value(*mq), self.value(*lq), self.value(*mp), self.value(*lp));
                    let (r, cc) = a.shape();
                    let mut gmq = Matrix::zeros(r, cc);
                    let mut glq = Matrix::zeros(r, cc);
                    let mut gmp = Matrix::zeros(r, cc);
                    let mut glp = Matrix::zeros(r, cc);
                    for i in 0..a.len() {
                        let dm = a.data()[i] - c.data()[i];
                        let ratio = (b.data()[i] - d.data()[i]).exp();
                        let prec_p = (-d.data()[i]).exp();
                        gmq.data_mut()[i] = go * dm * prec_p;
                        gmp.data_mut()[i] = -go * dm * prec_p;
                        glq.data_mut()[i] = go * 0.5 * (ratio - 1.0);
                        glp.data_mut()[i] = go * 0.5 * (1.0 - ratio - dm * dm * prec_p);
                    }
                    accumulate(&mut grads, *mq, gmq);
                    accumulate(&mut grads, *lq, glq);
                    accumulate(&mut grads, *mp, gmp);
                    accumulate(&mut grads, *lp, glp);
                }
                Op::SpectralHinge(w, st) => {
                    let go = g.data()[0];
                    let (p, q) = self.shape(*w);
                    let lo = (st.lower - st.sigma_min).max(0.0);
                    let hi = (st.sigma_max - st.upper).max(0.0);
                    let mut gw = Matrix::zeros(p, q);
                    if lo > 0.0 {
                        add_outer(&mut gw, -2.0 * go * lo, &st.u_min, &st.v_min);
                    }
                    if hi > 0.0 {
                        add_outer(&mut gw, 2.0 * go * hi, &st.u_max, &st.v_max);
                    }
                    accumulate(&mut grads, *w, gw);
                }
            }
        }
        Ok(Gradients {
            grads,
            params: self.params.clone(),
            shapes: self.nodes.iter().map(|n| n.value.shape()).collect(),
        })
    }
}

fn add_outer(m: &mut Matrix, alpha: f64, u: &[f64], v: &[f64]) {
    let q = m.cols();
    let data = m.data_mut();
    for (i, ui) in u.iter().enumerate() {
        for (j, vj) in v.iter().enumerate() {
            data[i * q + j] += alpha * ui * vj;
        }
    }
}

fn accumulate(grads: &mut [Option<Matrix>], v: Var, g: Matrix) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

/// Pairwise (cascade) summation in the given order.
pub fn pairwise_sum(values: &[f64]) -> f64 {
    match values.len() {
        0 => 0.0,
        1 => values[0],
        n if n <= 8 => values.iter().sum(),
        n => {
            let (a, b) = values.split_at(n / 2);
            pairwise_sum(a) + pairwise_sum(b)
        }
    }
}

/// Gradients produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
    params: Vec<Var>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    /// Gradient of any leaf reached by the backward pass.
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of a leaf, zero-filled when the root does not depend on it.
    pub fn wrt(&self, v: Var) -> Matrix {
        match self.get(v) {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.shapes[v.0];
                Matrix::zeros(r, c)
            }
        }
    }

    /// Parameter gradients in registration order.
    pub fn params(&self) -> Vec<Matrix> {
        self.params.iter().map(|&v| self.wrt(v)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fd_check(f: impl Fn(&Matrix) -> f64, x: &Matrix, analytic: &Matrix) {
        let h = 1e-5;
        for i in 0..x.len() {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp.data_mut()[i] += h;
            xm.data_mut()[i] -= h;
            let fd = (f(&xp) - f(&xm)) / (2.0 * h);
            let a = analytic.data()[i];
            let rel = (fd - a).abs() / fd.abs().max(a.abs()).max(1e-6);
            assert!(rel < 1e-5, "entry {i}: fd {fd} vs analytic {a}");
        }
    }

    #[test]
    fn linear_map_gradient_is_outer_product() {
        let w = Matrix::from_fn(3, 2, |i, j| (i + 2 * j) as f64 * 0.3 - 0.4);
        let x = Matrix::col_vector(&[1.5, -2.0]);
        let mut tape = Tape::new();
        let wv = tape.param(&w);
        let xv = tape.constant_ref(&x);
        let y = tape.matmul(wv, xv).unwrap();
        let s = tape.sum(y);
        let g = tape.backward(s).unwrap();
        let expected = Matrix::from_fn(3, 2, |_, j| x.get(j, 0));
        assert_eq!(g.wrt(wv), expected);
    }

    #[test]
    fn squared_norm_gradient() {
        let x = Matrix::row_vector(&[1.0, -2.0, 0.5]);
        let mut tape = Tape::new();
        let xv = tape.param(&x);
        let sq = tape.mul(xv, xv).unwrap();
        let s = tape.sum(sq);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.wrt(xv), x.scale(2.0));
    }

    #[test]
    fn non_scalar_root_rejected() {
        let x = Matrix::row_vector(&[1.0, 2.0]);
        let mut tape = Tape::new();
        let xv = tape.param(&x);
        assert!(matches!(tape.backward(xv), Err(Error::Contract(_))));
    }

    #[test]
    fn mean_rows_is_permutation_stable() {
        let a = Matrix::from_rows(&[[0.1, 1e16], [0.2, 1.0], [0.3, -1e16], [1e-3, 3.0]]).unwrap();
        let b = Matrix::from_rows(&[[0.3, -1e16], [1e-3, 3.0], [0.1, 1e16], [0.2, 1.0]]).unwrap();
        let mut tape = Tape::new();
        let (av, bv) = (tape.constant(a), tape.constant(b));
        let ma = tape.mean_rows(av).unwrap();
        let mb = tape.mean_rows(bv).unwrap();
        assert_eq!(tape.value(ma), tape.value(mb));
    }

    #[test]
    fn composite_ops_match_finite_differences() {
        // Exercises every node type except the spectral hinge.
        let a = Matrix::from_fn(3, 4, |i, j| ((i * 7 + j * 3) % 5) as f64 * 0.21 - 0.4);
        let f = |a: &Matrix| -> (f64, Matrix) {
            let mut t = Tape::new();
            let av = t.param(a);
            let b = Matrix::from_fn(2, 4, |i, j| (i as f64 - j as f64) * 0.13 + 0.05);
            let bv = t.constant(b);
            let d = t.pairwise_dist(av, bv).unwrap();
            let neg = t.scale(d, -0.5);
            let w = t.softmax_rows(neg);
            let s = t.slice_cols(av, 1, 3).unwrap();
            let s_ctx = t.slice_cols(bv, 0, 2).unwrap();
            let mix = t.log_sum_exp_mix(w, s_ctx).unwrap();
            let lr = t.leaky_relu(s, 0.1);
            let e = t.exp(lr);
            let cl = t.clamp(e, 0.0, 1.5);
            let cat = t.concat_cols(&[cl, mix]).unwrap();
            let mean = t.mean_rows(cat).unwrap();
            let bc = t.broadcast_rows(mean, 3).unwrap();
            let row = t.slice_cols(av, 0, 4).unwrap();
            let row0 = t.mean_rows(row).unwrap();
            let prod = t.matmul_t(av, av).unwrap();
            let p2 = t.slice_cols(prod, 0, 1).unwrap();
            let x = t.add_row(av, row0).unwrap();
            let xs = t.slice_cols(x, 0, 4).unwrap();
            let y = t.constant(Matrix::filled(3, 4, 0.3));
            let lp = t.gaussian_log_prob(y, xs, av).unwrap();
            let q = t.sub(bc, cat).unwrap();
            let r = t.add(q, cat).unwrap();
            let mq = t.slice_cols(r, 0, 2).unwrap();
            let zero = t.constant(Matrix::zeros(3, 2));
            let kl = t.kl_diag(mq, zero, zero, mq).unwrap();
            let sp = t.sum(p2);
            let tot1 = t.add(lp, kl).unwrap();
            let tot = t.add(tot1, sp).unwrap();
            let g = t.backward(tot).unwrap();
            (t.scalar(tot), g.wrt(av))
        };
        let (_, analytic) = f(&a);
        fd_check(|m| f(m).0, &a, &analytic);
    }
}
