//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Graph`] records every operation in creation order, which is already a
//! topological order, so [`Graph::backward`] is a single reverse sweep.
//! Operations treat a tensor as a stack of rows along its last axis; the
//! only broadcasting is a row vector added to every row (bias/affine terms).

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{bail, Error, Result};
use crate::math;
use crate::tensor::Tensor;

/// Lower clamp applied to probabilities before taking a logarithm.
pub const LOG_CLAMP: f64 = 1e-12;

/// Tolerance for "sums to one" checks on distributions.
const DIST_TOL: f64 = 1e-6;

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    Softmax(Var),
    CausalSoftmax(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    GatherRows(Var, Vec<usize>),
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    Sum(Var),
    CrossEntropy(Var, Vec<usize>),
    KlDivergence(Tensor, Var),
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Tape of operations. Confined to one thread; build a fresh graph per batch.
#[derive(Debug, Default, Clone)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn gelu(x: f64) -> (f64, f64) {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    const A: f64 = 0.044_715;
    let u = C * (x + A * x * x * x);
    let t = math::tanh(u);
    let y = 0.5 * x * (1.0 + t);
    let dy = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * A * x * x);
    (y, dy)
}

fn softmax_row(row: &[f64], out: &mut [f64]) {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for (o, &x) in out.iter_mut().zip(row) {
        *o = math::exp(x - m);
        s += *o;
    }
    for o in out.iter_mut() {
        *o /= s;
    }
}

/// Numerically stable softmax of a plain slice.
pub fn softmax_slice(row: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; row.len()];
    if !row.is_empty() {
        softmax_row(row, &mut out);
    }
    out
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + math::ln(row.iter().map(|&x| math::exp(x - m)).sum::<f64>())
}

fn check_distribution(name: &str, row: &[f64]) -> Result<()> {
    if row.iter().any(|&x| !x.is_finite() || x < 0.0) {
        bail!(Validation, "{name} has a negative or non-finite entry");
    }
    let s: f64 = row.iter().sum();
    if (s - 1.0).abs() > DIST_TOL {
        bail!(Validation, "{name} sums to {s}, expected 1");
    }
    Ok(())
}

fn matmul_into(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            axpy(orow, av, &b[p * n..(p + 1) * n]);
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (ac, bc) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail: f64 = ac.remainder().iter().zip(bc.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ac.zip(bc) {
        for l in 0..4 {
            acc[l] += x[l] * y[l];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// `out += alpha * x`.
fn axpy(out: &mut [f64], alpha: f64, x: &[f64]) {
    for (o, &v) in out.iter_mut().zip(x) {
        *o += alpha * v;
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Adds an input tensor. Gradients are only reported for leaves created
    /// with `requires_grad`.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, needs_grad: requires_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, parents: &[Var]) -> Var {
        debug_assert!(value.is_finite(), "non-finite value produced by {op:?}");
        let needs_grad = parents.iter().any(|p| self.nodes[p.0].needs_grad);
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn dims2(&self, v: Var) -> (usize, usize) {
        let t = self.value(v);
        (t.rows(), t.cols())
    }

    /// `a[m×k] · b[k×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a);
        let (k2, n) = self.dims2(b);
        if self.value(b).shape().len() != 2 || k != k2 {
            bail!(Dimension, "matmul {:?} x {:?}", self.value(a).shape(), self.value(b).shape());
        }
        let mut out = vec![0.0; m * n];
        matmul_into(self.value(a).data(), self.value(b).data(), m, k, n, &mut out);
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::MatMul(a, b), &[a, b]))
    }

    /// `a[m×k] · b[n×k]ᵀ`, i.e. every row of `a` dotted with every row of `b`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a);
        let (n, k2) = self.dims2(b);
        if k != k2 {
            bail!(Dimension, "matmul_t {:?} x {:?}ᵀ", self.value(a).shape(), self.value(b).shape());
        }
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[i * n + j] = dot(&ad[i * k..(i + 1) * k], &bd[j * k..(j + 1) * k]);
            }
        }
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::MatMulT(a, b), &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).shape() != self.value(b).shape() {
            bail!(Dimension, "add {:?} + {:?}", self.value(a).shape(), self.value(b).shape());
        }
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x + y).collect();
        let t = Tensor::new(self.value(a).shape().to_vec(), data)?;
        Ok(self.push(t, Op::Add(a, b), &[a, b]))
    }

    /// Adds the vector `row` to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let c = self.value(a).cols();
        if self.value(row).numel() != c {
            bail!(Dimension, "add_row {:?} + {:?}", self.value(a).shape(), self.value(row).shape());
        }
        let r = self.value(row).data().to_vec();
        let mut t = self.value(a).clone();
        for chunk in t.data_mut().chunks_mut(c) {
            for (x, y) in chunk.iter_mut().zip(&r) {
                *x += y;
            }
        }
        Ok(self.push(t, Op::AddRow(a, row), &[a, row]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).shape() != self.value(b).shape() {
            bail!(Dimension, "mul {:?} * {:?}", self.value(a).shape(), self.value(b).shape());
        }
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x * y).collect();
        let t = Tensor::new(self.value(a).shape().to_vec(), data)?;
        Ok(self.push(t, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let mut t = self.value(a).clone();
        t.data_mut().iter_mut().for_each(|x| *x *= c);
        self.push(t, Op::Scale(a, c), &[a])
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let mut t = self.value(a).clone();
        t.data_mut().iter_mut().for_each(|x| *x = gelu(*x).0);
        self.push(t, Op::Gelu(a), &[a])
    }

    /// Softmax along the last axis, stabilized by subtracting the row maximum.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let c = self.value(a).cols();
        if c == 0 {
            bail!(Dimension, "softmax over an empty axis");
        }
        let src = self.value(a);
        let mut t = src.clone();
        for (out, row) in t.data_mut().chunks_mut(c).zip(src.data().chunks(c)) {
            softmax_row(row, out);
        }
        Ok(self.push(t, Op::Softmax(a), &[a]))
    }

    /// Row softmax of a square score matrix where row `i` only sees
    /// columns `0..=i`; hidden entries are exactly zero.
    pub fn causal_softmax(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.dims2(a);
        if r != c || c == 0 {
            bail!(Dimension, "causal softmax needs a non-empty square matrix, got {}x{}", r, c);
        }
        let src = self.value(a);
        let mut t = Tensor::zeros(&[r, c]);
        for i in 0..r {
            let row = &src.row(i)[..=i];
            softmax_row(row, &mut t.row_mut(i)[..=i]);
        }
        Ok(self.push(t, Op::CausalSoftmax(a), &[a]))
    }

    /// Normalizes each row to zero mean and unit variance, then applies
    /// `gain * x̂ + bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let c = self.value(x).cols();
        if self.value(gain).numel() != c || self.value(bias).numel() != c {
            bail!(
                Dimension,
                "layer_norm over {} features with gain {:?} and bias {:?}",
                c,
                self.value(gain).shape(),
                self.value(bias).shape()
            );
        }
        let src = self.value(x);
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let mut out = src.clone();
        let mut xhat = vec![0.0; src.numel()];
        let mut rstd = Vec::with_capacity(src.rows());
        for (i, row) in src.data().chunks(c).enumerate() {
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let rs = 1.0 / math::sqrt(var + eps);
            rstd.push(rs);
            for j in 0..c {
                let h = (row[j] - mean) * rs;
                xhat[i * c + j] = h;
                out.data_mut()[i * c + j] = g[j] * h + b[j];
            }
        }
        Ok(self.push(out, Op::LayerNorm { x, gain, bias, xhat, rstd }, &[x, gain, bias]))
    }

    /// Selects rows of a 2-D table (embedding lookup).
    pub fn gather_rows(&mut self, table: Var, idx: &[usize]) -> Result<Var> {
        let (r, c) = self.dims2(table);
        let src = self.value(table);
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            if i >= r {
                bail!(Index, "row {} of a {}-row table", i, r);
            }
            data.extend_from_slice(src.row(i));
        }
        let t = Tensor::matrix(idx.len(), c, data)?;
        Ok(self.push(t, Op::GatherRows(table, idx.to_vec()), &[table]))
    }

    /// Stacks 2-D (or 1-D, treated as one row) inputs vertically.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else { bail!(Dimension, "concat of nothing") };
        let c = self.value(first).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            if t.cols() != c {
                bail!(Dimension, "concat_rows width {} vs {}", t.cols(), c);
            }
            rows += t.rows();
            data.extend_from_slice(t.data());
        }
        let t = Tensor::matrix(rows, c, data)?;
        Ok(self.push(t, Op::ConcatRows(parts.to_vec()), parts))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.dims2(a);
        if start + len > r {
            bail!(Index, "rows {}..{} of {}", start, start + len, r);
        }
        let data = self.value(a).data()[start * c..(start + len) * c].to_vec();
        let t = Tensor::matrix(len, c, data)?;
        Ok(self.push(t, Op::SliceRows(a, start), &[a]))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.dims2(a);
        if start + len > c {
            bail!(Index, "cols {}..{} of {}", start, start + len, c);
        }
        let src = self.value(a);
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&src.row(i)[start..start + len]);
        }
        let t = Tensor::matrix(r, len, data)?;
        Ok(self.push(t, Op::SliceCols(a, start), &[a]))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else { bail!(Dimension, "concat of nothing") };
        let r = self.value(first).rows();
        let widths: Vec<usize> = parts.iter().map(|&p| self.value(p).cols()).collect();
        if parts.iter().any(|&p| self.value(p).rows() != r) {
            bail!(Dimension, "concat_cols with mismatched row counts");
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(r * total);
        for i in 0..r {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        let t = Tensor::matrix(r, total, data)?;
        Ok(self.push(t, Op::ConcatCols(parts.to_vec()), parts))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    /// Sum over rows of `−log softmax(row)[target]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (r, c) = self.dims2(logits);
        if targets.len() != r {
            bail!(Dimension, "{} targets for {} rows of logits", targets.len(), r);
        }
        if c == 0 {
            bail!(Dimension, "cross entropy over an empty axis");
        }
        let src = self.value(logits);
        let mut loss = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            if t >= c {
                bail!(Index, "target {} out of range for {} classes", t, c);
            }
            let row = src.row(i);
            loss += log_sum_exp(row) - row[t];
        }
        Ok(self.push(Tensor::scalar(loss), Op::CrossEntropy(logits, targets.to_vec()), &[logits]))
    }

    /// Sum over rows of `KL(q ‖ p)` with `q` fixed. Both must be row-wise
    /// distributions; `p` is clamped below at [`LOG_CLAMP`] before the log.
    pub fn kl_divergence(&mut self, q: &Tensor, p: Var) -> Result<Var> {
        let pv = self.value(p);
        if q.shape() != pv.shape() {
            bail!(Dimension, "kl_divergence {:?} vs {:?}", q.shape(), pv.shape());
        }
        let c = q.cols();
        let mut loss = 0.0;
        for (qr, pr) in q.data().chunks(c).zip(pv.data().chunks(c)) {
            check_distribution("q", qr)?;
            check_distribution("p", pr)?;
            loss += kl_row(qr, pr);
        }
        Ok(self.push(Tensor::scalar(loss), Op::KlDivergence(q.clone(), p), &[p]))
    }

    /// Reverse sweep from a one-element root.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        if self.value(root).numel() != 1 {
            bail!(Usage, "backward from a non-scalar node of shape {:?}", self.value(root).shape());
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(Tensor::filled(self.value(root).shape(), 1.0));
        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        for (node, g) in self.nodes.iter().zip(grads.iter_mut()) {
            if !matches!(node.op, Op::Leaf) {
                *g = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        let slot = &mut grads[v.0];
        if slot.is_none() {
            *slot = Some(Tensor::zeros(self.value(v).shape()));
        }
        f(slot.as_mut().expect("initialized above").data_mut());
    }

    fn propagate(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[idx];
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let k = self.dims2(*a).1;
                let n = self.value(*b).cols();
                if k == 0 || n == 0 {
                    return Ok(());
                }
                let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                // dA = G·Bᵀ
                self.accumulate(grads, *a, |ga| {
                    for (garow, grow) in ga.chunks_mut(k).zip(gd.chunks(n)) {
                        for (x, brow) in garow.iter_mut().zip(bd.chunks(n)) {
                            *x += dot(grow, brow);
                        }
                    }
                });
                // dB = Aᵀ·G
                self.accumulate(grads, *b, |gb| {
                    for (arow, grow) in ad.chunks(k).zip(gd.chunks(n)) {
                        for (&av, gbrow) in arow.iter().zip(gb.chunks_mut(n)) {
                            if av != 0.0 {
                                axpy(gbrow, av, grow);
                            }
                        }
                    }
                });
            }
            Op::MatMulT(a, b) => {
                let (m, k) = self.dims2(*a);
                let n = self.value(*b).rows();
                if k == 0 || n == 0 {
                    return Ok(());
                }
                let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                // dA = G·B
                self.accumulate(grads, *a, |ga| matmul_into(gd, bd, m, n, k, ga));
                // dB = Gᵀ·A
                self.accumulate(grads, *b, |gb| {
                    for (grow, arow) in gd.chunks(n).zip(ad.chunks(k)) {
                        for (&gv, gbrow) in grow.iter().zip(gb.chunks_mut(k)) {
                            if gv != 0.0 {
                                axpy(gbrow, gv, arow);
                            }
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    self.accumulate(grads, v, |gx| gx.iter_mut().zip(gd).for_each(|(x, y)| *x += y));
                }
            }
            Op::AddRow(a, row) => {
                self.accumulate(grads, *a, |gx| gx.iter_mut().zip(gd).for_each(|(x, y)| *x += y));
                let c = g.cols();
                self.accumulate(grads, *row, |gr| {
                    for chunk in gd.chunks(c) {
                        gr.iter_mut().zip(chunk).for_each(|(x, y)| *x += y);
                    }
                });
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                self.accumulate(grads, *a, |gx| {
                    for i in 0..gx.len() {
                        gx[i] += gd[i] * bd[i];
                    }
                });
                self.accumulate(grads, *b, |gx| {
                    for i in 0..gx.len() {
                        gx[i] += gd[i] * ad[i];
                    }
                });
            }
            Op::Scale(a, c) => {
                self.accumulate(grads, *a, |gx| gx.iter_mut().zip(gd).for_each(|(x, y)| *x += c * y));
            }
            Op::Gelu(a) => {
                let ad = self.value(*a).data();
                self.accumulate(grads, *a, |gx| {
                    for i in 0..gx.len() {
                        gx[i] += gd[i] * gelu(ad[i]).1;
                    }
                });
            }
            Op::Softmax(a) | Op::CausalSoftmax(a) => {
                let y = &node.value;
                let c = y.cols();
                self.accumulate(grads, *a, |gx| {
                    for ((gxr, yr), gr) in gx.chunks_mut(c).zip(y.data().chunks(c)).zip(gd.chunks(c)) {
                        let s = dot(yr, gr);
                        for j in 0..c {
                            gxr[j] += yr[j] * (gr[j] - s);
                        }
                    }
                });
            }
            Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                let c = g.cols();
                let gain_d = self.value(*gain).data();
                self.accumulate(grads, *x, |gx| {
                    for (i, rs) in rstd.iter().enumerate() {
                        let row = i * c..(i + 1) * c;
                        let (gr, hr) = (&gd[row.clone()], &xhat[row.clone()]);
                        let dxh: Vec<f64> = (0..c).map(|j| gr[j] * gain_d[j]).collect();
                        let m1 = dxh.iter().sum::<f64>() / c as f64;
                        let m2 = dot(&dxh, hr) / c as f64;
                        for j in 0..c {
                            gx[i * c + j] += rs * (dxh[j] - m1 - hr[j] * m2);
                        }
                    }
                });
                self.accumulate(grads, *gain, |gg| {
                    for (gr, hr) in gd.chunks(c).zip(xhat.chunks(c)) {
                        for j in 0..c {
                            gg[j] += gr[j] * hr[j];
                        }
                    }
                });
                self.accumulate(grads, *bias, |gb| {
                    for gr in gd.chunks(c) {
                        gb.iter_mut().zip(gr).for_each(|(x, y)| *x += y);
                    }
                });
            }
            Op::GatherRows(table, idx) => {
                let c = g.cols();
                self.accumulate(grads, *table, |gt| {
                    for (k, &i) in idx.iter().enumerate() {
                        for j in 0..c {
                            gt[i * c + j] += gd[k * c + j];
                        }
                    }
                });
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).numel();
                    self.accumulate(grads, p, |gx| {
                        gx.iter_mut().zip(&gd[offset..offset + n]).for_each(|(x, y)| *x += y)
                    });
                    offset += n;
                }
            }
            Op::SliceRows(a, start) => {
                let c = g.cols();
                let off = start * c;
                self.accumulate(grads, *a, |gx| gx[off..off + gd.len()].iter_mut().zip(gd).for_each(|(x, y)| *x += y));
            }
            Op::SliceCols(a, start) => {
                let (r, len) = (g.rows(), g.cols());
                let c = self.value(*a).cols();
                self.accumulate(grads, *a, |gx| {
                    for i in 0..r {
                        for j in 0..len {
                            gx[i * c + start + j] += gd[i * len + j];
                        }
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let total = g.cols();
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    self.accumulate(grads, p, |gx| {
                        for (i, row) in gx.chunks_mut(w).enumerate() {
                            for j in 0..w {
                                row[j] += gd[i * total + offset + j];
                            }
                        }
                    });
                    offset += w;
                }
            }
            Op::Sum(a) => {
                let s = gd[0];
                self.accumulate(grads, *a, |gx| gx.iter_mut().for_each(|x| *x += s));
            }
            Op::CrossEntropy(logits, targets) => {
                let s = gd[0];
                let src = self.value(*logits);
                let c = src.cols();
                self.accumulate(grads, *logits, |gx| {
                    for (i, &t) in targets.iter().enumerate() {
                        let p = softmax_slice(src.row(i));
                        for j in 0..c {
                            let onehot = if j == t { 1.0 } else { 0.0 };
                            gx[i * c + j] += s * (p[j] - onehot);
                        }
                    }
                });
            }
            Op::KlDivergence(q, p) => {
                let s = gd[0];
                let pd = self.value(*p).data();
                self.accumulate(grads, *p, |gx| {
                    for (i, &qv) in q.data().iter().enumerate() {
                        if qv > 0.0 && pd[i] >= LOG_CLAMP {
                            gx[i] -= s * qv / pd[i];
                        }
                    }
                });
            }
        }
        Ok(())
    }
}

fn kl_row(q: &[f64], p: &[f64]) -> f64 {
    q.iter()
        .zip(p)
        .filter(|(&qv, _)| qv > 0.0)
        .map(|(&qv, &pv)| qv * (math::ln(qv) - math::ln(pv.max(LOG_CLAMP))))
        .sum()
}

/// `KL(q ‖ p)` of two plain distributions, outside any graph.
pub fn kl_divergence(q: &[f64], p: &[f64]) -> Result<f64> {
    if q.len() != p.len() {
        bail!(Dimension, "kl_divergence over {} vs {} classes", q.len(), p.len());
    }
    check_distribution("q", q)?;
    check_distribution("p", p)?;
    Ok(kl_row(q, p))
}

/// `−log softmax(logits)[target]` outside any graph.
pub fn cross_entropy(logits: &[f64], target: usize) -> Result<f64> {
    if target >= logits.len() {
        bail!(Index, "target {} out of range for {} classes", target, logits.len());
    }
    Ok(log_sum_exp(logits) - logits[target])
}

/// Compares analytic gradients of a scalar function against central
/// differences `(f(x+h) − f(x−h)) / 2h`, element by element.
///
/// Returns the largest error `|a − n| / max(|a|, |n|, 1e-3)`; the floor keeps
/// entries whose true gradient is ~0 from reporting meaningless ratios.
pub fn grad_check<F>(f: F, inputs: &[Tensor], h: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let eval = |xs: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        if g.value(out).numel() != 1 {
            return Err(Error::Usage("grad_check needs a scalar function".into()));
        }
        Ok(g.value(out).item())
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    let grads = g.backward(out)?;

    let mut worst = 0.0_f64;
    let mut probe: Vec<Tensor> = inputs.to_vec();
    for (k, v) in vars.iter().enumerate() {
        let zeros = Tensor::zeros(inputs[k].shape());
        let analytic = grads.get(*v).unwrap_or(&zeros);
        for i in 0..inputs[k].numel() {
            let x0 = inputs[k].data()[i];
            probe[k].data_mut()[i] = x0 + h;
            let fp = eval(&probe)?;
            probe[k].data_mut()[i] = x0 - h;
            let fm = eval(&probe)?;
            probe[k].data_mut()[i] = x0;
            let numeric = (fp - fm) / (2.0 * h);
            let a = analytic.data()[i];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-3);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}
