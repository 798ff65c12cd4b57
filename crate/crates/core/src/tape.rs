//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records every operation in creation order, so node indices are
//! already a topological order and backward is a single reverse sweep.

use std::collections::{BTreeMap, HashMap};

use crate::error::{Error, Result};
use crate::params::ParameterStore;
use crate::tensor::{bilinear_taps, gemm, split_axis, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Gradients keyed by parameter name.
pub type GradMap = BTreeMap<String, Tensor>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnaryKind {
    Gelu,
    Relu,
    Sigmoid,
}

/// Which spatial axis `mean_pool` averages away.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolAxis {
    /// Mean over W: `H×W×C → H×C`.
    Width,
    /// Mean over H: `H×W×C → W×C`.
    Height,
}

/// Attention-logit bookkeeping, split by the module that produced them.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum LogitSite {
    Roco,
    Holi,
    Other,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Binary(BinaryKind, Var, Var),
    Scale(Var, f64),
    Shift(Var),
    Unary(UnaryKind, Var),
    Softmax(Var, usize),
    Affine(Var, Var, Var),
    MeanPool(Var, PoolAxis),
    Resize(Var),
    Concat(Var, Var),
    Reshape(Var),
    SpaceToDepth(Var, usize),
    LayerNorm(Var, Var, Var),
    Gather(Var, Vec<Option<usize>>),
    Sum(Var),
    SumAxes(Var),
    Bce(Var, Tensor),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    tracked: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<String, Var>,
    grads: Option<Vec<Option<Tensor>>>,
    logits: BTreeMap<LogitSite, usize>,
}

pub const BCE_EPS: f64 = 1e-7;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Tensor, op: Op, tracked: bool) -> Var {
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    fn tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    /// Value that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Differentiable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf bound to a named parameter; repeated lookups share one node so
    /// gradients from every use accumulate.
    pub fn param(&mut self, store: &ParameterStore, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let value = store
            .get(name)
            .ok_or_else(|| Error::config(format!("unknown parameter `{name}`")))?
            .clone();
        let v = self.leaf(value);
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn count_logits(&mut self, site: LogitSite, n: usize) {
        *self.logits.entry(site).or_insert(0) += n;
    }

    pub fn logit_count(&self, site: LogitSite) -> usize {
        self.logits.get(&site).copied().unwrap_or(0)
    }

    fn unary_tracked(&self, a: Var) -> bool {
        self.tracked(a)
    }

    // ---- forward ops -------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::dimension(format!("matmul {sa:?} × {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            false,
            self.value(b).data(),
            false,
            &mut out,
            0.0,
        );
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push(Tensor::new(&[m, n], out)?, Op::MatMul(a, b), tracked))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 2 {
            return Err(Error::dimension(format!("transpose needs rank 2, got {s:?}")));
        }
        let (m, n) = (s[0], s[1]);
        let src = self.value(a).data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        let tracked = self.unary_tracked(a);
        Ok(self.push(Tensor::new(&[n, m], out)?, Op::Transpose(a), tracked))
    }

    pub fn binary(&mut self, kind: BinaryKind, a: Var, b: Var) -> Result<Var> {
        let out_shape = broadcast_shape(self.shape(a), self.shape(b))?;
        let (va, vb) = (self.value(a), self.value(b));
        let f = match kind {
            BinaryKind::Add => |x: f64, y: f64| x + y,
            BinaryKind::Sub => |x: f64, y: f64| x - y,
            BinaryKind::Mul => |x: f64, y: f64| x * y,
            BinaryKind::Div => |x: f64, y: f64| x / y,
        };
        let data = if va.shape() == vb.shape() {
            va.data()
                .iter()
                .zip(vb.data())
                .map(|(&x, &y)| f(x, y))
                .collect()
        } else {
            let numel = out_shape.iter().product();
            let mut data = vec![0.0; numel];
            let (da, db) = (va.data(), vb.data());
            for_each_broadcast(&out_shape, va.shape(), vb.shape(), |o, ia, ib| {
                data[o] = f(da[ia], db[ib]);
            });
            data
        };
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push(
            Tensor::new(&out_shape, data)?,
            Op::Binary(kind, a, b),
            tracked,
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Div, a, b)
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let value = self.value(a).map(|x| x * factor);
        let tracked = self.unary_tracked(a);
        self.push(value, Op::Scale(a, factor), tracked)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).map(|x| x + c);
        let tracked = self.unary_tracked(a);
        self.push(value, Op::Shift(a), tracked)
    }

    pub fn unary(&mut self, kind: UnaryKind, a: Var) -> Var {
        let value = match kind {
            UnaryKind::Gelu => self.value(a).map(gelu),
            UnaryKind::Relu => self.value(a).map(|x| x.max(0.0)),
            UnaryKind::Sigmoid => self.value(a).map(sigmoid),
        };
        let tracked = self.unary_tracked(a);
        self.push(value, Op::Unary(kind, a), tracked)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(UnaryKind::Gelu, a)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(UnaryKind::Relu, a)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(UnaryKind::Sigmoid, a)
    }

    /// Max-subtracted softmax along `axis`.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || shape[axis] == 0 {
            return Err(Error::dimension(format!(
                "softmax axis {axis} invalid or empty for shape {shape:?}"
            )));
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let src = self.value(a).data();
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let mut max = f64::NEG_INFINITY;
                for l in 0..len {
                    max = max.max(src[base + l * inner]);
                }
                let mut total = 0.0;
                for l in 0..len {
                    let e = (src[base + l * inner] - max).exp();
                    out[base + l * inner] = e;
                    total += e;
                }
                for l in 0..len {
                    out[base + l * inner] /= total;
                }
            }
        }
        let tracked = self.unary_tracked(a);
        Ok(self.push(Tensor::new(&shape, out)?, Op::Softmax(a, axis), tracked))
    }

    /// `x W + b` applied over the last axis of `x`.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (sx, sw, sb) = (self.shape(x), self.shape(w), self.shape(b));
        if sw.len() != 2 || sb != [sw[1]] || sx.last() != Some(&sw[0]) {
            return Err(Error::dimension(format!(
                "affine input {sx:?} with weight {sw:?} and bias {sb:?}"
            )));
        }
        let (c_in, c_out) = (sw[0], sw[1]);
        let rows = self.value(x).numel() / c_in.max(1);
        let mut out_shape = sx.to_vec();
        *out_shape.last_mut().unwrap() = c_out;
        let bias = self.value(b).data();
        let mut out = Vec::with_capacity(rows * c_out);
        for _ in 0..rows {
            out.extend_from_slice(bias);
        }
        gemm(
            rows,
            c_in,
            c_out,
            self.value(x).data(),
            false,
            self.value(w).data(),
            false,
            &mut out,
            1.0,
        );
        let tracked = self.tracked(x) || self.tracked(w) || self.tracked(b);
        Ok(self.push(Tensor::new(&out_shape, out)?, Op::Affine(x, w, b), tracked))
    }

    /// Normalizes every vector along the last axis to zero mean and unit
    /// variance, then applies the per-channel `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (sx, sg, sb) = (self.shape(x).to_vec(), self.shape(gain), self.shape(bias));
        let c = *sx.last().unwrap_or(&0);
        if c == 0 || sg != [c] || sb != [c] {
            return Err(Error::dimension(format!(
                "layer_norm input {sx:?} with gain {sg:?} and bias {sb:?}"
            )));
        }
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let mut out = Vec::with_capacity(self.value(x).numel());
        for row in self.value(x).data().chunks(c) {
            let (mean, inv) = moments(row);
            out.extend(row.iter().enumerate().map(|(k, v)| (v - mean) * inv * g[k] + b[k]));
        }
        let tracked = self.tracked(x) || self.tracked(gain) || self.tracked(bias);
        Ok(self.push(Tensor::new(&sx, out)?, Op::LayerNorm(x, gain, bias), tracked))
    }

    pub fn mean_pool(&mut self, x: Var, axis: PoolAxis) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 3 || s[0] == 0 || s[1] == 0 {
            return Err(Error::dimension(format!("mean_pool needs H×W×C, got {s:?}")));
        }
        let (h, w, c) = (s[0], s[1], s[2]);
        let src = self.value(x).data();
        let out = match axis {
            PoolAxis::Width => {
                let mut out = vec![0.0; h * c];
                for i in 0..h {
                    for j in 0..w {
                        let row = &src[(i * w + j) * c..(i * w + j + 1) * c];
                        for (o, v) in out[i * c..(i + 1) * c].iter_mut().zip(row) {
                            *o += v;
                        }
                    }
                }
                out.iter_mut().for_each(|v| *v /= w as f64);
                Tensor::new(&[h, c], out)?
            }
            PoolAxis::Height => {
                let mut out = vec![0.0; w * c];
                for i in 0..h {
                    for j in 0..w {
                        let row = &src[(i * w + j) * c..(i * w + j + 1) * c];
                        for (o, v) in out[j * c..(j + 1) * c].iter_mut().zip(row) {
                            *o += v;
                        }
                    }
                }
                out.iter_mut().for_each(|v| *v /= h as f64);
                Tensor::new(&[w, c], out)?
            }
        };
        let tracked = self.unary_tracked(x);
        Ok(self.push(out, Op::MeanPool(x, axis), tracked))
    }

    /// Bilinear resampling of an `h×w×C` map, align-corners=false, edge clamped.
    pub fn bilinear_resize(&mut self, x: Var, to: (usize, usize)) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 3 || to.0 == 0 || to.1 == 0 || s[0] == 0 || s[1] == 0 {
            return Err(Error::dimension(format!(
                "bilinear_resize {s:?} to {to:?}"
            )));
        }
        let (h, w, c) = (s[0], s[1], s[2]);
        let (oh, ow) = to;
        let ty = bilinear_taps(h, oh);
        let tx = bilinear_taps(w, ow);
        let src = self.value(x).data();
        let mut out = vec![0.0; oh * ow * c];
        for (y, &(y0, y1, fy)) in ty.iter().enumerate() {
            for (xx, &(x0, x1, fx)) in tx.iter().enumerate() {
                let taps = [
                    ((y0 * w + x0) * c, (1.0 - fy) * (1.0 - fx)),
                    ((y0 * w + x1) * c, (1.0 - fy) * fx),
                    ((y1 * w + x0) * c, fy * (1.0 - fx)),
                    ((y1 * w + x1) * c, fy * fx),
                ];
                let dst = &mut out[(y * ow + xx) * c..(y * ow + xx + 1) * c];
                for (base, wt) in taps {
                    if wt == 0.0 {
                        continue;
                    }
                    for (d, v) in dst.iter_mut().zip(&src[base..base + c]) {
                        *d += wt * v;
                    }
                }
            }
        }
        let tracked = self.unary_tracked(x);
        Ok(self.push(Tensor::new(&[oh, ow, c], out)?, Op::Resize(x), tracked))
    }

    /// Concatenation along the last axis.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let r = sa.len();
        if r == 0 || sb.len() != r || sa[..r - 1] != sb[..r - 1] {
            return Err(Error::dimension(format!("concat {sa:?} with {sb:?}")));
        }
        let (ca, cb) = (sa[r - 1], sb[r - 1]);
        let mut shape = sa.to_vec();
        shape[r - 1] = ca + cb;
        let rows = self.value(a).numel() / ca.max(1);
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(rows * (ca + cb));
        for i in 0..rows {
            out.extend_from_slice(&da[i * ca..(i + 1) * ca]);
            out.extend_from_slice(&db[i * cb..(i + 1) * cb]);
        }
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push(Tensor::new(&shape, out)?, Op::Concat(a, b), tracked))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).reshape(shape)?;
        let tracked = self.unary_tracked(a);
        Ok(self.push(value, Op::Reshape(a), tracked))
    }

    /// `H×W×C → (H/k)×(W/k)×(k·k·C)`, each output cell holding its
    /// non-overlapping k×k patch in (row, column, channel) order.
    pub fn space_to_depth(&mut self, x: Var, k: usize) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 3 || k == 0 || s[0] % k != 0 || s[1] % k != 0 {
            return Err(Error::dimension(format!(
                "space_to_depth({k}) of {s:?}"
            )));
        }
        let (h, w, c) = (s[0], s[1], s[2]);
        let (oh, ow) = (h / k, w / k);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(src.len());
        for i in 0..oh {
            for j in 0..ow {
                for dy in 0..k {
                    for dx in 0..k {
                        let base = ((i * k + dy) * w + j * k + dx) * c;
                        out.extend_from_slice(&src[base..base + c]);
                    }
                }
            }
        }
        let tracked = self.unary_tracked(x);
        Ok(self.push(
            Tensor::new(&[oh, ow, k * k * c], out)?,
            Op::SpaceToDepth(x, k),
            tracked,
        ))
    }

    /// Row lookup; `None` ids produce zero rows.
    pub fn gather_rows(&mut self, table: Var, ids: &[Option<usize>]) -> Result<Var> {
        let s = self.shape(table);
        if s.len() != 2 {
            return Err(Error::dimension(format!("gather_rows table {s:?}")));
        }
        let (vocab, d) = (s[0], s[1]);
        if let Some(bad) = ids.iter().flatten().find(|&&i| i >= vocab) {
            return Err(Error::config(format!(
                "token id {bad} outside vocabulary of {vocab}"
            )));
        }
        let src = self.value(table).data();
        let mut out = vec![0.0; ids.len() * d];
        for (t, id) in ids.iter().enumerate() {
            if let Some(id) = id {
                out[t * d..(t + 1) * d].copy_from_slice(&src[id * d..(id + 1) * d]);
            }
        }
        let tracked = self.unary_tracked(table);
        Ok(self.push(
            Tensor::new(&[ids.len(), d], out)?,
            Op::Gather(table, ids.to_vec()),
            tracked,
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let total = self.value(a).sum();
        let tracked = self.unary_tracked(a);
        self.push(Tensor::scalar(total), Op::Sum(a), tracked)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).numel().max(1) as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Sum over `axes`, keeping them as size-1 extents.
    pub fn sum_axes(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axes.iter().any(|&ax| ax >= shape.len()) {
            return Err(Error::dimension(format!(
                "sum_axes {axes:?} of {shape:?}"
            )));
        }
        let mut out_shape = shape.clone();
        for &ax in axes {
            out_shape[ax] = 1;
        }
        let numel = out_shape.iter().product();
        let mut out = vec![0.0; numel];
        let src = self.value(a).data();
        for_each_broadcast(&shape, &shape, &out_shape, |i, _, o| out[o] += src[i]);
        let tracked = self.unary_tracked(a);
        Ok(self.push(Tensor::new(&out_shape, out)?, Op::SumAxes(a), tracked))
    }

    /// Mean binary cross-entropy against a constant 0/1 target, with logs
    /// clamped at [`BCE_EPS`].
    pub fn bce(&mut self, pred: Var, target: &Tensor) -> Result<Var> {
        let p = self.value(pred);
        if p.shape() != target.shape() {
            return Err(Error::dimension(format!(
                "bce prediction {:?} vs target {:?}",
                p.shape(),
                target.shape()
            )));
        }
        let n = p.numel().max(1) as f64;
        let total: f64 = p
            .data()
            .iter()
            .zip(target.data())
            .map(|(&p, &y)| -(y * p.max(BCE_EPS).ln() + (1.0 - y) * (1.0 - p).max(BCE_EPS).ln()))
            .sum();
        let tracked = self.unary_tracked(pred);
        Ok(self.push(
            Tensor::scalar(total / n),
            Op::Bce(pred, target.clone()),
            tracked,
        ))
    }

    // ---- backward ----------------------------------------------------

    /// Accumulates d(loss)/d(node) for every tracked node. Runs once per tape.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.grads.is_some() {
            return Err(Error::BackwardTwice);
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::NonScalarLoss(self.shape(loss).to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.shape(loss), 1.0));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.tracked {
                continue;
            }
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        self.grads = Some(grads);
        Ok(())
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.as_ref()?.get(v.0)?.as_ref()
    }

    /// Gradients of every parameter touched by this tape (zeros for
    /// parameters that did not influence the loss).
    pub fn param_grads(&self) -> GradMap {
        self.params
            .iter()
            .map(|(name, &v)| {
                let g = self
                    .grad(v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(self.shape(v)));
                (name.clone(), g)
            })
            .collect()
    }

    fn propagate(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[idx];
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (va.shape()[0], va.shape()[1], vb.shape()[1]);
                if self.tracked(*a) {
                    let mut da = vec![0.0; m * k];
                    gemm(m, n, k, g.data(), false, vb.data(), true, &mut da, 0.0);
                    accumulate(grads, *a, va.shape(), da);
                }
                if self.tracked(*b) {
                    let mut db = vec![0.0; k * n];
                    gemm(k, m, n, va.data(), true, g.data(), false, &mut db, 0.0);
                    accumulate(grads, *b, vb.shape(), db);
                }
            }
            Op::Transpose(a) => {
                let (n, m) = (out.shape()[0], out.shape()[1]);
                let mut da = vec![0.0; m * n];
                for i in 0..n {
                    for j in 0..m {
                        da[j * n + i] = g.data()[i * m + j];
                    }
                }
                accumulate(grads, *a, self.shape(*a), da);
            }
            Op::Binary(kind, a, b) => self.binary_backward(*kind, *a, *b, out.shape(), g, grads),
            Op::Scale(a, f) => {
                let da = g.data().iter().map(|x| x * f).collect();
                accumulate(grads, *a, self.shape(*a), da);
            }
            Op::Shift(a) => accumulate(grads, *a, self.shape(*a), g.data().to_vec()),
            Op::Unary(kind, a) => {
                let x = self.value(*a).data();
                let y = out.data();
                let da = g
                    .data()
                    .iter()
                    .enumerate()
                    .map(|(i, gi)| {
                        gi * match kind {
                            UnaryKind::Gelu => gelu_grad(x[i]),
                            UnaryKind::Relu => {
                                if x[i] > 0.0 {
                                    1.0
                                } else {
                                    0.0
                                }
                            }
                            UnaryKind::Sigmoid => y[i] * (1.0 - y[i]),
                        }
                    })
                    .collect();
                accumulate(grads, *a, self.shape(*a), da);
            }
            Op::Softmax(a, axis) => {
                let (outer, len, inner) = split_axis(out.shape(), *axis);
                let (y, gy) = (out.data(), g.data());
                let mut da = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * len * inner + i;
                        let dot: f64 = (0..len)
                            .map(|l| gy[base + l * inner] * y[base + l * inner])
                            .sum();
                        for l in 0..len {
                            let at = base + l * inner;
                            da[at] = y[at] * (gy[at] - dot);
                        }
                    }
                }
                accumulate(grads, *a, out.shape(), da);
            }
            Op::Affine(x, w, b) => {
                let (vx, vw) = (self.value(*x), self.value(*w));
                let (c_in, c_out) = (vw.shape()[0], vw.shape()[1]);
                let rows = vx.numel() / c_in.max(1);
                if self.tracked(*x) {
                    let mut dx = vec![0.0; rows * c_in];
                    gemm(rows, c_out, c_in, g.data(), false, vw.data(), true, &mut dx, 0.0);
                    accumulate(grads, *x, vx.shape(), dx);
                }
                if self.tracked(*w) {
                    let mut dw = vec![0.0; c_in * c_out];
                    gemm(c_in, rows, c_out, vx.data(), true, g.data(), false, &mut dw, 0.0);
                    accumulate(grads, *w, vw.shape(), dw);
                }
                if self.tracked(*b) {
                    let mut db = vec![0.0; c_out];
                    for row in g.data().chunks(c_out) {
                        for (d, v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    accumulate(grads, *b, &[c_out], db);
                }
            }
            Op::LayerNorm(x, gain, bias) => {
                let vx = self.value(*x);
                let c = self.shape(*gain)[0];
                let gv = self.value(*gain).data();
                let mut dx = vec![0.0; vx.numel()];
                let mut dg = vec![0.0; c];
                let mut db = vec![0.0; c];
                for (r, (row, gr)) in vx.data().chunks(c).zip(g.data().chunks(c)).enumerate() {
                    let (mean, inv) = moments(row);
                    let xhat: Vec<f64> = row.iter().map(|v| (v - mean) * inv).collect();
                    let dxhat: Vec<f64> = gr.iter().zip(gv).map(|(a, b)| a * b).collect();
                    let m1 = dxhat.iter().sum::<f64>() / c as f64;
                    let m2 = dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                    for k in 0..c {
                        dx[r * c + k] = inv * (dxhat[k] - m1 - xhat[k] * m2);
                        dg[k] += gr[k] * xhat[k];
                        db[k] += gr[k];
                    }
                }
                if self.tracked(*x) {
                    accumulate(grads, *x, vx.shape(), dx);
                }
                if self.tracked(*gain) {
                    accumulate(grads, *gain, &[c], dg);
                }
                if self.tracked(*bias) {
                    accumulate(grads, *bias, &[c], db);
                }
            }
            Op::MeanPool(x, axis) => {
                let s = self.shape(*x);
                let (h, w, c) = (s[0], s[1], s[2]);
                let gd = g.data();
                let mut dx = vec![0.0; h * w * c];
                for i in 0..h {
                    for j in 0..w {
                        let (src, n) = match axis {
                            PoolAxis::Width => (i, w),
                            PoolAxis::Height => (j, h),
                        };
                        for ch in 0..c {
                            dx[(i * w + j) * c + ch] = gd[src * c + ch] / n as f64;
                        }
                    }
                }
                accumulate(grads, *x, s, dx);
            }
            Op::Resize(x) => {
                let s = self.shape(*x);
                let (h, w, c) = (s[0], s[1], s[2]);
                let (oh, ow) = (out.shape()[0], out.shape()[1]);
                let ty = bilinear_taps(h, oh);
                let tx = bilinear_taps(w, ow);
                let gd = g.data();
                let mut dx = vec![0.0; h * w * c];
                for (y, &(y0, y1, fy)) in ty.iter().enumerate() {
                    for (xx, &(x0, x1, fx)) in tx.iter().enumerate() {
                        let taps = [
                            ((y0 * w + x0) * c, (1.0 - fy) * (1.0 - fx)),
                            ((y0 * w + x1) * c, (1.0 - fy) * fx),
                            ((y1 * w + x0) * c, fy * (1.0 - fx)),
                            ((y1 * w + x1) * c, fy * fx),
                        ];
                        let src = &gd[(y * ow + xx) * c..(y * ow + xx + 1) * c];
                        for (base, wt) in taps {
                            if wt == 0.0 {
                                continue;
                            }
                            for (d, v) in dx[base..base + c].iter_mut().zip(src) {
                                *d += wt * v;
                            }
                        }
                    }
                }
                accumulate(grads, *x, s, dx);
            }
            Op::Concat(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (ca, cb) = (*sa.last().unwrap(), *sb.last().unwrap());
                let rows = self.value(*a).numel() / ca.max(1);
                let (mut da, mut db) = (Vec::with_capacity(rows * ca), Vec::with_capacity(rows * cb));
                for row in g.data().chunks(ca + cb).take(rows) {
                    da.extend_from_slice(&row[..ca]);
                    db.extend_from_slice(&row[ca..]);
                }
                if self.tracked(*a) {
                    accumulate(grads, *a, sa, da);
                }
                if self.tracked(*b) {
                    accumulate(grads, *b, sb, db);
                }
            }
            Op::Reshape(a) => accumulate(grads, *a, self.shape(*a), g.data().to_vec()),
            Op::SpaceToDepth(x, k) => {
                let s = self.shape(*x);
                let (w, c) = (s[1], s[2]);
                let (oh, ow) = (out.shape()[0], out.shape()[1]);
                let gd = g.data();
                let mut dx = vec![0.0; self.value(*x).numel()];
                let mut src = 0;
                for i in 0..oh {
                    for j in 0..ow {
                        for dy in 0..*k {
                            for dxx in 0..*k {
                                let base = ((i * k + dy) * w + j * k + dxx) * c;
                                dx[base..base + c].copy_from_slice(&gd[src..src + c]);
                                src += c;
                            }
                        }
                    }
                }
                accumulate(grads, *x, s, dx);
            }
            Op::Gather(table, ids) => {
                let s = self.shape(*table);
                let d = s[1];
                let mut dt = vec![0.0; s[0] * d];
                for (t, id) in ids.iter().enumerate() {
                    if let Some(id) = id {
                        for (a, b) in dt[id * d..(id + 1) * d]
                            .iter_mut()
                            .zip(&g.data()[t * d..(t + 1) * d])
                        {
                            *a += b;
                        }
                    }
                }
                accumulate(grads, *table, s, dt);
            }
            Op::Sum(a) => {
                let s = self.shape(*a);
                accumulate(grads, *a, s, vec![g.item(); self.value(*a).numel()]);
            }
            Op::SumAxes(a) => {
                let s = self.shape(*a);
                let mut da = vec![0.0; self.value(*a).numel()];
                let gd = g.data();
                for_each_broadcast(s, s, out.shape(), |i, _, o| da[i] = gd[o]);
                accumulate(grads, *a, s, da);
            }
            Op::Bce(pred, target) => {
                let p = self.value(*pred);
                let scale = g.item() / p.numel().max(1) as f64;
                let dp = p
                    .data()
                    .iter()
                    .zip(target.data())
                    .map(|(&p, &y)| {
                        let mut d = 0.0;
                        if p > BCE_EPS {
                            d -= y / p;
                        }
                        if 1.0 - p > BCE_EPS {
                            d += (1.0 - y) / (1.0 - p);
                        }
                        d * scale
                    })
                    .collect();
                accumulate(grads, *pred, p.shape(), dp);
            }
        }
    }

    fn binary_backward(
        &self,
        kind: BinaryKind,
        a: Var,
        b: Var,
        out_shape: &[usize],
        g: &Tensor,
        grads: &mut [Option<Tensor>],
    ) {
        let (va, vb) = (self.value(a), self.value(b));
        let (xa, xb, gd) = (va.data(), vb.data(), g.data());
        let mut da = vec![0.0; va.numel()];
        let mut db = vec![0.0; vb.numel()];
        let mut step = |o: usize, ia: usize, ib: usize| {
            let go = gd[o];
            match kind {
                BinaryKind::Add => {
                    da[ia] += go;
                    db[ib] += go;
                }
                BinaryKind::Sub => {
                    da[ia] += go;
                    db[ib] -= go;
                }
                BinaryKind::Mul => {
                    da[ia] += go * xb[ib];
                    db[ib] += go * xa[ia];
                }
                BinaryKind::Div => {
                    da[ia] += go / xb[ib];
                    db[ib] -= go * xa[ia] / (xb[ib] * xb[ib]);
                }
            }
        };
        if va.shape() == vb.shape() {
            for i in 0..gd.len() {
                step(i, i, i);
            }
        } else {
            for_each_broadcast(out_shape, va.shape(), vb.shape(), step);
        }
        if self.tracked(a) {
            accumulate(grads, a, va.shape(), da);
        }
        if self.tracked(b) {
            accumulate(grads, b, vb.shape(), db);
        }
    }
}

const LAYER_NORM_EPS: f64 = 1e-5;

/// Mean and inverse standard deviation of one normalized vector.
fn moments(row: &[f64]) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, 1.0 / (var + LAYER_NORM_EPS).sqrt())
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, shape: &[usize], data: Vec<f64>) {
    let t = Tensor::new(shape, data).expect("gradient shape matches its value");
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&t),
        slot @ None => *slot = Some(t),
    }
}

/// Broadcast of two same-rank shapes where only size-1 extents stretch.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    if a.len() != b.len() {
        return Err(Error::dimension(format!(
            "cannot broadcast {a:?} with {b:?}: ranks differ"
        )));
    }
    a.iter()
        .zip(b)
        .map(|(&x, &y)| match (x, y) {
            _ if x == y => Ok(x),
            (1, _) => Ok(y),
            (_, 1) => Ok(x),
            _ => Err(Error::dimension(format!("cannot broadcast {a:?} with {b:?}"))),
        })
        .collect()
}

/// Visits every output offset together with the matching offsets into two
/// operands whose size-1 extents are broadcast.
fn for_each_broadcast(
    out: &[usize],
    sa: &[usize],
    sb: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let rank = out.len();
    let strides = |s: &[usize]| {
        let mut st = vec![0; rank];
        let mut acc = 1;
        for d in (0..rank).rev() {
            st[d] = if s[d] == 1 { 0 } else { acc };
            acc *= s[d];
        }
        st
    };
    let (sta, stb) = (strides(sa), strides(sb));
    let numel: usize = out.iter().product();
    let mut idx = vec![0; rank];
    let (mut ia, mut ib) = (0, 0);
    for o in 0..numel {
        f(o, ia, ib);
        let mut d = rank;
        while d > 0 {
            d -= 1;
            idx[d] += 1;
            ia += sta[d];
            ib += stb[d];
            if idx[d] < out[d] {
                break;
            }
            ia -= sta[d] * out[d];
            ib -= stb[d] * out[d];
            idx[d] = 0;
        }
    }
}
