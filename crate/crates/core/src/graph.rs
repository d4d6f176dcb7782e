//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation as a node in creation order, so the
//! node list is already topologically sorted. [`Graph::backward`] walks it in
//! reverse and adds gradients into every leaf that was created with
//! `requires_grad`. Leaf gradients accumulate across calls; clearing them is
//! the optimizer's job.

use alloc::boxed::Box;
use alloc::vec;
use alloc::vec::Vec;

use crate::deform::{ConvRecord, DeformRecord, SampleRecord};
use crate::detector::roi::RoiRecord;
use crate::error::{Error, Result};
use crate::optim::{ParamId, ParamStore};
use crate::tensor::{broadcast_shape, gemm_acc, gemm_nt_acc, gemm_tn_acc, Tensor};

/// Handle to a tensor recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

pub(crate) enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    MatMul(Var, Var),
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    Concat(Vec<Var>),
    Gather(Var, Vec<usize>),
    SoftmaxCe {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    BceLogits {
        logits: Var,
        targets: Vec<f64>,
    },
    SmoothL1 {
        pred: Var,
        target: Var,
        beta: f64,
    },
    Conv(Box<ConvRecord>),
    DeformConv(Box<DeformRecord>),
    Bilinear(Box<SampleRecord>),
    RoiAlign(Box<RoiRecord>),
    /// Nearest-neighbour resize; holds the source index of every output element.
    Resize(Var, Vec<usize>),
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Gradient buffers for one backward sweep, indexed by node.
pub(crate) struct GradBuf {
    grads: Vec<Option<Vec<f64>>>,
    tracked: Vec<bool>,
}

impl GradBuf {
    /// Mutable gradient slot for `v`, or `None` if `v` does not require grad.
    pub(crate) fn slot(&mut self, v: Var) -> Option<&mut [f64]> {
        if !self.tracked[v.0] {
            return None;
        }
        Some(self.grads[v.0].as_mut().map(|g| g.as_mut_slice()).unwrap())
    }

    pub(crate) fn wants(&self, v: Var) -> bool {
        self.tracked[v.0]
    }

    fn add(&mut self, v: Var, values: impl IntoIterator<Item = f64>) {
        if let Some(g) = self.slot(v) {
            for (dst, src) in g.iter_mut().zip(values) {
                *dst += src;
            }
        }
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    bindings: Vec<(Var, ParamId)>,
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

    pub(crate) fn push(&mut self, mut value: Tensor, op: Op, inputs: &[Var]) -> Var {
        value.requires_grad = inputs.iter().any(|v| self.nodes[v.0].value.requires_grad);
        value.grad = None;
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Record an input tensor. Its `requires_grad` flag decides whether
    /// backward fills its gradient.
    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        self.nodes.push(Node {
            value: tensor,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    /// Constant input (never receives a gradient).
    pub fn constant(&mut self, mut tensor: Tensor) -> Var {
        tensor.requires_grad = false;
        tensor.grad = None;
        self.leaf(tensor)
    }

    /// Bind a stored parameter as a gradient-tracking leaf.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let mut t = store.get(id).clone();
        t.requires_grad = true;
        t.grad = None;
        let v = self.leaf(t);
        self.bindings.push((v, id));
        v
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    /// Accumulated gradient of a leaf, if backward reached it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad.as_deref()
    }

    /// Add the gradients of bound parameters into the store. Bound
    /// parameters that backward did not reach receive zeros.
    pub fn accumulate_into(&self, store: &mut ParamStore) {
        for &(v, id) in &self.bindings {
            let p = store.get_mut(id);
            let n = p.len();
            let g = p.grad.get_or_insert_with(|| vec![0.0; n]);
            if let Some(src) = self.nodes[v.0].value.grad.as_deref() {
                for (d, s) in g.iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let shape = broadcast_shape(name, ta.shape(), tb.shape())?;
        let n: usize = shape.iter().product();
        let (da, db) = (ta.data(), tb.data());
        let data: Vec<f64> = (0..n).map(|j| f(da[j % da.len()], db[j % db.len()])).collect();
        Ok(self.push(Tensor::new(&shape, data)?, op, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let t = self.value(a);
        let out = Tensor::new(t.shape(), t.data().iter().map(|x| x * k).collect()).unwrap();
        self.push(out, Op::Scale(a, k), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let out = Tensor::new(
            t.shape(),
            t.data()
                .iter()
                .map(|&x| if x > 0.0 { x } else { 0.0 })
                .collect(),
        )
        .unwrap();
        self.push(out, Op::Relu(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let out = Tensor::new(t.shape(), t.data().iter().map(|&x| sigmoid(x)).collect()).unwrap();
        self.push(out, Op::Sigmoid(a), &[a])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (sa, sb) = (ta.shape(), tb.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut data = vec![0.0; m * n];
        gemm_acc(ta.data(), tb.data(), &mut data, m, k, n);
        Ok(self.push(Tensor::new(&[m, n], data)?, Op::MatMul(a, b), &[a, b]))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s: f64 = self.data(a).iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let d = self.data(a);
        let s = d.iter().sum::<f64>() / d.len().max(1) as f64;
        self.push(Tensor::scalar(s), Op::Mean(a), &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).clone().reshape(shape)?;
        Ok(self.push(t, Op::Reshape(a), &[a]))
    }

    /// Concatenate along the leading axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.shape(parts[0]).to_vec();
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let s = self.shape(p);
            if s[1..] != first[1..] {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    lhs: first.clone(),
                    rhs: s.to_vec(),
                });
            }
            rows += s[0];
            data.extend_from_slice(self.data(p));
        }
        let mut shape = first;
        shape[0] = rows;
        Ok(self.push(Tensor::new(&shape, data)?, Op::Concat(parts.to_vec()), parts))
    }

    /// Pick flat elements of `a` by index and lay them out with `shape`.
    pub fn gather(&mut self, a: Var, indices: &[usize], shape: &[usize]) -> Result<Var> {
        let src = self.data(a);
        if let Some(&bad) = indices.iter().find(|&&i| i >= src.len()) {
            return Err(Error::ShapeMismatch {
                op: "gather",
                lhs: self.shape(a).to_vec(),
                rhs: vec![bad],
            });
        }
        let data = indices.iter().map(|&i| src[i]).collect();
        let t = Tensor::new(shape, data)?;
        Ok(self.push(t, Op::Gather(a, indices.to_vec()), &[a]))
    }

    /// Rows `rows` of a 2-D tensor.
    pub fn gather_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let s = self.shape(a).to_vec();
        let width: usize = s[1..].iter().product();
        let idx: Vec<usize> = rows
            .iter()
            .flat_map(|&r| (r * width)..(r + 1) * width)
            .collect();
        let mut shape = s;
        shape[0] = rows.len();
        self.gather(a, &idx, &shape)
    }

    /// Nearest-neighbour resize of `x[C×H×W]` to `out_h × out_w` by an
    /// integer factor per axis followed by cropping: output row `i` reads
    /// input row `i / f` with `f = ⌈out/in⌉`, which requires
    /// `(in − 1)·f < out ≤ in·f`.
    pub fn resize_nearest(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 {
            return Err(Error::ShapeMismatch {
                op: "resize_nearest",
                lhs: s,
                rhs: vec![out_h, out_w],
            });
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        let factor = |from: usize, to: usize| {
            let f = to.div_ceil(from);
            (f >= 1 && (from - 1) * f < to && to <= from * f).then_some(f)
        };
        let (fh, fw) = match (factor(h, out_h), factor(w, out_w)) {
            (Some(a), Some(b)) => (a, b),
            _ => {
                return Err(Error::Resize {
                    from: [h, w],
                    to: [out_h, out_w],
                })
            }
        };
        if (fh, fw) == (1, 1) {
            return Ok(x);
        }
        let mut map = Vec::with_capacity(c * out_h * out_w);
        for ch in 0..c {
            for i in 0..out_h {
                for j in 0..out_w {
                    map.push((ch * h + i / fh) * w + j / fw);
                }
            }
        }
        let src = self.data(x);
        let data = map.iter().map(|&k| src[k]).collect();
        let t = Tensor::new(&[c, out_h, out_w], data)?;
        Ok(self.push(t, Op::Resize(x, map), &[x]))
    }

    /// Mean negative log-likelihood of `labels` under row-wise softmax of
    /// `logits[n×c]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != labels.len() {
            return Err(Error::ShapeMismatch {
                op: "softmax_cross_entropy",
                lhs: s,
                rhs: vec![labels.len()],
            });
        }
        let (n, c) = (s[0], s[1]);
        if let Some(&label) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::LabelOutOfRange { label, classes: c });
        }
        let probs = softmax_rows(self.data(logits), c);
        let mut loss = 0.0;
        for (i, &l) in labels.iter().enumerate() {
            let row = &self.data(logits)[i * c..(i + 1) * c];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + libm::log(row.iter().map(|v| libm::exp(v - max)).sum::<f64>());
            loss += lse - row[l];
        }
        loss /= n.max(1) as f64;
        let op = Op::SoftmaxCe {
            logits,
            labels: labels.to_vec(),
            probs,
        };
        Ok(self.push(Tensor::scalar(loss), op, &[logits]))
    }

    /// Mean binary cross-entropy of sigmoid(`logits`) against `targets`.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[f64]) -> Result<Var> {
        let d = self.data(logits);
        if d.len() != targets.len() {
            return Err(Error::ShapeMismatch {
                op: "bce_with_logits",
                lhs: self.shape(logits).to_vec(),
                rhs: vec![targets.len()],
            });
        }
        let n = d.len().max(1) as f64;
        let loss = d
            .iter()
            .zip(targets)
            .map(|(&x, &t)| x.max(0.0) - x * t + libm::log1p(libm::exp(-x.abs())))
            .sum::<f64>()
            / n;
        let op = Op::BceLogits {
            logits,
            targets: targets.to_vec(),
        };
        Ok(self.push(Tensor::scalar(loss), op, &[logits]))
    }

    /// Mean smooth-L1: `0.5·d²/β` for `|d| < β`, else `|d| − 0.5·β`.
    pub fn smooth_l1(&mut self, pred: Var, target: Var, beta: f64) -> Result<Var> {
        let (tp, tt) = (self.value(pred), self.value(target));
        if tp.shape() != tt.shape() {
            return Err(Error::ShapeMismatch {
                op: "smooth_l1",
                lhs: tp.shape().to_vec(),
                rhs: tt.shape().to_vec(),
            });
        }
        if !(beta > 0.0) {
            return Err(Error::Config("smooth_l1 beta must be positive".into()));
        }
        let n = tp.len().max(1) as f64;
        let loss = tp
            .data()
            .iter()
            .zip(tt.data())
            .map(|(p, t)| {
                let d = (p - t).abs();
                if d < beta {
                    0.5 * d * d / beta
                } else {
                    d - 0.5 * beta
                }
            })
            .sum::<f64>()
            / n;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SmoothL1 { pred, target, beta },
            &[pred, target],
        ))
    }

    /// Reverse sweep from a scalar `loss`. Leaf gradients accumulate.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lt = self.value(loss);
        if !lt.is_scalar() {
            return Err(Error::NotScalar {
                op: "backward",
                shape: lt.shape().to_vec(),
            });
        }
        let tracked: Vec<bool> = self.nodes.iter().map(|n| n.value.requires_grad).collect();
        let mut buf = GradBuf {
            grads: self
                .nodes
                .iter()
                .map(|n| n.value.requires_grad.then(|| vec![0.0; n.value.len()]))
                .collect(),
            tracked,
        };
        if !buf.wants(loss) {
            return Ok(());
        }
        buf.slot(loss).unwrap()[0] = 1.0;

        for i in (0..=loss.0).rev() {
            if !buf.tracked[i] {
                continue;
            }
            let gout = buf.grads[i].take().unwrap();
            self.backward_node(i, &gout, &mut buf);
            buf.grads[i] = Some(gout);
        }

        for (node, g) in self.nodes.iter_mut().zip(buf.grads) {
            if let (Op::Leaf, Some(g)) = (&node.op, g) {
                match &mut node.value.grad {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    None => node.value.grad = Some(g),
                }
            }
        }
        Ok(())
    }

    fn backward_node(&self, i: usize, gout: &[f64], buf: &mut GradBuf) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                reduce_into(buf, *a, gout, |_, g| g);
                reduce_into(buf, *b, gout, |_, g| g);
            }
            Op::Sub(a, b) => {
                reduce_into(buf, *a, gout, |_, g| g);
                reduce_into(buf, *b, gout, |_, g| -g);
            }
            Op::Mul(a, b) => {
                let (da, db) = (self.data(*a), self.data(*b));
                reduce_into(buf, *a, gout, |j, g| g * db[j % db.len()]);
                reduce_into(buf, *b, gout, |j, g| g * da[j % da.len()]);
            }
            Op::Scale(a, k) => buf.add(*a, gout.iter().map(|g| g * k)),
            Op::Relu(a) => {
                let x = self.data(*a);
                buf.add(
                    *a,
                    gout.iter()
                        .zip(x)
                        .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 }),
                );
            }
            Op::Sigmoid(a) => {
                let y = node.value.data();
                buf.add(*a, gout.iter().zip(y).map(|(g, y)| g * y * (1.0 - y)));
            }
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if let Some(ga) = buf.slot(*a) {
                    gemm_nt_acc(gout, self.data(*b), ga, m, n, k);
                }
                if let Some(gb) = buf.slot(*b) {
                    gemm_tn_acc(self.data(*a), gout, gb, m, k, n);
                }
            }
            Op::Sum(a) => {
                let g = gout[0];
                buf.add(*a, core::iter::repeat(g));
            }
            Op::Mean(a) => {
                let g = gout[0] / self.value(*a).len().max(1) as f64;
                buf.add(*a, core::iter::repeat(g));
            }
            Op::Reshape(a) => buf.add(*a, gout.iter().copied()),
            Op::Concat(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    buf.add(p, gout[off..off + n].iter().copied());
                    off += n;
                }
            }
            Op::Gather(a, idx) => {
                if let Some(ga) = buf.slot(*a) {
                    for (&j, g) in idx.iter().zip(gout) {
                        ga[j] += g;
                    }
                }
            }
            Op::SoftmaxCe {
                logits,
                labels,
                probs,
            } => {
                let c = self.shape(*logits)[1];
                let n = labels.len().max(1) as f64;
                if let Some(gl) = buf.slot(*logits) {
                    for (i, &l) in labels.iter().enumerate() {
                        for j in 0..c {
                            let onehot = if j == l { 1.0 } else { 0.0 };
                            gl[i * c + j] += gout[0] * (probs[i * c + j] - onehot) / n;
                        }
                    }
                }
            }
            Op::BceLogits { logits, targets } => {
                let x = self.data(*logits);
                let n = x.len().max(1) as f64;
                buf.add(
                    *logits,
                    x.iter()
                        .zip(targets)
                        .map(|(&x, t)| gout[0] * (sigmoid(x) - t) / n),
                );
            }
            Op::SmoothL1 { pred, target, beta } => {
                let (p, t) = (self.data(*pred), self.data(*target));
                let n = p.len().max(1) as f64;
                let d: Vec<f64> = p
                    .iter()
                    .zip(t)
                    .map(|(p, t)| {
                        let d = p - t;
                        let g = if d.abs() < *beta {
                            d / beta
                        } else {
                            d.signum()
                        };
                        gout[0] * g / n
                    })
                    .collect();
                buf.add(*pred, d.iter().copied());
                buf.add(*target, d.iter().map(|g| -g));
            }
            Op::Conv(rec) => crate::deform::conv_backward(self, rec, gout, buf),
            Op::DeformConv(rec) => crate::deform::deform_backward(self, rec, gout, buf),
            Op::Bilinear(rec) => crate::deform::sample_backward(self, rec, gout, buf),
            Op::RoiAlign(rec) => crate::detector::roi::roi_backward(self, rec, gout, buf),
            Op::Resize(a, map) => {
                if let Some(ga) = buf.slot(*a) {
                    for (&j, g) in map.iter().zip(gout) {
                        ga[j] += g;
                    }
                }
            }
        }
    }
}

/// Add `f(j, gout[j])` into `v`'s gradient, folding broadcast repeats.
fn reduce_into(buf: &mut GradBuf, v: Var, gout: &[f64], f: impl Fn(usize, f64) -> f64) {
    if let Some(g) = buf.slot(v) {
        let len = g.len();
        for (j, &go) in gout.iter().enumerate() {
            g[j % len] += f(j, go);
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}

/// Row-wise softmax over rows of width `c`, stabilized by the row max.
pub fn softmax_rows(data: &[f64], c: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(data.len());
    for row in data.chunks(c) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let start = out.len();
        let mut z = 0.0;
        for &v in row {
            let e = libm::exp(v - max);
            z += e;
            out.push(e);
        }
        for v in &mut out[start..] {
            *v /= z;
        }
    }
    out
}
