//! Reverse-mode tape. Nodes are appended in evaluation order, which is a
//! topological order, so the backward sweep is a single reverse scan.

use std::sync::Arc;

use super::kernels::{self, ConvShape};
use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Statistics source for [`Tape::normalize`].
#[derive(Clone, Debug, PartialEq)]
pub enum NormMode {
    /// Pool mean and standard deviation over batch x positions, per channel.
    BatchStats,
    /// Use precomputed `(mean, std)` per channel.
    Frozen(Vec<(f64, f64)>),
}

/// Pooled standard deviations at or below this are rejected.
pub const MIN_POOL_STD: f64 = 1e-8;

/// Clamp applied inside the logarithms of [`Tape::bce`].
pub const BCE_CLAMP: f64 = 1e-12;

enum Op<T> {
    Leaf,
    Conv1d { x: Var, w: Var, b: Var, shape: ConvShape },
    Linear { x: Var, w: Var, b: Var },
    Elu(Var),
    Sigmoid(Var),
    Add(Var, Var),
    Affine { x: Var, scale: Option<Arc<[T]>> },
    Concat(Vec<Var>),
    Slice { x: Var, start: usize },
    Gather { x: Var, index: Arc<[usize]> },
    Normalize { x: Var, std: Vec<T>, frozen: bool },
    SteSign(Var),
    Bce { p: Var, target: Arc<[T]> },
    BceLogits { q: Var, target: Arc<[T]> },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Recorded computation with saved values for the backward pass.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of every node that required one.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn shape_err(msg: impl Into<String>) -> Error {
    Error::ShapeMismatch(msg.into())
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    /// Leaf node; gradients are accumulated for it when `requires_grad`.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Same-length 1-D convolution with zero padding `(k - 1) / 2`.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (batch, len, cin) = self.value(x).dims3()?;
        let (cout, wcin, kernel) = match self.value(w).shape()[..] {
            [o, i, k] => (o, i, k),
            ref s => return Err(shape_err(format!("conv weight must be (out, in, k), got {s:?}"))),
        };
        if wcin != cin {
            return Err(shape_err(format!("conv expects {wcin} input channels, got {cin}")));
        }
        if kernel % 2 == 0 {
            return Err(shape_err(format!("conv kernel size must be odd, got {kernel}")));
        }
        if self.value(b).shape() != [cout] {
            return Err(shape_err(format!("conv bias must be ({cout}), got {:?}", self.value(b).shape())));
        }
        let shape = ConvShape { batch, len, cin, cout, kernel };
        let y = kernels::conv1d_forward(self.value(x).data(), self.value(w).data(), self.value(b).data(), shape);
        let rg = self.rg(&[x, w, b]);
        Ok(self.push(Tensor::new(vec![batch, len, cout], y)?, Op::Conv1d { x, w, b, shape }, rg))
    }

    /// Position-wise affine layer, `w: (out, in)`, `b: (out)`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (batch, len, cin) = self.value(x).dims3()?;
        let (cout, wcin) = match self.value(w).shape()[..] {
            [o, i] => (o, i),
            ref s => return Err(shape_err(format!("linear weight must be (out, in), got {s:?}"))),
        };
        if wcin != cin || self.value(b).shape() != [cout] {
            return Err(shape_err(format!(
                "linear ({cout}x{wcin}) cannot consume {cin} channels"
            )));
        }
        let y = kernels::linear_forward(
            self.value(x).data(),
            self.value(w).data(),
            self.value(b).data(),
            batch * len,
            cin,
            cout,
        );
        let rg = self.rg(&[x, w, b]);
        Ok(self.push(Tensor::new(vec![batch, len, cout], y)?, Op::Linear { x, w, b }, rg))
    }

    fn map(&mut self, x: Var, f: impl Fn(T) -> T) -> Tensor<T> {
        let v = self.value(x);
        Tensor::new(v.shape().to_vec(), v.data().iter().map(|&a| f(a)).collect()).expect("same shape")
    }

    pub fn elu(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let y = Tensor::new(v.shape().to_vec(), T::elu(v.data())).expect("same shape");
        let rg = self.rg(&[x]);
        self.push(y, Op::Elu(x), rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let y = self.map(x, sigmoid);
        let rg = self.rg(&[x]);
        self.push(y, Op::Sigmoid(x), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(shape_err(format!(
                "add of {:?} and {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let mut y = self.value(a).clone();
        y.add_assign(self.value(b));
        let rg = self.rg(&[a, b]);
        Ok(self.push(y, Op::Add(a, b), rg))
    }

    /// `y = scale * x + offset` with constant `scale`/`offset`; this is how a
    /// channel realization enters the graph.
    pub fn affine_const(&mut self, x: Var, scale: Option<&[T]>, offset: &[T]) -> Result<Var> {
        let n = self.value(x).numel();
        if offset.len() != n || scale.is_some_and(|s| s.len() != n) {
            return Err(shape_err("channel realization length differs from codeword"));
        }
        let v = self.value(x);
        let data = match scale {
            None => v.data().iter().zip(offset).map(|(a, z)| *a + *z).collect(),
            Some(h) => v
                .data()
                .iter()
                .zip(h)
                .zip(offset)
                .map(|((a, h), z)| *h * *a + *z)
                .collect(),
        };
        let y = Tensor::new(v.shape().to_vec(), data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(
            y,
            Op::Affine {
                x,
                scale: scale.map(Arc::from),
            },
            rg,
        ))
    }

    /// Concatenates `(B, K, C_i)` tensors along the channel axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let (batch, len, _) = self.value(parts[0]).dims3()?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (b, k, c) = self.value(p).dims3()?;
            if (b, k) != (batch, len) {
                return Err(shape_err("concat of tensors with different batch/length"));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(batch * len * total);
        for row in 0..batch * len {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[row * w..(row + 1) * w]);
            }
        }
        let rg = self.rg(parts);
        Ok(self.push(Tensor::new(vec![batch, len, total], out)?, Op::Concat(parts.to_vec()), rg))
    }

    /// Channels `start..start + width` of a `(B, K, C)` tensor.
    pub fn slice_channels(&mut self, x: Var, start: usize, width: usize) -> Result<Var> {
        let (batch, len, c) = self.value(x).dims3()?;
        if start + width > c {
            return Err(shape_err(format!("channel slice {start}..{} of {c}", start + width)));
        }
        let data = self.value(x).data();
        let mut out = Vec::with_capacity(batch * len * width);
        for row in 0..batch * len {
            out.extend_from_slice(&data[row * c + start..row * c + start + width]);
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(vec![batch, len, width], out)?, Op::Slice { x, start }, rg))
    }

    /// Gather along positions: `y[:, i, :] = x[:, index[i], :]`.
    pub fn gather(&mut self, x: Var, index: &Arc<[usize]>) -> Result<Var> {
        let (batch, len, c) = self.value(x).dims3()?;
        if index.iter().any(|&i| i >= len) {
            return Err(shape_err(format!("gather index out of range for length {len}")));
        }
        let data = self.value(x).data();
        let mut out = Vec::with_capacity(batch * index.len() * c);
        for b in 0..batch {
            let base = b * len * c;
            for &i in index.iter() {
                out.extend_from_slice(&data[base + i * c..base + (i + 1) * c]);
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::new(vec![batch, index.len(), c], out)?,
            Op::Gather {
                x,
                index: Arc::clone(index),
            },
            rg,
        ))
    }

    /// Per-channel normalization `(x - mu) / sigma` with `(mu, sigma)` pooled
    /// over batch and positions. Returns the statistics that were applied.
    pub fn normalize(&mut self, x: Var, mode: &NormMode) -> Result<(Var, Vec<(f64, f64)>)> {
        let (batch, len, c) = self.value(x).dims3()?;
        let data = self.value(x).data();
        let stats: Vec<(f64, f64)> = match mode {
            NormMode::Frozen(s) => {
                if s.len() != c {
                    return Err(shape_err(format!("{} frozen statistics for {c} channels", s.len())));
                }
                s.clone()
            }
            NormMode::BatchStats => {
                let n = (batch * len) as f64;
                let mut out = Vec::with_capacity(c);
                for ch in 0..c {
                    let mean = data.iter().skip(ch).step_by(c).map(|v| v.as_f64()).sum::<f64>() / n;
                    let var = data
                        .iter()
                        .skip(ch)
                        .step_by(c)
                        .map(|v| (v.as_f64() - mean).powi(2))
                        .sum::<f64>()
                        / n;
                    let std = var.sqrt();
                    if !(std > MIN_POOL_STD) {
                        return Err(Error::DegenerateBlock(std));
                    }
                    out.push((mean, std));
                }
                out
            }
        };
        if let Some(&(_, s)) = stats.iter().find(|(_, s)| !(*s > 0.0)) {
            return Err(Error::DegenerateBlock(s));
        }
        let mean: Vec<T> = stats.iter().map(|s| T::of(s.0)).collect();
        let std: Vec<T> = stats.iter().map(|s| T::of(s.1)).collect();
        let out: Vec<T> = data
            .iter()
            .enumerate()
            .map(|(i, &v)| (v - mean[i % c]) / std[i % c])
            .collect();
        let rg = self.rg(&[x]);
        let frozen = matches!(mode, NormMode::Frozen(_));
        let var = self.push(Tensor::new(vec![batch, len, c], out)?, Op::Normalize { x, std, frozen }, rg);
        Ok((var, stats))
    }

    /// `sign(x)` with `sign(0) = +1`; backward uses the straight-through rule
    /// `d sign(b) / db = 1(|b| <= 1)`.
    pub fn ste_sign(&mut self, x: Var) -> Var {
        let y = self.map(x, |a| if a >= T::zero() { T::one() } else { -T::one() });
        let rg = self.rg(&[x]);
        self.push(y, Op::SteSign(x), rg)
    }

    /// Mean binary cross-entropy of probabilities `p` against 0/1 `target`.
    pub fn bce(&mut self, p: Var, target: &[T]) -> Result<Var> {
        let pv = self.value(p);
        if pv.numel() != target.len() {
            return Err(shape_err("bce target length differs from prediction"));
        }
        let eps = T::of(BCE_CLAMP);
        let n = T::of(target.len() as f64);
        let mut acc = T::zero();
        for (&q, &u) in pv.data().iter().zip(target) {
            acc -= u * q.max(eps).ln() + (T::one() - u) * (T::one() - q).max(eps).ln();
        }
        let rg = self.rg(&[p]);
        Ok(self.push(
            Tensor::new(vec![1], vec![acc / n])?,
            Op::Bce {
                p,
                target: Arc::from(target),
            },
            rg,
        ))
    }

    /// `bce(sigmoid(q), target)` evaluated stably from logits.
    pub fn bce_with_logits(&mut self, q: Var, target: &[T]) -> Result<Var> {
        let qv = self.value(q);
        if qv.numel() != target.len() {
            return Err(shape_err("bce target length differs from prediction"));
        }
        let n = T::of(target.len() as f64);
        let mut acc = T::zero();
        for (&l, &u) in qv.data().iter().zip(target) {
            acc += l.max(T::zero()) - u * l + (-l.abs()).exp().ln_1p();
        }
        let rg = self.rg(&[q]);
        Ok(self.push(
            Tensor::new(vec![1], vec![acc / n])?,
            Op::BceLogits {
                q,
                target: Arc::from(target),
            },
            rg,
        ))
    }

    /// Backpropagates from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).numel() != 1 {
            return Err(shape_err("backward needs a scalar output"));
        }
        self.backward_from(loss, Tensor::full(self.value(loss).shape().to_vec(), T::one()))
    }

    /// Backpropagates an arbitrary upstream gradient `seed` from `out`.
    pub fn backward_from(&self, out: Var, seed: Tensor<T>) -> Result<Gradients<T>> {
        if seed.shape() != self.value(out).shape() {
            return Err(shape_err("seed gradient shape differs from output"));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[out.0] = Some(seed);
        for i in (0..=out.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, g, &mut grads)?;
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, data: Vec<T>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let shape = self.value(v).shape().to_vec();
        let t = Tensor::new(shape, data).expect("gradient shape");
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&t),
            slot => *slot = Some(t),
        }
    }

    fn backprop_node(&self, node: &Node<T>, g: Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::Conv1d { x, w, b, shape } => {
                if self.requires_grad(*x) {
                    let dx = kernels::conv1d_backward_input(gd, self.value(*w).data(), *shape);
                    self.accumulate(grads, *x, dx);
                }
                if self.requires_grad(*w) || self.requires_grad(*b) {
                    let (dw, db) = kernels::conv1d_backward_params(self.value(*x).data(), gd, *shape);
                    self.accumulate(grads, *w, dw);
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Linear { x, w, b } => {
                let (batch, len, cin) = self.value(*x).dims3()?;
                let cout = self.value(*b).numel();
                let rows = batch * len;
                if self.requires_grad(*x) {
                    let dx = kernels::linear_backward_input(gd, self.value(*w).data(), rows, cin, cout);
                    self.accumulate(grads, *x, dx);
                }
                if self.requires_grad(*w) || self.requires_grad(*b) {
                    let (dw, db) = kernels::linear_backward_params(self.value(*x).data(), gd, rows, cin, cout);
                    self.accumulate(grads, *w, dw);
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Elu(x) => {
                let y = node.value.data();
                let dx = gd
                    .iter()
                    .zip(y)
                    .map(|(&g, &y)| if y > T::zero() { g } else { g * (y + T::one()) })
                    .collect();
                self.accumulate(grads, *x, dx);
            }
            Op::Sigmoid(x) => {
                let y = node.value.data();
                let dx = gd.iter().zip(y).map(|(&g, &y)| g * y * (T::one() - y)).collect();
                self.accumulate(grads, *x, dx);
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, gd.to_vec());
                self.accumulate(grads, *b, gd.to_vec());
            }
            Op::Affine { x, scale } => {
                let dx = match scale {
                    None => gd.to_vec(),
                    Some(h) => gd.iter().zip(h.iter()).map(|(&g, &h)| g * h).collect(),
                };
                self.accumulate(grads, *x, dx);
            }
            Op::Concat(parts) => {
                let (batch, len, total) = node.value.dims3()?;
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).dims3()?.2;
                    if self.requires_grad(p) {
                        let mut dp = Vec::with_capacity(batch * len * w);
                        for row in 0..batch * len {
                            dp.extend_from_slice(&gd[row * total + offset..row * total + offset + w]);
                        }
                        self.accumulate(grads, p, dp);
                    }
                    offset += w;
                }
            }
            Op::Slice { x, start } => {
                let (batch, len, c) = self.value(*x).dims3()?;
                let w = node.value.dims3()?.2;
                let mut dx = vec![T::zero(); batch * len * c];
                for row in 0..batch * len {
                    dx[row * c + start..row * c + start + w].copy_from_slice(&gd[row * w..(row + 1) * w]);
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Gather { x, index } => {
                let (batch, len, c) = self.value(*x).dims3()?;
                let mut dx = vec![T::zero(); batch * len * c];
                for b in 0..batch {
                    let base = b * len * c;
                    for (i, &src) in index.iter().enumerate() {
                        let g = &gd[(b * index.len() + i) * c..(b * index.len() + i + 1) * c];
                        for (d, &g) in dx[base + src * c..base + (src + 1) * c].iter_mut().zip(g) {
                            *d += g;
                        }
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Normalize { x, std, frozen } => {
                let c = std.len();
                let mut dx: Vec<T> = gd.iter().enumerate().map(|(i, &g)| g / std[i % c]).collect();
                if !frozen {
                    // Full Jacobian of batch normalization:
                    // dL/db = (g - mean(g) - y * mean(g * y)) / sigma, per channel.
                    let y = node.value.data();
                    let n = (gd.len() / c) as f64;
                    for ch in 0..c {
                        let mut sg = 0.0;
                        let mut sgy = 0.0;
                        for i in (ch..gd.len()).step_by(c) {
                            sg += gd[i].as_f64();
                            sgy += (gd[i] * y[i]).as_f64();
                        }
                        let mg = T::of(sg / n);
                        let mgy = T::of(sgy / n);
                        for i in (ch..gd.len()).step_by(c) {
                            dx[i] = (gd[i] - mg - y[i] * mgy) / std[ch];
                        }
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::SteSign(x) => {
                let b = self.value(*x).data();
                let dx = gd
                    .iter()
                    .zip(b)
                    .map(|(&g, &b)| if b.abs() <= T::one() { g } else { T::zero() })
                    .collect();
                self.accumulate(grads, *x, dx);
            }
            Op::Bce { p, target } => {
                let s = gd[0] / T::of(target.len() as f64);
                let eps = T::of(BCE_CLAMP);
                let dp = self
                    .value(*p)
                    .data()
                    .iter()
                    .zip(target.iter())
                    .map(|(&q, &u)| {
                        let mut d = T::zero();
                        if q > eps {
                            d -= u / q;
                        }
                        if T::one() - q > eps {
                            d += (T::one() - u) / (T::one() - q);
                        }
                        s * d
                    })
                    .collect();
                self.accumulate(grads, *p, dp);
            }
            Op::BceLogits { q, target } => {
                let s = gd[0] / T::of(target.len() as f64);
                let dq = self
                    .value(*q)
                    .data()
                    .iter()
                    .zip(target.iter())
                    .map(|(&l, &u)| s * (sigmoid(l) - u))
                    .collect();
                self.accumulate(grads, *q, dq);
            }
        }
        Ok(())
    }
}

pub(crate) fn sigmoid<T: Real>(a: T) -> T {
    if a >= T::zero() {
        T::one() / (T::one() + (-a).exp())
    } else {
        let e = a.exp();
        e / (T::one() + e)
    }
}
