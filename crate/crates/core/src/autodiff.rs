//! Reverse-mode automatic differentiation over a tape of tensor operations.
//!
//! A [`Graph`] records every forward operation as a node; nodes refer to
//! their inputs by id, so the tape is topologically ordered by
//! construction and [`Graph::backward`] is a single reverse sweep that
//! visits each node exactly once. Graphs are rebuilt per training
//! iteration; persistent parameters live outside the graph and are bound
//! as leaves each time (see [`crate::params::ParamSet`]).

use crate::conv;
use crate::error::{CoreError, Result};
use crate::tensor::{fl, Scalar, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddScalar(Var, T),
    MulScalar(Var, T),
    Relu(Var),
    LeakyRelu(Var, T),
    Tanh(Var),
    Conv2d {
        x: Var,
        k: Var,
        stride: usize,
        pad: usize,
    },
    ConvTranspose2d {
        x: Var,
        k: Var,
        stride: usize,
        pad: usize,
    },
    ChannelBias(Var, Var),
    InstanceNorm {
        x: Var,
        gamma: Var,
        beta: Var,
    },
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    TileSpatial(Var),
    SumAll(Var),
    MeanAll(Var),
    Detach,
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddScalar(..) => "add_scalar",
            Op::MulScalar(..) => "mul_scalar",
            Op::Relu(..) => "relu",
            Op::LeakyRelu(..) => "leaky_relu",
            Op::Tanh(..) => "tanh",
            Op::Conv2d { .. } => "conv2d",
            Op::ConvTranspose2d { .. } => "conv2d_transpose",
            Op::ChannelBias(..) => "channel_bias",
            Op::InstanceNorm { .. } => "instance_norm",
            Op::Concat { .. } => "concat",
            Op::TileSpatial(..) => "tile_spatial",
            Op::SumAll(..) => "sum_all",
            Op::MeanAll(..) => "mean_all",
            Op::Detach => "detach",
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    grad: Option<Vec<T>>,
    /// Per-op saved statistics needed by backward (instance norm keeps
    /// mean and inverse std per (sample, channel)).
    saved: Vec<T>,
}

/// Tape of recorded operations.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    /// Epsilon used inside instance normalization.
    pub instance_norm_eps: f64,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            instance_norm_eps: 1e-5,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Insert a tensor as a leaf node.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Insert a non-trainable constant.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient buffer of a node, if backward reached it.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].grad.as_deref()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
            saved: Vec::new(),
        });
        Var(self.nodes.len() - 1)
    }

    fn push_from(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push(value, op, requires)
    }

    fn binary_shape_check(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(CoreError::ShapeMismatch {
                op,
                detail: format!("operands have shapes {sa:?} and {sb:?}"),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_shape_check("add", a, b)?;
        let data: Vec<T> = self.nodes[a.0]
            .value
            .data()
            .iter()
            .zip(self.nodes[b.0].value.data())
            .map(|(&x, &y)| x + y)
            .collect();
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push_from(t, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_shape_check("sub", a, b)?;
        let data: Vec<T> = self.nodes[a.0]
            .value
            .data()
            .iter()
            .zip(self.nodes[b.0].value.data())
            .map(|(&x, &y)| x - y)
            .collect();
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push_from(t, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_shape_check("mul", a, b)?;
        let data: Vec<T> = self.nodes[a.0]
            .value
            .data()
            .iter()
            .zip(self.nodes[b.0].value.data())
            .map(|(&x, &y)| x * y)
            .collect();
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push_from(t, Op::Mul(a, b), &[a, b]))
    }

    pub fn add_scalar(&mut self, a: Var, c: T) -> Var {
        let t = self.nodes[a.0].value.map(|x| x + c);
        self.push_from(t, Op::AddScalar(a, c), &[a])
    }

    pub fn mul_scalar(&mut self, a: Var, c: T) -> Var {
        let t = self.nodes[a.0].value.map(|x| x * c);
        self.push_from(t, Op::MulScalar(a, c), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let t = self.nodes[a.0].value.map(|x| x.max(T::zero()));
        self.push_from(t, Op::Relu(a), &[a])
    }

    pub fn leaky_relu(&mut self, a: Var, slope: T) -> Var {
        let t = self.nodes[a.0]
            .value
            .map(|x| if x > T::zero() { x } else { x * slope });
        self.push_from(t, Op::LeakyRelu(a, slope), &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let t = self.nodes[a.0].value.map(|x| x.tanh());
        self.push_from(t, Op::Tanh(a), &[a])
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.mul(a, a).expect("square of matching shapes")
    }

    /// x: [N,C,H,W], k: [F,C,kh,kw] -> [N,F,OH,OW].
    pub fn conv2d(&mut self, x: Var, k: Var, stride: usize, pad: usize) -> Result<Var> {
        let xs = shape4(self.shape(x), "conv2d input")?;
        let ks = shape4(self.shape(k), "conv2d kernel")?;
        let data = conv::conv2d_forward(
            self.nodes[x.0].value.data(),
            xs,
            self.nodes[k.0].value.data(),
            ks,
            stride,
            pad,
        )?;
        let oh = conv::conv_out_len(xs[2], ks[2], stride, pad)?;
        let ow = conv::conv_out_len(xs[3], ks[3], stride, pad)?;
        let t = Tensor::new(vec![xs[0], ks[0], oh, ow], data)?;
        Ok(self.push_from(t, Op::Conv2d { x, k, stride, pad }, &[x, k]))
    }

    /// x: [N,F,h,w], k: [F,C,kh,kw] -> [N,C,H,W]; the adjoint of conv2d
    /// with the same kernel, stride, and padding.
    pub fn conv2d_transpose(&mut self, x: Var, k: Var, stride: usize, pad: usize) -> Result<Var> {
        let xs = shape4(self.shape(x), "conv2d_transpose input")?;
        let ks = shape4(self.shape(k), "conv2d_transpose kernel")?;
        if xs[1] != ks[0] {
            return Err(CoreError::ShapeMismatch {
                op: "conv2d_transpose",
                detail: format!(
                    "input channel axis is {} but kernel filter axis is {}",
                    xs[1], ks[0]
                ),
            });
        }
        let oh = conv::conv_transpose_out_len(xs[2], ks[2], stride, pad)?;
        let ow = conv::conv_transpose_out_len(xs[3], ks[3], stride, pad)?;
        let out_shape = [xs[0], ks[1], oh, ow];
        let data = conv::conv2d_input_grad(
            self.nodes[x.0].value.data(),
            xs,
            self.nodes[k.0].value.data(),
            ks,
            stride,
            pad,
            out_shape,
        );
        let t = Tensor::new(out_shape.to_vec(), data)?;
        Ok(self.push_from(t, Op::ConvTranspose2d { x, k, stride, pad }, &[x, k]))
    }

    /// Add a per-channel bias [C] to an [N,C,H,W] tensor.
    pub fn channel_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let xs = shape4(self.shape(x), "channel_bias input")?;
        let bs = self.shape(b).to_vec();
        if bs.len() != 1 || bs[0] != xs[1] {
            return Err(CoreError::ShapeMismatch {
                op: "channel_bias",
                detail: format!("bias shape {bs:?} does not match channel axis {}", xs[1]),
            });
        }
        let hw = xs[2] * xs[3];
        let bias = self.nodes[b.0].value.data().to_vec();
        let mut data = self.nodes[x.0].value.data().to_vec();
        for n in 0..xs[0] {
            for c in 0..xs[1] {
                let base = (n * xs[1] + c) * hw;
                let bv = bias[c];
                for v in &mut data[base..base + hw] {
                    *v = *v + bv;
                }
            }
        }
        let t = Tensor::new(xs.to_vec(), data)?;
        Ok(self.push_from(t, Op::ChannelBias(x, b), &[x, b]))
    }

    /// Instance normalization over the spatial axes of [N,C,H,W], with
    /// per-channel scale and shift.
    pub fn instance_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let xs = shape4(self.shape(x), "instance_norm input")?;
        for (name, v) in [("gamma", gamma), ("beta", beta)] {
            let s = self.shape(v);
            if s.len() != 1 || s[0] != xs[1] {
                return Err(CoreError::ShapeMismatch {
                    op: "instance_norm",
                    detail: format!("{name} shape {s:?} does not match channel axis {}", xs[1]),
                });
            }
        }
        let eps = fl::<T>(self.instance_norm_eps);
        let hw = xs[2] * xs[3];
        let inv_hw = fl::<T>(1.0 / hw as f64);
        let g = self.nodes[gamma.0].value.data().to_vec();
        let b = self.nodes[beta.0].value.data().to_vec();
        let xd = self.nodes[x.0].value.data();
        let mut out = vec![T::zero(); xd.len()];
        let mut saved = Vec::with_capacity(2 * xs[0] * xs[1]);
        for n in 0..xs[0] {
            for c in 0..xs[1] {
                let base = (n * xs[1] + c) * hw;
                let chunk = &xd[base..base + hw];
                let mean: T = chunk.iter().copied().sum::<T>() * inv_hw;
                let var: T = chunk
                    .iter()
                    .map(|&v| (v - mean) * (v - mean))
                    .sum::<T>()
                    * inv_hw;
                let istd = (var + eps).sqrt().recip();
                saved.push(mean);
                saved.push(istd);
                for (o, &v) in out[base..base + hw].iter_mut().zip(chunk) {
                    *o = (v - mean) * istd * g[c] + b[c];
                }
            }
        }
        let t = Tensor::new(xs.to_vec(), out)?;
        let var = self.push_from(t, Op::InstanceNorm { x, gamma, beta }, &[x, gamma, beta]);
        self.nodes[var.0].saved = saved;
        Ok(var)
    }

    /// Concatenate along `axis`; all other axes must agree.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        if inputs.is_empty() {
            return Err(CoreError::InvalidArgument("concat of zero tensors".into()));
        }
        let first = self.shape(inputs[0]).to_vec();
        if axis >= first.len() {
            return Err(CoreError::InvalidArgument(format!(
                "concat axis {axis} out of range for rank {}",
                first.len()
            )));
        }
        let mut axis_total = 0usize;
        for &v in inputs {
            let s = self.shape(v);
            if s.len() != first.len() {
                return Err(CoreError::ShapeMismatch {
                    op: "concat",
                    detail: format!("rank mismatch: {first:?} vs {s:?}"),
                });
            }
            for (d, (&a, &b)) in first.iter().zip(s).enumerate() {
                if d != axis && a != b {
                    return Err(CoreError::ShapeMismatch {
                        op: "concat",
                        detail: format!("axis {d} differs: {a} vs {b} (only axis {axis} may vary)"),
                    });
                }
            }
            axis_total += s[axis];
        }
        let mut out_shape = first.clone();
        out_shape[axis] = axis_total;
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut data = vec![T::zero(); outer * axis_total * inner];
        let mut offset = 0usize;
        for &v in inputs {
            let e = self.shape(v)[axis];
            let src = self.nodes[v.0].value.data();
            for o in 0..outer {
                let dst_base = (o * axis_total + offset) * inner;
                let src_base = o * e * inner;
                data[dst_base..dst_base + e * inner]
                    .copy_from_slice(&src[src_base..src_base + e * inner]);
            }
            offset += e;
        }
        let t = Tensor::new(out_shape, data)?;
        Ok(self.push_from(
            t,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            inputs,
        ))
    }

    /// Replicate a [N,P] tensor along two new spatial axes: [N,P,h,w].
    pub fn tile_spatial(&mut self, v: Var, h: usize, w: usize) -> Result<Var> {
        let s = self.shape(v).to_vec();
        if s.len() != 2 {
            return Err(CoreError::ShapeMismatch {
                op: "tile_spatial",
                detail: format!("expected rank-2 [N,P], got {s:?}"),
            });
        }
        let (n, p) = (s[0], s[1]);
        let src = self.nodes[v.0].value.data();
        let mut data = vec![T::zero(); n * p * h * w];
        for i in 0..n * p {
            let val = src[i];
            for o in &mut data[i * h * w..(i + 1) * h * w] {
                *o = val;
            }
        }
        let t = Tensor::new(vec![n, p, h, w], data)?;
        Ok(self.push_from(t, Op::TileSpatial(v), &[v]))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s: T = self.nodes[a.0].value.data().iter().copied().sum();
        self.push_from(Tensor::scalar(s), Op::SumAll(a), &[a])
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.nodes[a.0].value.numel();
        let s: T = self.nodes[a.0].value.data().iter().copied().sum();
        let m = s * fl::<T>(1.0 / n as f64);
        self.push_from(Tensor::scalar(m), Op::MeanAll(a), &[a])
    }

    /// Forward copy that blocks gradient flow.
    pub fn detach(&mut self, a: Var) -> Var {
        let t = self.nodes[a.0].value.clone();
        self.push(t, Op::Detach, false)
    }

    /// Squared Frobenius distance: sum of (a - b)^2 as a scalar node.
    pub fn frobenius_sq(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        let sq = self.square(d);
        Ok(self.sum_all(sq))
    }

    /// Reverse sweep from a scalar loss. Populates gradients of every
    /// reachable node with `requires_grad`. Errors on a non-scalar loss
    /// and on any non-finite gradient, naming the node.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(CoreError::InvalidArgument(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        self.nodes[loss.0].grad = Some(vec![T::one()]);

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(grad) = self.nodes[i].grad.take() else {
                continue;
            };
            for (j, &gv) in grad.iter().enumerate() {
                if !gv.is_finite() {
                    return Err(CoreError::NonFinite(format!(
                        "gradient at node {i} (op {}), element {j} is {gv}",
                        self.nodes[i].op.name()
                    )));
                }
            }
            let op = self.nodes[i].op.clone();
            match op {
                Op::Leaf | Op::Detach => {}
                Op::Add(a, b) => {
                    self.accumulate(a, &grad);
                    self.accumulate(b, &grad);
                }
                Op::Sub(a, b) => {
                    self.accumulate(a, &grad);
                    let neg: Vec<T> = grad.iter().map(|&g| -g).collect();
                    self.accumulate(b, &neg);
                }
                Op::Mul(a, b) => {
                    if self.nodes[a.0].requires_grad {
                        let da: Vec<T> = grad
                            .iter()
                            .zip(self.nodes[b.0].value.data())
                            .map(|(&g, &y)| g * y)
                            .collect();
                        self.accumulate(a, &da);
                    }
                    if self.nodes[b.0].requires_grad {
                        let db: Vec<T> = grad
                            .iter()
                            .zip(self.nodes[a.0].value.data())
                            .map(|(&g, &x)| g * x)
                            .collect();
                        self.accumulate(b, &db);
                    }
                }
                Op::AddScalar(a, _) => self.accumulate(a, &grad),
                Op::MulScalar(a, c) => {
                    let da: Vec<T> = grad.iter().map(|&g| g * c).collect();
                    self.accumulate(a, &da);
                }
                Op::Relu(a) => {
                    let da: Vec<T> = grad
                        .iter()
                        .zip(self.nodes[a.0].value.data())
                        .map(|(&g, &x)| if x > T::zero() { g } else { T::zero() })
                        .collect();
                    self.accumulate(a, &da);
                }
                Op::LeakyRelu(a, slope) => {
                    let da: Vec<T> = grad
                        .iter()
                        .zip(self.nodes[a.0].value.data())
                        .map(|(&g, &x)| if x > T::zero() { g } else { g * slope })
                        .collect();
                    self.accumulate(a, &da);
                }
                Op::Tanh(a) => {
                    let da: Vec<T> = grad
                        .iter()
                        .zip(self.nodes[i].value.data())
                        .map(|(&g, &t)| g * (T::one() - t * t))
                        .collect();
                    self.accumulate(a, &da);
                }
                Op::Conv2d { x, k, stride, pad } => {
                    let gs = shape4(self.nodes[i].value.shape(), "conv2d grad")?;
                    let xs = shape4(self.nodes[x.0].value.shape(), "conv2d input")?;
                    let ks = shape4(self.nodes[k.0].value.shape(), "conv2d kernel")?;
                    if self.nodes[x.0].requires_grad {
                        let dx = conv::conv2d_input_grad(
                            &grad,
                            gs,
                            self.nodes[k.0].value.data(),
                            ks,
                            stride,
                            pad,
                            xs,
                        );
                        self.accumulate(x, &dx);
                    }
                    if self.nodes[k.0].requires_grad {
                        let dk = conv::conv2d_kernel_grad(
                            &grad,
                            gs,
                            self.nodes[x.0].value.data(),
                            xs,
                            stride,
                            pad,
                            ks,
                        );
                        self.accumulate(k, &dk);
                    }
                }
                Op::ConvTranspose2d { x, k, stride, pad } => {
                    let gs = shape4(self.nodes[i].value.shape(), "conv2d_transpose grad")?;
                    let xs = shape4(self.nodes[x.0].value.shape(), "conv2d_transpose input")?;
                    let ks = shape4(self.nodes[k.0].value.shape(), "conv2d_transpose kernel")?;
                    if self.nodes[x.0].requires_grad {
                        // adjoint of the adjoint: a plain convolution
                        let dx = conv::conv2d_forward(
                            &grad,
                            gs,
                            self.nodes[k.0].value.data(),
                            ks,
                            stride,
                            pad,
                        )?;
                        self.accumulate(x, &dx);
                    }
                    if self.nodes[k.0].requires_grad {
                        let dk = conv::conv2d_kernel_grad(
                            self.nodes[x.0].value.data(),
                            xs,
                            &grad,
                            gs,
                            stride,
                            pad,
                            ks,
                        );
                        self.accumulate(k, &dk);
                    }
                }
                Op::ChannelBias(x, b) => {
                    let xs = shape4(self.nodes[x.0].value.shape(), "channel_bias input")?;
                    if self.nodes[x.0].requires_grad {
                        self.accumulate(x, &grad);
                    }
                    if self.nodes[b.0].requires_grad {
                        let hw = xs[2] * xs[3];
                        let mut db = vec![T::zero(); xs[1]];
                        for n in 0..xs[0] {
                            for (c, slot) in db.iter_mut().enumerate() {
                                let base = (n * xs[1] + c) * hw;
                                for &g in &grad[base..base + hw] {
                                    *slot = *slot + g;
                                }
                            }
                        }
                        self.accumulate(b, &db);
                    }
                }
                Op::InstanceNorm { x, gamma, beta } => {
                    self.instance_norm_backward(i, x, gamma, beta, &grad)?;
                }
                Op::Concat { inputs, axis } => {
                    let out_shape = self.nodes[i].value.shape().to_vec();
                    let outer: usize = out_shape[..axis].iter().product();
                    let inner: usize = out_shape[axis + 1..].iter().product();
                    let axis_total = out_shape[axis];
                    let mut offset = 0usize;
                    for v in inputs {
                        let e = self.nodes[v.0].value.shape()[axis];
                        if self.nodes[v.0].requires_grad {
                            let mut dv = vec![T::zero(); outer * e * inner];
                            for o in 0..outer {
                                let src_base = (o * axis_total + offset) * inner;
                                dv[o * e * inner..(o + 1) * e * inner]
                                    .copy_from_slice(&grad[src_base..src_base + e * inner]);
                            }
                            self.accumulate(v, &dv);
                        }
                        offset += e;
                    }
                }
                Op::TileSpatial(v) => {
                    let s = self.nodes[i].value.shape();
                    let (np, hw) = (s[0] * s[1], s[2] * s[3]);
                    let mut dv = vec![T::zero(); np];
                    for (idx, slot) in dv.iter_mut().enumerate() {
                        for &g in &grad[idx * hw..(idx + 1) * hw] {
                            *slot = *slot + g;
                        }
                    }
                    self.accumulate(v, &dv);
                }
                Op::SumAll(a) => {
                    let n = self.nodes[a.0].value.numel();
                    let da = vec![grad[0]; n];
                    self.accumulate(a, &da);
                }
                Op::MeanAll(a) => {
                    let n = self.nodes[a.0].value.numel();
                    let da = vec![grad[0] * fl::<T>(1.0 / n as f64); n];
                    self.accumulate(a, &da);
                }
            }
            // Leaves keep their gradient; interior nodes release it once
            // propagated so peak memory stays bounded.
            if matches!(self.nodes[i].op, Op::Leaf) {
                self.nodes[i].grad = Some(grad);
            }
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, delta: &[T]) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let numel = self.nodes[v.0].value.numel();
        let grad = self.nodes[v.0]
            .grad
            .get_or_insert_with(|| vec![T::zero(); numel]);
        for (g, &d) in grad.iter_mut().zip(delta) {
            *g = *g + d;
        }
    }

    fn instance_norm_backward(
        &mut self,
        node: usize,
        x: Var,
        gamma: Var,
        beta: Var,
        grad: &[T],
    ) -> Result<()> {
        let xs = shape4(self.nodes[x.0].value.shape(), "instance_norm input")?;
        let hw = xs[2] * xs[3];
        let inv_hw = fl::<T>(1.0 / hw as f64);
        let saved = self.nodes[node].saved.clone();
        let g = self.nodes[gamma.0].value.data().to_vec();

        let mut dx = vec![T::zero(); xs[0] * xs[1] * hw];
        let mut dgamma = vec![T::zero(); xs[1]];
        let mut dbeta = vec![T::zero(); xs[1]];
        {
            let xd = self.nodes[x.0].value.data();
            for n in 0..xs[0] {
                for c in 0..xs[1] {
                    let base = (n * xs[1] + c) * hw;
                    let mean = saved[2 * (n * xs[1] + c)];
                    let istd = saved[2 * (n * xs[1] + c) + 1];
                    let gy = &grad[base..base + hw];
                    let chunk = &xd[base..base + hw];

                    let mut sum_gy = T::zero();
                    let mut sum_gy_xhat = T::zero();
                    for (&gv, &xv) in gy.iter().zip(chunk) {
                        let xhat = (xv - mean) * istd;
                        sum_gy = sum_gy + gv;
                        sum_gy_xhat = sum_gy_xhat + gv * xhat;
                    }
                    dbeta[c] = dbeta[c] + sum_gy;
                    dgamma[c] = dgamma[c] + sum_gy_xhat;

                    let mean_gy = sum_gy * inv_hw;
                    let mean_gy_xhat = sum_gy_xhat * inv_hw;
                    let gc = g[c];
                    for ((d, &gv), &xv) in dx[base..base + hw].iter_mut().zip(gy).zip(chunk) {
                        let xhat = (xv - mean) * istd;
                        *d = gc * istd * (gv - mean_gy - xhat * mean_gy_xhat);
                    }
                }
            }
        }
        self.accumulate(x, &dx);
        self.accumulate(gamma, &dgamma);
        self.accumulate(beta, &dbeta);
        Ok(())
    }
}

fn shape4(s: &[usize], what: &'static str) -> Result<[usize; 4]> {
    if s.len() != 4 {
        return Err(CoreError::ShapeMismatch {
            op: what,
            detail: format!("expected a rank-4 tensor, got {s:?}"),
        });
    }
    Ok([s[0], s[1], s[2], s[3]])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    #[test]
    fn sum_of_squares_gradient() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap(), true);
        let sq = g.square(x);
        let loss = g.sum_all(sq);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn tanh_gradient_at_zero_is_one() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::scalar(0.0), true);
        let y = g.tanh(x);
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0]);
        assert_eq!(g.value(y).item().unwrap(), 0.0);
    }

    #[test]
    fn leaky_relu_values() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::new(vec![2], vec![-1.0, 2.0]).unwrap(), true);
        let y = g.leaky_relu(x, 0.2);
        assert_eq!(g.value(y).data(), &[-0.2, 2.0]);
    }

    #[test]
    fn detached_branch_contributes_zero_gradient() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap(), true);
        let d = g.detach(x);
        let sq = g.square(d);
        let direct = g.sum_all(x);
        let blocked = g.sum_all(sq);
        let loss = g.add(direct, blocked).unwrap();
        g.backward(loss).unwrap();
        // only the direct path contributes
        assert_eq!(g.grad(x).unwrap(), &[1.0, 1.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap(), true);
        let y = g.square(x);
        assert!(g.backward(y).is_err());
    }

    #[test]
    fn backward_flags_nan_gradient_with_node_id() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::new(vec![2], vec![1.0, f64::MAX]).unwrap(), true);
        let sq = g.square(x); // overflows to inf
        let sq2 = g.square(sq);
        let loss = g.sum_all(sq2);
        let err = g.backward(loss).unwrap_err();
        match err {
            CoreError::NonFinite(msg) => assert!(msg.contains("node"), "{msg}"),
            other => panic!("expected NonFinite, got {other}"),
        }
    }

    #[test]
    fn concat_forward_and_gradient_split() {
        let mut g = Graph::<f64>::new();
        let a = g.leaf(Tensor::new(vec![1, 2, 1, 1], vec![1.0, 2.0]).unwrap(), true);
        let b = g.leaf(Tensor::new(vec![1, 1, 1, 1], vec![5.0]).unwrap(), true);
        let cat = g.concat(&[a, b], 1).unwrap();
        assert_eq!(g.shape(cat), &[1, 3, 1, 1]);
        assert_eq!(g.value(cat).data(), &[1.0, 2.0, 5.0]);
        let w = g.constant(Tensor::new(vec![1, 3, 1, 1], vec![10.0, 20.0, 30.0]).unwrap());
        let prod = g.mul(cat, w).unwrap();
        let loss = g.sum_all(prod);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(a).unwrap(), &[10.0, 20.0]);
        assert_eq!(g.grad(b).unwrap(), &[30.0]);
    }

    #[test]
    fn concat_of_one_tensor_is_identity() {
        let mut g = Graph::<f64>::new();
        let a = g.leaf(Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap(), true);
        let cat = g.concat(&[a], 0).unwrap();
        assert_eq!(g.value(cat).data(), g.value(a).data());
        assert_eq!(g.shape(cat), g.shape(a));
    }

    #[test]
    fn concat_rejects_mismatched_non_axis_dims() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::zeros(&[1, 2, 4, 4]));
        let b = g.constant(Tensor::zeros(&[1, 3, 4, 5]));
        assert!(g.concat(&[a, b], 1).is_err());
    }

    #[test]
    fn channel_concat_extends_channel_axis() {
        // feature blob plus a replicated 8-wide attribute code
        let mut g = Graph::<f64>::new();
        let blob = g.constant(Tensor::zeros(&[2, 64, 4, 4]));
        let attr = g.constant(Tensor::zeros(&[2, 8]));
        let tiled = g.tile_spatial(attr, 4, 4).unwrap();
        let cat = g.concat(&[blob, tiled], 1).unwrap();
        assert_eq!(g.shape(cat), &[2, 72, 4, 4]);
    }

    #[test]
    fn frobenius_sq_examples() {
        let mut g = Graph::<f64>::new();
        let a = g.leaf(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap(), true);
        let b = g.constant(Tensor::new(vec![2], vec![0.0, 0.0]).unwrap());
        let f = g.frobenius_sq(a, b).unwrap();
        assert_eq!(g.value(f).item().unwrap(), 5.0);

        let same = g.frobenius_sq(a, a).unwrap();
        assert_eq!(g.value(same).item().unwrap(), 0.0);
    }

    #[test]
    fn backward_is_linear_in_the_loss() {
        // grad of a*f + b*g == a*grad(f) + b*grad(g)
        let mut rng = Rng::new(91);
        let x0 = Tensor::<f64>::randn(&[6], 1.0, &mut rng);
        let (a, b) = (1.7, -0.6);

        let grad_of = |wa: f64, wb: f64| -> Vec<f64> {
            let mut g = Graph::<f64>::new();
            let x = g.leaf(x0.clone(), true);
            let f = {
                let sq = g.square(x);
                g.sum_all(sq)
            };
            let h = {
                let t = g.tanh(x);
                g.sum_all(t)
            };
            let fa = g.mul_scalar(f, wa);
            let hb = g.mul_scalar(h, wb);
            let loss = g.add(fa, hb).unwrap();
            g.backward(loss).unwrap();
            g.grad(x).unwrap().to_vec()
        };

        let combined = grad_of(a, b);
        let gf = grad_of(1.0, 0.0);
        let gh = grad_of(0.0, 1.0);
        for i in 0..combined.len() {
            let expect = a * gf[i] + b * gh[i];
            assert!((combined[i] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let build = || {
            let mut rng = Rng::new(5150);
            let mut g = Graph::<f32>::new();
            let x = g.leaf(Tensor::randn(&[1, 2, 8, 8], 1.0, &mut rng), true);
            let k = g.leaf(Tensor::randn(&[3, 2, 3, 3], 0.02, &mut rng), true);
            let c = g.conv2d(x, k, 2, 1).unwrap();
            let r = g.relu(c);
            let loss = g.mean_all(r);
            g.value(loss).item().unwrap()
        };
        let a = build();
        let b = build();
        assert_eq!(a.to_bits(), b.to_bits());
    }
}
