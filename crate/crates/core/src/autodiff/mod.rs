//! Tape-style reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Graph`] records every primitive applied during the forward pass in
//! creation order. [`Graph::backward`] walks the record in reverse and
//! accumulates chain-rule gradients; leaves receive them in their tensor's
//! gradient buffer, additively across calls.

mod gradcheck;

use std::fmt;

use crate::error::{Error, Result};
use crate::tensor::kernels::{self, ConvGeom, SampleGeom, WindowAxes};
use crate::tensor::ops::{axis_split, conv_geom, matmul_dims, pool_shape, sample_geom};
use crate::tensor::{Element, Tensor};

pub use gradcheck::{
    grad_check, grad_check_all, registered_ops, CheckFn, GradCheckReport, GradCheckSuite, REL_TOLERANCE,
};

/// Handle to a value recorded in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

type CustomBackward<T> = dyn Fn(&[&Tensor<T>], &Tensor<T>, &[f64]) -> Vec<Vec<f64>> + Send + Sync;

enum Op<T: Element> {
    Leaf,
    Conv2d { input: Var, weight: Var, bias: Var, geom: ConvGeom },
    AvgPool2d { input: Var, lead: usize, h: usize, w: usize, kernel: usize },
    Softmax { input: Var, k: usize },
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize },
    Bilinear { input: Var, coords: Var, geom: SampleGeom },
    MeanAxis { input: Var, outer: usize, n: usize, inner: usize },
    Transpose { input: Var, rows: usize, cols: usize },
    Reshape { input: Var },
    Concat { parts: Vec<Var> },
    Slice { input: Var, offset: usize },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Elu(Var),
    Relu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Abs(Var),
    Lerp { from: Var, to: Var, gate: Var },
    SumLast { input: Var, k: usize },
    DotConst { input: Var, weights: Vec<f64> },
    Aggregate { c: Var, cv: Var, ch: Var, p: usize, h: usize, w: usize },
    Window { flow: Var, h: usize, w: usize, scale: f64, radius: usize, axes: WindowAxes },
    ConvexUpsample { flow: Var, mask: Var, h: usize, w: usize, d: usize },
    Custom { name: String, inputs: Vec<Var>, backward: Box<CustomBackward<T>> },
}

impl<T: Element> Op<T> {
    fn name(&self) -> &str {
        match self {
            Op::Leaf => "leaf",
            Op::Conv2d { .. } => "conv2d",
            Op::AvgPool2d { .. } => "avg_pool2d",
            Op::Softmax { .. } => "softmax_lastdim",
            Op::MatMul { .. } => "matmul",
            Op::Bilinear { .. } => "bilinear_sample",
            Op::MeanAxis { .. } => "mean_axis",
            Op::Transpose { .. } => "transpose",
            Op::Reshape { .. } => "reshape",
            Op::Concat { .. } => "concat",
            Op::Slice { .. } => "slice",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Elu(..) => "elu",
            Op::Relu(..) => "relu",
            Op::Tanh(..) => "tanh",
            Op::Sigmoid(..) => "sigmoid",
            Op::Abs(..) => "abs",
            Op::Lerp { .. } => "lerp",
            Op::SumLast { .. } => "sum_lastdim",
            Op::DotConst { .. } => "dot_const",
            Op::Aggregate { .. } => "aggregate",
            Op::Window { .. } => "window_coords",
            Op::ConvexUpsample { .. } => "convex_upsample",
            Op::Custom { name, .. } => name,
        }
    }
}

struct Node<T: Element> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Record of a forward computation.
pub struct Graph<T: Element = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Element> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> fmt::Debug for Graph<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Graph").field("nodes", &self.nodes.len()).finish()
    }
}

fn same_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return Err(Error::shape(op, format!("{a:?}"), b));
    }
    Ok(())
}

impl<T: Element> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A differentiable input; its gradient lands in the tensor's buffer.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Copies `v` into a new constant, cutting gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let mut value = self.nodes[v.0].value.clone();
        value.clear_grad();
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].value.grad()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn op_name(&self, v: Var) -> &str {
        self.nodes[v.0].op.name()
    }

    fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    // ------------------------------------------------------------ primitives

    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var, stride: usize, padding: usize) -> Result<Var> {
        let geom = conv_geom(self.shape(input), self.shape(weight), self.shape(bias), stride, padding)?;
        let out = kernels::conv2d_forward(self.data(input), self.data(weight), self.data(bias), &geom);
        let value = Tensor::from_parts(vec![geom.c_out, geom.h_out, geom.w_out], out);
        Ok(self.push(value, Op::Conv2d { input, weight, bias, geom }, &[input, weight, bias]))
    }

    pub fn avg_pool2d(&mut self, input: Var, kernel: usize) -> Result<Var> {
        let (lead, h, w, shape) = pool_shape(self.shape(input), kernel)?;
        let out = kernels::avg_pool2d_forward(self.data(input), lead, h, w, kernel);
        let op = Op::AvgPool2d {
            input,
            lead,
            h,
            w,
            kernel,
        };
        Ok(self.push(Tensor::from_parts(shape, out), op, &[input]))
    }

    pub fn softmax_lastdim(&mut self, input: Var) -> Result<Var> {
        let shape = self.shape(input).to_vec();
        let k = *shape.last().expect("rank >= 1");
        let out = kernels::softmax_forward(self.data(input), k);
        Ok(self.push(Tensor::from_parts(shape, out), Op::Softmax { input, k }, &[input]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k, n) = matmul_dims(self.shape(a), self.shape(b))?;
        let mut out = vec![T::default(); m * n];
        kernels::gemm(m, k, n, self.data(a), false, self.data(b), false, T::default(), &mut out);
        let value = Tensor::from_parts(vec![m, n], out);
        Ok(self.push(value, Op::MatMul { a, b, m, k, n }, &[a, b]))
    }

    pub fn bilinear_sample(&mut self, input: Var, coords: Var) -> Result<Var> {
        let (geom, shape) = sample_geom(self.shape(input), self.shape(coords))?;
        let out = kernels::bilinear_forward(self.data(input), self.data(coords), &geom);
        let op = Op::Bilinear {
            input,
            coords,
            geom,
        };
        Ok(self.push(Tensor::from_parts(shape, out), op, &[input, coords]))
    }

    pub fn mean_axis(&mut self, input: Var, axis: usize) -> Result<Var> {
        let (outer, n, inner, shape) = axis_split(self.shape(input), axis)?;
        let out = kernels::mean_axis_forward(self.data(input), outer, n, inner);
        let op = Op::MeanAxis {
            input,
            outer,
            n,
            inner,
        };
        Ok(self.push(Tensor::from_parts(shape, out), op, &[input]))
    }

    pub fn transpose(&mut self, input: Var) -> Result<Var> {
        let &[rows, cols] = self.shape(input) else {
            return Err(Error::shape("transpose", "matrix", self.shape(input)));
        };
        let out = kernels::transpose(self.data(input), rows, cols);
        let op = Op::Transpose { input, rows, cols };
        Ok(self.push(Tensor::from_parts(vec![cols, rows], out), op, &[input]))
    }

    pub fn reshape(&mut self, input: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let value = self.value(input).clone().reshape(shape)?;
        Ok(self.push(value, Op::Reshape { input }, &[input]))
    }

    /// Concatenation along the leading axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("concat", "nothing to concatenate"))?;
        let tail = self.shape(*first)[1..].to_vec();
        let mut lead = 0;
        let mut data = Vec::new();
        for &p in parts {
            let s = self.shape(p);
            if s.len() != tail.len() + 1 || s[1..] != tail[..] {
                return Err(Error::shape("concat", format!("N×{tail:?}"), s));
            }
            lead += s[0];
            data.extend_from_slice(self.data(p));
        }
        let mut shape = vec![lead];
        shape.extend(tail);
        let op = Op::Concat {
            parts: parts.to_vec(),
        };
        Ok(self.push(Tensor::from_parts(shape, data), op, parts))
    }

    /// Rows `start..start + len` of the leading axis.
    pub fn slice(&mut self, input: Var, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(input).to_vec();
        if len == 0 || start + len > shape[0] {
            return Err(Error::shape(
                "slice",
                format!("leading extent >= {}", start + len),
                &shape,
            ));
        }
        let row: usize = shape[1..].iter().product();
        let data = self.data(input)[start * row..(start + len) * row].to_vec();
        let mut out = shape;
        out[0] = len;
        let op = Op::Slice {
            input,
            offset: start * row,
        };
        Ok(self.push(Tensor::from_parts(out, data), op, &[input]))
    }

    fn binary(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Vec<T>> {
        same_shape(op, self.shape(a), self.shape(b))?;
        Ok(self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| T::from_f64(f(x.to_f64(), y.to_f64())))
            .collect())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary("add", a, b, |x, y| x + y)?;
        let shape = self.shape(a).to_vec();
        Ok(self.push(Tensor::from_parts(shape, out), Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary("sub", a, b, |x, y| x - y)?;
        let shape = self.shape(a).to_vec();
        Ok(self.push(Tensor::from_parts(shape, out), Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary("mul", a, b, |x, y| x * y)?;
        let shape = self.shape(a).to_vec();
        Ok(self.push(Tensor::from_parts(shape, out), Op::Mul(a, b), &[a, b]))
    }

    fn unary(&mut self, input: Var, op: Op<T>, f: impl Fn(f64) -> f64) -> Var {
        let value = self.value(input).map(|x| T::from_f64(f(x.to_f64())));
        self.push(value, op, &[input])
    }

    pub fn scale(&mut self, input: Var, factor: f64) -> Var {
        self.unary(input, Op::Scale(input, factor), |x| x * factor)
    }

    pub fn elu(&mut self, input: Var) -> Var {
        self.unary(input, Op::Elu(input), |x| if x > 0.0 { x } else { x.exp_m1() })
    }

    pub fn relu(&mut self, input: Var) -> Var {
        self.unary(input, Op::Relu(input), |x| x.max(0.0))
    }

    /// `tanh`, with results kept strictly inside `(-1, 1)` in storage precision.
    pub fn tanh(&mut self, input: Var) -> Var {
        let bound = T::below_one().to_f64();
        self.unary(input, Op::Tanh(input), move |x| x.tanh().clamp(-bound, bound))
    }

    pub fn sigmoid(&mut self, input: Var) -> Var {
        self.unary(input, Op::Sigmoid(input), |x| 1.0 / (1.0 + (-x).exp()))
    }

    pub fn abs(&mut self, input: Var) -> Var {
        self.unary(input, Op::Abs(input), f64::abs)
    }

    /// `from + gate·(to − from)`, evaluated in one rounding step so a gate in
    /// `[0, 1]` never leaves the hull of its endpoints.
    pub fn lerp(&mut self, from: Var, to: Var, gate: Var) -> Result<Var> {
        same_shape("lerp", self.shape(from), self.shape(to))?;
        same_shape("lerp", self.shape(from), self.shape(gate))?;
        let out: Vec<T> = self
            .data(from)
            .iter()
            .zip(self.data(to))
            .zip(self.data(gate))
            .map(|((h, q), z)| {
                let (h, q, z) = (h.to_f64(), q.to_f64(), z.to_f64());
                T::from_f64((1.0 - z) * h + z * q)
            })
            .collect();
        let shape = self.shape(from).to_vec();
        Ok(self.push(Tensor::from_parts(shape, out), Op::Lerp { from, to, gate }, &[from, to, gate]))
    }

    /// Sum over the last axis, which is dropped (rank-1 inputs become `[1]`).
    pub fn sum_lastdim(&mut self, input: Var) -> Result<Var> {
        let shape = self.shape(input).to_vec();
        let k = *shape.last().expect("rank >= 1");
        let out: Vec<f64> = self
            .data(input)
            .chunks(k)
            .map(|c| c.iter().map(|v| v.to_f64()).sum())
            .collect();
        let out_shape = if shape.len() == 1 {
            vec![1]
        } else {
            shape[..shape.len() - 1].to_vec()
        };
        let value = Tensor::from_f64_vec(out_shape, out);
        Ok(self.push(value, Op::SumLast { input, k }, &[input]))
    }

    /// Scalar `Σ input ⊙ weights` against a constant weight vector.
    pub fn dot_const(&mut self, input: Var, weights: Vec<f64>) -> Result<Var> {
        if weights.len() != self.value(input).numel() {
            return Err(Error::shape(
                "dot_const",
                format!("{} weights", self.value(input).numel()),
                &[weights.len()],
            ));
        }
        let s: f64 = self
            .data(input)
            .iter()
            .zip(&weights)
            .map(|(x, w)| x.to_f64() * w)
            .sum();
        Ok(self.push(Tensor::scalar(T::from_f64(s)), Op::DotConst { input, weights }, &[input]))
    }

    pub fn sum(&mut self, input: Var) -> Result<Var> {
        let n = self.value(input).numel();
        self.dot_const(input, vec![1.0; n])
    }

    /// Broadcast-sum aggregation of an all-pair volume `P×H×W` with
    /// orthogonal volumes `P×W` and `P×H` into `P×2×H×W`.
    pub fn aggregate(&mut self, c: Var, cv: Var, ch: Var) -> Result<Var> {
        let &[p, h, w] = self.shape(c) else {
            return Err(Error::shape("aggregate", "all-pair volume P×H×W", self.shape(c)));
        };
        if self.shape(cv) != [p, w] {
            return Err(Error::shape("aggregate", format!("C_v {p}×{w}"), self.shape(cv)));
        }
        if self.shape(ch) != [p, h] {
            return Err(Error::shape("aggregate", format!("C_h {p}×{h}"), self.shape(ch)));
        }
        let out = kernels::aggregate_forward(self.data(c), self.data(cv), self.data(ch), p, h, w);
        let value = Tensor::from_parts(vec![p, 2, h, w], out);
        Ok(self.push(value, Op::Aggregate { c, cv, ch, p, h, w }, &[c, cv, ch]))
    }

    /// Lookup window positions around `(x + u, y + v) / scale` for each pixel
    /// of a `2×H×W` flow.
    pub fn window_coords(&mut self, flow: Var, scale: f64, radius: usize, axes: WindowAxes) -> Result<Var> {
        let &[2, h, w] = self.shape(flow) else {
            return Err(Error::shape("window_coords", "flow 2×H×W", self.shape(flow)));
        };
        let s = 2 * radius + 1;
        let sy = if axes == WindowAxes::Both { s } else { 1 };
        let out = kernels::window_coords_forward(self.data(flow), h, w, scale, radius, axes);
        let value = Tensor::from_parts(vec![h * w, sy, s, 2], out);
        let op = Op::Window {
            flow,
            h,
            w,
            scale,
            radius,
            axes,
        };
        Ok(self.push(value, op, &[flow]))
    }

    pub fn convex_upsample(&mut self, flow: Var, mask: Var, factor: usize) -> Result<Var> {
        let &[2, h, w] = self.shape(flow) else {
            return Err(Error::shape("convex_upsample", "flow 2×H×W", self.shape(flow)));
        };
        if self.shape(mask) != [9 * factor * factor, h, w] {
            return Err(Error::shape(
                "convex_upsample",
                format!("mask {}×{h}×{w}", 9 * factor * factor),
                self.shape(mask),
            ));
        }
        let out = kernels::convex_upsample_forward(self.data(flow), self.data(mask), h, w, factor);
        let value = Tensor::from_parts(vec![2, h * factor, w * factor], out);
        let op = Op::ConvexUpsample {
            flow,
            mask,
            h,
            w,
            d: factor,
        };
        Ok(self.push(value, op, &[flow, mask]))
    }

    /// Records an op with a caller-supplied backward. `backward` receives the
    /// input values, the output value, and the upstream gradient, and returns
    /// one gradient per input.
    pub fn custom(
        &mut self,
        name: impl Into<String>,
        inputs: &[Var],
        value: Tensor<T>,
        backward: impl Fn(&[&Tensor<T>], &Tensor<T>, &[f64]) -> Vec<Vec<f64>> + Send + Sync + 'static,
    ) -> Var {
        let op = Op::Custom {
            name: name.into(),
            inputs: inputs.to_vec(),
            backward: Box::new(backward),
        };
        self.push(value, op, inputs)
    }

    // ------------------------------------------------------------ backward

    /// Backpropagates from a scalar root, adding gradients into every
    /// differentiable leaf's gradient buffer.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        let root_shape = self.shape(root);
        if self.value(root).numel() != 1 {
            return Err(Error::NonScalarRoot(root_shape.to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; root.0 + 1];
        grads[root.0] = Some(vec![1.0]);
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                let grad: Vec<T> = kernels::narrow(g);
                self.nodes[i].value.accumulate_grad(&grad)?;
                continue;
            }
            for (v, gv) in self.local_grads(i, &g) {
                if !self.nodes[v.0].needs_grad {
                    continue;
                }
                match &mut grads[v.0] {
                    Some(acc) => acc.iter_mut().zip(&gv).for_each(|(a, b)| *a += b),
                    slot => *slot = Some(gv),
                }
            }
        }
        Ok(())
    }

    fn local_grads(&self, i: usize, g: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let node = &self.nodes[i];
        let out = node.value.data();
        let want = |v: &Var| self.nodes[v.0].needs_grad;
        let elementwise = |v: Var, f: &dyn Fn(f64, f64) -> f64| -> Vec<f64> {
            self.data(v)
                .iter()
                .zip(out)
                .zip(g)
                .map(|((x, y), g)| g * f(x.to_f64(), y.to_f64()))
                .collect()
        };
        match &node.op {
            Op::Leaf => Vec::new(),
            Op::Conv2d { input, weight, bias, geom } => {
                let cg = kernels::conv2d_backward(
                    self.data(*input),
                    self.data(*weight),
                    geom,
                    g,
                    want(input),
                    want(weight),
                );
                let mut res = vec![(*bias, cg.bias)];
                res.extend(cg.input.map(|gi| (*input, gi)));
                res.extend(cg.weight.map(|gw| (*weight, gw)));
                res
            }
            Op::AvgPool2d { input, lead, h, w, kernel } => {
                vec![(*input, kernels::avg_pool2d_backward(g, *lead, *h, *w, *kernel))]
            }
            Op::Softmax { input, k } => vec![(*input, kernels::softmax_backward(out, g, *k))],
            Op::MatMul { a, b, m, k, n } => {
                let go: Vec<T> = kernels::narrow(g.to_vec());
                let mut res = Vec::new();
                if want(a) {
                    let mut ga = vec![T::default(); m * k];
                    kernels::gemm(*m, *n, *k, &go, false, self.data(*b), true, T::default(), &mut ga);
                    res.push((*a, kernels::widen(&ga)));
                }
                if want(b) {
                    let mut gb = vec![T::default(); k * n];
                    kernels::gemm(*k, *m, *n, self.data(*a), true, &go, false, T::default(), &mut gb);
                    res.push((*b, kernels::widen(&gb)));
                }
                res
            }
            Op::Bilinear { input, coords, geom } => {
                let (gi, gc) =
                    kernels::bilinear_backward(self.data(*input), self.data(*coords), geom, g, want(coords));
                let mut res = vec![(*input, gi)];
                if want(coords) {
                    res.push((*coords, gc));
                }
                res
            }
            Op::MeanAxis { input, outer, n, inner } => {
                vec![(*input, kernels::mean_axis_backward(g, *outer, *n, *inner))]
            }
            Op::Transpose { input, rows, cols } => {
                vec![(*input, kernels::transpose(g, *cols, *rows))]
            }
            Op::Reshape { input } => vec![(*input, g.to_vec())],
            Op::Concat { parts } => {
                let mut at = 0;
                parts
                    .iter()
                    .map(|&p| {
                        let n = self.value(p).numel();
                        at += n;
                        (p, g[at - n..at].to_vec())
                    })
                    .collect()
            }
            Op::Slice { input, offset } => {
                let mut gi = vec![0.0; self.value(*input).numel()];
                gi[*offset..*offset + g.len()].copy_from_slice(g);
                vec![(*input, gi)]
            }
            Op::Add(a, b) => vec![(*a, g.to_vec()), (*b, g.to_vec())],
            Op::Sub(a, b) => vec![(*a, g.to_vec()), (*b, g.iter().map(|v| -v).collect())],
            Op::Mul(a, b) => {
                let ga = g.iter().zip(self.data(*b)).map(|(g, y)| g * y.to_f64()).collect();
                let gb = g.iter().zip(self.data(*a)).map(|(g, x)| g * x.to_f64()).collect();
                vec![(*a, ga), (*b, gb)]
            }
            Op::Scale(a, f) => vec![(*a, g.iter().map(|v| v * f).collect())],
            Op::Elu(a) => vec![(*a, elementwise(*a, &|x, y| if x > 0.0 { 1.0 } else { y + 1.0 }))],
            Op::Relu(a) => vec![(*a, elementwise(*a, &|x, _| if x > 0.0 { 1.0 } else { 0.0 }))],
            Op::Tanh(a) => vec![(*a, elementwise(*a, &|_, y| 1.0 - y * y))],
            Op::Sigmoid(a) => vec![(*a, elementwise(*a, &|_, y| y * (1.0 - y)))],
            Op::Abs(a) => vec![(*a, elementwise(*a, &|x, _| if x > 0.0 { 1.0 } else if x < 0.0 { -1.0 } else { 0.0 }))],
            Op::Lerp { from, to, gate } => {
                let (h, q, z) = (self.data(*from), self.data(*to), self.data(*gate));
                let mut gh = Vec::with_capacity(g.len());
                let mut gq = Vec::with_capacity(g.len());
                let mut gz = Vec::with_capacity(g.len());
                for i in 0..g.len() {
                    let (hv, qv, zv) = (h[i].to_f64(), q[i].to_f64(), z[i].to_f64());
                    gh.push(g[i] * (1.0 - zv));
                    gq.push(g[i] * zv);
                    gz.push(g[i] * (qv - hv));
                }
                vec![(*from, gh), (*to, gq), (*gate, gz)]
            }
            Op::SumLast { input, k } => {
                vec![(*input, g.iter().flat_map(|&v| std::iter::repeat_n(v, *k)).collect())]
            }
            Op::DotConst { input, weights } => vec![(*input, weights.iter().map(|w| w * g[0]).collect())],
            Op::Aggregate { c, cv, ch, p, h, w } => {
                let (gc, gv, gh) = kernels::aggregate_backward(g, *p, *h, *w);
                vec![(*c, gc), (*cv, gv), (*ch, gh)]
            }
            Op::Window { flow, h, w, scale, radius, axes } => {
                vec![(*flow, kernels::window_coords_backward(g, *h, *w, *scale, *radius, *axes))]
            }
            Op::ConvexUpsample { flow, mask, h, w, d } => {
                let (gf, gm) =
                    kernels::convex_upsample_backward(self.data(*flow), self.data(*mask), *h, *w, *d, g);
                vec![(*flow, gf), (*mask, gm)]
            }
            Op::Custom { inputs, backward, .. } => {
                let values: Vec<&Tensor<T>> = inputs.iter().map(|v| self.value(*v)).collect();
                inputs.iter().copied().zip(backward(&values, &node.value, g)).collect()
            }
        }
    }
}
