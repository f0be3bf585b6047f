use std::collections::BTreeMap;

use super::{Real, Result, Tensor, TensorError};

/// Negative-side slope of every leaky-relu in the crate.
pub const LEAKY_SLOPE: f64 = 0.01;

/// Bound applied to arccos inputs when evaluating the adjoint.
const ACOS_LIMIT: f64 = 1.0 - 1e-7;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    LeakyRelu(Var),
    Tanh(Var),
    Sin(Var),
    Cos(Var),
    Acos(Var),
    Norm(Var),
    Normalize(Var),
    Sum(Var),
    Mean(Var),
    SumLast(Var),
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Slice {
        input: Var,
        axis: usize,
        start: usize,
        end: usize,
    },
    Reshape(Var),
    Transpose(Var),
    Conv2d {
        input: Var,
        kernel: Var,
        stride: usize,
        pad: usize,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Scale(..) => "scale",
            Op::LeakyRelu(..) => "leaky_relu",
            Op::Tanh(..) => "tanh",
            Op::Sin(..) => "sin",
            Op::Cos(..) => "cos",
            Op::Acos(..) => "acos",
            Op::Norm(..) => "norm",
            Op::Normalize(..) => "normalize",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::SumLast(..) => "sum_last",
            Op::Concat { .. } => "concat",
            Op::Slice { .. } => "slice",
            Op::Reshape(..) => "reshape",
            Op::Transpose(..) => "transpose",
            Op::Conv2d { .. } => "conv2d",
        }
    }
}

struct Node<T> {
    op: Op,
    value: Tensor<T>,
    needs_grad: bool,
}

/// Define-by-run tape. Nodes are appended in evaluation order, so node ids
/// are a topological order by construction.
pub struct Graph<T: Real = f32> {
    nodes: Vec<Node<T>>,
    params: BTreeMap<String, Var>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Shape-compatible for elementwise ops: `b` is `a` itself, a trailing
/// suffix of `a` (bias rows), or a single element.
fn broadcastable(a: &[usize], b: &[usize]) -> bool {
    let nb: usize = b.iter().product();
    nb == 1 || (b.len() <= a.len() && a[a.len() - b.len()..] == *b)
}

fn reduced_shape(shape: &[usize]) -> Vec<usize> {
    if shape.len() <= 1 {
        vec![1]
    } else {
        shape[..shape.len() - 1].to_vec()
    }
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn conv_out(size: usize, k: usize, stride: usize, pad: usize) -> usize {
    (size + 2 * pad - k) / stride + 1
}

pub(crate) fn matmul_into<T: Real>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: BTreeMap::new(),
        }
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

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Named trainable leaves registered so far.
    pub fn params(&self) -> &BTreeMap<String, Var> {
        &self.params
    }

    fn push(&mut self, op: Op, value: Tensor<T>) -> Result<Var> {
        let id = self.nodes.len();
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: op.name(), node: id });
        }
        let needs_grad = match &op {
            Op::Leaf => false,
            Op::MatMul(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) => {
                self.nodes[a.0].needs_grad || self.nodes[b.0].needs_grad
            }
            Op::Conv2d { input, kernel, .. } => self.nodes[input.0].needs_grad || self.nodes[kernel.0].needs_grad,
            Op::Concat { inputs, .. } => inputs.iter().any(|v| self.nodes[v.0].needs_grad),
            Op::Slice { input, .. } => self.nodes[input.0].needs_grad,
            Op::Scale(a, _)
            | Op::LeakyRelu(a)
            | Op::Tanh(a)
            | Op::Sin(a)
            | Op::Cos(a)
            | Op::Acos(a)
            | Op::Norm(a)
            | Op::Normalize(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::SumLast(a)
            | Op::Reshape(a)
            | Op::Transpose(a) => self.nodes[a.0].needs_grad,
        };
        self.nodes.push(Node { op, value, needs_grad });
        Ok(Var(id))
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        let id = self.nodes.len();
        self.nodes.push(Node {
            op: Op::Leaf,
            value,
            needs_grad: false,
        });
        Var(id)
    }

    /// A leaf that receives a gradient and is reported under `name`.
    pub fn param(&mut self, name: impl Into<String>, value: Tensor<T>) -> Var {
        let id = self.nodes.len();
        self.nodes.push(Node {
            op: Op::Leaf,
            value,
            needs_grad: true,
        });
        self.params.insert(name.into(), Var(id));
        Var(id)
    }

    /// A differentiable leaf without a name (gradient checking inputs).
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        let id = self.nodes.len();
        self.nodes.push(Node {
            op: Op::Leaf,
            value,
            needs_grad: true,
        });
        Var(id)
    }

    pub fn scalar(&mut self, x: f64) -> Var {
        self.constant(Tensor::scalar(T::of(x)))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::Shape {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        matmul_into(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        self.push(Op::MatMul(a, b), Tensor::new(&[m, n], out)?)
    }

    fn binary(&mut self, a: Var, b: Var, op: Op, f: impl Fn(T, T) -> T) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if !broadcastable(sa, sb) {
            return Err(TensorError::Shape {
                op: op.name(),
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (va, vb) = (self.value(a), self.value(b));
        let nb = vb.numel();
        let bd = vb.data();
        let data = va.data().iter().enumerate().map(|(i, &x)| f(x, bd[i % nb])).collect();
        let t = Tensor::new(va.shape(), data)?;
        self.push(op, t)
    }

    /// Elementwise `a + b`; `b` may broadcast as a trailing suffix or scalar.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Div(a, b), |x, y| x / y)
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(T) -> T) -> Result<Var> {
        let v = self.value(a);
        let t = Tensor::new(v.shape(), v.data().iter().map(|&x| f(x)).collect())?;
        self.push(op, t)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let c = T::of(s);
        self.unary(a, Op::Scale(a, s), |x| x * c)
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.scale(a, -1.0)
    }

    pub fn leaky_relu(&mut self, a: Var) -> Result<Var> {
        let slope = T::of(LEAKY_SLOPE);
        self.unary(a, Op::LeakyRelu(a), |x| if x > T::zero() { x } else { x * slope })
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Tanh(a), |x| x.tanh())
    }

    pub fn sin(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Sin(a), |x| x.sin())
    }

    pub fn cos(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Cos(a), |x| x.cos())
    }

    /// `arccos` of the input clamped to `[-1, 1]`. The adjoint is evaluated
    /// at the input clamped to `[-1 + 1e-7, 1 - 1e-7]`, so it stays finite.
    pub fn acos(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Acos(a), |x| x.max(-T::one()).min(T::one()).acos())
    }

    /// Euclidean norm over the last axis.
    pub fn norm(&mut self, a: Var) -> Result<Var> {
        self.reduce_last(a, Op::Norm(a), |row| row.iter().map(|&x| x * x).sum::<T>().sqrt())
    }

    /// `x / ‖x‖` along the last axis.
    pub fn normalize(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        let n = *v.shape().last().unwrap_or(&1);
        let mut data = v.data().to_vec();
        for row in data.chunks_mut(n) {
            let norm = row.iter().map(|&x| x * x).sum::<T>().sqrt();
            for x in row {
                *x = *x / norm;
            }
        }
        let t = Tensor::new(v.shape(), data)?;
        self.push(Op::Normalize(a), t)
    }

    pub fn sum_last(&mut self, a: Var) -> Result<Var> {
        self.reduce_last(a, Op::SumLast(a), |row| row.iter().copied().sum())
    }

    fn reduce_last(&mut self, a: Var, op: Op, f: impl Fn(&[T]) -> T) -> Result<Var> {
        let v = self.value(a);
        let n = *v.shape().last().unwrap_or(&1);
        let data = v.data().chunks(n).map(f).collect();
        let t = Tensor::new(&reduced_shape(v.shape()), data)?;
        self.push(op, t)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().copied().sum();
        self.push(Op::Sum(a), Tensor::scalar(s))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        let s = v.data().iter().copied().sum::<T>() / T::of(v.numel() as f64);
        self.push(Op::Mean(a), Tensor::scalar(s))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(inputs[0]).to_vec();
        if axis >= first.len() {
            return Err(TensorError::Invalid(format!("concat axis {axis} on rank {}", first.len())));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let same_rest = s.len() == first.len() && s.iter().zip(&first).enumerate().all(|(i, (x, y))| i == axis || x == y);
            if !same_rest {
                return Err(TensorError::Shape {
                    op: "concat",
                    lhs: first.clone(),
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let mut shape = first.clone();
        shape[axis] = total;
        let (outer, _, inner) = split_axis(&shape, axis);
        let mut data = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for &v in inputs {
                let t = self.value(v);
                let chunk = t.shape()[axis] * inner;
                data.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        self.push(
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            Tensor::new(&shape, data)?,
        )
    }

    /// Half-open range `start..end` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if axis >= s.len() || start >= end || end > s[axis] {
            return Err(TensorError::Invalid(format!("slice {start}..{end} on axis {axis} of shape {s:?}")));
        }
        let (outer, dim, inner) = split_axis(&s, axis);
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(outer * (end - start) * inner);
        for o in 0..outer {
            let base = o * dim * inner;
            data.extend_from_slice(&src[base + start * inner..base + end * inner]);
        }
        let mut shape = s;
        shape[axis] = end - start;
        self.push(
            Op::Slice {
                input: a,
                axis,
                start,
                end,
            },
            Tensor::new(&shape, data)?,
        )
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).clone().reshape(shape)?;
        self.push(Op::Reshape(a), t)
    }

    /// Transpose of a rank-2 tensor.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 2 {
            return Err(TensorError::Invalid(format!("transpose needs rank 2, got {s:?}")));
        }
        let (r, c) = (s[0], s[1]);
        let src = self.value(a).data();
        let mut data = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = src[i * c + j];
            }
        }
        self.push(Op::Transpose(a), Tensor::new(&[c, r], data)?)
    }

    /// 2-D cross-correlation: input `[B, C, H, W]`, kernel `[O, C, kh, kw]`,
    /// zero padding on all sides.
    pub fn conv2d(&mut self, input: Var, kernel: Var, stride: usize, pad: usize) -> Result<Var> {
        let (si, sk) = (self.shape(input).to_vec(), self.shape(kernel).to_vec());
        if si.len() != 4 || sk.len() != 4 || si[1] != sk[1] || stride == 0 {
            return Err(TensorError::Shape {
                op: "conv2d",
                lhs: si,
                rhs: sk,
            });
        }
        let (b, c, h, w) = (si[0], si[1], si[2], si[3]);
        let (o, kh, kw) = (sk[0], sk[2], sk[3]);
        let (ho, wo) = (conv_out(h, kh, stride, pad), conv_out(w, kw, stride, pad));
        let x = self.value(input).data();
        let k = self.value(kernel).data();
        let mut out = vec![T::zero(); b * o * ho * wo];
        for bi in 0..b {
            for oc in 0..o {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = T::zero();
                        for ic in 0..c {
                            for ky in 0..kh {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                for kx in 0..kw {
                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                    if ix < 0 || ix >= w as isize {
                                        continue;
                                    }
                                    acc += x[((bi * c + ic) * h + iy as usize) * w + ix as usize] * k[((oc * c + ic) * kh + ky) * kw + kx];
                                }
                            }
                        }
                        out[((bi * o + oc) * ho + oy) * wo + ox] = acc;
                    }
                }
            }
        }
        self.push(
            Op::Conv2d {
                input,
                kernel,
                stride,
                pad,
            },
            Tensor::new(&[b, o, ho, wo], out)?,
        )
    }

    /// `x · w + b` with `x: [m, in]`, `w: [in, out]`, `b: [out]`.
    pub fn dense(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add(y, b)
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let ls = self.shape(loss);
        if ls.iter().product::<usize>() != 1 {
            return Err(TensorError::NonScalarLoss(ls.to_vec()));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![T::one()]);
        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.needs_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.propagate(id, &g, &mut grads)?;
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
            params: self.params.clone(),
        })
    }

    fn propagate(&self, id: usize, g: &[T], grads: &mut [Option<Vec<T>>]) -> Result<()> {
        let node = &self.nodes[id];
        let name = node.op.name();
        let y = node.value.data();
        let mut touched: Vec<Var> = Vec::with_capacity(2);
        {
            let mut acc = |v: Var, f: &mut dyn FnMut(&mut [T])| {
                if !self.nodes[v.0].needs_grad {
                    return;
                }
                let len = self.nodes[v.0].value.numel();
                let slot = grads[v.0].get_or_insert_with(|| vec![T::zero(); len]);
                f(slot);
                touched.push(v);
            };
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let (sa, sb) = (self.shape(*a), self.shape(*b));
                    let (m, k, n) = (sa[0], sa[1], sb[1]);
                    let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                    acc(*a, &mut |ga| {
                        for i in 0..m {
                            for p in 0..k {
                                let brow = &bv[p * n..(p + 1) * n];
                                let grow = &g[i * n..(i + 1) * n];
                                let mut s = T::zero();
                                for (x, y) in grow.iter().zip(brow) {
                                    s += *x * *y;
                                }
                                ga[i * k + p] += s;
                            }
                        }
                    });
                    acc(*b, &mut |gb| {
                        for i in 0..m {
                            let grow = &g[i * n..(i + 1) * n];
                            for p in 0..k {
                                let av_ip = av[i * k + p];
                                if av_ip == T::zero() {
                                    continue;
                                }
                                for (o, &gv) in gb[p * n..(p + 1) * n].iter_mut().zip(grow) {
                                    *o += av_ip * gv;
                                }
                            }
                        }
                    });
                }
                Op::Add(a, b) | Op::Sub(a, b) => {
                    let sign = if matches!(node.op, Op::Sub(..)) { -T::one() } else { T::one() };
                    acc(*a, &mut |ga| {
                        for (o, &gv) in ga.iter_mut().zip(g) {
                            *o += gv;
                        }
                    });
                    acc(*b, &mut |gb| {
                        let nb = gb.len();
                        for (i, &gv) in g.iter().enumerate() {
                            gb[i % nb] += sign * gv;
                        }
                    });
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                    let nb = bv.len();
                    acc(*a, &mut |ga| {
                        for (i, o) in ga.iter_mut().enumerate() {
                            *o += g[i] * bv[i % nb];
                        }
                    });
                    acc(*b, &mut |gb| {
                        for (i, &gv) in g.iter().enumerate() {
                            gb[i % nb] += gv * av[i];
                        }
                    });
                }
                Op::Div(a, b) => {
                    let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                    let nb = bv.len();
                    acc(*a, &mut |ga| {
                        for (i, o) in ga.iter_mut().enumerate() {
                            *o += g[i] / bv[i % nb];
                        }
                    });
                    acc(*b, &mut |gb| {
                        for (i, &gv) in g.iter().enumerate() {
                            let d = bv[i % nb];
                            gb[i % nb] += -gv * av[i] / (d * d);
                        }
                    });
                }
                Op::Scale(a, s) => {
                    let c = T::of(*s);
                    acc(*a, &mut |ga| {
                        for (o, &gv) in ga.iter_mut().zip(g) {
                            *o += gv * c;
                        }
                    });
                }
                Op::LeakyRelu(a) => {
                    let x = self.value(*a).data();
                    let slope = T::of(LEAKY_SLOPE);
                    acc(*a, &mut |ga| {
                        for (i, o) in ga.iter_mut().enumerate() {
                            *o += if x[i] > T::zero() { g[i] } else { g[i] * slope };
                        }
                    });
                }
                Op::Tanh(a) => acc(*a, &mut |ga| {
                    for (i, o) in ga.iter_mut().enumerate() {
                        *o += g[i] * (T::one() - y[i] * y[i]);
                    }
                }),
                Op::Sin(a) => {
                    let x = self.value(*a).data();
                    acc(*a, &mut |ga| {
                        for (i, o) in ga.iter_mut().enumerate() {
                            *o += g[i] * x[i].cos();
                        }
                    });
                }
                Op::Cos(a) => {
                    let x = self.value(*a).data();
                    acc(*a, &mut |ga| {
                        for (i, o) in ga.iter_mut().enumerate() {
                            *o -= g[i] * x[i].sin();
                        }
                    });
                }
                Op::Acos(a) => {
                    let x = self.value(*a).data();
                    let lim = T::of(ACOS_LIMIT);
                    acc(*a, &mut |ga| {
                        for (i, o) in ga.iter_mut().enumerate() {
                            let xc = x[i].max(-lim).min(lim);
                            *o -= g[i] / (T::one() - xc * xc).sqrt();
                        }
                    });
                }
                Op::Norm(a) => {
                    let x = self.value(*a).data();
                    let n = *self.shape(*a).last().unwrap_or(&1);
                    acc(*a, &mut |ga| {
                        for (r, &norm) in y.iter().enumerate() {
                            if norm == T::zero() {
                                continue;
                            }
                            let f = g[r] / norm;
                            for j in 0..n {
                                ga[r * n + j] += f * x[r * n + j];
                            }
                        }
                    });
                }
                Op::Normalize(a) => {
                    let x = self.value(*a).data();
                    let n = *self.shape(*a).last().unwrap_or(&1);
                    acc(*a, &mut |ga| {
                        for r in 0..x.len() / n {
                            let row = r * n..(r + 1) * n;
                            let norm = x[row.clone()].iter().map(|&v| v * v).sum::<T>().sqrt();
                            let gy: T = g[row.clone()].iter().zip(&y[row.clone()]).map(|(&a, &b)| a * b).sum();
                            for j in row {
                                ga[j] += (g[j] - y[j] * gy) / norm;
                            }
                        }
                    });
                }
                Op::SumLast(a) => {
                    let n = *self.shape(*a).last().unwrap_or(&1);
                    acc(*a, &mut |ga| {
                        for (i, o) in ga.iter_mut().enumerate() {
                            *o += g[i / n];
                        }
                    });
                }
                Op::Sum(a) => acc(*a, &mut |ga| {
                    for o in ga.iter_mut() {
                        *o += g[0];
                    }
                }),
                Op::Mean(a) => acc(*a, &mut |ga| {
                    let f = g[0] / T::of(ga.len() as f64);
                    for o in ga.iter_mut() {
                        *o += f;
                    }
                }),
                Op::Concat { inputs, axis } => {
                    let (outer, _, inner) = split_axis(node.value.shape(), *axis);
                    let mut offset = 0;
                    let total = node.value.shape()[*axis] * inner;
                    for &v in inputs {
                        let chunk = self.shape(v)[*axis] * inner;
                        acc(v, &mut |gv| {
                            for o in 0..outer {
                                let src = &g[o * total + offset..o * total + offset + chunk];
                                for (d, &s) in gv[o * chunk..(o + 1) * chunk].iter_mut().zip(src) {
                                    *d += s;
                                }
                            }
                        });
                        offset += chunk;
                    }
                }
                Op::Slice { input, axis, start, end } => {
                    let (outer, dim, inner) = split_axis(self.shape(*input), *axis);
                    let width = (end - start) * inner;
                    acc(*input, &mut |gi| {
                        for o in 0..outer {
                            let base = o * dim * inner + start * inner;
                            for (d, &s) in gi[base..base + width].iter_mut().zip(&g[o * width..(o + 1) * width]) {
                                *d += s;
                            }
                        }
                    });
                }
                Op::Reshape(a) => acc(*a, &mut |ga| {
                    for (o, &gv) in ga.iter_mut().zip(g) {
                        *o += gv;
                    }
                }),
                Op::Transpose(a) => {
                    let s = self.shape(*a);
                    let (r, c) = (s[0], s[1]);
                    acc(*a, &mut |ga| {
                        for i in 0..r {
                            for j in 0..c {
                                ga[i * c + j] += g[j * r + i];
                            }
                        }
                    });
                }
                Op::Conv2d {
                    input,
                    kernel,
                    stride,
                    pad,
                } => {
                    let (si, sk) = (self.shape(*input), self.shape(*kernel));
                    let (b, c, h, w) = (si[0], si[1], si[2], si[3]);
                    let (o, kh, kw) = (sk[0], sk[2], sk[3]);
                    let so = node.value.shape();
                    let (ho, wo) = (so[2], so[3]);
                    let (xv, kv) = (self.value(*input).data(), self.value(*kernel).data());
                    let (stride, pad) = (*stride, *pad);
                    // Visits every (output, tap) pair that touches the input.
                    let visit = |f: &mut dyn FnMut(usize, usize, usize)| {
                        for bi in 0..b {
                            for oc in 0..o {
                                for oy in 0..ho {
                                    for ox in 0..wo {
                                        let oi = ((bi * o + oc) * ho + oy) * wo + ox;
                                        for ic in 0..c {
                                            for ky in 0..kh {
                                                let iy = (oy * stride + ky) as isize - pad as isize;
                                                if iy < 0 || iy >= h as isize {
                                                    continue;
                                                }
                                                for kx in 0..kw {
                                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                                    if ix < 0 || ix >= w as isize {
                                                        continue;
                                                    }
                                                    let xi = ((bi * c + ic) * h + iy as usize) * w + ix as usize;
                                                    let ki = ((oc * c + ic) * kh + ky) * kw + kx;
                                                    f(oi, xi, ki);
                                                }
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    };
                    acc(*input, &mut |gx| visit(&mut |oi, xi, ki| gx[xi] += g[oi] * kv[ki]));
                    acc(*kernel, &mut |gk| visit(&mut |oi, xi, ki| gk[ki] += g[oi] * xv[xi]));
                }
            }
        }
        for v in touched {
            if let Some(gv) = &grads[v.0] {
                if gv.iter().any(|x| !x.is_finite()) {
                    return Err(TensorError::NonFinite { op: name, node: id });
                }
            }
        }
        Ok(())
    }
}

/// Result of a reverse sweep.
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    shapes: Vec<Vec<usize>>,
    params: BTreeMap<String, Var>,
}

impl<T: Real> Gradients<T> {
    /// Gradient with respect to a leaf. `None` when the leaf does not
    /// influence the loss or is a constant.
    pub fn wrt(&self, v: Var) -> Option<Tensor<T>> {
        self.grads[v.0]
            .as_ref()
            .map(|g| Tensor::new(&self.shapes[v.0], g.clone()).expect("gradient shape"))
    }

    /// dLoss/dParam for every named parameter; unused parameters get zeros.
    pub fn params(&self) -> BTreeMap<String, Tensor<T>> {
        self.params
            .iter()
            .map(|(name, &v)| {
                let g = self.wrt(v).unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]));
                (name.clone(), g)
            })
            .collect()
    }
}

/// Rescales `grads` in place so their joint norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm<T: Real>(grads: &mut BTreeMap<String, Tensor<T>>, max_norm: f64) -> f64 {
    let total: f64 = grads
        .values()
        .flat_map(|t| t.data().iter())
        .map(|x| x.f64() * x.f64())
        .sum::<f64>()
        .sqrt();
    if total > max_norm {
        let f = T::of(max_norm / total);
        for t in grads.values_mut() {
            for x in t.data_mut() {
                *x *= f;
            }
        }
    }
    total
}
