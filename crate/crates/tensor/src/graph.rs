//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation in execution order together with its
//! output value. [`Graph::backward`] replays the record once in reverse,
//! accumulating gradients additively, and hands back the gradients of the
//! leaves that were registered with `requires_grad`.

use crate::error::{Result, TensorError};
use crate::kernels::{self, ConvGeom};
use crate::tensor::Tensor;

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Unary {
    Neg,
    Exp,
    Log,
    Tanh,
    Sigmoid,
    LogSigmoid,
    Relu,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Unary(Unary, Var),
    Binary(Binary, Var, Var, Option<Vec<usize>>),
    AddScalar(Var),
    MulScalar(Var, f64),
    Conv2d {
        x: Var,
        kernel: Var,
        bias: Option<Var>,
        geom: ConvGeom,
    },
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Narrow {
        x: Var,
        axis: usize,
        start: usize,
    },
    Permute(Var, Vec<usize>),
    AvgPool(Var, usize),
    Sum(Var),
    SumPerExample(Var),
    Matmul(Var, Var),
    Reshape(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients of the leaves that required them.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

pub struct Graph {
    nodes: Vec<Node>,
    grad_enabled: bool,
    backward_done: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

fn check_finite(t: &Tensor, op: &'static str) -> Result<()> {
    if t.is_finite() {
        Ok(())
    } else {
        Err(TensorError::NonFinite { op })
    }
}

fn unary_name(u: Unary) -> &'static str {
    match u {
        Unary::Neg => "neg",
        Unary::Exp => "exp",
        Unary::Log => "log",
        Unary::Tanh => "tanh",
        Unary::Sigmoid => "sigmoid",
        Unary::LogSigmoid => "log_sigmoid",
        Unary::Relu => "relu",
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn log_sigmoid(x: f64) -> f64 {
    x.min(0.0) - (-x.abs()).exp().ln_1p()
}

impl Graph {
    /// A graph that records operations for a later [`Graph::backward`].
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grad_enabled: true,
            backward_done: false,
        }
    }

    /// A graph that only evaluates values; nothing requires gradients.
    pub fn no_grad() -> Self {
        Self {
            grad_enabled: false,
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad: requires_grad && self.grad_enabled,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Registers a leaf; its gradient is reported by `backward` when
    /// `requires_grad` is set.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn unary(&mut self, u: Unary, x: Var) -> Result<Var> {
        let xv = &self.nodes[x.0].value;
        if u == Unary::Log {
            if let Some(&bad) = xv.data().iter().find(|&&v| v <= 0.0) {
                return Err(TensorError::LogDomain(bad));
            }
        }
        let out = match u {
            Unary::Neg => xv.map(|v| -v),
            Unary::Exp => xv.map(f64::exp),
            Unary::Log => xv.map(f64::ln),
            Unary::Tanh => xv.map(f64::tanh),
            Unary::Sigmoid => xv.map(sigmoid),
            Unary::LogSigmoid => xv.map(log_sigmoid),
            Unary::Relu => xv.map(|v| v.max(0.0)),
        };
        check_finite(&out, unary_name(u))?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(out, Op::Unary(u, x), rg))
    }

    pub fn neg(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Neg, x)
    }
    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Exp, x)
    }
    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Log, x)
    }
    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Tanh, x)
    }
    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Sigmoid, x)
    }
    pub fn log_sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::LogSigmoid, x)
    }
    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Relu, x)
    }

    /// `a ∘ b` where `b` is either the same shape as `a` or broadcast onto it
    /// along size-1 (or missing leading) dimensions.
    pub fn binary(&mut self, op: Binary, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let map = kernels::broadcast_map(av.shape(), bv.shape()).ok_or_else(|| {
            TensorError::ShapeMismatch {
                op: "broadcast",
                lhs: av.shape().to_vec(),
                rhs: bv.shape().to_vec(),
            }
        })?;
        let f: fn(f64, f64) -> f64 = match op {
            Binary::Add => |x, y| x + y,
            Binary::Sub => |x, y| x - y,
            Binary::Mul => |x, y| x * y,
            Binary::Div => |x, y| x / y,
        };
        let bd = bv.data();
        let data: Vec<f64> = match &map {
            None => av.data().iter().zip(bd).map(|(&x, &y)| f(x, y)).collect(),
            Some(m) => av
                .data()
                .iter()
                .zip(m)
                .map(|(&x, &j)| f(x, bd[j]))
                .collect(),
        };
        let out = Tensor::new(av.shape().to_vec(), data)?;
        let name = match op {
            Binary::Add => "add",
            Binary::Sub => "sub",
            Binary::Mul => "mul",
            Binary::Div => "div",
        };
        check_finite(&out, name)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::Binary(op, a, b, map), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b)
    }
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b)
    }
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b)
    }
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Div, a, b)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        let out = self.nodes[x.0].value.map(|v| v + c);
        check_finite(&out, "add_scalar")?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(out, Op::AddScalar(x), rg))
    }

    pub fn mul_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        let out = self.nodes[x.0].value.map(|v| v * c);
        check_finite(&out, "mul_scalar")?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(out, Op::MulScalar(x, c), rg))
    }

    /// Cross-correlation of `x: [N,C_in,H,W]` with `kernel: [C_out,C_in,kh,kw]`.
    pub fn conv2d(
        &mut self,
        x: Var,
        kernel: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let xv = &self.nodes[x.0].value;
        let kv = &self.nodes[kernel.0].value;
        let (n, c_in, h, w) = xv.dims4()?;
        let (c_out, kc, kh, kw) = kv.dims4()?;
        if kc != c_in {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                lhs: xv.shape().to_vec(),
                rhs: kv.shape().to_vec(),
            });
        }
        if kh % 2 == 0 || kw % 2 == 0 || stride == 0 {
            return Err(TensorError::InvalidArgument {
                op: "conv2d",
                msg: format!("kernel {kh}x{kw} must be odd, stride {stride} positive"),
            });
        }
        let (span_h, span_w) = (h + 2 * pad, w + 2 * pad);
        if span_h < kh || span_w < kw || (span_h - kh) % stride != 0 || (span_w - kw) % stride != 0
        {
            return Err(TensorError::InvalidArgument {
                op: "conv2d",
                msg: format!(
                    "output size not integral for input {h}x{w}, kernel {kh}x{kw}, pad {pad}, stride {stride}"
                ),
            });
        }
        let geom = ConvGeom {
            n,
            c_in,
            h,
            w,
            c_out,
            kh,
            kw,
            stride,
            pad,
            h_out: (span_h - kh) / stride + 1,
            w_out: (span_w - kw) / stride + 1,
        };
        let bias_data = match bias {
            Some(b) => {
                let bv = &self.nodes[b.0].value;
                if bv.len() != c_out {
                    return Err(TensorError::ShapeMismatch {
                        op: "conv2d bias",
                        lhs: vec![c_out],
                        rhs: bv.shape().to_vec(),
                    });
                }
                Some(bv.data())
            }
            None => None,
        };
        let data = kernels::conv2d_forward(&geom, xv.data(), kv.data(), bias_data);
        let out = Tensor::new(vec![n, c_out, geom.h_out, geom.w_out], data)?;
        check_finite(&out, "conv2d")?;
        let mut inputs = vec![x, kernel];
        inputs.extend(bias);
        let rg = self.any_grad(&inputs);
        Ok(self.push(
            out,
            Op::Conv2d {
                x,
                kernel,
                bias,
                geom,
            },
            rg,
        ))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let values: Vec<&Tensor> = parts.iter().map(|p| &self.nodes[p.0].value).collect();
        let out = Tensor::concat(&values, axis)?;
        let rg = self.any_grad(parts);
        Ok(self.push(
            out,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            rg,
        ))
    }

    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let out = self.nodes[x.0].value.narrow(axis, start, len)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(out, Op::Narrow { x, axis, start }, rg))
    }

    /// Splits `x` along `axis` into sizes `at` and `dim - at`.
    pub fn split(&mut self, x: Var, axis: usize, at: usize) -> Result<(Var, Var)> {
        let dim = self.shape(x).get(axis).copied().unwrap_or(0);
        if at == 0 || at >= dim {
            return Err(TensorError::InvalidArgument {
                op: "split",
                msg: format!("cannot split dimension {dim} at {at}"),
            });
        }
        Ok((
            self.narrow(x, axis, 0, at)?,
            self.narrow(x, axis, at, dim - at)?,
        ))
    }

    /// Rearranges `x` by a destination-to-source permutation of flat indices.
    fn permute(&mut self, x: Var, shape: Vec<usize>, idx: Vec<usize>) -> Result<Var> {
        let data = kernels::gather(self.nodes[x.0].value.data(), &idx);
        let out = Tensor::new(shape, data)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(out, Op::Permute(x, idx), rg))
    }

    /// `[N,C,H,W] → [N,4C,H/2,W/2]`.
    pub fn space_to_depth(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(TensorError::InvalidArgument {
                op: "squeeze",
                msg: format!("spatial dims {h}x{w} must be even"),
            });
        }
        let idx = kernels::space_to_depth_index(n, c, h, w);
        self.permute(x, vec![n, 4 * c, h / 2, w / 2], idx)
    }

    /// `[N,4C,H,W] → [N,C,2H,2W]`, inverse of [`Graph::space_to_depth`].
    pub fn depth_to_space(&mut self, x: Var) -> Result<Var> {
        let (n, c4, h, w) = self.value(x).dims4()?;
        if c4 % 4 != 0 {
            return Err(TensorError::InvalidArgument {
                op: "unsqueeze",
                msg: format!("channel count {c4} not divisible by 4"),
            });
        }
        let fwd = kernels::space_to_depth_index(n, c4 / 4, 2 * h, 2 * w);
        let mut idx = vec![0; fwd.len()];
        for (dst, &src) in fwd.iter().enumerate() {
            idx[src] = dst;
        }
        self.permute(x, vec![n, c4 / 4, 2 * h, 2 * w], idx)
    }

    /// Average pooling with a square window and stride of `factor`.
    pub fn avg_pool(&mut self, x: Var, factor: usize) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        if factor == 0 || h % factor != 0 || w % factor != 0 {
            return Err(TensorError::InvalidArgument {
                op: "avg_pool",
                msg: format!("{h}x{w} not divisible by {factor}"),
            });
        }
        if factor == 1 {
            return Ok(x);
        }
        let data = kernels::avg_pool(self.value(x).data(), n, c, h, w, factor);
        let out = Tensor::new(vec![n, c, h / factor, w / factor], data)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(out, Op::AvgPool(x, factor), rg))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(x).sum());
        check_finite(&out, "sum")?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(out, Op::Sum(x), rg))
    }

    /// Sums all but the leading (batch) dimension: `[N, ...] → [N]`.
    pub fn sum_per_example(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let n = *xv
            .shape()
            .first()
            .ok_or_else(|| TensorError::InvalidArgument {
                op: "sum_per_example",
                msg: "scalar input".into(),
            })?;
        let per = xv.len() / n;
        let data = xv.data().chunks(per).map(|c| c.iter().sum()).collect();
        let out = Tensor::new(vec![n], data)?;
        check_finite(&out, "sum_per_example")?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(out, Op::SumPerExample(x), rg))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).len() as f64;
        let s = self.sum(x)?;
        self.mul_scalar(s, 1.0 / n)
    }

    /// Matrix product of rank-2 tensors.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (m, k, n) = match (av.shape(), bv.shape()) {
            ([m, k], [k2, n]) if k == k2 => (*m, *k, *n),
            _ => {
                return Err(TensorError::ShapeMismatch {
                    op: "matmul",
                    lhs: av.shape().to_vec(),
                    rhs: bv.shape().to_vec(),
                })
            }
        };
        let out = Tensor::new(vec![m, n], kernels::matmul(av.data(), bv.data(), m, k, n))?;
        check_finite(&out, "matmul")?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::Matmul(a, b), rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(out, Op::Reshape(x), rg))
    }

    /// Reverse pass from a scalar `loss`. May run once per graph.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.backward_done {
            return Err(TensorError::BackwardTwice);
        }
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(TensorError::NonScalarLoss(lv.shape().to_vec()));
        }
        self.backward_done = true;
        let mut grads: Vec<Option<Vec<f64>>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
        }

        let grads = self
            .nodes
            .iter()
            .zip(grads)
            .map(|(node, g)| match (&node.op, g) {
                (Op::Leaf, Some(g)) if node.requires_grad => {
                    Some(Tensor::new(node.value.shape().to_vec(), g).expect("grad shape"))
                }
                _ => None,
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let y = node.value.data();
        let needs = |v: Var| self.nodes[v.0].requires_grad;
        let mut acc = |v: Var, contrib: Vec<f64>| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.iter_mut().zip(&contrib).for_each(|(e, c)| *e += c),
                slot @ None => *slot = Some(contrib),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Unary(u, x) => {
                let xd = self.nodes[x.0].value.data();
                let d: Vec<f64> = match u {
                    Unary::Neg => g.iter().map(|v| -v).collect(),
                    Unary::Exp => g.iter().zip(y).map(|(g, y)| g * y).collect(),
                    Unary::Log => g.iter().zip(xd).map(|(g, x)| g / x).collect(),
                    Unary::Tanh => g.iter().zip(y).map(|(g, y)| g * (1.0 - y * y)).collect(),
                    Unary::Sigmoid => g.iter().zip(y).map(|(g, y)| g * y * (1.0 - y)).collect(),
                    Unary::LogSigmoid => g.iter().zip(xd).map(|(g, &x)| g * sigmoid(-x)).collect(),
                    Unary::Relu => g
                        .iter()
                        .zip(xd)
                        .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
                        .collect(),
                };
                acc(*x, d);
            }
            Op::Binary(op, a, b, map) => {
                let ad = self.nodes[a.0].value.data();
                let bd = self.nodes[b.0].value.data();
                let b_at = |k: usize| match map {
                    None => bd[k],
                    Some(m) => bd[m[k]],
                };
                if needs(*a) {
                    let da: Vec<f64> = match op {
                        Binary::Add | Binary::Sub => g.to_vec(),
                        Binary::Mul => g.iter().enumerate().map(|(k, g)| g * b_at(k)).collect(),
                        Binary::Div => g.iter().enumerate().map(|(k, g)| g / b_at(k)).collect(),
                    };
                    acc(*a, da);
                }
                if needs(*b) {
                    let full: Vec<f64> = match op {
                        Binary::Add => g.to_vec(),
                        Binary::Sub => g.iter().map(|v| -v).collect(),
                        Binary::Mul => g.iter().zip(ad).map(|(g, a)| g * a).collect(),
                        Binary::Div => g
                            .iter()
                            .enumerate()
                            .map(|(k, g)| {
                                let bk = b_at(k);
                                -g * ad[k] / (bk * bk)
                            })
                            .collect(),
                    };
                    let db = match map {
                        None => full,
                        Some(m) => {
                            let mut db = vec![0.0; bd.len()];
                            for (k, v) in full.into_iter().enumerate() {
                                db[m[k]] += v;
                            }
                            db
                        }
                    };
                    acc(*b, db);
                }
            }
            Op::AddScalar(x) => acc(*x, g.to_vec()),
            Op::MulScalar(x, c) => acc(*x, g.iter().map(|v| v * c).collect()),
            Op::Conv2d {
                x,
                kernel,
                bias,
                geom,
            } => {
                let want = (needs(*x), needs(*kernel), bias.is_some_and(needs));
                let (dx, dk, db) = kernels::conv2d_backward(
                    geom,
                    self.nodes[x.0].value.data(),
                    self.nodes[kernel.0].value.data(),
                    g,
                    want,
                );
                if let Some(dx) = dx {
                    acc(*x, dx);
                }
                if let Some(dk) = dk {
                    acc(*kernel, dk);
                }
                if let (Some(b), Some(db)) = (bias, db) {
                    acc(*b, db);
                }
            }
            Op::Concat { parts, axis } => {
                let shape = node.value.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let total = shape[*axis];
                let mut offset = 0;
                for p in parts {
                    let dim = self.nodes[p.0].value.shape()[*axis];
                    if needs(*p) {
                        let mut d = Vec::with_capacity(outer * dim * inner);
                        for o in 0..outer {
                            let base = (o * total + offset) * inner;
                            d.extend_from_slice(&g[base..base + dim * inner]);
                        }
                        acc(*p, d);
                    }
                    offset += dim;
                }
            }
            Op::Narrow { x, axis, start } => {
                let src_shape = self.nodes[x.0].value.shape();
                let outer: usize = src_shape[..*axis].iter().product();
                let inner: usize = src_shape[axis + 1..].iter().product();
                let dim = src_shape[*axis];
                let len = node.value.shape()[*axis];
                let mut d = vec![0.0; self.nodes[x.0].value.len()];
                for o in 0..outer {
                    let dst = (o * dim + start) * inner;
                    let src = o * len * inner;
                    d[dst..dst + len * inner].copy_from_slice(&g[src..src + len * inner]);
                }
                acc(*x, d);
            }
            Op::Permute(x, idx) => acc(*x, kernels::scatter(g, idx)),
            Op::AvgPool(x, f) => {
                let (n, c, h, w) = self.nodes[x.0].value.dims4().expect("rank 4");
                acc(*x, kernels::avg_pool_backward(g, n, c, h, w, *f));
            }
            Op::Sum(x) => acc(*x, vec![g[0]; self.nodes[x.0].value.len()]),
            Op::SumPerExample(x) => {
                let len = self.nodes[x.0].value.len();
                let per = len / g.len();
                acc(*x, (0..len).map(|k| g[k / per]).collect());
            }
            Op::Matmul(a, b) => {
                let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                let (m, k) = (av.shape()[0], av.shape()[1]);
                let n = bv.shape()[1];
                let (da, db) = kernels::matmul_backward(av.data(), bv.data(), g, m, k, n);
                acc(*a, da);
                acc(*b, db);
            }
            Op::Reshape(x) => acc(*x, g.to_vec()),
        }
    }
}
