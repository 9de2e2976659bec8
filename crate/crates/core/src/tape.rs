//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! Operations are recorded in creation order, which is already a
//! topological order: every node's inputs have smaller ids. A backward pass
//! walks the tape from the loss node down to id 0 and never touches forward
//! values, so several losses built on one forward pass can each be
//! differentiated independently.
//!
//! ```
//! use fakescope::tape::Tape;
//! use fakescope::tensor::Tensor;
//!
//! let mut tape = Tape::new();
//! let p = tape.param("p", Tensor::vector(vec![1.0, 2.0]));
//! let sq = tape.mul(p, p).unwrap();
//! let loss = tape.sum(sq, None).unwrap();
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.get("p").unwrap().data(), &[2.0, 4.0]);
//! ```

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::{matmul_a_bt_into, matmul_at_b_into, matmul_into, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UnaryOp {
    Abs,
    Sqrt,
    Relu,
    Sigmoid,
    Exp,
    Log,
    Neg,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReduceOp {
    Sum,
    Mean,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Binary(BinaryOp, Var, Var),
    Unary(UnaryOp, Var),
    Scale(Var, f64),
    MatMul(Var, Var),
    BatchMatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Conv2d {
        input: Var,
        kernel: Var,
        stride: usize,
        pad: usize,
    },
    AddBias {
        input: Var,
        bias: Var,
        axis: usize,
    },
    Reduce(ReduceOp, Var, Option<usize>),
    Softmax(Var),
    GatherRows(Var, Vec<usize>),
    PairwiseSqDist(Var),
    BceWithLogits(Var, Vec<f64>),
    GradReverse(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Recorded computation plus the parameter registry.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: Vec<(String, Var)>,
}

/// Result of one backward pass: gradients of every registered parameter and
/// of every gradient-requiring leaf.
#[derive(Debug, Clone)]
pub struct Gradients {
    params: BTreeMap<String, Tensor>,
    leaves: BTreeMap<usize, Tensor>,
}

impl Gradients {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    /// Gradient with respect to a leaf, or `None` if the leaf does not
    /// require gradients.
    pub fn wrt(&self, var: Var) -> Option<&Tensor> {
        self.leaves.get(&var.0)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn into_params(self) -> BTreeMap<String, Tensor> {
        self.params
    }
}

fn out_dims(shape: &[usize], axis: usize) -> Vec<usize> {
    let mut out = shape.to_vec();
    out.remove(axis);
    out
}

/// `(outer, extent, inner)` strides for reducing along `axis`.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

struct ConvGeom {
    batch: usize,
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    stride: usize,
    pad: usize,
}

impl ConvGeom {
    fn cols(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    fn out_hw(&self) -> usize {
        self.oh * self.ow
    }

    fn im2col(&self, x: &[f64], cols: &mut [f64]) {
        let hw = self.out_hw();
        for c in 0..self.c_in {
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = ((c * self.kh + ki) * self.kw + kj) * hw;
                    for oy in 0..self.oh {
                        let iy = (oy * self.stride + ki) as isize - self.pad as isize;
                        for ox in 0..self.ow {
                            let ix = (ox * self.stride + kj) as isize - self.pad as isize;
                            cols[row + oy * self.ow + ox] = if iy >= 0
                                && (iy as usize) < self.h
                                && ix >= 0
                                && (ix as usize) < self.w
                            {
                                x[(c * self.h + iy as usize) * self.w + ix as usize]
                            } else {
                                0.0
                            };
                        }
                    }
                }
            }
        }
    }

    fn col2im_add(&self, cols: &[f64], dx: &mut [f64]) {
        let hw = self.out_hw();
        for c in 0..self.c_in {
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = ((c * self.kh + ki) * self.kw + kj) * hw;
                    for oy in 0..self.oh {
                        let iy = (oy * self.stride + ki) as isize - self.pad as isize;
                        if iy < 0 || iy as usize >= self.h {
                            continue;
                        }
                        for ox in 0..self.ow {
                            let ix = (ox * self.stride + kj) as isize - self.pad as isize;
                            if ix < 0 || ix as usize >= self.w {
                                continue;
                            }
                            dx[(c * self.h + iy as usize) * self.w + ix as usize] +=
                                cols[row + oy * self.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Sign of every input element of every `relu` and `abs` node, in tape
    /// order. Two evaluations with equal signatures lie in the same smooth
    /// piece of the recorded function.
    pub fn kink_signature(&self) -> Vec<bool> {
        self.nodes
            .iter()
            .filter_map(|n| match n.op {
                Op::Unary(UnaryOp::Relu | UnaryOp::Abs, a) => Some(a),
                _ => None,
            })
            .flat_map(|a| self.nodes[a.0].value.data().iter().map(|&x| x > 0.0))
            .collect()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Leaf that gradients flow into when `requires_grad` is set.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.constant(Tensor::scalar(value))
    }

    /// Registers a named trainable leaf.
    pub fn param(&mut self, name: impl Into<String>, value: Tensor) -> Var {
        let v = self.leaf(value, true);
        self.params.push((name.into(), v));
        v
    }

    pub fn params(&self) -> &[(String, Var)] {
        &self.params
    }

    /// A constant copy of `v`'s current value; gradients stop here.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    // ---- elementwise -------------------------------------------------

    pub fn binary(&mut self, op: BinaryOp, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let shape = if av.shape() == bv.shape() || bv.numel() == 1 {
            av.shape().to_vec()
        } else if av.numel() == 1 {
            bv.shape().to_vec()
        } else {
            return Err(Error::ShapeMismatch {
                op: "elementwise",
                lhs: av.shape().to_vec(),
                rhs: bv.shape().to_vec(),
            });
        };
        let n: usize = shape.iter().product();
        let ad = av.data();
        let bd = bv.data();
        let a_at = |i: usize| if ad.len() == 1 { ad[0] } else { ad[i] };
        let b_at = |i: usize| if bd.len() == 1 { bd[0] } else { bd[i] };
        if op == BinaryOp::Div {
            if let Some(i) = (0..bd.len()).find(|&i| bd[i] == 0.0) {
                return Err(Error::Domain {
                    op: "div",
                    reason: format!("division by zero at element {i}"),
                });
            }
        }
        let data: Vec<f64> = (0..n)
            .map(|i| {
                let (x, y) = (a_at(i), b_at(i));
                match op {
                    BinaryOp::Add => x + y,
                    BinaryOp::Sub => x - y,
                    BinaryOp::Mul => x * y,
                    BinaryOp::Div => x / y,
                }
            })
            .collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(shape, data)?, Op::Binary(op, a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Div, a, b)
    }

    pub fn unary(&mut self, op: UnaryOp, a: Var) -> Result<Var> {
        let av = self.value(a);
        let check = |name: &'static str, bad: fn(f64) -> bool, what: &str| -> Result<()> {
            match av.data().iter().position(|&x| bad(x)) {
                Some(i) => Err(Error::Domain {
                    op: name,
                    reason: format!("{what} at element {i} ({})", av.data()[i]),
                }),
                None => Ok(()),
            }
        };
        match op {
            UnaryOp::Log => check("log", |x| x <= 0.0, "non-positive input")?,
            UnaryOp::Sqrt => check("sqrt", |x| x < 0.0, "negative input")?,
            _ => {}
        }
        let f: fn(f64) -> f64 = match op {
            UnaryOp::Abs => f64::abs,
            UnaryOp::Sqrt => f64::sqrt,
            UnaryOp::Relu => |x| if x > 0.0 { x } else { 0.0 },
            UnaryOp::Sigmoid => sigmoid,
            UnaryOp::Exp => f64::exp,
            UnaryOp::Log => f64::ln,
            UnaryOp::Neg => |x| -x,
        };
        let data = av.data().iter().map(|&x| f(x)).collect();
        let value = Tensor::new(av.shape().to_vec(), data)?;
        if op == UnaryOp::Exp && !value.is_finite() {
            return Err(Error::Domain {
                op: "exp",
                reason: "overflow".into(),
            });
        }
        let rg = self.rg(a);
        Ok(self.push(value, Op::Unary(op, a), rg))
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryOp::Abs, a)
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryOp::Sqrt, a)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryOp::Relu, a)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryOp::Sigmoid, a)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryOp::Exp, a)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryOp::Log, a)
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryOp::Neg, a)
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.mul(a, a)
    }

    /// Multiplication by a constant factor.
    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let av = self.value(a);
        let value = Tensor::new(
            av.shape().to_vec(),
            av.data().iter().map(|x| x * factor).collect(),
        )
        .expect("shape preserved");
        let rg = self.rg(a);
        self.push(value, Op::Scale(a, factor), rg)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let s = self.scalar(c);
        self.add(a, s)
    }

    // ---- linear algebra ----------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (sa, sb) = (av.shape(), bv.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        matmul_into(av.data(), bv.data(), &mut out, m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), rg))
    }

    /// Batched product `[B×m×k] · [B×k×n] → [B×m×n]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (sa, sb) = (av.shape(), bv.shape());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(Error::ShapeMismatch {
                op: "bmm",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (bs, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = vec![0.0; bs * m * n];
        for i in 0..bs {
            matmul_into(
                &av.data()[i * m * k..(i + 1) * m * k],
                &bv.data()[i * k * n..(i + 1) * k * n],
                &mut out[i * m * n..(i + 1) * m * n],
                m,
                k,
                n,
            );
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(vec![bs, m, n], out)?, Op::BatchMatMul(a, b), rg))
    }

    /// Swaps the last two axes of a rank-2 or rank-3 tensor.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        let s = av.shape();
        let (batch, r, c) = match s.len() {
            2 => (1, s[0], s[1]),
            3 => (s[0], s[1], s[2]),
            _ => {
                return Err(Error::InvalidShape {
                    shape: s.to_vec(),
                    reason: "transpose needs rank 2 or 3".into(),
                })
            }
        };
        let out = transpose_data(av.data(), batch, r, c);
        let mut shape = s.to_vec();
        let rank = shape.len();
        shape.swap(rank - 2, rank - 1);
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(shape, out)?, Op::Transpose(a), rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshaped(shape.to_vec())?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::Reshape(a), rg))
    }

    /// 2-D cross-correlation. `input` is `[C×H×W]` or `[N×C×H×W]`, `kernel`
    /// is `[C_out×C×kh×kw]`; the output has the matching rank.
    pub fn conv2d(&mut self, input: Var, kernel: Var, stride: usize, pad: usize) -> Result<Var> {
        let geom = self.conv_geom(input, kernel, stride, pad)?;
        let xv = self.value(input).data();
        let kv = self.value(kernel).data();
        let (ncols, hw) = (geom.cols(), geom.out_hw());
        let in_sz = geom.c_in * geom.h * geom.w;
        let out_sz = geom.c_out * hw;
        let mut cols = vec![0.0; ncols * hw];
        let mut out = vec![0.0; geom.batch * out_sz];
        for b in 0..geom.batch {
            geom.im2col(&xv[b * in_sz..(b + 1) * in_sz], &mut cols);
            matmul_into(
                kv,
                &cols,
                &mut out[b * out_sz..(b + 1) * out_sz],
                geom.c_out,
                ncols,
                hw,
            );
        }
        let shape = if self.value(input).rank() == 3 {
            vec![geom.c_out, geom.oh, geom.ow]
        } else {
            vec![geom.batch, geom.c_out, geom.oh, geom.ow]
        };
        let rg = self.rg(input) || self.rg(kernel);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::Conv2d {
                input,
                kernel,
                stride,
                pad,
            },
            rg,
        ))
    }

    fn conv_geom(&self, input: Var, kernel: Var, stride: usize, pad: usize) -> Result<ConvGeom> {
        let s = self.value(input).shape();
        let ks = self.value(kernel).shape();
        let (batch, c_in, h, w) = match s.len() {
            3 => (1, s[0], s[1], s[2]),
            4 => (s[0], s[1], s[2], s[3]),
            _ => {
                return Err(Error::InvalidShape {
                    shape: s.to_vec(),
                    reason: "conv2d input must be [C,H,W] or [N,C,H,W]".into(),
                })
            }
        };
        if ks.len() != 4 || ks[1] != c_in {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                lhs: s.to_vec(),
                rhs: ks.to_vec(),
            });
        }
        if stride == 0 {
            return Err(Error::InvalidArgument("conv2d stride must be positive".into()));
        }
        let (kh, kw) = (ks[2], ks[3]);
        if h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(Error::InvalidShape {
                shape: s.to_vec(),
                reason: format!("input smaller than {kh}x{kw} kernel"),
            });
        }
        Ok(ConvGeom {
            batch,
            c_in,
            h,
            w,
            c_out: ks[0],
            kh,
            kw,
            oh: (h + 2 * pad - kh) / stride + 1,
            ow: (w + 2 * pad - kw) / stride + 1,
            stride,
            pad,
        })
    }

    /// Adds the vector `bias` along `axis` of `input` (per-channel or
    /// per-feature bias).
    pub fn add_bias(&mut self, input: Var, bias: Var, axis: usize) -> Result<Var> {
        let (xv, bv) = (self.value(input), self.value(bias));
        let s = xv.shape();
        if axis >= s.len() {
            return Err(Error::InvalidAxis {
                axis,
                rank: s.len(),
            });
        }
        if bv.rank() != 1 || bv.numel() != s[axis] {
            return Err(Error::ShapeMismatch {
                op: "add_bias",
                lhs: s.to_vec(),
                rhs: bv.shape().to_vec(),
            });
        }
        let (_, extent, inner) = axis_split(s, axis);
        let bd = bv.data();
        let data = xv
            .data()
            .iter()
            .enumerate()
            .map(|(i, x)| x + bd[(i / inner) % extent])
            .collect();
        let value = Tensor::new(s.to_vec(), data)?;
        let rg = self.rg(input) || self.rg(bias);
        Ok(self.push(value, Op::AddBias { input, bias, axis }, rg))
    }

    // ---- reductions --------------------------------------------------

    pub fn reduce(&mut self, op: ReduceOp, a: Var, axis: Option<usize>) -> Result<Var> {
        let av = self.value(a);
        let value = match axis {
            None => {
                let s: f64 = av.data().iter().sum();
                let s = match op {
                    ReduceOp::Sum => s,
                    ReduceOp::Mean => s / av.numel() as f64,
                };
                Tensor::scalar(s)
            }
            Some(axis) => {
                if axis >= av.rank() {
                    return Err(Error::InvalidAxis {
                        axis,
                        rank: av.rank(),
                    });
                }
                let (outer, extent, inner) = axis_split(av.shape(), axis);
                let mut out = vec![0.0; outer * inner];
                let d = av.data();
                for o in 0..outer {
                    for e in 0..extent {
                        let src = &d[(o * extent + e) * inner..(o * extent + e + 1) * inner];
                        for (acc, x) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                            *acc += x;
                        }
                    }
                }
                if op == ReduceOp::Mean {
                    let f = 1.0 / extent as f64;
                    out.iter_mut().for_each(|x| *x *= f);
                }
                Tensor::new(out_dims(av.shape(), axis), out)?
            }
        };
        let rg = self.rg(a);
        Ok(self.push(value, Op::Reduce(op, a, axis), rg))
    }

    pub fn sum(&mut self, a: Var, axis: Option<usize>) -> Result<Var> {
        self.reduce(ReduceOp::Sum, a, axis)
    }

    pub fn mean(&mut self, a: Var, axis: Option<usize>) -> Result<Var> {
        self.reduce(ReduceOp::Mean, a, axis)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        let n = *av.shape().last().ok_or_else(|| Error::InvalidShape {
            shape: vec![],
            reason: "softmax of a scalar".into(),
        })?;
        let mut out = av.data().to_vec();
        for row in out.chunks_mut(n) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for x in row.iter_mut() {
                *x = (*x - max).exp();
                z += *x;
            }
            row.iter_mut().for_each(|x| *x /= z);
        }
        let value = Tensor::new(av.shape().to_vec(), out)?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::Softmax(a), rg))
    }

    /// Selects rows (entries along axis 0) by index; repeats are allowed.
    pub fn gather_rows(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let av = self.value(a);
        if av.rank() == 0 || indices.is_empty() {
            return Err(Error::InvalidArgument(
                "gather_rows needs a ranked tensor and at least one index".into(),
            ));
        }
        let rows = av.shape()[0];
        let width = av.numel() / rows;
        let mut out = Vec::with_capacity(indices.len() * width);
        for &i in indices {
            if i >= rows {
                return Err(Error::InvalidArgument(format!(
                    "row index {i} out of range for {rows} rows"
                )));
            }
            out.extend_from_slice(&av.data()[i * width..(i + 1) * width]);
        }
        let mut shape = av.shape().to_vec();
        shape[0] = indices.len();
        let value = Tensor::new(shape, out)?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::GatherRows(a, indices.to_vec()), rg))
    }

    /// `D[i,j] = ‖x_i − x_j‖²` for the rows of a `[n×d]` matrix.
    pub fn pairwise_sq_dists(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if xv.rank() != 2 {
            return Err(Error::InvalidShape {
                shape: xv.shape().to_vec(),
                reason: "pairwise distances need an [n, d] matrix".into(),
            });
        }
        let n = xv.shape()[0];
        let mut out = vec![0.0; n * n];
        for i in 0..n {
            for j in (i + 1)..n {
                let d: f64 = xv
                    .row(i)
                    .iter()
                    .zip(xv.row(j))
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                out[i * n + j] = d;
                out[j * n + i] = d;
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(vec![n, n], out)?, Op::PairwiseSqDist(x), rg))
    }

    /// Per-element numerically stable binary cross-entropy on logits:
    /// `max(z,0) − z·y + ln(1 + e^{−|z|})`.
    pub fn bce_with_logits(&mut self, logits: Var, labels: &[f64]) -> Result<Var> {
        let zv = self.value(logits);
        if zv.numel() != labels.len() {
            return Err(Error::ShapeMismatch {
                op: "bce_with_logits",
                lhs: zv.shape().to_vec(),
                rhs: vec![labels.len()],
            });
        }
        let data = zv
            .data()
            .iter()
            .zip(labels)
            .map(|(&z, &y)| bce_logit(z, y))
            .collect();
        let value = Tensor::new(zv.shape().to_vec(), data)?;
        let rg = self.rg(logits);
        Ok(self.push(value, Op::BceWithLogits(logits, labels.to_vec()), rg))
    }

    /// Identity forward; negates the gradient flowing back through it.
    pub fn grad_reverse(&mut self, a: Var) -> Var {
        let value = self.value(a).clone();
        let rg = self.rg(a);
        self.push(value, Op::GradReverse(a), rg)
    }

    // ---- backward ----------------------------------------------------

    /// Differentiates the scalar `loss` with respect to every registered
    /// parameter and gradient-requiring leaf. Parameters that the loss does
    /// not reach get an all-zero gradient. Forward values are left intact, so
    /// this may be called repeatedly with different losses.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        if self.rg(loss) {
            grads[loss.0] = Some(vec![1.0]);
        }
        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
        }
        let mut leaves = BTreeMap::new();
        for (id, node) in self.nodes.iter().enumerate().take(loss.0 + 1) {
            if matches!(node.op, Op::Leaf) && node.requires_grad {
                let data = grads[id]
                    .take()
                    .unwrap_or_else(|| vec![0.0; node.value.numel()]);
                leaves.insert(id, Tensor::new(node.value.shape().to_vec(), data)?);
            }
        }
        let mut params = BTreeMap::new();
        for (name, v) in &self.params {
            let g = leaves
                .get(&v.0)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(self.shape(*v)));
            params.insert(name.clone(), g);
        }
        Ok(Gradients { params, leaves })
    }

    fn backprop_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Binary(op, a, b) => {
                let ad = self.value(*a).data();
                let bd = self.value(*b).data();
                let a_at = |i: usize| if ad.len() == 1 { ad[0] } else { ad[i] };
                let b_at = |i: usize| if bd.len() == 1 { bd[0] } else { bd[i] };
                if self.rg(*a) {
                    let ga: Vec<f64> = match op {
                        BinaryOp::Add | BinaryOp::Sub => g.to_vec(),
                        BinaryOp::Mul => g.iter().enumerate().map(|(i, g)| g * b_at(i)).collect(),
                        BinaryOp::Div => g.iter().enumerate().map(|(i, g)| g / b_at(i)).collect(),
                    };
                    accumulate_broadcast(grads, *a, ad.len(), ga);
                }
                if self.rg(*b) {
                    let gb: Vec<f64> = match op {
                        BinaryOp::Add => g.to_vec(),
                        BinaryOp::Sub => g.iter().map(|g| -g).collect(),
                        BinaryOp::Mul => g.iter().enumerate().map(|(i, g)| g * a_at(i)).collect(),
                        BinaryOp::Div => g
                            .iter()
                            .enumerate()
                            .map(|(i, g)| -g * a_at(i) / (b_at(i) * b_at(i)))
                            .collect(),
                    };
                    accumulate_broadcast(grads, *b, bd.len(), gb);
                }
            }
            Op::Unary(op, a) => {
                if !self.rg(*a) {
                    return;
                }
                let x = self.value(*a).data();
                let y = out.data();
                let ga = (0..g.len())
                    .map(|i| {
                        let d = match op {
                            UnaryOp::Abs => {
                                if x[i] > 0.0 {
                                    1.0
                                } else if x[i] < 0.0 {
                                    -1.0
                                } else {
                                    0.0
                                }
                            }
                            // sqrt is not differentiable at 0; use 0 like abs
                            UnaryOp::Sqrt => {
                                if y[i] > 0.0 {
                                    0.5 / y[i]
                                } else {
                                    0.0
                                }
                            }
                            UnaryOp::Relu => {
                                if x[i] > 0.0 {
                                    1.0
                                } else {
                                    0.0
                                }
                            }
                            UnaryOp::Sigmoid => y[i] * (1.0 - y[i]),
                            UnaryOp::Exp => y[i],
                            UnaryOp::Log => 1.0 / x[i],
                            UnaryOp::Neg => -1.0,
                        };
                        g[i] * d
                    })
                    .collect();
                accumulate(grads, *a, ga);
            }
            Op::Scale(a, f) => {
                if self.rg(*a) {
                    accumulate(grads, *a, g.iter().map(|g| g * f).collect());
                }
            }
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                if self.rg(*a) {
                    let mut ga = vec![0.0; m * k];
                    matmul_a_bt_into(g, bv.data(), &mut ga, m, n, k);
                    accumulate(grads, *a, ga);
                }
                if self.rg(*b) {
                    let mut gb = vec![0.0; k * n];
                    matmul_at_b_into(av.data(), g, &mut gb, m, k, n);
                    accumulate(grads, *b, gb);
                }
            }
            Op::BatchMatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (bs, m, k, n) = (av.shape()[0], av.shape()[1], av.shape()[2], bv.shape()[2]);
                if self.rg(*a) {
                    let mut ga = vec![0.0; bs * m * k];
                    for i in 0..bs {
                        matmul_a_bt_into(
                            &g[i * m * n..(i + 1) * m * n],
                            &bv.data()[i * k * n..(i + 1) * k * n],
                            &mut ga[i * m * k..(i + 1) * m * k],
                            m,
                            n,
                            k,
                        );
                    }
                    accumulate(grads, *a, ga);
                }
                if self.rg(*b) {
                    let mut gb = vec![0.0; bs * k * n];
                    for i in 0..bs {
                        matmul_at_b_into(
                            &av.data()[i * m * k..(i + 1) * m * k],
                            &g[i * m * n..(i + 1) * m * n],
                            &mut gb[i * k * n..(i + 1) * k * n],
                            m,
                            k,
                            n,
                        );
                    }
                    accumulate(grads, *b, gb);
                }
            }
            Op::Transpose(a) => {
                if self.rg(*a) {
                    // out has shape [.., c, r]; transposing back restores [.., r, c]
                    let s = out.shape();
                    let rank = s.len();
                    let batch = if rank == 3 { s[0] } else { 1 };
                    let ga = transpose_data(g, batch, s[rank - 2], s[rank - 1]);
                    accumulate(grads, *a, ga);
                }
            }
            Op::Reshape(a) | Op::GradReverse(a) if !self.rg(*a) => {}
            Op::Reshape(a) => accumulate(grads, *a, g.to_vec()),
            Op::GradReverse(a) => accumulate(grads, *a, g.iter().map(|g| -g).collect()),
            Op::Conv2d {
                input,
                kernel,
                stride,
                pad,
            } => {
                let geom = self
                    .conv_geom(*input, *kernel, *stride, *pad)
                    .expect("validated in forward");
                let xv = self.value(*input).data();
                let kv = self.value(*kernel).data();
                let (ncols, hw) = (geom.cols(), geom.out_hw());
                let in_sz = geom.c_in * geom.h * geom.w;
                let out_sz = geom.c_out * hw;
                let mut cols = vec![0.0; ncols * hw];
                let mut gk = self.rg(*kernel).then(|| vec![0.0; kv.len()]);
                let mut gx = self.rg(*input).then(|| vec![0.0; xv.len()]);
                let mut dcols = vec![0.0; ncols * hw];
                for b in 0..geom.batch {
                    let gout = &g[b * out_sz..(b + 1) * out_sz];
                    if let Some(gk) = gk.as_mut() {
                        geom.im2col(&xv[b * in_sz..(b + 1) * in_sz], &mut cols);
                        matmul_a_bt_into(gout, &cols, gk, geom.c_out, hw, ncols);
                    }
                    if let Some(gx) = gx.as_mut() {
                        dcols.iter_mut().for_each(|x| *x = 0.0);
                        matmul_at_b_into(kv, gout, &mut dcols, geom.c_out, ncols, hw);
                        geom.col2im_add(&dcols, &mut gx[b * in_sz..(b + 1) * in_sz]);
                    }
                }
                if let Some(gk) = gk {
                    accumulate(grads, *kernel, gk);
                }
                if let Some(gx) = gx {
                    accumulate(grads, *input, gx);
                }
            }
            Op::AddBias { input, bias, axis } => {
                if self.rg(*input) {
                    accumulate(grads, *input, g.to_vec());
                }
                if self.rg(*bias) {
                    let (_, extent, inner) = axis_split(out.shape(), *axis);
                    let mut gb = vec![0.0; extent];
                    for (i, g) in g.iter().enumerate() {
                        gb[(i / inner) % extent] += g;
                    }
                    accumulate(grads, *bias, gb);
                }
            }
            Op::Reduce(op, a, axis) => {
                if !self.rg(*a) {
                    return;
                }
                let av = self.value(*a);
                let ga = match axis {
                    None => {
                        let f = match op {
                            ReduceOp::Sum => g[0],
                            ReduceOp::Mean => g[0] / av.numel() as f64,
                        };
                        vec![f; av.numel()]
                    }
                    Some(axis) => {
                        let (outer, extent, inner) = axis_split(av.shape(), *axis);
                        let f = match op {
                            ReduceOp::Sum => 1.0,
                            ReduceOp::Mean => 1.0 / extent as f64,
                        };
                        let mut ga = vec![0.0; av.numel()];
                        for o in 0..outer {
                            let src = &g[o * inner..(o + 1) * inner];
                            for e in 0..extent {
                                let dst = &mut ga[(o * extent + e) * inner..(o * extent + e + 1) * inner];
                                for (d, s) in dst.iter_mut().zip(src) {
                                    *d = s * f;
                                }
                            }
                        }
                        ga
                    }
                };
                accumulate(grads, *a, ga);
            }
            Op::Softmax(a) => {
                if !self.rg(*a) {
                    return;
                }
                let n = *out.shape().last().expect("ranked");
                let mut ga = vec![0.0; g.len()];
                for ((y, g), d) in out
                    .data()
                    .chunks(n)
                    .zip(g.chunks(n))
                    .zip(ga.chunks_mut(n))
                {
                    let s: f64 = y.iter().zip(g).map(|(y, g)| y * g).sum();
                    for i in 0..n {
                        d[i] = y[i] * (g[i] - s);
                    }
                }
                accumulate(grads, *a, ga);
            }
            Op::GatherRows(a, indices) => {
                if !self.rg(*a) {
                    return;
                }
                let av = self.value(*a);
                let width = av.numel() / av.shape()[0];
                let mut ga = vec![0.0; av.numel()];
                for (r, &i) in indices.iter().enumerate() {
                    for (d, s) in ga[i * width..(i + 1) * width]
                        .iter_mut()
                        .zip(&g[r * width..(r + 1) * width])
                    {
                        *d += s;
                    }
                }
                accumulate(grads, *a, ga);
            }
            Op::PairwiseSqDist(x) => {
                if !self.rg(*x) {
                    return;
                }
                let xv = self.value(*x);
                let (n, d) = (xv.shape()[0], xv.shape()[1]);
                let mut gx = vec![0.0; n * d];
                for i in 0..n {
                    for j in 0..n {
                        if i == j {
                            continue;
                        }
                        let w = 2.0 * (g[i * n + j] + g[j * n + i]);
                        if w == 0.0 {
                            continue;
                        }
                        let (xi, xj) = (xv.row(i), xv.row(j));
                        for k in 0..d {
                            gx[i * d + k] += w * (xi[k] - xj[k]);
                        }
                    }
                }
                accumulate(grads, *x, gx);
            }
            Op::BceWithLogits(z, labels) => {
                if self.rg(*z) {
                    let zv = self.value(*z).data();
                    let gz = (0..g.len())
                        .map(|i| g[i] * (sigmoid(zv[i]) - labels[i]))
                        .collect();
                    accumulate(grads, *z, gz);
                }
            }
        }
    }
}

pub(crate) fn bce_logit(z: f64, y: f64) -> f64 {
    z.max(0.0) - z * y + (-z.abs()).exp().ln_1p()
}

fn transpose_data(d: &[f64], batch: usize, r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; d.len()];
    for b in 0..batch {
        let off = b * r * c;
        for i in 0..r {
            for j in 0..c {
                out[off + j * r + i] = d[off + i * c + j];
            }
        }
    }
    out
}

fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, g: Vec<f64>) {
    match &mut grads[v.0] {
        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, g)| *a += g),
        slot @ None => *slot = Some(g),
    }
}

/// Like [`accumulate`], but folds a full-size gradient down to a broadcast
/// scalar operand.
fn accumulate_broadcast(grads: &mut [Option<Vec<f64>>], v: Var, numel: usize, g: Vec<f64>) {
    if numel == 1 && g.len() != 1 {
        accumulate(grads, v, vec![g.iter().sum()]);
    } else {
        accumulate(grads, v, g);
    }
}
