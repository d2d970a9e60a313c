//! Dense row-major `f64` tensors and the forward definition of every
//! primitive op.
//!
//! Broadcasting aligns shapes from the trailing dimension; an extent of 1
//! (or a missing leading dimension) stretches to match the other operand.

use std::fmt;

use crate::error::{Error, Result};
use crate::par::{self, Exec};

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}{:?}", self.shape, self.data)
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(
                "tensor",
                format!("shape {shape:?} needs {n} values, got {}", data.len()),
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![],
            data: vec![v],
        }
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn full(shape: &[usize], v: f64) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![v; shape.iter().product()],
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// `n × classes` indicator matrix.
    pub fn one_hot(labels: &[usize], classes: usize) -> Result<Self> {
        let mut t = Self::zeros(&[labels.len(), classes]);
        for (i, &l) in labels.iter().enumerate() {
            if l >= classes {
                return Err(Error::contract(format!(
                    "label {l} out of range for {classes} classes"
                )));
            }
            t.data[i * classes + l] = 1.0;
        }
        Ok(t)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    /// Product of all extents after the first.
    pub fn cols(&self) -> usize {
        self.shape.iter().skip(1).product()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::shape(
                "reshape",
                format!("{:?} -> {shape:?}", self.shape),
            ));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn sum_all(&self) -> f64 {
        self.data.iter().sum()
    }

    /// Rows `start..end` of a tensor whose first axis is the batch.
    pub fn select_rows(&self, idx: &[usize]) -> Tensor {
        let c = self.cols();
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        let mut shape = self.shape.clone();
        if shape.is_empty() {
            shape.push(idx.len());
        } else {
            shape[0] = idx.len();
        }
        Tensor { shape, data }
    }

    /// Stacks equally-shaped rows along a new leading axis.
    pub fn stack_rows(rows: &[Vec<f64>], cols: usize) -> Result<Tensor> {
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(Error::shape("stack_rows", format!("row of {} values, expected {cols}", r.len())));
            }
            data.extend_from_slice(r);
        }
        Tensor::new(vec![rows.len(), cols], data)
    }
}

/// Primitive operations recorded on the tape.
#[derive(Clone, Debug, PartialEq)]
pub enum Op {
    Matmul,
    Transpose,
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    Exp,
    Log,
    Tanh,
    Sigmoid,
    Relu,
    Softplus,
    Square,
    Sqrt,
    Clamp { lo: f64, hi: f64 },
    Sum { axis: Option<usize> },
    Mean { axis: Option<usize> },
    Concat { axis: usize },
    Slice { axis: usize, start: usize, end: usize },
    BroadcastTo { shape: Vec<usize> },
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Matmul => "matmul",
            Op::Transpose => "transpose",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Div => "div",
            Op::Neg => "neg",
            Op::Exp => "exp",
            Op::Log => "log",
            Op::Tanh => "tanh",
            Op::Sigmoid => "sigmoid",
            Op::Relu => "relu",
            Op::Softplus => "softplus",
            Op::Square => "square",
            Op::Sqrt => "sqrt",
            Op::Clamp { .. } => "clamp",
            Op::Sum { .. } => "sum",
            Op::Mean { .. } => "mean",
            Op::Concat { .. } => "concat",
            Op::Slice { .. } => "slice",
            Op::BroadcastTo { .. } => "broadcast-to",
        }
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

/// `ln(1 + e^x)` without overflow; equals `x + softplus(-x)` for large `x`.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn relu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        0.0
    }
}

/// `ln Σ e^{x_i}`, max-shifted.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Evaluates `op` on `inputs`.
pub fn eval(op: &Op, inputs: &[&Tensor]) -> Result<Tensor> {
    let arity = match op {
        Op::Matmul | Op::Add | Op::Sub | Op::Mul | Op::Div => Some(2),
        Op::Concat { .. } => None,
        _ => Some(1),
    };
    if let Some(k) = arity {
        if inputs.len() != k {
            return Err(Error::contract(format!(
                "{} takes {k} inputs, got {}",
                op.name(),
                inputs.len()
            )));
        }
    }
    match op {
        Op::Matmul => matmul(inputs[0], inputs[1]),
        Op::Transpose => transpose(inputs[0]),
        Op::Add => zip_broadcast("add", inputs[0], inputs[1], |a, b| a + b),
        Op::Sub => zip_broadcast("sub", inputs[0], inputs[1], |a, b| a - b),
        Op::Mul => zip_broadcast("mul", inputs[0], inputs[1], |a, b| a * b),
        Op::Div => {
            if inputs[1].data.iter().any(|&b| b == 0.0) {
                return Err(Error::domain("div", "division by zero"));
            }
            zip_broadcast("div", inputs[0], inputs[1], |a, b| a / b)
        }
        Op::Neg => Ok(inputs[0].map(|x| -x)),
        Op::Exp => Ok(inputs[0].map(f64::exp)),
        Op::Log => {
            if let Some(x) = inputs[0].data.iter().find(|&&x| !(x > 0.0)) {
                return Err(Error::domain("log", format!("non-positive argument {x}")));
            }
            Ok(inputs[0].map(f64::ln))
        }
        Op::Tanh => Ok(inputs[0].map(f64::tanh)),
        Op::Sigmoid => Ok(inputs[0].map(sigmoid)),
        Op::Relu => Ok(inputs[0].map(relu)),
        Op::Softplus => Ok(inputs[0].map(softplus)),
        Op::Square => Ok(inputs[0].map(|x| x * x)),
        Op::Sqrt => {
            if let Some(x) = inputs[0].data.iter().find(|&&x| x < 0.0) {
                return Err(Error::domain("sqrt", format!("negative argument {x}")));
            }
            Ok(inputs[0].map(f64::sqrt))
        }
        Op::Clamp { lo, hi } => {
            if lo > hi {
                return Err(Error::contract(format!("clamp bounds {lo} > {hi}")));
            }
            Ok(inputs[0].map(|x| x.clamp(*lo, *hi)))
        }
        Op::Sum { axis } => sum(inputs[0], *axis),
        Op::Mean { axis } => mean(inputs[0], *axis),
        Op::Concat { axis } => concat(inputs, *axis),
        Op::Slice { axis, start, end } => slice(inputs[0], *axis, *start, *end),
        Op::BroadcastTo { shape } => broadcast_to(inputs[0], shape),
    }
}

pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let n = a.len().max(b.len());
    let mut out = vec![0; n];
    for i in 0..n {
        let da = if i < n - a.len() { 1 } else { a[i - (n - a.len())] };
        let db = if i < n - b.len() { 1 } else { b[i - (n - b.len())] };
        out[i] = if da == db {
            da
        } else if da == 1 {
            db
        } else if db == 1 {
            da
        } else {
            return None;
        };
    }
    Some(out)
}

/// Strides of a `src`-shaped tensor viewed with shape `out`; stretched axes
/// get stride 0.
fn broadcast_strides(src: &[usize], out: &[usize]) -> Vec<usize> {
    let lead = out.len() - src.len();
    let mut strides = vec![0; out.len()];
    let mut acc = 1;
    for i in (0..src.len()).rev() {
        if src[i] != 1 {
            strides[lead + i] = acc;
        }
        acc *= src[i];
    }
    strides
}

/// Source offset for every element of `out`, in row-major order.
fn source_offsets(out: &[usize], strides: &[usize]) -> Vec<usize> {
    let n: usize = out.iter().product();
    let mut offsets = Vec::with_capacity(n);
    if n == 0 {
        return offsets;
    }
    let mut idx = vec![0usize; out.len()];
    let mut off = 0usize;
    for _ in 0..n {
        offsets.push(off);
        for d in (0..out.len()).rev() {
            idx[d] += 1;
            off += strides[d];
            if idx[d] < out[d] {
                break;
            }
            off -= strides[d] * idx[d];
            idx[d] = 0;
        }
    }
    offsets
}

fn zip_broadcast(
    op: &'static str,
    a: &Tensor,
    b: &Tensor,
    f: impl Fn(f64, f64) -> f64,
) -> Result<Tensor> {
    if a.shape == b.shape {
        let data = a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect();
        return Ok(Tensor {
            shape: a.shape.clone(),
            data,
        });
    }
    let shape = broadcast_shape(&a.shape, &b.shape)
        .ok_or_else(|| Error::shape(op, format!("{:?} vs {:?}", a.shape, b.shape)))?;
    if b.data.len() == 1 && shape == a.shape {
        let y = b.data[0];
        return Ok(a.map(|x| f(x, y)));
    }
    if a.data.len() == 1 && shape == b.shape {
        let x = a.data[0];
        return Ok(b.map(|y| f(x, y)));
    }
    let oa = source_offsets(&shape, &broadcast_strides(&a.shape, &shape));
    let ob = source_offsets(&shape, &broadcast_strides(&b.shape, &shape));
    let data = oa
        .iter()
        .zip(&ob)
        .map(|(&i, &j)| f(a.data[i], b.data[j]))
        .collect();
    Ok(Tensor { shape, data })
}

pub fn broadcast_to(x: &Tensor, shape: &[usize]) -> Result<Tensor> {
    if x.shape == shape {
        return Ok(x.clone());
    }
    match broadcast_shape(&x.shape, shape) {
        Some(s) if s == shape && x.shape.len() <= shape.len() => {}
        _ => {
            return Err(Error::shape(
                "broadcast-to",
                format!("{:?} cannot stretch to {shape:?}", x.shape),
            ))
        }
    }
    let offs = source_offsets(shape, &broadcast_strides(&x.shape, shape));
    Ok(Tensor {
        shape: shape.to_vec(),
        data: offs.iter().map(|&i| x.data[i]).collect(),
    })
}

/// Sums `g` down to `shape`, undoing a broadcast.
pub fn reduce_to(g: &Tensor, shape: &[usize]) -> Tensor {
    if g.shape == shape {
        return g.clone();
    }
    let n: usize = shape.iter().product();
    let mut out = vec![0.0; n];
    if n == 1 {
        out[0] = g.data.iter().sum();
    } else {
        let offs = source_offsets(&g.shape, &broadcast_strides(shape, &g.shape));
        for (&o, &v) in offs.iter().zip(&g.data) {
            out[o] += v;
        }
    }
    Tensor {
        shape: shape.to_vec(),
        data: out,
    }
}

fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let work = a.shape.first().copied().unwrap_or(0) * b.shape.iter().product::<usize>();
    let exec = if work >= par::MATMUL_PAR_THRESHOLD {
        Exec::default()
    } else {
        Exec::Sequential
    };
    matmul_with(exec, a, b)
}

/// Row-blocked `a·b` with an explicit execution mode. Both modes produce
/// identical bits.
pub fn matmul_with(exec: Exec, a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.ndim() != 2 || b.ndim() != 2 || a.shape[1] != b.shape[0] {
        return Err(Error::shape(
            "matmul",
            format!("{:?} x {:?}", a.shape, b.shape),
        ));
    }
    let (n, k, m) = (a.shape[0], a.shape[1], b.shape[1]);
    let mut out = vec![0.0; n * m];
    par::rows_mut(exec, &mut out, m, |i, row| {
        let ai = &a.data[i * k..(i + 1) * k];
        for (p, &x) in ai.iter().enumerate() {
            let bp = &b.data[p * m..(p + 1) * m];
            for (o, &y) in row.iter_mut().zip(bp) {
                *o += x * y;
            }
        }
    });
    Ok(Tensor {
        shape: vec![n, m],
        data: out,
    })
}

fn transpose(a: &Tensor) -> Result<Tensor> {
    if a.ndim() != 2 {
        return Err(Error::shape("transpose", format!("{:?} is not 2-D", a.shape)));
    }
    let (r, c) = (a.shape[0], a.shape[1]);
    let mut data = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            data[j * r + i] = a.data[i * c + j];
        }
    }
    Ok(Tensor {
        shape: vec![c, r],
        data,
    })
}

/// `(outer, extent, inner)` split of a shape around `axis`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn check_axis(op: &'static str, t: &Tensor, axis: usize) -> Result<()> {
    if axis >= t.ndim() {
        return Err(Error::shape(op, format!("axis {axis} out of range for {:?}", t.shape)));
    }
    Ok(())
}

fn sum(x: &Tensor, axis: Option<usize>) -> Result<Tensor> {
    let Some(axis) = axis else {
        return Ok(Tensor::scalar(x.data.iter().sum()));
    };
    check_axis("sum", x, axis)?;
    let (outer, n, inner) = split_axis(&x.shape, axis);
    let mut data = vec![0.0; outer * inner];
    for o in 0..outer {
        for j in 0..n {
            let src = &x.data[(o * n + j) * inner..(o * n + j + 1) * inner];
            for (d, &s) in data[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                *d += s;
            }
        }
    }
    let mut shape = x.shape.clone();
    shape.remove(axis);
    Ok(Tensor { shape, data })
}

fn mean(x: &Tensor, axis: Option<usize>) -> Result<Tensor> {
    let count = match axis {
        None => x.len(),
        Some(a) => {
            check_axis("mean", x, a)?;
            x.shape[a]
        }
    };
    if count == 0 {
        return Err(Error::contract("mean over zero elements"));
    }
    let s = sum(x, axis)?;
    let c = count as f64;
    Ok(s.map(|v| v / c))
}

fn concat(inputs: &[&Tensor], axis: usize) -> Result<Tensor> {
    let first = inputs
        .first()
        .ok_or_else(|| Error::contract("concat of zero tensors"))?;
    check_axis("concat", first, axis)?;
    for t in inputs {
        let ok = t.ndim() == first.ndim()
            && t
                .shape
                .iter()
                .zip(&first.shape)
                .enumerate()
                .all(|(d, (a, b))| d == axis || a == b);
        if !ok {
            return Err(Error::shape(
                "concat",
                format!("{:?} vs {:?} along axis {axis}", first.shape, t.shape),
            ));
        }
    }
    let (outer, _, inner) = split_axis(&first.shape, axis);
    let total: usize = inputs.iter().map(|t| t.shape[axis]).sum();
    let mut data = Vec::with_capacity(outer * total * inner);
    for o in 0..outer {
        for t in inputs {
            let block = t.shape[axis] * inner;
            data.extend_from_slice(&t.data[o * block..(o + 1) * block]);
        }
    }
    let mut shape = first.shape.clone();
    shape[axis] = total;
    Ok(Tensor { shape, data })
}

fn slice(x: &Tensor, axis: usize, start: usize, end: usize) -> Result<Tensor> {
    check_axis("slice", x, axis)?;
    if start > end || end > x.shape[axis] {
        return Err(Error::shape(
            "slice",
            format!("range {start}..{end} on axis {axis} of {:?}", x.shape),
        ));
    }
    let (outer, n, inner) = split_axis(&x.shape, axis);
    let mut data = Vec::with_capacity(outer * (end - start) * inner);
    for o in 0..outer {
        data.extend_from_slice(&x.data[(o * n + start) * inner..(o * n + end) * inner]);
    }
    let mut shape = x.shape.clone();
    shape[axis] = end - start;
    Ok(Tensor { shape, data })
}

/// Inverse of [`slice`] for gradients: places `g` into zeros of `shape`.
pub(crate) fn unslice(g: &Tensor, shape: &[usize], axis: usize, start: usize) -> Tensor {
    let (outer, n, inner) = split_axis(shape, axis);
    let w = g.shape[axis];
    let mut data = vec![0.0; outer * n * inner];
    for o in 0..outer {
        data[(o * n + start) * inner..(o * n + start + w) * inner]
            .copy_from_slice(&g.data[o * w * inner..(o + 1) * w * inner]);
    }
    Tensor {
        shape: shape.to_vec(),
        data,
    }
}

/// Re-inserts a reduced axis of extent 1 so a gradient can broadcast back.
pub(crate) fn unsqueeze(g: &Tensor, axis: usize) -> Tensor {
    let mut shape = g.shape.clone();
    shape.insert(axis, 1);
    Tensor {
        shape,
        data: g.data.clone(),
    }
}
