//! Define-by-run reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every op as it executes. Nodes are appended in
//! evaluation order, which is already a topological order, so
//! [`Tape::backward`] walks the node list once in reverse and accumulates
//! vector-Jacobian products. Build a fresh tape for every step.

use std::cell::RefCell;
use std::ops;
use std::rc::Rc;

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{self, eval, reduce_to, Op, Tensor};

struct Node {
    /// `None` marks a leaf.
    op: Option<Op>,
    inputs: Vec<usize>,
    value: Rc<Tensor>,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.value())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push_leaf(&self, value: Tensor, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            op: None,
            inputs: Vec::new(),
            value: Rc::new(value),
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push_leaf(value, false)
    }

    /// A leaf whose gradient will be reported by [`Tape::backward`].
    pub fn input(&self, value: Tensor) -> Var<'_> {
        self.push_leaf(value, true)
    }

    pub fn scalar(&self, v: f64) -> Var<'_> {
        self.constant(Tensor::scalar(v))
    }

    /// Puts every tensor of `store` on the tape as a trainable leaf.
    pub fn bind(&self, store: &ParamStore) -> Params<'_> {
        self.bind_with(store, true)
    }

    /// Like [`Tape::bind`] but as constants; no gradients are tracked.
    pub fn bind_frozen(&self, store: &ParamStore) -> Params<'_> {
        self.bind_with(store, false)
    }

    fn bind_with(&self, store: &ParamStore, requires_grad: bool) -> Params<'_> {
        let vars = store
            .iter()
            .map(|(k, v)| (k.to_string(), self.push_leaf(v.clone(), requires_grad)))
            .collect();
        Params { vars }
    }

    fn push(&self, op: Op, inputs: &[Var<'_>]) -> Result<Var<'_>> {
        let (values, requires_grad) = {
            let nodes = self.nodes.borrow();
            let values: Vec<Rc<Tensor>> =
                inputs.iter().map(|v| nodes[v.id].value.clone()).collect();
            let rg = inputs.iter().any(|v| nodes[v.id].requires_grad);
            (values, rg)
        };
        let refs: Vec<&Tensor> = values.iter().map(|v| v.as_ref()).collect();
        let value = eval(&op, &refs)?;
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            op: Some(op),
            inputs: inputs.iter().map(|v| v.id).collect(),
            value: Rc::new(value),
            requires_grad,
        });
        Ok(Var {
            tape: self,
            id: nodes.len() - 1,
        })
    }

    pub fn concat<'t>(&'t self, parts: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
        self.push(Op::Concat { axis }, parts)
    }

    /// Gradients of the single-element `loss` with respect to every node that
    /// depends on a trainable leaf.
    pub fn backward(&self, loss: Var<'_>) -> Result<GradMap> {
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                root.value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; nodes.len()];
        grads[loss.id] = Some(Tensor::ones(root.value.shape()));
        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            let Some(op) = &node.op else { continue };
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            let need: Vec<bool> = node.inputs.iter().map(|&i| nodes[i].requires_grad).collect();
            let ins: Vec<&Tensor> = node.inputs.iter().map(|&i| nodes[i].value.as_ref()).collect();
            let parts = vjp(op, &ins, &node.value, &g, &need)?;
            for (&i, part) in node.inputs.iter().zip(parts) {
                let Some(part) = part else { continue };
                match &mut grads[i] {
                    Some(acc) => {
                        for (a, p) in acc.data_mut().iter_mut().zip(part.data()) {
                            *a += p;
                        }
                    }
                    slot @ None => *slot = Some(part),
                }
            }
            grads[id] = Some(g);
        }
        for (id, g) in grads.iter_mut().enumerate() {
            if !nodes[id].requires_grad {
                *g = None;
            }
        }
        Ok(GradMap {
            grads,
            shapes: nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }
}

/// Vector-Jacobian products for each input of `op`.
fn vjp(
    op: &Op,
    ins: &[&Tensor],
    out: &Tensor,
    g: &Tensor,
    need: &[bool],
) -> Result<Vec<Option<Tensor>>> {
    let unary = |f: &dyn Fn(usize) -> f64| -> Vec<Option<Tensor>> {
        let mut t = g.clone();
        for (i, v) in t.data_mut().iter_mut().enumerate() {
            *v *= f(i);
        }
        vec![Some(t)]
    };
    let x = ins[0].data();
    let y = out.data();
    Ok(match op {
        Op::Matmul => {
            let a = ins[0];
            let b = ins[1];
            let da = if need[0] {
                Some(eval(&Op::Matmul, &[g, &eval(&Op::Transpose, &[b])?])?)
            } else {
                None
            };
            let db = if need[1] {
                Some(eval(&Op::Matmul, &[&eval(&Op::Transpose, &[a])?, g])?)
            } else {
                None
            };
            vec![da, db]
        }
        Op::Transpose => vec![Some(eval(&Op::Transpose, &[g])?)],
        Op::Add | Op::Sub | Op::Mul | Op::Div => {
            let (a, b) = (ins[0], ins[1]);
            let ga = match op {
                Op::Add | Op::Sub => g.clone(),
                Op::Mul => eval(&Op::Mul, &[g, b])?,
                _ => eval(&Op::Div, &[g, b])?,
            };
            let gb = match op {
                Op::Add => g.clone(),
                Op::Sub => g.map(|v| -v),
                Op::Mul => eval(&Op::Mul, &[g, a])?,
                _ => {
                    // -g * out / b
                    let t = eval(&Op::Mul, &[g, out])?;
                    eval(&Op::Div, &[&t, b])?.map(|v| -v)
                }
            };
            vec![
                need[0].then(|| reduce_to(&ga, a.shape())),
                need[1].then(|| reduce_to(&gb, b.shape())),
            ]
        }
        Op::Neg => vec![Some(g.map(|v| -v))],
        Op::Exp => unary(&|i| y[i]),
        Op::Log => unary(&|i| 1.0 / x[i]),
        Op::Tanh => unary(&|i| 1.0 - y[i] * y[i]),
        Op::Sigmoid => unary(&|i| y[i] * (1.0 - y[i])),
        Op::Relu => unary(&|i| if x[i] > 0.0 { 1.0 } else { 0.0 }),
        Op::Softplus => unary(&|i| tensor::sigmoid(x[i])),
        Op::Square => unary(&|i| 2.0 * x[i]),
        Op::Sqrt => unary(&|i| 0.5 / y[i]),
        Op::Clamp { lo, hi } => unary(&|i| if x[i] >= *lo && x[i] <= *hi { 1.0 } else { 0.0 }),
        Op::Sum { axis } | Op::Mean { axis } => {
            let shape = ins[0].shape();
            let count = match axis {
                None => ins[0].len(),
                Some(a) => shape[*a],
            } as f64;
            let scale = if matches!(op, Op::Mean { .. }) { 1.0 / count } else { 1.0 };
            let g = match axis {
                None => g.clone(),
                Some(a) => tensor::unsqueeze(g, *a),
            };
            let mut full = tensor::broadcast_to(&g, shape)?;
            if scale != 1.0 {
                full.data_mut().iter_mut().for_each(|v| *v *= scale);
            }
            vec![Some(full)]
        }
        Op::Concat { axis } => {
            let mut start = 0;
            let mut parts = Vec::with_capacity(ins.len());
            for (t, &n) in ins.iter().zip(need) {
                let w = t.shape()[*axis];
                parts.push(if n {
                    Some(eval(&Op::Slice { axis: *axis, start, end: start + w }, &[g])?)
                } else {
                    None
                });
                start += w;
            }
            parts
        }
        Op::Slice { axis, start, .. } => {
            vec![Some(tensor::unslice(g, ins[0].shape(), *axis, *start))]
        }
        Op::BroadcastTo { .. } => vec![Some(reduce_to(g, ins[0].shape()))],
    })
}

/// Gradients produced by [`Tape::backward`], indexed by node.
pub struct GradMap {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl GradMap {
    /// `None` when `v` does not depend on any trainable leaf.
    pub fn get(&self, v: Var<'_>) -> Option<&Tensor> {
        self.grads.get(v.id).and_then(Option::as_ref)
    }

    /// Gradient of `v`, zero-filled when the loss does not reach it.
    pub fn wrt(&self, v: Var<'_>) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[v.id]))
    }

    /// Parameter gradients keyed like the bound store.
    pub fn params(&self, p: &Params<'_>) -> ParamStore {
        let mut out = ParamStore::new();
        for (k, &v) in &p.vars {
            out.insert(k.clone(), self.wrt(v)).expect("names unique");
        }
        out
    }
}

/// A [`ParamStore`] placed on a tape.
pub struct Params<'t> {
    vars: IndexMap<String, Var<'t>>,
}

impl<'t> Params<'t> {
    pub fn get(&self, name: &str) -> Result<Var<'t>> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::contract(format!("parameter `{name}` not bound")))
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    /// Owned copy of the value.
    pub fn tensor(&self) -> Tensor {
        self.value().as_ref().clone()
    }

    pub fn item(&self) -> f64 {
        self.value().item()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    /// Same value, cut off from the graph.
    pub fn detach(&self) -> Var<'t> {
        self.tape.constant(self.tensor())
    }

    fn unary(self, op: Op) -> Var<'t> {
        self.tape.push(op, &[self]).expect("unary op on valid tensor")
    }

    fn binary(self, op: Op, rhs: Var<'t>) -> Result<Var<'t>> {
        self.tape.push(op, &[self, rhs])
    }

    pub fn matmul(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.binary(Op::Matmul, rhs)
    }

    pub fn transpose(self) -> Result<Var<'t>> {
        self.tape.push(Op::Transpose, &[self])
    }

    pub fn add(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.binary(Op::Add, rhs)
    }

    pub fn sub(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.binary(Op::Sub, rhs)
    }

    pub fn mul(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.binary(Op::Mul, rhs)
    }

    pub fn div(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.binary(Op::Div, rhs)
    }

    pub fn neg(self) -> Var<'t> {
        self.unary(Op::Neg)
    }

    pub fn exp(self) -> Var<'t> {
        self.unary(Op::Exp)
    }

    pub fn log(self) -> Result<Var<'t>> {
        self.tape.push(Op::Log, &[self])
    }

    pub fn tanh(self) -> Var<'t> {
        self.unary(Op::Tanh)
    }

    pub fn sigmoid(self) -> Var<'t> {
        self.unary(Op::Sigmoid)
    }

    pub fn relu(self) -> Var<'t> {
        self.unary(Op::Relu)
    }

    pub fn softplus(self) -> Var<'t> {
        self.unary(Op::Softplus)
    }

    pub fn square(self) -> Var<'t> {
        self.unary(Op::Square)
    }

    pub fn sqrt(self) -> Result<Var<'t>> {
        self.tape.push(Op::Sqrt, &[self])
    }

    pub fn clamp(self, lo: f64, hi: f64) -> Result<Var<'t>> {
        self.tape.push(Op::Clamp { lo, hi }, &[self])
    }

    pub fn sum(self) -> Var<'t> {
        self.unary(Op::Sum { axis: None })
    }

    pub fn sum_axis(self, axis: usize) -> Result<Var<'t>> {
        self.tape.push(Op::Sum { axis: Some(axis) }, &[self])
    }

    pub fn mean(self) -> Result<Var<'t>> {
        self.tape.push(Op::Mean { axis: None }, &[self])
    }

    pub fn mean_axis(self, axis: usize) -> Result<Var<'t>> {
        self.tape.push(Op::Mean { axis: Some(axis) }, &[self])
    }

    pub fn slice(self, axis: usize, start: usize, end: usize) -> Result<Var<'t>> {
        self.tape.push(Op::Slice { axis, start, end }, &[self])
    }

    pub fn broadcast_to(self, shape: &[usize]) -> Result<Var<'t>> {
        self.tape.push(Op::BroadcastTo { shape: shape.to_vec() }, &[self])
    }

    pub fn scale(self, c: f64) -> Var<'t> {
        let k = self.tape.scalar(c);
        self.binary(Op::Mul, k).expect("scalar broadcasts")
    }

    pub fn shift(self, c: f64) -> Var<'t> {
        let k = self.tape.scalar(c);
        self.binary(Op::Add, k).expect("scalar broadcasts")
    }
}

macro_rules! var_binop {
    ($trait:ident, $method:ident, $op:expr) => {
        impl<'t> ops::$trait for Var<'t> {
            type Output = Var<'t>;
            fn $method(self, rhs: Var<'t>) -> Var<'t> {
                self.binary($op, rhs)
                    .unwrap_or_else(|e| panic!("{e}"))
            }
        }
        impl<'t> ops::$trait<f64> for Var<'t> {
            type Output = Var<'t>;
            fn $method(self, rhs: f64) -> Var<'t> {
                let k = self.tape.scalar(rhs);
                self.binary($op, k).unwrap_or_else(|e| panic!("{e}"))
            }
        }
    };
}

var_binop!(Add, add, Op::Add);
var_binop!(Sub, sub, Op::Sub);
var_binop!(Mul, mul, Op::Mul);
var_binop!(Div, div, Op::Div);

impl<'t> ops::Neg for Var<'t> {
    type Output = Var<'t>;
    fn neg(self) -> Var<'t> {
        self.unary(Op::Neg)
    }
}

/// Largest relative disagreement between [`Tape::backward`] and central
/// differences `(f(θ+h) − f(θ−h)) / 2h`, over every scalar in `params`.
///
/// The denominator is `max(|analytic|, |numeric|, 1e-12)`.
pub fn fd_check<F>(f: F, params: &ParamStore, h: f64) -> Result<f64>
where
    F: for<'a> Fn(&'a Tape, &Params<'a>) -> Result<Var<'a>>,
{
    if !(h > 0.0) {
        return Err(Error::contract("fd_check needs h > 0"));
    }
    let analytic = {
        let tape = Tape::new();
        let p = tape.bind(params);
        let loss = f(&tape, &p)?;
        tape.backward(loss)?.params(&p)
    };
    let value_at = |store: &ParamStore| -> Result<f64> {
        let tape = Tape::new();
        let p = tape.bind_frozen(store);
        Ok(f(&tape, &p)?.item())
    };
    let mut worst: f64 = 0.0;
    let mut probe = params.clone();
    for (name, t) in params.iter() {
        let ga = analytic.get(name)?;
        for i in 0..t.len() {
            let orig = t.data()[i];
            probe.get_mut(name).unwrap().data_mut()[i] = orig + h;
            let up = value_at(&probe)?;
            probe.get_mut(name).unwrap().data_mut()[i] = orig - h;
            let down = value_at(&probe)?;
            probe.get_mut(name).unwrap().data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = ga.data()[i];
            let denom = a.abs().max(numeric.abs()).max(1e-12);
            worst = worst.max((a - numeric).abs() / denom);
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn power_and_product_rules() {
        let tape = Tape::new();
        let x = tape.input(Tensor::scalar(3.0));
        let g = tape.backward(x.square()).unwrap();
        assert_eq!(g.wrt(x).item(), 6.0);

        let tape = Tape::new();
        let x = tape.input(Tensor::scalar(2.0));
        let y = tape.input(Tensor::scalar(5.0));
        let g = tape.backward(x * y).unwrap();
        assert_eq!((g.wrt(x).item(), g.wrt(y).item()), (5.0, 2.0));
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let tape = Tape::new();
        let x = tape.input(Tensor::zeros(&[2]));
        assert!(matches!(tape.backward(x.exp()), Err(Error::Contract(_))));
    }

    #[test]
    fn relu_gradient_at_zero() {
        let tape = Tape::new();
        let x = tape.input(Tensor::from_vec(vec![0.0, -0.0, 1.0]));
        let g = tape.backward(x.relu().sum()).unwrap();
        assert_eq!(g.wrt(x).data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn paths_accumulate() {
        // f = x*x + 3x → f' = 2x + 3
        let tape = Tape::new();
        let x = tape.input(Tensor::scalar(1.5));
        let f = x * x + x * 3.0;
        assert_eq!(tape.backward(f).unwrap().wrt(x).item(), 6.0);
    }

    #[test]
    fn constants_get_no_gradient() {
        let tape = Tape::new();
        let c = tape.constant(Tensor::scalar(2.0));
        let x = tape.input(Tensor::scalar(1.0));
        let g = tape.backward(c * x).unwrap();
        assert!(g.get(c).is_none());
        assert_eq!(g.wrt(c).item(), 0.0);
    }

    #[test]
    fn backward_is_linear() {
        let mut rng = crate::rng::Rng::seed_from(11);
        let x0 = rng.gaussian_tensor(&[3, 4]);
        fn f(x: Var<'_>) -> Var<'_> {
            x.tanh().square().sum()
        }
        fn g(x: Var<'_>) -> Var<'_> {
            x.sigmoid().mul(x).unwrap().sum()
        }
        fn combo(x: Var<'_>) -> Var<'_> {
            f(x) * 0.7 + g(x) * -2.5
        }
        let grad_of = |h: fn(Var<'_>) -> Var<'_>| {
            let tape = Tape::new();
            let x = tape.input(x0.clone());
            let l = h(x);
            tape.backward(l).unwrap().wrt(x)
        };
        let (a, b) = (0.7, -2.5);
        let combo = grad_of(combo);
        let gf = grad_of(f);
        let gg = grad_of(g);
        for i in 0..combo.len() {
            let lin = a * gf.data()[i] + b * gg.data()[i];
            assert!((combo.data()[i] - lin).abs() <= 1e-14 * (1.0 + lin.abs()));
        }
    }

    #[test]
    fn fd_check_quadratic() {
        let mut s = ParamStore::new();
        s.insert("x", Tensor::scalar(3.0)).unwrap();
        let err = fd_check(|_, p| Ok(p.get("x")?.square()), &s, 1e-5).unwrap();
        assert!(err < 1e-9, "{err}");
        let mut s = ParamStore::new();
        s.insert("x", Tensor::scalar(0.0)).unwrap();
        let err = fd_check(|_, p| Ok(p.get("x")?.softplus()), &s, 1e-5).unwrap();
        assert!(err < 1e-8, "{err}");
    }
}
