//! RealNVP affine-coupling flow. "Forward" maps data to latent and is the
//! direction scored by [`RealNvp::log_prob`]; sampling runs the inverse.

use std::f64::consts::PI;

use crate::autodiff::{Params, Tape, Var};
use crate::diffusion::mlp_dims;
use crate::error::{Error, Result};
use crate::nn::{Activation, Adam, Mlp, OutputActivation};
use crate::params::ParamStore;
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const S_MAX: f64 = 5.0;
pub const DEFAULT_LAYERS: usize = 6;

/// One affine coupling. `mask[j] = true` marks a pass-through dimension.
#[derive(Clone, Debug, PartialEq)]
pub struct CouplingLayer {
    pub mask: Vec<bool>,
    pub s_net: Mlp,
    pub t_net: Mlp,
    pub s_max: f64,
    keep: Tensor,
    change: Tensor,
}

fn selection(mask: &[bool], want: bool) -> Tensor {
    let cols: Vec<usize> = (0..mask.len()).filter(|&j| mask[j] == want).collect();
    let mut t = Tensor::zeros(&[mask.len(), cols.len()]);
    for (c, &j) in cols.iter().enumerate() {
        t.data_mut()[j * cols.len() + c] = 1.0;
    }
    t
}

impl CouplingLayer {
    pub fn new(name: &str, mask: Vec<bool>, hidden: usize, layers: usize) -> Result<Self> {
        let a = mask.iter().filter(|&&m| m).count();
        let b = mask.len() - a;
        if a == 0 || b == 0 {
            return Err(Error::contract("coupling mask needs at least one kept and one changed dim"));
        }
        let s_net = Mlp::new(&format!("{name}.s"), &mlp_dims(a, hidden, layers, b), Activation::Relu, OutputActivation::None)?;
        let t_net = Mlp::new(&format!("{name}.t"), &mlp_dims(a, hidden, layers, b), Activation::Relu, OutputActivation::None)?;
        Ok(CouplingLayer {
            keep: selection(&mask, true),
            change: selection(&mask, false),
            mask,
            s_net,
            t_net,
            s_max: S_MAX,
        })
    }

    pub fn dim(&self) -> usize {
        self.mask.len()
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut Rng) -> Result<()> {
        self.s_net.init(store, rng)?;
        self.t_net.init(store, rng)
    }

    pub fn check(&self, store: &ParamStore) -> Result<()> {
        self.s_net.check(store)?;
        self.t_net.check(store)
    }

    fn check_dim(&self, v: Var<'_>, op: &'static str) -> Result<()> {
        let shape = v.shape();
        if shape.len() != 2 || shape[1] != self.dim() {
            return Err(Error::shape(op, format!("input {shape:?} for a {}-dim coupling", self.dim())));
        }
        Ok(())
    }

    /// `s = s_max·tanh(raw/s_max)` and `t`, both functions of the kept dims.
    fn scale_shift<'t>(&self, p: &Params<'t>, kept: Var<'t>) -> Result<(Var<'t>, Var<'t>)> {
        let raw = self.s_net.forward(p, kept)?;
        let s = raw.scale(1.0 / self.s_max).tanh().scale(self.s_max);
        Ok((s, self.t_net.forward(p, kept)?))
    }

    fn split<'t>(&self, x: Var<'t>) -> Result<(Var<'t>, Var<'t>)> {
        let tape = x.tape();
        Ok((x.matmul(tape.constant(self.keep.clone()))?, x.matmul(tape.constant(self.change.clone()))?))
    }

    fn merge<'t>(&self, a: Var<'t>, b: Var<'t>) -> Result<Var<'t>> {
        let tape = a.tape();
        let ka = a.matmul(tape.constant(self.keep.clone()).transpose()?)?;
        ka.add(b.matmul(tape.constant(self.change.clone()).transpose()?)?)
    }

    /// `y_B = x_B·exp(s(x_A)) + t(x_A)`; returns `(y, logdet)` with logdet
    /// of shape `[n]`.
    pub fn forward<'t>(&self, p: &Params<'t>, x: Var<'t>) -> Result<(Var<'t>, Var<'t>)> {
        self.check_dim(x, "coupling_forward")?;
        let (a, b) = self.split(x)?;
        let (s, t) = self.scale_shift(p, a)?;
        let yb = b.mul(s.exp())?.add(t)?;
        Ok((self.merge(a, yb)?, s.sum_axis(1)?))
    }

    /// `x_B = (y_B − t(y_A))·exp(−s(y_A))`.
    pub fn inverse<'t>(&self, p: &Params<'t>, y: Var<'t>) -> Result<Var<'t>> {
        self.check_dim(y, "coupling_inverse")?;
        let (a, b) = self.split(y)?;
        let (s, t) = self.scale_shift(p, a)?;
        let xb = b.sub(t)?.mul(s.neg().exp())?;
        self.merge(a, xb)
    }
}

/// Alternating single dims for 2D inputs, index-parity checkerboards otherwise.
pub fn default_mask(dim: usize, layer: usize) -> Vec<bool> {
    if dim == 2 {
        (0..2).map(|j| j == layer % 2).collect()
    } else {
        (0..dim).map(|j| (j + layer) % 2 == 0).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RealNvp {
    pub layers: Vec<CouplingLayer>,
    pub dim: usize,
}

impl RealNvp {
    pub fn new(dim: usize, n_layers: usize, hidden: usize, depth: usize) -> Result<Self> {
        if dim < 2 {
            return Err(Error::contract("RealNVP needs at least two dims"));
        }
        let layers = (0..n_layers)
            .map(|i| CouplingLayer::new(&format!("flow.c{i}"), default_mask(dim, i), hidden, depth))
            .collect::<Result<_>>()?;
        Ok(RealNvp { layers, dim })
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut Rng) -> Result<()> {
        self.layers.iter().try_for_each(|l| l.init(store, rng))
    }

    pub fn check(&self, store: &ParamStore) -> Result<()> {
        self.layers.iter().try_for_each(|l| l.check(store))
    }

    /// Data → latent through every layer, with the summed logdet.
    pub fn forward<'t>(&self, p: &Params<'t>, x: Var<'t>) -> Result<(Var<'t>, Var<'t>)> {
        let tape = x.tape();
        let mut logdet = tape.constant(Tensor::zeros(&[x.shape()[0]]));
        let mut h = x;
        for l in &self.layers {
            let (y, ld) = l.forward(p, h)?;
            h = y;
            logdet = logdet.add(ld)?;
        }
        Ok((h, logdet))
    }

    /// Latent → data.
    pub fn inverse<'t>(&self, p: &Params<'t>, z: Var<'t>) -> Result<Var<'t>> {
        self.layers.iter().rev().try_fold(z, |h, l| l.inverse(p, h))
    }

    /// Per-item `log N(z; 0, I) + Σ logdet`, shape `[n]`.
    pub fn log_prob<'t>(&self, p: &Params<'t>, x: Var<'t>) -> Result<Var<'t>> {
        if x.shape().len() != 2 || x.shape()[1] != self.dim {
            return Err(Error::shape("log_prob", format!("input {:?} for a {}-dim flow", x.shape(), self.dim)));
        }
        let (z, logdet) = self.forward(p, x)?;
        let c = -0.5 * self.dim as f64 * (2.0 * PI).ln();
        let base = z.square().sum_axis(1)?.scale(-0.5).shift(c);
        base.add(logdet)
    }

    /// Plain-value log density for a batch of points.
    pub fn log_prob_values(&self, store: &ParamStore, x: &Tensor) -> Result<Vec<f64>> {
        let tape = Tape::new();
        let p = tape.bind_frozen(store);
        Ok(self.log_prob(&p, tape.constant(x.clone()))?.value().data().to_vec())
    }

    pub fn nll<'t>(&self, p: &Params<'t>, x: Var<'t>) -> Result<Var<'t>> {
        Ok(self.log_prob(p, x)?.mean()?.neg())
    }
}

pub fn train_step(flow: &RealNvp, store: &mut ParamStore, opt: &mut Adam, x: &Tensor) -> Result<f64> {
    if x.rows() == 0 {
        return Err(Error::contract("flow training on an empty batch"));
    }
    let tape = Tape::new();
    let p = tape.bind(store);
    let loss = flow.nll(&p, tape.constant(x.clone()))?;
    let grads = tape.backward(loss)?.params(&p);
    opt.step(store, &grads)?;
    Ok(loss.item())
}

/// `z ~ N(0, I)` pushed through the latent → data direction.
pub fn nf_sample(flow: &RealNvp, store: &ParamStore, n: usize, rng: &mut Rng) -> Result<Tensor> {
    let z = rng.gaussian_tensor(&[n, flow.dim]);
    if n == 0 {
        return Ok(z);
    }
    let tape = Tape::new();
    let p = tape.bind_frozen(store);
    Ok(flow.inverse(&p, tape.constant(z))?.tensor())
}
