//! Linear layers, MLPs, time and label embeddings, cross-entropy, Adam.
//!
//! Layers are descriptors: they know their parameter names and shapes, and
//! the tensors themselves live in a [`ParamStore`]. That keeps every model
//! checkpointable as a flat store and lets one descriptor be rebuilt from a
//! run config and reattached to loaded parameters.

use crate::autodiff::{Params, Tape, Var};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::rng::Rng;
use crate::tensor::{log_sum_exp, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct LinearLayer {
    pub name: String,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl LinearLayer {
    pub fn new(name: impl Into<String>, in_dim: usize, out_dim: usize) -> Result<Self> {
        if in_dim == 0 || out_dim == 0 {
            return Err(Error::contract(format!(
                "linear layer needs positive dims, got {in_dim}x{out_dim}"
            )));
        }
        Ok(LinearLayer {
            name: name.into(),
            in_dim,
            out_dim,
        })
    }

    pub fn weight_name(&self) -> String {
        format!("{}.w", self.name)
    }

    pub fn bias_name(&self) -> String {
        format!("{}.b", self.name)
    }

    /// Draws `W` (out×in) and `b` uniform on `(−1/√in, 1/√in)` into `store`.
    pub fn init(&self, store: &mut ParamStore, rng: &mut Rng) -> Result<()> {
        let bound = 1.0 / (self.in_dim as f64).sqrt();
        let mut draw = |n: usize| -> Vec<f64> {
            (0..n).map(|_| (2.0 * rng.uniform() - 1.0) * bound).collect()
        };
        let w = Tensor::matrix(self.out_dim, self.in_dim, draw(self.out_dim * self.in_dim))?;
        let b = Tensor::from_vec(draw(self.out_dim));
        store.insert(self.weight_name(), w)?;
        store.insert(self.bias_name(), b)
    }

    pub fn check(&self, store: &ParamStore) -> Result<()> {
        store.expect_shape(&self.weight_name(), &[self.out_dim, self.in_dim])?;
        store.expect_shape(&self.bias_name(), &[self.out_dim])
    }

    /// `x·Wᵀ + b` for a batch `x` of shape n×in.
    pub fn forward<'t>(&self, p: &Params<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let w = p.get(&self.weight_name())?;
        let b = p.get(&self.bias_name())?;
        x.matmul(w.transpose()?)?.add(b)
    }
}

/// Hidden-layer nonlinearity.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Tanh,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OutputActivation {
    None,
    Sigmoid,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub layers: Vec<LinearLayer>,
    pub activation: Activation,
    pub output: OutputActivation,
}

impl Mlp {
    /// `dims = [in, hidden…, out]`; layers are named `<name>.l<i>`.
    pub fn new(
        name: &str,
        dims: &[usize],
        activation: Activation,
        output: OutputActivation,
    ) -> Result<Self> {
        if dims.len() < 2 {
            return Err(Error::contract("an MLP needs at least input and output dims"));
        }
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| LinearLayer::new(format!("{name}.l{i}"), w[0], w[1]))
            .collect::<Result<_>>()?;
        Ok(Mlp {
            layers,
            activation,
            output,
        })
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().map(|l| l.out_dim).unwrap_or(0)
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut Rng) -> Result<()> {
        self.layers.iter().try_for_each(|l| l.init(store, rng))
    }

    pub fn check(&self, store: &ParamStore) -> Result<()> {
        self.layers.iter().try_for_each(|l| l.check(store))
    }

    pub fn forward<'t>(&self, p: &Params<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let shape = x.shape();
        if shape.last() != Some(&self.in_dim()) {
            return Err(Error::shape(
                "mlp",
                format!("input {shape:?}, expected trailing dim {}", self.in_dim()),
            ));
        }
        let mut h = x;
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(p, h)?;
            if i < last {
                h = match self.activation {
                    Activation::Relu => h.relu(),
                    Activation::Tanh => h.tanh(),
                };
            }
        }
        Ok(match self.output {
            OutputActivation::None => h,
            OutputActivation::Sigmoid => h.sigmoid(),
        })
    }

    /// Forward pass on plain tensors with no gradient tracking.
    pub fn apply(&self, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
        let tape = Tape::new();
        let p = tape.bind_frozen(store);
        Ok(self.forward(&p, tape.constant(x.clone()))?.tensor())
    }
}

/// Sinusoidal features: `emb[2i] = sin(t·ωᵢ)`, `emb[2i+1] = cos(t·ωᵢ)` with
/// `ωᵢ = 10000^(−i/(dim/2))`.
pub fn time_embed(t: f64, dim: usize) -> Result<Vec<f64>> {
    if dim < 2 || dim % 2 != 0 {
        return Err(Error::contract(format!("time embedding dim must be even and >= 2, got {dim}")));
    }
    let half = dim / 2;
    let mut out = Vec::with_capacity(dim);
    for i in 0..half {
        let w = 10000f64.powf(-(i as f64) / half as f64);
        out.push((t * w).sin());
        out.push((t * w).cos());
    }
    Ok(out)
}

/// One embedding row per entry of `ts`, as an n×dim tensor.
pub fn time_embed_batch(ts: &[f64], dim: usize) -> Result<Tensor> {
    let mut data = Vec::with_capacity(ts.len() * dim);
    for &t in ts {
        data.extend(time_embed(t, dim)?);
    }
    Tensor::matrix(ts.len(), dim, data)
}

/// Learned table of `classes` rows; looked up via a one-hot matmul so the
/// gradient flows into the selected rows.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelEmbedding {
    pub name: String,
    pub classes: usize,
    pub dim: usize,
}

pub const DEFAULT_LABEL_DIM: usize = 8;

impl LabelEmbedding {
    pub fn new(name: impl Into<String>, classes: usize, dim: usize) -> Self {
        LabelEmbedding {
            name: name.into(),
            classes,
            dim,
        }
    }

    fn table_name(&self) -> String {
        format!("{}.table", self.name)
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut Rng) -> Result<()> {
        let t = rng.gaussian_tensor(&[self.classes, self.dim]);
        store.insert(self.table_name(), t)
    }

    pub fn check(&self, store: &ParamStore) -> Result<()> {
        store.expect_shape(&self.table_name(), &[self.classes, self.dim])
    }

    pub fn forward<'t>(&self, p: &Params<'t>, tape: &'t Tape, labels: &[usize]) -> Result<Var<'t>> {
        let oh = tape.constant(Tensor::one_hot(labels, self.classes)?);
        oh.matmul(p.get(&self.table_name())?)
    }
}

/// Mean over the batch of `−log softmax(logits)[label]`, log-sum-exp
/// stabilized. `logits` is n×K.
pub fn cross_entropy<'t>(logits: Var<'t>, labels: &[usize]) -> Result<Var<'t>> {
    let tape = logits.tape();
    let v = logits.value();
    if v.ndim() != 2 || v.rows() != labels.len() {
        return Err(Error::shape(
            "cross_entropy",
            format!("logits {:?} for {} labels", v.shape(), labels.len()),
        ));
    }
    let k = v.cols();
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::contract(format!("label {bad} out of range for {k} classes")));
    }
    let maxes: Vec<f64> = (0..v.rows())
        .map(|i| v.row(i).iter().copied().fold(f64::NEG_INFINITY, f64::max))
        .collect();
    drop(v);
    let shift = tape.constant(Tensor::matrix(labels.len(), 1, maxes)?);
    let centered = logits.sub(shift)?;
    let lse = centered.exp().sum_axis(1)?.log()?;
    let picked = centered
        .mul(tape.constant(Tensor::one_hot(labels, k)?))?
        .sum_axis(1)?;
    lse.sub(picked)?.mean()
}

/// Single-example cross-entropy on a plain logit vector.
pub fn cross_entropy_value(logits: &[f64], label: usize) -> Result<f64> {
    if label >= logits.len() {
        return Err(Error::contract(format!(
            "label {label} out of range for {} classes",
            logits.len()
        )));
    }
    Ok(log_sum_exp(logits) - logits[label])
}

#[derive(Clone, Debug)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Bias-corrected Adam. Moments are created lazily per parameter name, so
/// one store can be split across several optimizers by passing each only
/// the gradients it owns.
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    m: ParamStore,
    v: ParamStore,
    step: u64,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Adam {
            config,
            m: ParamStore::new(),
            v: ParamStore::new(),
            step: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update to every parameter named in `grads`.
    pub fn step(&mut self, params: &mut ParamStore, grads: &ParamStore) -> Result<()> {
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        for (name, g) in grads.iter() {
            let p = params
                .get_mut(name)
                .ok_or_else(|| Error::contract(format!("gradient for unknown parameter `{name}`")))?;
            if p.shape() != g.shape() {
                return Err(Error::shape(
                    "adam",
                    format!("`{name}`: param {:?} vs grad {:?}", p.shape(), g.shape()),
                ));
            }
            if !self.m.contains(name) {
                self.m.insert(name, Tensor::zeros(g.shape()))?;
                self.v.insert(name, Tensor::zeros(g.shape()))?;
            }
            let m = self.m.get_mut(name).unwrap().data_mut();
            let v = self.v.get_mut(name).unwrap().data_mut();
            for (((pi, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
                *mi = beta1 * *mi + (1.0 - beta1) * gi;
                *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                let mhat = *mi / c1;
                let vhat = *vi / c2;
                *pi -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
