//! DDPM training, ancestral and DDIM sampling, classifier-free guidance, and
//! classifier-gradient guidance.
//!
//! Timesteps are 1-based: `t ∈ [1, T]`, with `ᾱ_0 ≡ 1`.

use crate::autodiff::{Params, Tape, Var};
use crate::cond;
use crate::data::Batch;
use crate::error::{Error, Result};
use crate::nn::{self, cross_entropy, Activation, Adam, LabelEmbedding, Mlp, OutputActivation};
use crate::params::ParamStore;
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const DEFAULT_STEPS: usize = 200;
pub const DEFAULT_BETA_START: f64 = 1e-4;
pub const DEFAULT_BETA_END: f64 = 0.02;
pub const DEFAULT_P_UNCOND: f64 = 0.1;
pub const TIME_DIM: usize = 16;

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    /// `steps` betas linearly spaced from `beta_start` to `beta_end` inclusive.
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps < 2 {
            return Err(Error::contract(format!("schedule needs T >= 2, got {steps}")));
        }
        if !(0.0 < beta_start && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::contract(format!(
                "need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}"
            )));
        }
        let span = (steps - 1) as f64;
        let betas = (0..steps)
            .map(|i| beta_start + (beta_end - beta_start) * i as f64 / span)
            .collect();
        Self::from_betas(betas)
    }

    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.len() < 2 || betas.iter().any(|&b| !(b > 0.0 && b < 1.0)) {
            return Err(Error::contract("every beta must lie in (0, 1) and T >= 2"));
        }
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(alphas.len());
        let mut acc = 1.0;
        for a in &alphas {
            acc *= a;
            alpha_bars.push(acc);
        }
        Ok(NoiseSchedule {
            betas,
            alphas,
            alpha_bars,
        })
    }

    pub fn default_linear() -> Self {
        Self::linear(DEFAULT_STEPS, DEFAULT_BETA_START, DEFAULT_BETA_END).expect("valid defaults")
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(Error::contract(format!("timestep {t} outside [1, {}]", self.steps())));
        }
        Ok(())
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t - 1]
    }

    /// `ᾱ_t`, with `ᾱ_0 = 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    /// `σ_t² = β_t (1 − ᾱ_{t−1}) / (1 − ᾱ_t)`.
    pub fn posterior_variance(&self, t: usize) -> f64 {
        self.beta(t) * (1.0 - self.alpha_bar(t - 1)) / (1.0 - self.alpha_bar(t))
    }
}

/// `√ᾱ_t·x0 + √(1−ᾱ_t)·ε` with a single `t` for the whole batch.
pub fn q_sample(x0: &Tensor, t: usize, eps: &Tensor, sched: &NoiseSchedule) -> Result<Tensor> {
    sched.check_t(t)?;
    q_sample_rows(x0, &vec![t; x0.rows()], eps, sched)
}

/// Forward corruption with one timestep per row.
pub fn q_sample_rows(x0: &Tensor, ts: &[usize], eps: &Tensor, sched: &NoiseSchedule) -> Result<Tensor> {
    if x0.shape() != eps.shape() || ts.len() != x0.rows() {
        return Err(Error::shape("q_sample", format!("x0 {:?}, eps {:?}, {} timesteps", x0.shape(), eps.shape(), ts.len())));
    }
    let d = x0.cols();
    let mut out = x0.clone();
    for (i, &t) in ts.iter().enumerate() {
        sched.check_t(t)?;
        let (a, s) = (sched.alpha_bar(t).sqrt(), (1.0 - sched.alpha_bar(t)).sqrt());
        for j in 0..d {
            let k = i * d + j;
            out.data_mut()[k] = a * x0.data()[k] + s * eps.data()[k];
        }
    }
    Ok(out)
}

/// Time feature fed to the networks: `time_embed(t/T·1000)`.
pub(crate) fn time_features(ts: &[usize], steps: usize) -> Result<Tensor> {
    let scaled: Vec<f64> = ts.iter().map(|&t| t as f64 / steps as f64 * 1000.0).collect();
    nn::time_embed_batch(&scaled, TIME_DIM)
}

/// Hidden layout shared by the per-family networks.
pub(crate) fn mlp_dims(input: usize, hidden: usize, layers: usize, output: usize) -> Vec<usize> {
    let mut dims = vec![input];
    dims.extend(std::iter::repeat(hidden).take(layers.max(1)));
    dims.push(output);
    dims
}

/// ε-prediction network over `concat(x, time_embed(t), label embedding?)`.
#[derive(Clone, Debug, PartialEq)]
pub struct EpsModel {
    pub net: Mlp,
    pub label: Option<LabelEmbedding>,
    pub data_dim: usize,
    pub steps: usize,
}

impl EpsModel {
    /// With `classes = Some(K)` the model is conditional and index `K` is the
    /// learned null label.
    pub fn new(data_dim: usize, hidden: usize, layers: usize, steps: usize, classes: Option<usize>) -> Result<Self> {
        let label = classes.map(|k| LabelEmbedding::new("eps.label", k + 1, nn::DEFAULT_LABEL_DIM));
        let input = data_dim + TIME_DIM + cond::extra_dim(label.as_ref());
        let net = Mlp::new("eps.net", &mlp_dims(input, hidden, layers, data_dim), Activation::Relu, OutputActivation::None)?;
        Ok(EpsModel {
            net,
            label,
            data_dim,
            steps,
        })
    }

    pub fn null_label(&self) -> Option<usize> {
        self.label.as_ref().map(|e| e.classes - 1)
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut Rng) -> Result<()> {
        self.net.init(store, rng)?;
        cond::init(self.label.as_ref(), store, rng)
    }

    pub fn check(&self, store: &ParamStore) -> Result<()> {
        self.net.check(store)?;
        cond::check(self.label.as_ref(), store)
    }

    /// `labels = None` on a conditional model means the null label.
    pub fn forward<'t>(&self, p: &Params<'t>, x: Var<'t>, ts: &[usize], labels: Option<&[usize]>) -> Result<Var<'t>> {
        let tape = x.tape();
        let temb = tape.constant(time_features(ts, self.steps)?);
        let h = tape.concat(&[x, temb], 1)?;
        let nulls;
        let labels = match (self.null_label(), labels) {
            (Some(null), None) => {
                nulls = vec![null; ts.len()];
                Some(&nulls[..])
            }
            (_, l) => l,
        };
        let h = cond::with_label(self.label.as_ref(), p, h, labels)?;
        self.net.forward(p, h)
    }
}

/// Anything that predicts the noise in `x_t`.
pub trait NoisePredictor {
    fn predict(&self, x: &Tensor, t: usize, labels: Option<&[usize]>) -> Result<Tensor>;

    /// Whether the predictor responds to labels (enables CFG).
    fn is_conditional(&self) -> bool {
        false
    }
}

/// A trained [`EpsModel`] bound to its parameters.
pub struct Trained<'a> {
    pub model: &'a EpsModel,
    pub params: &'a ParamStore,
}

impl NoisePredictor for Trained<'_> {
    fn predict(&self, x: &Tensor, t: usize, labels: Option<&[usize]>) -> Result<Tensor> {
        let tape = Tape::new();
        let p = tape.bind_frozen(self.params);
        let ts = vec![t; x.rows()];
        Ok(self.model.forward(&p, tape.constant(x.clone()), &ts, labels)?.tensor())
    }

    fn is_conditional(&self) -> bool {
        self.model.label.is_some()
    }
}

/// `ε*(x, t) = √(1−ᾱ_t)·x`, the exact optimum for N(0, I) data.
pub struct UnitGaussianOracle<'a> {
    pub sched: &'a NoiseSchedule,
}

impl NoisePredictor for UnitGaussianOracle<'_> {
    fn predict(&self, x: &Tensor, t: usize, _labels: Option<&[usize]>) -> Result<Tensor> {
        let s = (1.0 - self.sched.alpha_bar(t)).sqrt();
        Ok(x.map(|v| s * v))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GuidanceMode {
    None,
    Cfg,
    Classifier,
}

impl GuidanceMode {
    pub fn name(self) -> &'static str {
        match self {
            GuidanceMode::None => "none",
            GuidanceMode::Cfg => "cfg",
            GuidanceMode::Classifier => "classifier",
        }
    }
}

impl std::str::FromStr for GuidanceMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(GuidanceMode::None),
            "cfg" => Ok(GuidanceMode::Cfg),
            "classifier" => Ok(GuidanceMode::Classifier),
            o => Err(Error::Usage(format!("unknown guidance mode `{o}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GuidanceConfig {
    pub mode: GuidanceMode,
    pub weight: f64,
    pub p_uncond: f64,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        GuidanceConfig {
            mode: GuidanceMode::None,
            weight: 0.0,
            p_uncond: DEFAULT_P_UNCOND,
        }
    }
}

impl GuidanceConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.weight.is_finite() || self.weight < 0.0 {
            return Err(Error::contract(format!("guidance weight {} must be finite and >= 0", self.weight)));
        }
        if !(0.0..=1.0).contains(&self.p_uncond) {
            return Err(Error::contract(format!("p_uncond {} outside [0, 1]", self.p_uncond)));
        }
        Ok(())
    }
}

/// Per-step guidance applied during sampling.
pub enum Guidance<'a> {
    None,
    Cfg { weight: f64 },
    Classifier { classifier: &'a NoisyClassifier, params: &'a ParamStore, weight: f64 },
}

/// `ε_u + w·(ε_c − ε_u)`: `w = 0` unconditional, `w = 1` conditional.
pub fn cfg_combine(eps_u: &Tensor, eps_c: &Tensor, w: f64) -> Result<Tensor> {
    if eps_u.shape() != eps_c.shape() {
        return Err(Error::shape("cfg_combine", format!("{:?} vs {:?}", eps_u.shape(), eps_c.shape())));
    }
    let data = eps_u.data().iter().zip(eps_c.data()).map(|(&u, &c)| u + w * (c - u)).collect();
    Tensor::new(eps_u.shape().to_vec(), data)
}

/// `ε̂ − w·√(1−ᾱ_t)·g` where `g = ∇_x log p(y | x_t)`.
pub fn classifier_guide(eps: &Tensor, grad: &Tensor, w: f64, sched: &NoiseSchedule, t: usize) -> Result<Tensor> {
    if eps.shape() != grad.shape() {
        return Err(Error::shape("classifier_guide", format!("{:?} vs {:?}", eps.shape(), grad.shape())));
    }
    let k = w * (1.0 - sched.alpha_bar(t)).sqrt();
    let data = eps.data().iter().zip(grad.data()).map(|(&e, &g)| e - k * g).collect();
    Tensor::new(eps.shape().to_vec(), data)
}

fn guided_eps(
    pred: &dyn NoisePredictor,
    guidance: &Guidance<'_>,
    sched: &NoiseSchedule,
    x: &Tensor,
    t: usize,
    labels: Option<&[usize]>,
) -> Result<Tensor> {
    match guidance {
        Guidance::None => pred.predict(x, t, labels),
        Guidance::Cfg { weight } => {
            let labels = labels.ok_or_else(|| Error::contract("classifier-free guidance needs a target label"))?;
            let eps_u = pred.predict(x, t, None)?;
            let eps_c = pred.predict(x, t, Some(labels))?;
            cfg_combine(&eps_u, &eps_c, *weight)
        }
        Guidance::Classifier { classifier, params, weight } => {
            let labels = labels.ok_or_else(|| Error::contract("classifier guidance needs a target label"))?;
            let own = if pred.is_conditional() { Some(labels) } else { None };
            let eps = pred.predict(x, t, own)?;
            let g = classifier.grad_log_prob(params, x, t, labels)?;
            classifier_guide(&eps, &g, *weight, sched, t)
        }
    }
}

/// Ancestral update `x_{t−1} = (x_t − β_t/√(1−ᾱ_t)·ε̂)/√α_t + σ_t·z`. The
/// noise term is dropped at `t = 1`.
pub fn ddpm_step(x_t: &Tensor, t: usize, eps: &Tensor, sched: &NoiseSchedule, z: &Tensor) -> Result<Tensor> {
    sched.check_t(t)?;
    if x_t.shape() != eps.shape() || x_t.shape() != z.shape() {
        return Err(Error::shape("ddpm_step", format!("x {:?}, eps {:?}, z {:?}", x_t.shape(), eps.shape(), z.shape())));
    }
    let inv_sqrt_alpha = 1.0 / sched.alpha(t).sqrt();
    let coef = sched.beta(t) / (1.0 - sched.alpha_bar(t)).sqrt();
    let sigma = if t > 1 { sched.posterior_variance(t).sqrt() } else { 0.0 };
    let data = x_t
        .data()
        .iter()
        .zip(eps.data())
        .zip(z.data())
        .map(|((&x, &e), &zz)| inv_sqrt_alpha * (x - coef * e) + sigma * zz)
        .collect();
    Tensor::new(x_t.shape().to_vec(), data)
}

fn label_vec(label: Option<usize>, n: usize) -> Option<Vec<usize>> {
    label.map(|l| vec![l; n])
}

/// Draws `n` samples of dimension `dim` by ancestral sampling from `t = T`.
pub fn ddpm_sample(
    pred: &dyn NoisePredictor,
    sched: &NoiseSchedule,
    n: usize,
    dim: usize,
    guidance: &Guidance<'_>,
    rng: &mut Rng,
    label: Option<usize>,
) -> Result<Tensor> {
    let labels = label_vec(label, n);
    let mut x = rng.gaussian_tensor(&[n, dim]);
    if n == 0 {
        return Ok(x);
    }
    for t in (1..=sched.steps()).rev() {
        let eps = guided_eps(pred, guidance, sched, &x, t, labels.as_deref())?;
        let z = if t > 1 { rng.gaussian_tensor(&[n, dim]) } else { Tensor::zeros(&[n, dim]) };
        x = ddpm_step(&x, t, &eps, sched, &z)?;
    }
    Ok(x)
}

/// `S` evenly spaced timesteps `⌈i·T/S⌉`, `i = 1..S`; the last one is `T`.
pub fn ddim_timesteps(steps: usize, s: usize) -> Result<Vec<usize>> {
    if s == 0 || s > steps {
        return Err(Error::contract(format!("DDIM step count {s} outside [1, {steps}]")));
    }
    Ok((1..=s).map(|i| (i * steps).div_ceil(s)).collect())
}

/// `σ = η·√((1−ᾱ')/(1−ᾱ))·√(1−ᾱ/ᾱ')` for a step from `ᾱ` to `ᾱ'`.
pub fn ddim_sigma(ab_t: f64, ab_prev: f64, eta: f64) -> f64 {
    eta * ((1.0 - ab_prev) / (1.0 - ab_t)).sqrt() * (1.0 - ab_t / ab_prev).max(0.0).sqrt()
}

/// One DDIM update from `ᾱ_t` to `ᾱ_prev`.
pub fn ddim_step(x_t: &Tensor, ab_t: f64, ab_prev: f64, eps: &Tensor, eta: f64, z: Option<&Tensor>) -> Result<Tensor> {
    if x_t.shape() != eps.shape() {
        return Err(Error::shape("ddim_step", format!("{:?} vs {:?}", x_t.shape(), eps.shape())));
    }
    let sigma = ddim_sigma(ab_t, ab_prev, eta);
    let dir = (1.0 - ab_prev - sigma * sigma).max(0.0).sqrt();
    let (sa, sb) = (ab_t.sqrt(), (1.0 - ab_t).sqrt());
    let sp = ab_prev.sqrt();
    let mut out = Vec::with_capacity(x_t.len());
    for (i, (&x, &e)) in x_t.data().iter().zip(eps.data()).enumerate() {
        let x0 = (x - sb * e) / sa;
        let noise = z.map_or(0.0, |z| sigma * z.data()[i]);
        out.push(sp * x0 + dir * e + noise);
    }
    Tensor::new(x_t.shape().to_vec(), out)
}

#[allow(clippy::too_many_arguments)]
pub fn ddim_sample(
    pred: &dyn NoisePredictor,
    sched: &NoiseSchedule,
    s: usize,
    eta: f64,
    n: usize,
    dim: usize,
    guidance: &Guidance<'_>,
    rng: &mut Rng,
    label: Option<usize>,
) -> Result<Tensor> {
    let grid = ddim_timesteps(sched.steps(), s)?;
    let labels = label_vec(label, n);
    let mut x = rng.gaussian_tensor(&[n, dim]);
    if n == 0 {
        return Ok(x);
    }
    for i in (0..grid.len()).rev() {
        let t = grid[i];
        let ab_prev = if i == 0 { 1.0 } else { sched.alpha_bar(grid[i - 1]) };
        let eps = guided_eps(pred, guidance, sched, &x, t, labels.as_deref())?;
        let z = (eta > 0.0).then(|| rng.gaussian_tensor(&[n, dim]));
        x = ddim_step(&x, sched.alpha_bar(t), ab_prev, &eps, eta, z.as_ref())?;
    }
    Ok(x)
}

/// Draws for one DDPM training batch. Kept separate so a fixed draw can be
/// replayed against different models.
#[derive(Clone, Debug)]
pub struct NoiseDraw {
    pub ts: Vec<usize>,
    pub eps: Tensor,
    pub labels: Option<Vec<usize>>,
}

/// Samples `t ~ U{1..T}`, `ε ~ N(0, I)`, and label dropout for CFG training.
pub fn draw_noise(batch: &Batch, steps: usize, model_null: Option<usize>, p_uncond: f64, rng: &mut Rng) -> NoiseDraw {
    let n = batch.len();
    let ts: Vec<usize> = (0..n).map(|_| 1 + rng.below(steps)).collect();
    let eps = rng.gaussian_tensor(&[n, batch.dim()]);
    let labels = match (model_null, &batch.labels) {
        (Some(null), Some(l)) => Some(
            l.iter()
                .map(|&y| if rng.uniform() < p_uncond { null } else { y })
                .collect(),
        ),
        (Some(null), None) => Some(vec![null; n]),
        _ => None,
    };
    NoiseDraw { ts, eps, labels }
}

/// Mean squared error between predicted and true noise, averaged over batch
/// and dimensions.
pub fn ddpm_loss_with<'t>(
    model: &EpsModel,
    p: &Params<'t>,
    tape: &'t Tape,
    batch: &Batch,
    sched: &NoiseSchedule,
    draw: &NoiseDraw,
) -> Result<Var<'t>> {
    if batch.is_empty() {
        return Err(Error::contract("ddpm_loss on an empty batch"));
    }
    let xt = q_sample_rows(&batch.x, &draw.ts, &draw.eps, sched)?;
    let pred = model.forward(p, tape.constant(xt), &draw.ts, draw.labels.as_deref())?;
    pred.sub(tape.constant(draw.eps.clone()))?.square().mean()
}

pub fn ddpm_loss<'t>(
    model: &EpsModel,
    p: &Params<'t>,
    tape: &'t Tape,
    batch: &Batch,
    sched: &NoiseSchedule,
    p_uncond: f64,
    rng: &mut Rng,
) -> Result<Var<'t>> {
    let draw = draw_noise(batch, sched.steps(), model.null_label(), p_uncond, rng);
    ddpm_loss_with(model, p, tape, batch, sched, &draw)
}

/// One optimizer step on the DDPM objective; returns the loss.
pub fn train_step(
    model: &EpsModel,
    store: &mut ParamStore,
    opt: &mut Adam,
    batch: &Batch,
    sched: &NoiseSchedule,
    p_uncond: f64,
    rng: &mut Rng,
) -> Result<f64> {
    let tape = Tape::new();
    let p = tape.bind(store);
    let loss = ddpm_loss(model, &p, &tape, batch, sched, p_uncond, rng)?;
    let grads = tape.backward(loss)?.params(&p);
    opt.step(store, &grads)?;
    Ok(loss.item())
}

/// Noise-aware classifier `p(y | x_t, t)` used for classifier guidance.
#[derive(Clone, Debug, PartialEq)]
pub struct NoisyClassifier {
    pub net: Mlp,
    pub classes: usize,
    pub steps: usize,
}

impl NoisyClassifier {
    pub fn new(data_dim: usize, hidden: usize, layers: usize, steps: usize, classes: usize) -> Result<Self> {
        let net = Mlp::new(
            "clf.net",
            &mlp_dims(data_dim + TIME_DIM, hidden, layers, classes),
            Activation::Relu,
            OutputActivation::None,
        )?;
        Ok(NoisyClassifier { net, classes, steps })
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut Rng) -> Result<()> {
        self.net.init(store, rng)
    }

    pub fn check(&self, store: &ParamStore) -> Result<()> {
        self.net.check(store)
    }

    pub fn logits<'t>(&self, p: &Params<'t>, x: Var<'t>, ts: &[usize]) -> Result<Var<'t>> {
        let tape = x.tape();
        let temb = tape.constant(time_features(ts, self.steps)?);
        self.net.forward(p, tape.concat(&[x, temb], 1)?)
    }

    /// Cross-entropy on inputs noised by [`q_sample_rows`] at random `t`.
    pub fn loss<'t>(&self, p: &Params<'t>, tape: &'t Tape, batch: &Batch, sched: &NoiseSchedule, rng: &mut Rng) -> Result<Var<'t>> {
        let labels = batch
            .labels
            .as_ref()
            .ok_or_else(|| Error::contract("classifier training needs labels"))?;
        let draw = draw_noise(batch, sched.steps(), None, 0.0, rng);
        let xt = q_sample_rows(&batch.x, &draw.ts, &draw.eps, sched)?;
        cross_entropy(self.logits(p, tape.constant(xt), &draw.ts)?, labels)
    }

    pub fn train_step(&self, store: &mut ParamStore, opt: &mut Adam, batch: &Batch, sched: &NoiseSchedule, rng: &mut Rng) -> Result<f64> {
        let tape = Tape::new();
        let p = tape.bind(store);
        let loss = self.loss(&p, &tape, batch, sched, rng)?;
        let grads = tape.backward(loss)?.params(&p);
        opt.step(store, &grads)?;
        Ok(loss.item())
    }

    /// `∇_x log p(y | x, t)` per row, via input gradients on the tape.
    pub fn grad_log_prob(&self, store: &ParamStore, x: &Tensor, t: usize, labels: &[usize]) -> Result<Tensor> {
        let tape = Tape::new();
        let p = tape.bind_frozen(store);
        let xv = tape.input(x.clone());
        let logits = self.logits(&p, xv, &vec![t; x.rows()])?;
        // cross_entropy is the batch mean of −log p, so scale by −n.
        let total = cross_entropy(logits, labels)?.scale(-(labels.len() as f64));
        Ok(tape.backward(total)?.wrt(xv))
    }
}
