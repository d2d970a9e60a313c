//! Non-saturating GAN and WGAN with a first-order gradient-penalty estimator.
//!
//! Both networks live in one store under the `gen.` and `critic.` prefixes
//! and are stepped by separate optimizers.

use std::cell::Cell;

use crate::autodiff::{Params, Tape, Var};
use crate::cond;
use crate::data::Batch;
use crate::diffusion::mlp_dims;
use crate::error::{Error, Result};
use crate::nn::{self, Activation, Adam, LabelEmbedding, Mlp, OutputActivation};
use crate::params::ParamStore;
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const LATENT_DIM: usize = 8;
pub const GEN_PREFIX: &str = "gen.";
pub const CRITIC_PREFIX: &str = "critic.";
/// Added under the square root so the penalty stays differentiable at a
/// zero gradient estimate.
pub const GP_SQRT_EPS: f64 = 1e-20;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GanVariant {
    NsGan,
    WganGp,
}

impl GanVariant {
    pub fn name(self) -> &'static str {
        match self {
            GanVariant::NsGan => "ns-gan",
            GanVariant::WganGp => "wgan-gp",
        }
    }
}

impl std::str::FromStr for GanVariant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ns-gan" => Ok(GanVariant::NsGan),
            "wgan-gp" => Ok(GanVariant::WganGp),
            o => Err(Error::Usage(format!("unknown GAN variant `{o}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GanConfig {
    pub variant: GanVariant,
    pub n_critic: usize,
    pub lambda_gp: f64,
    pub delta: f64,
    pub directions: usize,
}

impl GanConfig {
    pub fn new(variant: GanVariant) -> Self {
        GanConfig {
            variant,
            n_critic: match variant {
                GanVariant::NsGan => 1,
                GanVariant::WganGp => 5,
            },
            lambda_gp: 10.0,
            delta: 1e-3,
            directions: 4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_critic == 0 || self.directions == 0 || !(self.lambda_gp > 0.0) || !(self.delta > 0.0) {
            return Err(Error::contract("GAN n_critic, directions, lambda and delta must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Generator {
    pub net: Mlp,
    pub label: Option<LabelEmbedding>,
    pub latent: usize,
    pub data_dim: usize,
    evals: Cell<u64>,
}

impl Generator {
    pub fn new(data_dim: usize, hidden: usize, layers: usize, output: OutputActivation, classes: Option<usize>) -> Result<Self> {
        let label = classes.map(|k| LabelEmbedding::new("gen.label", k, nn::DEFAULT_LABEL_DIM));
        let input = LATENT_DIM + cond::extra_dim(label.as_ref());
        let net = Mlp::new("gen.net", &mlp_dims(input, hidden, layers, data_dim), Activation::Relu, output)?;
        Ok(Generator {
            net,
            label,
            latent: LATENT_DIM,
            data_dim,
            evals: Cell::new(0),
        })
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut Rng) -> Result<()> {
        self.net.init(store, rng)?;
        cond::init(self.label.as_ref(), store, rng)
    }

    pub fn check(&self, store: &ParamStore) -> Result<()> {
        self.net.check(store)?;
        cond::check(self.label.as_ref(), store)
    }

    /// Number of latent vectors pushed through the network so far.
    pub fn evaluations(&self) -> u64 {
        self.evals.get()
    }

    pub fn forward<'t>(&self, p: &Params<'t>, z: Var<'t>, labels: Option<&[usize]>) -> Result<Var<'t>> {
        self.evals.set(self.evals.get() + z.shape()[0] as u64);
        let labels = if self.label.is_some() { labels } else { None };
        let h = cond::with_label(self.label.as_ref(), p, z, labels)?;
        self.net.forward(p, h)
    }
}

/// Scalar-output network: raw score for WGAN, logit for the non-saturating
/// loss (the sigmoid is folded into the loss).
#[derive(Clone, Debug, PartialEq)]
pub struct Critic {
    pub net: Mlp,
    pub label: Option<LabelEmbedding>,
}

impl Critic {
    pub fn new(data_dim: usize, hidden: usize, layers: usize, classes: Option<usize>) -> Result<Self> {
        let label = classes.map(|k| LabelEmbedding::new("critic.label", k, nn::DEFAULT_LABEL_DIM));
        let input = data_dim + cond::extra_dim(label.as_ref());
        let net = Mlp::new("critic.net", &mlp_dims(input, hidden, layers, 1), Activation::Relu, OutputActivation::None)?;
        Ok(Critic { net, label })
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut Rng) -> Result<()> {
        self.net.init(store, rng)?;
        cond::init(self.label.as_ref(), store, rng)
    }

    pub fn check(&self, store: &ParamStore) -> Result<()> {
        self.net.check(store)?;
        cond::check(self.label.as_ref(), store)
    }

    /// Scores of shape n×1.
    pub fn forward<'t>(&self, p: &Params<'t>, x: Var<'t>, labels: Option<&[usize]>) -> Result<Var<'t>> {
        let labels = if self.label.is_some() { labels } else { None };
        let h = cond::with_label(self.label.as_ref(), p, x, labels)?;
        self.net.forward(p, h)
    }
}

/// `(d_loss, g_loss)` from probabilities; reference form of
/// [`nsgan_losses_logits`].
pub fn nsgan_losses(p_real: &[f64], p_fake: &[f64]) -> (f64, f64) {
    let mean = |v: &[f64], f: &dyn Fn(f64) -> f64| v.iter().map(|&x| f(x)).sum::<f64>() / v.len() as f64;
    let d = -mean(p_real, &|p| p.ln()) - mean(p_fake, &|p| (1.0 - p).ln());
    let g = -mean(p_fake, &|p| p.ln());
    (d, g)
}

/// Logit-stable non-saturating losses: `−ln σ(l) = softplus(−l)` and
/// `−ln(1 − σ(l)) = softplus(l)`.
pub fn nsgan_losses_logits<'t>(l_real: Var<'t>, l_fake: Var<'t>) -> Result<(Var<'t>, Var<'t>)> {
    let d = l_real.neg().softplus().mean()?.add(l_fake.softplus().mean()?)?;
    let g = l_fake.neg().softplus().mean()?;
    Ok((d, g))
}

/// `d_loss = mean(f_fake) − mean(f_real)`, `g_loss = −mean(f_fake)`.
pub fn wgan_losses<'t>(f_real: Var<'t>, f_fake: Var<'t>) -> Result<(Var<'t>, Var<'t>)> {
    let d = f_fake.mean()?.sub(f_real.mean()?)?;
    let g = f_fake.mean()?.neg();
    Ok((d, g))
}

/// `u·real + (1−u)·fake` row by row.
pub fn interpolates(real: &Tensor, fake: &Tensor, u: &[f64]) -> Result<Tensor> {
    if real.shape() != fake.shape() || u.len() != real.rows() {
        return Err(Error::shape("gp_estimate", format!("real {:?}, fake {:?}, {} weights", real.shape(), fake.shape(), u.len())));
    }
    let d = real.cols();
    let data = real
        .data()
        .iter()
        .zip(fake.data())
        .enumerate()
        .map(|(k, (&r, &f))| u[k / d] * r + (1.0 - u[k / d]) * f)
        .collect();
    Tensor::new(real.shape().to_vec(), data)
}

/// Unit directions, one block of `n` rows per direction index.
pub fn random_directions(m: usize, n: usize, d: usize, rng: &mut Rng) -> Tensor {
    let mut t = rng.gaussian_tensor(&[m * n, d]);
    for r in 0..m * n {
        let row = &mut t.data_mut()[r * d..(r + 1) * d];
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        row.iter_mut().for_each(|v| *v /= norm);
    }
    t
}

/// Squared gradient norm estimate `est = (D/m)·Σ ĝᵢ²` at each row of `xhat`,
/// shape `[n, 1]`. `ĝᵢ` is a central difference of `f` along direction `i`;
/// `dirs` holds `m` blocks of `n` rows.
pub fn grad_norm_sq_estimate<'t, F>(f: F, tape: &'t Tape, xhat: &Tensor, dirs: &Tensor, delta: f64) -> Result<Var<'t>>
where
    F: Fn(Var<'t>) -> Result<Var<'t>>,
{
    let (n, d) = (xhat.rows(), xhat.cols());
    if n == 0 || dirs.cols() != d || dirs.rows() % n != 0 {
        return Err(Error::shape("gp_estimate", format!("points {:?}, directions {:?}", xhat.shape(), dirs.shape())));
    }
    let m = dirs.rows() / n;
    let mut stacked = Vec::with_capacity(2 * m * n * d);
    for sign in [1.0, -1.0] {
        for r in 0..m * n {
            let base = xhat.row(r % n);
            stacked.extend(base.iter().zip(dirs.row(r)).map(|(&x, &u)| x + sign * delta * u));
        }
    }
    let scores = f(tape.constant(Tensor::new(vec![2 * m * n, d], stacked)?))?;
    let g = scores
        .slice(0, 0, m * n)?
        .sub(scores.slice(0, m * n, 2 * m * n)?)?
        .scale(1.0 / (2.0 * delta));
    let mut sum = Tensor::zeros(&[n, m * n]);
    for r in 0..m * n {
        sum.data_mut()[(r % n) * m * n + r] = 1.0;
    }
    Ok(tape.constant(sum).matmul(g.square())?.scale(d as f64 / m as f64))
}

/// Penalty `λ·mean((√est − 1)²)` with `est` from [`grad_norm_sq_estimate`].
pub fn gp_penalty<'t, F>(f: F, tape: &'t Tape, xhat: &Tensor, dirs: &Tensor, delta: f64, lambda: f64) -> Result<Var<'t>>
where
    F: Fn(Var<'t>) -> Result<Var<'t>>,
{
    let est = grad_norm_sq_estimate(f, tape, xhat, dirs, delta)?;
    let dev = est.shift(GP_SQRT_EPS).sqrt()?.shift(-1.0);
    Ok(dev.square().mean()?.scale(lambda))
}

/// Draws `u` and directions, then evaluates [`gp_penalty`].
#[allow(clippy::too_many_arguments)]
pub fn gp_estimate<'t, F>(
    f: F,
    tape: &'t Tape,
    real: &Tensor,
    fake: &Tensor,
    rng: &mut Rng,
    delta: f64,
    m: usize,
    lambda: f64,
) -> Result<Var<'t>>
where
    F: Fn(Var<'t>) -> Result<Var<'t>>,
{
    let n = real.rows();
    let u: Vec<f64> = (0..n).map(|_| rng.uniform()).collect();
    let xhat = interpolates(real, fake, &u)?;
    let dirs = random_directions(m, n, real.cols(), rng);
    gp_penalty(f, tape, &xhat, &dirs, delta, lambda)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GanStats {
    pub d_loss: f64,
    pub g_loss: f64,
    pub penalty: f64,
}

pub struct Gan {
    pub config: GanConfig,
    pub gen: Generator,
    pub critic: Critic,
}

impl Gan {
    pub fn init(&self, store: &mut ParamStore, rng: &mut Rng) -> Result<()> {
        self.gen.init(store, rng)?;
        self.critic.init(store, rng)
    }

    pub fn check(&self, store: &ParamStore) -> Result<()> {
        self.gen.check(store)?;
        self.critic.check(store)
    }
}

fn losses<'t>(variant: GanVariant, real: Var<'t>, fake: Var<'t>) -> Result<(Var<'t>, Var<'t>)> {
    match variant {
        GanVariant::NsGan => nsgan_losses_logits(real, fake),
        GanVariant::WganGp => wgan_losses(real, fake),
    }
}

/// `n_critic` critic updates on fresh fakes, then one generator update.
pub fn gan_train_step(
    gan: &Gan,
    store: &mut ParamStore,
    real: &Batch,
    rng: &mut Rng,
    opt_g: &mut Adam,
    opt_d: &mut Adam,
) -> Result<GanStats> {
    let cfg = &gan.config;
    let n = real.len();
    if n == 0 {
        return Err(Error::contract("GAN step on an empty batch"));
    }
    let labels = real.labels.as_deref();
    let mut stats = GanStats {
        d_loss: 0.0,
        g_loss: 0.0,
        penalty: 0.0,
    };
    for _ in 0..cfg.n_critic {
        let tape = Tape::new();
        let gp = tape.bind_frozen(&store.filter_prefix(GEN_PREFIX));
        let cp = tape.bind(&store.filter_prefix(CRITIC_PREFIX));
        let z = tape.constant(rng.gaussian_tensor(&[n, gan.gen.latent]));
        let fake = gan.gen.forward(&gp, z, labels)?.tensor();
        let f_real = gan.critic.forward(&cp, tape.constant(real.x.clone()), labels)?;
        let f_fake = gan.critic.forward(&cp, tape.constant(fake.clone()), labels)?;
        let (d_loss, _) = losses(cfg.variant, f_real, f_fake)?;
        let total = match cfg.variant {
            GanVariant::NsGan => d_loss,
            GanVariant::WganGp => {
                let pen = gp_estimate(
                    |x| gan.critic.forward(&cp, x, labels.map(|l| l.repeat(2 * cfg.directions)).as_deref()),
                    &tape,
                    &real.x,
                    &fake,
                    rng,
                    cfg.delta,
                    cfg.directions,
                    cfg.lambda_gp,
                )?;
                stats.penalty = pen.item();
                d_loss.add(pen)?
            }
        };
        stats.d_loss = d_loss.item();
        let grads = tape.backward(total)?.params(&cp);
        opt_d.step(store, &grads)?;
    }
    let tape = Tape::new();
    let gp = tape.bind(&store.filter_prefix(GEN_PREFIX));
    let cp = tape.bind_frozen(&store.filter_prefix(CRITIC_PREFIX));
    let z = tape.constant(rng.gaussian_tensor(&[n, gan.gen.latent]));
    let fake = gan.gen.forward(&gp, z, labels)?;
    let f_fake = gan.critic.forward(&cp, fake, labels)?;
    let g_loss = match cfg.variant {
        GanVariant::NsGan => f_fake.neg().softplus().mean()?,
        GanVariant::WganGp => f_fake.mean()?.neg(),
    };
    stats.g_loss = g_loss.item();
    let grads = tape.backward(g_loss)?.params(&gp);
    opt_g.step(store, &grads)?;
    Ok(stats)
}

/// One forward pass of the generator on `z ~ N(0, I)`. A conditional
/// generator without `label` cycles through the classes.
pub fn gan_sample(gen: &Generator, store: &ParamStore, n: usize, rng: &mut Rng, label: Option<usize>) -> Result<Tensor> {
    let z = rng.gaussian_tensor(&[n, gen.latent]);
    if n == 0 {
        return Ok(Tensor::zeros(&[0, gen.data_dim]));
    }
    let labels = match (&gen.label, label) {
        (Some(e), None) => Some((0..n).map(|i| i % e.classes).collect::<Vec<_>>()),
        (_, l) => l.map(|l| vec![l; n]),
    };
    let tape = Tape::new();
    let p = tape.bind_frozen(store);
    Ok(gen.forward(&p, tape.constant(z), labels.as_deref())?.tensor())
}
