//! Variational autoencoder with a Gaussian encoder, Bernoulli or fixed-σ
//! Gaussian decoder, β-weighted closed-form KL, and optional label input.

use crate::autodiff::{Params, Tape, Var};
use crate::cond;
use crate::data::Batch;
use crate::diffusion::mlp_dims;
use crate::error::{Error, Result};
use crate::nn::{self, Activation, Adam, LabelEmbedding, Mlp, OutputActivation};
use crate::params::ParamStore;
use crate::rng::Rng;
use crate::tensor::{self, Tensor};

pub const GAUSSIAN_SIGMA: f64 = 0.1;
pub const LOGVAR_MIN: f64 = -10.0;
pub const LOGVAR_MAX: f64 = 10.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Likelihood {
    /// Decoder emits logits; data must be binary.
    Bernoulli,
    /// Decoder emits the mean of `N(μ, σ²I)` with `σ = 0.1`.
    Gaussian,
}

impl Likelihood {
    pub fn name(self) -> &'static str {
        match self {
            Likelihood::Bernoulli => "bernoulli",
            Likelihood::Gaussian => "gaussian",
        }
    }
}

impl std::str::FromStr for Likelihood {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bernoulli" => Ok(Likelihood::Bernoulli),
            "gaussian" => Ok(Likelihood::Gaussian),
            o => Err(Error::Usage(format!("unknown likelihood `{o}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VaeConfig {
    pub beta: f64,
    pub latent: usize,
    pub conditional: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Vae {
    pub encoder: Mlp,
    pub decoder: Mlp,
    pub enc_label: Option<LabelEmbedding>,
    pub dec_label: Option<LabelEmbedding>,
    pub likelihood: Likelihood,
    pub data_dim: usize,
    pub latent: usize,
    pub beta: f64,
}

impl Vae {
    /// `classes` is required when `cfg.conditional` is set.
    pub fn new(data_dim: usize, hidden: usize, layers: usize, cfg: &VaeConfig, likelihood: Likelihood, classes: Option<usize>) -> Result<Self> {
        if !cfg.beta.is_finite() || cfg.beta < 0.0 {
            return Err(Error::contract(format!("beta {} must be finite and >= 0", cfg.beta)));
        }
        if cfg.latent == 0 {
            return Err(Error::contract("latent dim must be positive"));
        }
        let k = match (cfg.conditional, classes) {
            (true, Some(k)) => Some(k),
            (true, None) => return Err(Error::contract("conditional VAE needs a class count")),
            (false, _) => None,
        };
        let enc_label = k.map(|k| LabelEmbedding::new("enc.label", k, nn::DEFAULT_LABEL_DIM));
        let dec_label = k.map(|k| LabelEmbedding::new("dec.label", k, nn::DEFAULT_LABEL_DIM));
        let encoder = Mlp::new(
            "enc.net",
            &mlp_dims(data_dim + cond::extra_dim(enc_label.as_ref()), hidden, layers, 2 * cfg.latent),
            Activation::Relu,
            OutputActivation::None,
        )?;
        let decoder = Mlp::new(
            "dec.net",
            &mlp_dims(cfg.latent + cond::extra_dim(dec_label.as_ref()), hidden, layers, data_dim),
            Activation::Relu,
            OutputActivation::None,
        )?;
        Ok(Vae {
            encoder,
            decoder,
            enc_label,
            dec_label,
            likelihood,
            data_dim,
            latent: cfg.latent,
            beta: cfg.beta,
        })
    }

    pub fn is_conditional(&self) -> bool {
        self.dec_label.is_some()
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut Rng) -> Result<()> {
        self.encoder.init(store, rng)?;
        cond::init(self.enc_label.as_ref(), store, rng)?;
        self.decoder.init(store, rng)?;
        cond::init(self.dec_label.as_ref(), store, rng)
    }

    pub fn check(&self, store: &ParamStore) -> Result<()> {
        self.encoder.check(store)?;
        cond::check(self.enc_label.as_ref(), store)?;
        self.decoder.check(store)?;
        cond::check(self.dec_label.as_ref(), store)
    }

    fn labels<'a>(&self, labels: Option<&'a [usize]>) -> Option<&'a [usize]> {
        if self.is_conditional() {
            labels
        } else {
            None
        }
    }

    /// Returns `(μ, logvar)` with logvar clamped to `[−10, 10]`.
    pub fn encode<'t>(&self, p: &Params<'t>, x: Var<'t>, labels: Option<&[usize]>) -> Result<(Var<'t>, Var<'t>)> {
        let h = cond::with_label(self.enc_label.as_ref(), p, x, self.labels(labels))?;
        let out = self.encoder.forward(p, h)?;
        let l = self.latent;
        let mu = out.slice(1, 0, l)?;
        let logvar = out.slice(1, l, 2 * l)?.clamp(LOGVAR_MIN, LOGVAR_MAX)?;
        Ok((mu, logvar))
    }

    /// Decoder output: logits (Bernoulli) or means (Gaussian).
    pub fn decode<'t>(&self, p: &Params<'t>, z: Var<'t>, labels: Option<&[usize]>) -> Result<Var<'t>> {
        let h = cond::with_label(self.dec_label.as_ref(), p, z, self.labels(labels))?;
        self.decoder.forward(p, h)
    }
}

/// `z = μ + exp(logvar/2)·ε`.
pub fn reparameterize<'t>(mu: Var<'t>, logvar: Var<'t>, eps: &Tensor) -> Result<Var<'t>> {
    let tape = mu.tape();
    let std = logvar.scale(0.5).exp();
    mu.add(std.mul(tape.constant(eps.clone()))?)
}

/// Per-item `½·Σ (μ² + e^{logvar} − 1 − logvar)`, shape `[n]`.
pub fn gaussian_kl<'t>(mu: Var<'t>, logvar: Var<'t>) -> Result<Var<'t>> {
    if mu.shape() != logvar.shape() {
        return Err(Error::shape("gaussian_kl", format!("{:?} vs {:?}", mu.shape(), logvar.shape())));
    }
    let inner = mu.square().add(logvar.exp())?.sub(logvar)?.shift(-1.0);
    Ok(inner.sum_axis(1)?.scale(0.5))
}

/// Plain-value KL for a single latent vector.
pub fn gaussian_kl_value(mu: &[f64], logvar: &[f64]) -> f64 {
    0.5 * mu
        .iter()
        .zip(logvar)
        .map(|(&m, &lv)| m * m + lv.exp() - 1.0 - lv)
        .sum::<f64>()
}

/// Per-item reconstruction negative log-likelihood, shape `[n]`.
pub fn recon_nll<'t>(out: Var<'t>, x: &Tensor, likelihood: Likelihood) -> Result<Var<'t>> {
    if out.shape() != x.shape() {
        return Err(Error::shape("recon_nll", format!("decoder {:?} vs data {:?}", out.shape(), x.shape())));
    }
    let tape = out.tape();
    match likelihood {
        Likelihood::Bernoulli => {
            if x.data().iter().any(|&v| v != 0.0 && v != 1.0) {
                return Err(Error::domain("recon_nll", "bernoulli likelihood needs binary data"));
            }
            // softplus(l) − x·l is −log Bernoulli(x; sigmoid(l)).
            let xl = out.mul(tape.constant(x.clone()))?;
            out.softplus().sub(xl)?.sum_axis(1)
        }
        Likelihood::Gaussian => {
            let s2 = GAUSSIAN_SIGMA * GAUSSIAN_SIGMA;
            let c = x.cols() as f64 * (GAUSSIAN_SIGMA.ln() + 0.5 * (2.0 * std::f64::consts::PI).ln());
            let sq = out.sub(tape.constant(x.clone()))?.square().sum_axis(1)?;
            Ok(sq.scale(0.5 / s2).shift(c))
        }
    }
}

/// The scalar loss plus batch statistics for logging and checks.
pub struct Elbo<'t> {
    pub loss: Var<'t>,
    pub recon: f64,
    pub kl: f64,
    /// Per-item KL values.
    pub kl_items: Vec<f64>,
}

/// Mean over the batch of `recon_nll + β·KL`, one reparameterized `z` per
/// item from the supplied `ε` (shape n×L).
pub fn elbo_with<'t>(vae: &Vae, p: &Params<'t>, tape: &'t Tape, batch: &Batch, beta: f64, eps: &Tensor) -> Result<Elbo<'t>> {
    if batch.is_empty() {
        return Err(Error::contract("elbo_loss on an empty batch"));
    }
    let labels = batch.labels.as_deref();
    let (mu, logvar) = vae.encode(p, tape.constant(batch.x.clone()), labels)?;
    let z = reparameterize(mu, logvar, eps)?;
    let out = vae.decode(p, z, labels)?;
    let recon = recon_nll(out, &batch.x, vae.likelihood)?;
    let kl = gaussian_kl(mu, logvar)?;
    let loss = recon.add(kl.scale(beta))?.mean()?;
    let kl_items = kl.value().data().to_vec();
    Ok(Elbo {
        loss,
        recon: recon.value().data().iter().sum::<f64>() / batch.len() as f64,
        kl: kl_items.iter().sum::<f64>() / batch.len() as f64,
        kl_items,
    })
}

pub fn elbo_loss<'t>(vae: &Vae, p: &Params<'t>, tape: &'t Tape, batch: &Batch, beta: f64, rng: &mut Rng) -> Result<Elbo<'t>> {
    let eps = rng.gaussian_tensor(&[batch.len(), vae.latent]);
    elbo_with(vae, p, tape, batch, beta, &eps)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    pub loss: f64,
    pub recon: f64,
    pub kl: f64,
    pub kl_min: f64,
}

pub fn train_step(vae: &Vae, store: &mut ParamStore, opt: &mut Adam, batch: &Batch, rng: &mut Rng) -> Result<StepStats> {
    let tape = Tape::new();
    let p = tape.bind(store);
    let e = elbo_loss(vae, &p, &tape, batch, vae.beta, rng)?;
    let grads = tape.backward(e.loss)?.params(&p);
    opt.step(store, &grads)?;
    Ok(StepStats {
        loss: e.loss.item(),
        recon: e.recon,
        kl: e.kl,
        kl_min: e.kl_items.iter().copied().fold(f64::INFINITY, f64::min),
    })
}

/// Decodes `z ~ N(0, I)`. Bernoulli decoders return probabilities. A
/// conditional model without `label` cycles through the classes.
pub fn vae_sample(vae: &Vae, store: &ParamStore, n: usize, rng: &mut Rng, label: Option<usize>) -> Result<Tensor> {
    let z = rng.gaussian_tensor(&[n, vae.latent]);
    if n == 0 {
        return Ok(Tensor::zeros(&[0, vae.data_dim]));
    }
    let labels = match (&vae.dec_label, label) {
        (Some(e), None) => Some((0..n).map(|i| i % e.classes).collect::<Vec<_>>()),
        (_, l) => l.map(|l| vec![l; n]),
    };
    let tape = Tape::new();
    let p = tape.bind_frozen(store);
    let out = vae.decode(&p, tape.constant(z), labels.as_deref())?.tensor();
    Ok(match vae.likelihood {
        Likelihood::Bernoulli => out.map(tensor::sigmoid),
        Likelihood::Gaussian => out,
    })
}
