//! A compact generative-modeling toolkit over a shared `f64` autodiff tape.
//!
//! One representative method per family, all trained and sampled through the
//! same data, checkpoint and CLI conventions:
//!
//! | module | method |
//! |---|---|
//! | [`diffusion`] | DDPM training, ancestral and DDIM sampling, classifier-free and classifier guidance |
//! | [`flowmatch`] | conditional flow matching with the linear interpolant, Euler/Heun ODE sampling |
//! | [`vae`] | VAE / β-VAE with optional label conditioning |
//! | [`nflow`] | RealNVP affine coupling flow with exact `log_prob` |
//! | [`gan`] | non-saturating GAN and WGAN with a finite-difference gradient penalty |
//! | [`ebm`] | Bernoulli RBM with CD-k and Gibbs sampling; Langevin on analytic energies |

pub mod autodiff;
pub mod cli;
pub mod data;
pub mod diffusion;
pub mod ebm;
pub mod error;
pub mod flowmatch;
pub mod gan;
pub mod nflow;
pub mod nn;
pub mod par;
pub mod params;
pub mod persist;
pub mod rng;
pub mod tensor;
pub mod vae;

mod cond;

pub use autodiff::{fd_check, GradMap, Params, Tape, Var};
pub use error::{Error, Result};
pub use params::ParamStore;
pub use rng::Rng;
pub use tensor::Tensor;
