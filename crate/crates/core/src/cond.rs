//! Optional label conditioning shared by every family: a learned embedding
//! concatenated to the network input.

use crate::autodiff::{Params, Var};
use crate::error::{Error, Result};
use crate::nn::LabelEmbedding;
use crate::params::ParamStore;
use crate::rng::Rng;

/// Appends the label embedding (when present) to `x` along the feature axis.
pub(crate) fn with_label<'t>(
    emb: Option<&LabelEmbedding>,
    p: &Params<'t>,
    x: Var<'t>,
    labels: Option<&[usize]>,
) -> Result<Var<'t>> {
    let Some(emb) = emb else { return Ok(x) };
    let labels = labels.ok_or_else(|| Error::contract("conditional model needs labels"))?;
    let tape = x.tape();
    let e = emb.forward(p, tape, labels)?;
    tape.concat(&[x, e], 1)
}

pub(crate) fn init(emb: Option<&LabelEmbedding>, store: &mut ParamStore, rng: &mut Rng) -> Result<()> {
    emb.map_or(Ok(()), |e| e.init(store, rng))
}

pub(crate) fn check(emb: Option<&LabelEmbedding>, store: &ParamStore) -> Result<()> {
    emb.map_or(Ok(()), |e| e.check(store))
}

pub(crate) fn extra_dim(emb: Option<&LabelEmbedding>) -> usize {
    emb.map_or(0, |e| e.dim)
}
