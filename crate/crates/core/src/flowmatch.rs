//! Conditional flow matching with the linear interpolant, and Euler/Heun ODE
//! sampling from noise at `t = 0` to data at `t = 1`.

use crate::autodiff::{Params, Tape, Var};
use crate::cond;
use crate::data::Batch;
use crate::diffusion::mlp_dims;
use crate::error::{Error, Result};
use crate::nn::{self, Activation, Adam, LabelEmbedding, Mlp, OutputActivation};
use crate::params::ParamStore;
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const TIME_DIM: usize = 16;
pub const DEFAULT_ODE_STEPS: usize = 100;

#[derive(Clone, Debug, PartialEq)]
pub struct VelocityModel {
    pub net: Mlp,
    pub label: Option<LabelEmbedding>,
    pub data_dim: usize,
}

impl VelocityModel {
    pub fn new(data_dim: usize, hidden: usize, layers: usize, classes: Option<usize>) -> Result<Self> {
        let label = classes.map(|k| LabelEmbedding::new("vel.label", k, nn::DEFAULT_LABEL_DIM));
        let input = data_dim + TIME_DIM + cond::extra_dim(label.as_ref());
        let net = Mlp::new("vel.net", &mlp_dims(input, hidden, layers, data_dim), Activation::Relu, OutputActivation::None)?;
        Ok(VelocityModel { net, label, data_dim })
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut Rng) -> Result<()> {
        self.net.init(store, rng)?;
        cond::init(self.label.as_ref(), store, rng)
    }

    pub fn check(&self, store: &ParamStore) -> Result<()> {
        self.net.check(store)?;
        cond::check(self.label.as_ref(), store)
    }

    pub fn forward<'t>(&self, p: &Params<'t>, x: Var<'t>, ts: &[f64], labels: Option<&[usize]>) -> Result<Var<'t>> {
        let tape = x.tape();
        let scaled: Vec<f64> = ts.iter().map(|t| t * 1000.0).collect();
        let temb = tape.constant(nn::time_embed_batch(&scaled, TIME_DIM)?);
        let h = cond::with_label(self.label.as_ref(), p, tape.concat(&[x, temb], 1)?, labels)?;
        self.net.forward(p, h)
    }
}

/// Anything that yields a velocity `v(x, t)`.
pub trait VelocityField {
    fn velocity(&self, x: &Tensor, t: f64, labels: Option<&[usize]>) -> Result<Tensor>;
}

pub struct Trained<'a> {
    pub model: &'a VelocityModel,
    pub params: &'a ParamStore,
}

impl VelocityField for Trained<'_> {
    fn velocity(&self, x: &Tensor, t: f64, labels: Option<&[usize]>) -> Result<Tensor> {
        let tape = Tape::new();
        let p = tape.bind_frozen(self.params);
        let ts = vec![t; x.rows()];
        Ok(self.model.forward(&p, tape.constant(x.clone()), &ts, labels)?.tensor())
    }
}

/// `v = (c − x)/(1 − t)`: the exact field transporting everything to `c`.
pub struct PointMassOracle {
    pub target: Vec<f64>,
}

impl VelocityField for PointMassOracle {
    fn velocity(&self, x: &Tensor, t: f64, _labels: Option<&[usize]>) -> Result<Tensor> {
        if x.cols() != self.target.len() {
            return Err(Error::shape("point_mass", format!("x has {} cols, target {}", x.cols(), self.target.len())));
        }
        let d = self.target.len();
        let data = x
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| (self.target[i % d] - v) / (1.0 - t))
            .collect();
        Tensor::new(x.shape().to_vec(), data)
    }
}

/// Any closure `(x, t) -> v`.
pub struct FnField<F>(pub F);

impl<F: Fn(&Tensor, f64) -> Tensor> VelocityField for FnField<F> {
    fn velocity(&self, x: &Tensor, t: f64, _labels: Option<&[usize]>) -> Result<Tensor> {
        Ok((self.0)(x, t))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OdeMethod {
    Euler,
    Heun,
}

impl std::str::FromStr for OdeMethod {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "euler" => Ok(OdeMethod::Euler),
            "heun" => Ok(OdeMethod::Heun),
            o => Err(Error::Usage(format!("unknown ODE method `{o}`"))),
        }
    }
}

impl OdeMethod {
    pub fn name(self) -> &'static str {
        match self {
            OdeMethod::Euler => "euler",
            OdeMethod::Heun => "heun",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct OdeConfig {
    pub steps: usize,
    pub method: OdeMethod,
}

impl Default for OdeConfig {
    fn default() -> Self {
        OdeConfig {
            steps: DEFAULT_ODE_STEPS,
            method: OdeMethod::Euler,
        }
    }
}

/// `x_t = (1−t)·x0 + t·x1` and `v = x1 − x0`.
pub fn interpolate(x0: &Tensor, x1: &Tensor, t: f64) -> Result<(Tensor, Tensor)> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::contract(format!("interpolation time {t} outside [0, 1]")));
    }
    interpolate_rows(x0, x1, &vec![t; x0.rows()])
}

pub fn interpolate_rows(x0: &Tensor, x1: &Tensor, ts: &[f64]) -> Result<(Tensor, Tensor)> {
    if x0.shape() != x1.shape() || ts.len() != x0.rows() {
        return Err(Error::shape("interpolate", format!("x0 {:?}, x1 {:?}, {} times", x0.shape(), x1.shape(), ts.len())));
    }
    let d = x0.cols();
    let mut xt = Vec::with_capacity(x0.len());
    let mut v = Vec::with_capacity(x0.len());
    for (k, (&a, &b)) in x0.data().iter().zip(x1.data()).enumerate() {
        let t = ts[k / d.max(1)];
        xt.push((1.0 - t) * a + t * b);
        v.push(b - a);
    }
    Ok((Tensor::new(x0.shape().to_vec(), xt)?, Tensor::new(x0.shape().to_vec(), v)?))
}

/// One training draw: noise endpoints and per-row times.
#[derive(Clone, Debug)]
pub struct FlowDraw {
    pub x0: Tensor,
    pub ts: Vec<f64>,
}

pub fn draw_flow(batch: &Batch, rng: &mut Rng) -> FlowDraw {
    let x0 = rng.gaussian_tensor(&[batch.len(), batch.dim()]);
    let ts = (0..batch.len()).map(|_| rng.uniform()).collect();
    FlowDraw { x0, ts }
}

pub fn fm_loss_with<'t>(model: &VelocityModel, p: &Params<'t>, tape: &'t Tape, batch: &Batch, draw: &FlowDraw) -> Result<Var<'t>> {
    if batch.is_empty() {
        return Err(Error::contract("fm_loss on an empty batch"));
    }
    let (xt, v) = interpolate_rows(&draw.x0, &batch.x, &draw.ts)?;
    let labels = if model.label.is_some() { batch.labels.as_deref() } else { None };
    let pred = model.forward(p, tape.constant(xt), &draw.ts, labels)?;
    pred.sub(tape.constant(v))?.square().mean()
}

pub fn fm_loss<'t>(model: &VelocityModel, p: &Params<'t>, tape: &'t Tape, batch: &Batch, rng: &mut Rng) -> Result<Var<'t>> {
    let draw = draw_flow(batch, rng);
    fm_loss_with(model, p, tape, batch, &draw)
}

pub fn train_step(model: &VelocityModel, store: &mut ParamStore, opt: &mut Adam, batch: &Batch, rng: &mut Rng) -> Result<f64> {
    let tape = Tape::new();
    let p = tape.bind(store);
    let loss = fm_loss(model, &p, &tape, batch, rng)?;
    let grads = tape.backward(loss)?.params(&p);
    opt.step(store, &grads)?;
    Ok(loss.item())
}

fn axpy(x: &Tensor, a: f64, v: &Tensor) -> Tensor {
    let data = x.data().iter().zip(v.data()).map(|(&x, &v)| x + a * v).collect();
    Tensor::new(x.shape().to_vec(), data).expect("same shape")
}

/// Integrates from `x(0)` over the grid `{0, Δt, …, 1−Δt}`. Heun's final step
/// falls back to Euler so `t = 1` is never evaluated.
pub fn integrate(field: &dyn VelocityField, x0: Tensor, cfg: &OdeConfig, labels: Option<&[usize]>) -> Result<Tensor> {
    if cfg.steps == 0 {
        return Err(Error::contract("ODE needs at least one step"));
    }
    let n = cfg.steps;
    let dt = 1.0 / n as f64;
    let mut x = x0;
    if x.is_empty() {
        return Ok(x);
    }
    for k in 0..n {
        let t = k as f64 / n as f64;
        let v = field.velocity(&x, t, labels)?;
        if v.shape() != x.shape() {
            return Err(Error::shape("ode_sample", format!("velocity {:?} for state {:?}", v.shape(), x.shape())));
        }
        x = match cfg.method {
            OdeMethod::Heun if k + 1 < n => {
                let pred = axpy(&x, dt, &v);
                let v2 = field.velocity(&pred, (k + 1) as f64 / n as f64, labels)?;
                let avg = axpy(&v, 1.0, &v2).map(|s| 0.5 * s);
                axpy(&x, dt, &avg)
            }
            _ => axpy(&x, dt, &v),
        };
    }
    Ok(x)
}

/// `x(0) ~ N(0, I)` then [`integrate`].
pub fn ode_sample(field: &dyn VelocityField, n: usize, dim: usize, cfg: &OdeConfig, rng: &mut Rng, label: Option<usize>) -> Result<Tensor> {
    let x0 = rng.gaussian_tensor(&[n, dim]);
    let labels = label.map(|l| vec![l; n]);
    integrate(field, x0, cfg, labels.as_deref())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn interpolate_examples() {
        let z = Tensor::zeros(&[1, 1]);
        let o = Tensor::ones(&[1, 1]);
        let (xt, v) = interpolate(&z, &o, 0.3).unwrap();
        assert!((xt.item() - 0.3).abs() < 1e-15);
        assert_eq!(v.item(), 1.0);
        assert_eq!(interpolate(&z, &o, 0.0).unwrap().0, z);
        assert_eq!(interpolate(&z, &o, 1.0).unwrap().0, o);
        assert_eq!(interpolate(&z, &o, 0.9).unwrap().1, v);
        assert!(interpolate(&z, &o, 1.5).is_err());
        assert!(interpolate(&z, &o, -0.1).is_err());
    }

    #[test]
    fn zero_and_constant_fields() {
        let mut rng = Rng::seed_from(0);
        let x0 = rng.gaussian_tensor(&[5, 2]);
        for method in [OdeMethod::Euler, OdeMethod::Heun] {
            let cfg = OdeConfig { steps: 7, method };
            let zero = FnField(|x: &Tensor, _t: f64| Tensor::zeros(x.shape()));
            assert_eq!(integrate(&zero, x0.clone(), &cfg, None).unwrap(), x0);
            let c = FnField(|x: &Tensor, _t: f64| Tensor::full(x.shape(), 0.5));
            let out = integrate(&c, x0.clone(), &cfg, None).unwrap();
            for (a, b) in out.data().iter().zip(x0.data()) {
                assert!((a - (b + 0.5)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn point_mass_exact_for_any_n() {
        let mut rng = Rng::seed_from(1);
        let oracle = PointMassOracle { target: vec![1.5, -2.0] };
        for n in [1, 2, 3, 10, 100] {
            let out = ode_sample(&oracle, 50, 2, &OdeConfig { steps: n, method: OdeMethod::Euler }, &mut rng, None).unwrap();
            for (i, &v) in out.data().iter().enumerate() {
                assert!((v - oracle.target[i % 2]).abs() < 1e-12, "n={n}");
            }
        }
    }

    #[test]
    fn zero_steps_rejected() {
        let f = FnField(|x: &Tensor, _t: f64| x.clone());
        let cfg = OdeConfig { steps: 0, method: OdeMethod::Euler };
        assert!(integrate(&f, Tensor::ones(&[1, 1]), &cfg, None).is_err());
    }

    #[test]
    fn oracle_loss_zero() {
        let mut rng = Rng::seed_from(2);
        let batch = Batch { x: rng.gaussian_tensor(&[8, 2]), labels: None };
        let draw = draw_flow(&batch, &mut rng);
        let (_, v) = interpolate_rows(&draw.x0, &batch.x, &draw.ts).unwrap();
        let tape = Tape::new();
        let l = tape.constant(v.clone()).sub(tape.constant(v)).unwrap().square().mean().unwrap();
        assert_eq!(l.item(), 0.0);
    }
}
