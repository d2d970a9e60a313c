//! Bernoulli RBM with CD-k and Gibbs sampling, exact partition functions for
//! tiny models, and unadjusted Langevin sampling on analytic 2D energies.

use crate::data::eight_center;
use crate::error::{Error, Result};
use crate::par::{self, Exec};
use crate::params::ParamStore;
use crate::rng::Rng;
use crate::tensor::{log_sum_exp, sigmoid, softplus, Tensor};

pub const MAX_EXACT_VIS: usize = 16;
pub const MIXTURE_SIGMA: f64 = 0.5;

/// `W` is n_hid×n_vis, `b` the visible bias, `c` the hidden bias.
#[derive(Clone, Debug, PartialEq)]
pub struct Rbm {
    pub w: Tensor,
    pub b: Vec<f64>,
    pub c: Vec<f64>,
}

const W_NAME: &str = "rbm.w";
const B_NAME: &str = "rbm.b";
const C_NAME: &str = "rbm.c";

impl Rbm {
    pub fn zeros(n_vis: usize, n_hid: usize) -> Self {
        Rbm {
            w: Tensor::zeros(&[n_hid, n_vis]),
            b: vec![0.0; n_vis],
            c: vec![0.0; n_hid],
        }
    }

    /// Weights `N(0, std²)`, zero biases.
    pub fn random(n_vis: usize, n_hid: usize, std: f64, rng: &mut Rng) -> Self {
        let w = rng.gaussian_tensor(&[n_hid, n_vis]).map(|v| std * v);
        Rbm {
            w,
            b: vec![0.0; n_vis],
            c: vec![0.0; n_hid],
        }
    }

    pub fn n_vis(&self) -> usize {
        self.b.len()
    }

    pub fn n_hid(&self) -> usize {
        self.c.len()
    }

    pub fn to_store(&self) -> Result<ParamStore> {
        let mut s = ParamStore::new();
        s.insert(W_NAME, self.w.clone())?;
        s.insert(B_NAME, Tensor::from_vec(self.b.clone()))?;
        s.insert(C_NAME, Tensor::from_vec(self.c.clone()))?;
        Ok(s)
    }

    pub fn from_store(store: &ParamStore) -> Result<Self> {
        let w = store.get(W_NAME)?.clone();
        if w.ndim() != 2 {
            return Err(Error::shape("rbm", format!("weight shape {:?}", w.shape())));
        }
        let (h, v) = (w.rows(), w.cols());
        store.expect_shape(B_NAME, &[v])?;
        store.expect_shape(C_NAME, &[h])?;
        Ok(Rbm {
            w,
            b: store.get(B_NAME)?.data().to_vec(),
            c: store.get(C_NAME)?.data().to_vec(),
        })
    }

    fn check_vis(&self, v: &Tensor, op: &'static str) -> Result<()> {
        if v.ndim() != 2 || v.cols() != self.n_vis() {
            return Err(Error::shape(op, format!("visible batch {:?} for {} units", v.shape(), self.n_vis())));
        }
        Ok(())
    }

    fn hid_pre(&self, v: &[f64], j: usize) -> f64 {
        let row = &self.w.data()[j * self.n_vis()..(j + 1) * self.n_vis()];
        self.c[j] + row.iter().zip(v).map(|(w, x)| w * x).sum::<f64>()
    }

    fn vis_pre(&self, h: &[f64], i: usize) -> f64 {
        let nv = self.n_vis();
        self.b[i] + h.iter().enumerate().map(|(j, &hj)| hj * self.w.data()[j * nv + i]).sum::<f64>()
    }

    /// `E(v, h) = −b·v − c·h − hᵀWv` for one configuration.
    pub fn energy(&self, v: &[f64], h: &[f64]) -> f64 {
        let bv: f64 = self.b.iter().zip(v).map(|(a, b)| a * b).sum();
        let ch: f64 = self.c.iter().zip(h).map(|(a, b)| a * b).sum();
        let hwv: f64 = (0..self.n_hid()).map(|j| h[j] * (self.hid_pre(v, j) - self.c[j])).sum();
        -bv - ch - hwv
    }

    /// `F(v) = −b·v − Σ_j softplus(c_j + W_j·v)` for one configuration.
    pub fn free_energy_one(&self, v: &[f64]) -> f64 {
        let bv: f64 = self.b.iter().zip(v).map(|(a, b)| a * b).sum();
        -bv - (0..self.n_hid()).map(|j| softplus(self.hid_pre(v, j))).sum::<f64>()
    }
}

/// `σ(c + W·v)` per row, n×n_hid.
pub fn rbm_h_probs(rbm: &Rbm, v: &Tensor) -> Result<Tensor> {
    rbm.check_vis(v, "rbm_h_probs")?;
    let nh = rbm.n_hid();
    let mut out = Vec::with_capacity(v.rows() * nh);
    for r in 0..v.rows() {
        let row = v.row(r);
        out.extend((0..nh).map(|j| sigmoid(rbm.hid_pre(row, j))));
    }
    Tensor::new(vec![v.rows(), nh], out)
}

/// `σ(b + Wᵀ·h)` per row, n×n_vis.
pub fn rbm_v_probs(rbm: &Rbm, h: &Tensor) -> Result<Tensor> {
    if h.ndim() != 2 || h.cols() != rbm.n_hid() {
        return Err(Error::shape("rbm_v_probs", format!("hidden batch {:?} for {} units", h.shape(), rbm.n_hid())));
    }
    let nv = rbm.n_vis();
    let mut out = Vec::with_capacity(h.rows() * nv);
    for r in 0..h.rows() {
        let row = h.row(r);
        out.extend((0..nv).map(|i| sigmoid(rbm.vis_pre(row, i))));
    }
    Tensor::new(vec![h.rows(), nv], out)
}

/// Free energy of every row of `v`.
pub fn rbm_free_energy(rbm: &Rbm, v: &Tensor) -> Result<Vec<f64>> {
    rbm.check_vis(v, "rbm_free_energy")?;
    Ok((0..v.rows()).map(|r| rbm.free_energy_one(v.row(r))).collect())
}

fn bernoulli_tensor(p: &Tensor, rng: &mut Rng) -> Tensor {
    let data = p.data().iter().map(|&q| if rng.uniform() < q { 1.0 } else { 0.0 }).collect();
    Tensor::new(p.shape().to_vec(), data).expect("same shape")
}

/// `h ~ Bern(p(h|v))` then `v' ~ Bern(p(v|h))`.
pub fn gibbs_step(rbm: &Rbm, v: &Tensor, rng: &mut Rng) -> Result<Tensor> {
    let h = bernoulli_tensor(&rbm_h_probs(rbm, v)?, rng);
    Ok(bernoulli_tensor(&rbm_v_probs(rbm, &h)?, rng))
}

fn check_binary(v: &Tensor) -> Result<()> {
    if v.data().iter().any(|&x| x != 0.0 && x != 1.0) {
        return Err(Error::domain("rbm", "visible units must be 0 or 1"));
    }
    Ok(())
}

/// One CD-k step in place. Statistics use hidden probabilities at the data
/// and at the k-step reconstruction; the chain itself is fully sampled.
pub fn cd_k_update(rbm: &mut Rbm, batch: &Tensor, k: usize, lr: f64, rng: &mut Rng) -> Result<()> {
    if k == 0 {
        return Err(Error::contract("CD-k needs k >= 1"));
    }
    rbm.check_vis(batch, "cd_k_update")?;
    check_binary(batch)?;
    let n = batch.rows();
    if n == 0 {
        return Err(Error::contract("CD-k on an empty batch"));
    }
    let ph0 = rbm_h_probs(rbm, batch)?;
    let mut h = bernoulli_tensor(&ph0, rng);
    let mut vk = bernoulli_tensor(&rbm_v_probs(rbm, &h)?, rng);
    for _ in 1..k {
        h = bernoulli_tensor(&rbm_h_probs(rbm, &vk)?, rng);
        vk = bernoulli_tensor(&rbm_v_probs(rbm, &h)?, rng);
    }
    let phk = rbm_h_probs(rbm, &vk)?;
    let (nv, nh) = (rbm.n_vis(), rbm.n_hid());
    let scale = lr / n as f64;
    let mut dw = vec![0.0; nh * nv];
    let mut db = vec![0.0; nv];
    let mut dc = vec![0.0; nh];
    for r in 0..n {
        let (v0, vr) = (batch.row(r), vk.row(r));
        let (p0, pr) = (ph0.row(r), phk.row(r));
        for j in 0..nh {
            for i in 0..nv {
                dw[j * nv + i] += p0[j] * v0[i] - pr[j] * vr[i];
            }
            dc[j] += p0[j] - pr[j];
        }
        for i in 0..nv {
            db[i] += v0[i] - vr[i];
        }
    }
    for (w, d) in rbm.w.data_mut().iter_mut().zip(&dw) {
        *w += scale * d;
    }
    for (b, d) in rbm.b.iter_mut().zip(&db) {
        *b += scale * d;
    }
    for (c, d) in rbm.c.iter_mut().zip(&dc) {
        *c += scale * d;
    }
    Ok(())
}

/// Bits of `k` as a visible configuration, least significant first.
pub fn bits(k: usize, n: usize) -> Vec<f64> {
    (0..n).map(|i| ((k >> i) & 1) as f64).collect()
}

/// `ln Σ_v e^{−F(v)}` by enumeration of all visible states.
pub fn rbm_exact_logz(rbm: &Rbm) -> Result<f64> {
    let nv = rbm.n_vis();
    if nv > MAX_EXACT_VIS {
        return Err(Error::contract(format!("exact ln Z limited to {MAX_EXACT_VIS} visible units, got {nv}")));
    }
    let neg_f: Vec<f64> = (0..1usize << nv).map(|k| -rbm.free_energy_one(&bits(k, nv))).collect();
    Ok(log_sum_exp(&neg_f))
}

/// Exact mean log-likelihood of the rows of `data`.
pub fn rbm_log_likelihood(rbm: &Rbm, data: &Tensor) -> Result<f64> {
    let logz = rbm_exact_logz(rbm)?;
    let f = rbm_free_energy(rbm, data)?;
    Ok(f.iter().map(|f| -f - logz).sum::<f64>() / f.len().max(1) as f64)
}

/// Runs `n` Gibbs chains from uniform random visibles and returns the final
/// states.
pub fn gibbs_sample(rbm: &Rbm, n: usize, steps: usize, rng: &mut Rng) -> Result<Tensor> {
    let mut v = bernoulli_tensor(&Tensor::full(&[n, rbm.n_vis()], 0.5), rng);
    for _ in 0..steps {
        v = gibbs_step(rbm, &v, rng)?;
    }
    Ok(v)
}

/// Closed-form 2D energies with known stationary laws.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Energy {
    /// `‖x‖²/2`.
    StdGaussian,
    /// `−ln Σ_k exp(−‖x−μ_k‖²/(2σ²))` over the eight-gaussians centres.
    MixtureOf8 { sigma: f64 },
}

impl Energy {
    pub fn name(&self) -> &'static str {
        match self {
            Energy::StdGaussian => "std-gaussian",
            Energy::MixtureOf8 { .. } => "mixture-of-8",
        }
    }

    pub fn dim(&self) -> usize {
        2
    }

    fn mixture_terms(x: &[f64], sigma: f64) -> [f64; 8] {
        std::array::from_fn(|k| {
            let c = eight_center(k);
            let d2 = (x[0] - c[0]).powi(2) + (x[1] - c[1]).powi(2);
            -d2 / (2.0 * sigma * sigma)
        })
    }

    pub fn energy(&self, x: &[f64]) -> f64 {
        match *self {
            Energy::StdGaussian => 0.5 * x.iter().map(|v| v * v).sum::<f64>(),
            Energy::MixtureOf8 { sigma } => -log_sum_exp(&Self::mixture_terms(x, sigma)),
        }
    }

    pub fn grad(&self, x: &[f64]) -> Vec<f64> {
        match *self {
            Energy::StdGaussian => x.to_vec(),
            Energy::MixtureOf8 { sigma } => {
                let terms = Self::mixture_terms(x, sigma);
                let lse = log_sum_exp(&terms);
                let mut g = vec![0.0; 2];
                for (k, t) in terms.iter().enumerate() {
                    let w = (t - lse).exp();
                    let c = eight_center(k);
                    g[0] += w * (x[0] - c[0]) / (sigma * sigma);
                    g[1] += w * (x[1] - c[1]) / (sigma * sigma);
                }
                g
            }
        }
    }
}

impl std::str::FromStr for Energy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "std-gaussian" => Ok(Energy::StdGaussian),
            "mixture-of-8" => Ok(Energy::MixtureOf8 { sigma: MIXTURE_SIGMA }),
            o => Err(Error::Usage(format!("unknown energy `{o}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LangevinConfig {
    pub steps: usize,
    pub eta: f64,
    /// Chains start from `N(0, init_std²·I)`.
    pub init_std: f64,
}

impl Default for LangevinConfig {
    fn default() -> Self {
        LangevinConfig {
            steps: 500,
            eta: 0.05,
            init_std: 2.0,
        }
    }
}

/// `x − (η/2)·∇E(x) + √η·z`.
pub fn langevin_step(energy: &Energy, x: &[f64], eta: f64, z: &[f64]) -> Vec<f64> {
    let g = energy.grad(x);
    let s = eta.sqrt();
    x.iter().zip(&g).zip(z).map(|((&x, &g), &z)| x - 0.5 * eta * g + s * z).collect()
}

/// Unadjusted Langevin: `n` independent chains, one RNG stream each.
pub fn langevin_sample(energy: &Energy, cfg: &LangevinConfig, n: usize, rng: &mut Rng, exec: Exec) -> Result<Tensor> {
    if !(cfg.eta > 0.0 && cfg.eta.is_finite()) {
        return Err(Error::contract(format!("Langevin step size {} must be positive", cfg.eta)));
    }
    let d = energy.dim();
    let chains = par::map_chains(exec, n, rng, |_, r| {
        let mut x: Vec<f64> = (0..d).map(|_| cfg.init_std * r.gaussian()).collect();
        let mut z = vec![0.0; d];
        for _ in 0..cfg.steps {
            z.iter_mut().for_each(|v| *v = r.gaussian());
            x = langevin_step(energy, &x, cfg.eta, &z);
        }
        x
    });
    Tensor::new(vec![n, d], chains.concat())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_rbm_probabilities() {
        let r = Rbm::zeros(3, 2);
        let v = Tensor::new(vec![1, 3], vec![1.0, 0.0, 1.0]).unwrap();
        assert!(rbm_h_probs(&r, &v).unwrap().data().iter().all(|&p| p == 0.5));
        assert!(rbm_v_probs(&r, &Tensor::ones(&[1, 2])).unwrap().data().iter().all(|&p| p == 0.5));
        let mut r = Rbm::zeros(3, 2);
        r.c[0] = 10.0;
        let p = rbm_h_probs(&r, &v).unwrap();
        assert!((p.data()[0] - 0.9999546).abs() < 1e-7);
        assert!(rbm_h_probs(&r, &Tensor::ones(&[1, 4])).is_err());
    }

    #[test]
    fn free_energy_examples() {
        let r = Rbm::zeros(3, 2);
        for k in 0..8 {
            let f = r.free_energy_one(&bits(k, 3));
            assert!((f + 2.0 * 2f64.ln()).abs() < 1e-15);
        }
        let mut r = Rbm::zeros(3, 2);
        r.b[0] = 1.0;
        let f = r.free_energy_one(&[1.0, 0.0, 0.0]);
        assert!((f - (-1.0 - 2.0 * 2f64.ln())).abs() < 1e-15);
    }

    #[test]
    fn logz_examples() {
        let r = Rbm::zeros(3, 2);
        let lz = rbm_exact_logz(&r).unwrap();
        assert!((lz - 5.0 * 2f64.ln()).abs() < 1e-14);
        let data = Tensor::new(vec![1, 3], vec![1.0, 1.0, 0.0]).unwrap();
        assert!((rbm_log_likelihood(&r, &data).unwrap() + 3.0 * 2f64.ln()).abs() < 1e-14);
        assert!(rbm_exact_logz(&Rbm::zeros(17, 1)).is_err());
    }

    #[test]
    fn store_round_trip() {
        let r = Rbm::random(4, 3, 0.5, &mut Rng::seed_from(1));
        assert_eq!(Rbm::from_store(&r.to_store().unwrap()).unwrap(), r);
    }

    #[test]
    fn saturated_visible_bias() {
        let mut r = Rbm::zeros(2, 2);
        r.b[0] = 20.0;
        let mut rng = Rng::seed_from(2);
        let v = gibbs_sample(&r, 2000, 1, &mut rng).unwrap();
        let ones = (0..2000).filter(|&i| v.row(i)[0] == 1.0).count();
        assert!(ones as f64 / 2000.0 > 0.999);
    }

    #[test]
    fn saturated_chain_gives_zero_update() {
        let mut r = Rbm::zeros(2, 2);
        r.b = vec![40.0, -40.0];
        r.c = vec![40.0, -40.0];
        let before = r.clone();
        let data = Tensor::new(vec![3, 2], vec![1.0, 0.0, 1.0, 0.0, 1.0, 0.0]).unwrap();
        cd_k_update(&mut r, &data, 1, 0.5, &mut Rng::seed_from(3)).unwrap();
        assert_eq!(r, before);
        assert!(cd_k_update(&mut r, &data, 0, 0.5, &mut Rng::seed_from(3)).is_err());
        let bad = Tensor::full(&[1, 2], 0.5);
        assert!(cd_k_update(&mut r, &bad, 1, 0.5, &mut Rng::seed_from(3)).is_err());
    }

    #[test]
    fn langevin_formula() {
        let x = langevin_step(&Energy::StdGaussian, &[1.0], 0.1, &[0.0]);
        assert!((x[0] - 0.95).abs() < 1e-15);
    }

    #[test]
    fn mixture_gradient_matches_fd() {
        let e = Energy::MixtureOf8 { sigma: MIXTURE_SIGMA };
        let mut rng = Rng::seed_from(4);
        for _ in 0..20 {
            let x = [3.0 * rng.gaussian(), 3.0 * rng.gaussian()];
            let g = e.grad(&x);
            for i in 0..2 {
                let h = 1e-6;
                let (mut a, mut b) = (x, x);
                a[i] += h;
                b[i] -= h;
                let fd = (e.energy(&a) - e.energy(&b)) / (2.0 * h);
                assert!((fd - g[i]).abs() < 1e-5 * (1.0 + g[i].abs()), "{fd} vs {}", g[i]);
            }
        }
        assert!(e.energy(&[2.0, 0.0]) < e.energy(&[0.0, 0.0]));
    }

    #[test]
    fn langevin_rejects_bad_eta() {
        let cfg = LangevinConfig { eta: 0.0, ..Default::default() };
        assert!(langevin_sample(&Energy::StdGaussian, &cfg, 3, &mut Rng::seed_from(0), Exec::Sequential).is_err());
    }
}
