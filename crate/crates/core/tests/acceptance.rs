//! End-to-end acceptance suite. Prints one PASS/FAIL line per criterion and
//! exits nonzero if any fails. Pass criterion numbers as arguments to run a
//! subset, e.g. `cargo test --test acceptance -- 3 5`.

use std::time::Instant;

use std::path::{Path, PathBuf};

use venom::data::{self, make_toy_batch, nearest_center, Batch, Toy, ToySpec};
use venom::diffusion::{self, EpsModel, Guidance, NoiseDraw, NoiseSchedule, NoisyClassifier, Trained, UnitGaussianOracle};
use venom::ebm::{self, Energy, LangevinConfig, Rbm};
use venom::flowmatch::{self, OdeConfig, OdeMethod, PointMassOracle, VelocityModel};
use venom::gan::{self, Critic, Gan, GanConfig, GanVariant, Generator};
use venom::nflow::{self, CouplingLayer, RealNvp};
use venom::nn::{cross_entropy, Adam, AdamConfig, OutputActivation};
use venom::par::Exec;
use venom::persist;
use venom::vae::{self, Likelihood, Vae, VaeConfig};
use venom::{fd_check, ParamStore, Params, Rng, Tape, Tensor, Var};

struct Outcome {
    pass: bool,
    detail: String,
}

fn check(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn all(parts: Vec<Outcome>) -> Outcome {
    let pass = parts.iter().all(|o| o.pass);
    let detail = parts
        .iter()
        .map(|o| format!("{}{}", if o.pass { "" } else { "[x] " }, o.detail))
        .collect::<Vec<_>>()
        .join("; ");
    Outcome { pass, detail }
}

fn mean_var(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    (m, v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n)
}

/// Modes holding at least 2% of samples, and the fraction within 0.5 of a
/// centre.
fn coverage(samples: &Tensor) -> (usize, f64) {
    let n = samples.rows();
    let mut counts = [0usize; 8];
    let mut near = 0;
    for r in 0..n {
        let (k, d) = nearest_center(samples.row(r));
        if d < 0.5 {
            counts[k] += 1;
            near += 1;
        }
    }
    let modes = counts.iter().filter(|&&c| c as f64 >= 0.02 * n as f64).count();
    (modes, near as f64 / n as f64)
}

fn eight() -> ToySpec {
    ToySpec::new(Toy::EightGaussians)
}

fn adam(lr: f64) -> Adam {
    Adam::new(AdamConfig { lr, ..AdamConfig::default() })
}

type Loss = for<'a> fn(&'a Tape, &Params<'a>) -> venom::Result<Var<'a>>;

/// Weighted sum `Σ wᵢ·yᵢ` with fixed pseudo-random weights so every output
/// element gets a distinct cotangent.
fn probe<'a>(tape: &'a Tape, y: Var<'a>) -> venom::Result<Var<'a>> {
    let shape = y.shape();
    let n: usize = shape.iter().product();
    let w: Vec<f64> = (0..n).map(|i| 0.5 + ((i * 7919) % 13) as f64 / 13.0 * if i % 3 == 0 { -1.0 } else { 1.0 }).collect();
    Ok(y.mul(tape.constant(Tensor::new(shape, w)?))?.sum())
}

fn op_store(seed: u64, positive: bool) -> ParamStore {
    let mut rng = Rng::seed_from(seed);
    let mut s = ParamStore::new();
    let pick = |rng: &mut Rng| {
        let v = 0.3 + 1.2 * rng.uniform();
        if positive || rng.uniform() < 0.5 { v } else { -v }
    };
    s.insert("a", Tensor::new(vec![3, 4], (0..12).map(|_| pick(&mut rng)).collect()).unwrap()).unwrap();
    s.insert("b", Tensor::new(vec![4, 2], (0..8).map(|_| pick(&mut rng)).collect()).unwrap()).unwrap();
    s.insert("c", Tensor::new(vec![3, 4], (0..12).map(|_| pick(&mut rng)).collect()).unwrap()).unwrap();
    s.insert("r", Tensor::new(vec![4], (0..4).map(|_| pick(&mut rng)).collect()).unwrap()).unwrap();
    s
}

fn op_cases() -> Vec<(&'static str, bool, Loss)> {
    vec![
        ("matmul", false, |t, p| probe(t, p.get("a")?.matmul(p.get("b")?)?)),
        ("transpose", false, |t, p| probe(t, p.get("a")?.transpose()?)),
        ("add", false, |t, p| probe(t, p.get("a")?.add(p.get("c")?)?)),
        ("add broadcast", false, |t, p| probe(t, p.get("a")?.add(p.get("r")?)?)),
        ("sub", false, |t, p| probe(t, p.get("a")?.sub(p.get("c")?)?)),
        ("mul", false, |t, p| probe(t, p.get("a")?.mul(p.get("c")?)?)),
        ("mul broadcast", false, |t, p| probe(t, p.get("a")?.mul(p.get("r")?)?)),
        ("div", false, |t, p| probe(t, p.get("a")?.div(p.get("c")?)?)),
        ("div broadcast", false, |t, p| probe(t, p.get("a")?.div(p.get("r")?)?)),
        ("neg", false, |t, p| probe(t, p.get("a")?.neg())),
        ("exp", false, |t, p| probe(t, p.get("a")?.exp())),
        ("log", true, |t, p| probe(t, p.get("a")?.log()?)),
        ("tanh", false, |t, p| probe(t, p.get("a")?.tanh())),
        ("sigmoid", false, |t, p| probe(t, p.get("a")?.sigmoid())),
        ("relu", false, |t, p| probe(t, p.get("a")?.relu())),
        ("softplus", false, |t, p| probe(t, p.get("a")?.softplus())),
        ("square", false, |t, p| probe(t, p.get("a")?.square())),
        ("sqrt", true, |t, p| probe(t, p.get("a")?.sqrt()?)),
        ("clamp", false, |t, p| probe(t, p.get("a")?.clamp(-1.0, 1.0)?)),
        ("sum", false, |t, p| probe(t, p.get("a")?.square().sum())),
        ("sum_axis 0", false, |t, p| probe(t, p.get("a")?.sum_axis(0)?)),
        ("sum_axis 1", false, |t, p| probe(t, p.get("a")?.sum_axis(1)?)),
        ("mean", false, |t, p| probe(t, p.get("a")?.square().mean()?)),
        ("mean_axis 0", false, |t, p| probe(t, p.get("a")?.mean_axis(0)?)),
        ("mean_axis 1", false, |t, p| probe(t, p.get("a")?.mean_axis(1)?)),
        ("concat 0", false, |t, p| probe(t, t.concat(&[p.get("a")?, p.get("c")?], 0)?)),
        ("concat 1", false, |t, p| probe(t, t.concat(&[p.get("a")?, p.get("c")?], 1)?)),
        ("slice", false, |t, p| probe(t, p.get("a")?.slice(1, 1, 3)?)),
        ("broadcast_to", false, |t, p| probe(t, p.get("r")?.broadcast_to(&[3, 4])?)),
        ("scale", false, |t, p| probe(t, p.get("a")?.scale(-2.5))),
        ("shift", false, |t, p| probe(t, p.get("a")?.shift(0.7).square())),
        ("cross_entropy", false, |_, p| cross_entropy(p.get("a")?, &[0, 3, 1])),
    ]
}

fn c1_autodiff() -> Outcome {
    let h = 1e-5;
    let mut worst = (0.0f64, "");
    let mut parts = Vec::new();
    for (name, positive, f) in op_cases() {
        for seed in 0..3 {
            let e = fd_check(f, &op_store(seed, positive), h).unwrap();
            if e > worst.0 {
                worst = (e, name);
            }
            if e >= 1e-6 {
                parts.push(check(false, format!("{name} seed {seed}: {e:.2e}")));
            }
        }
    }
    parts.push(check(worst.0 < 1e-6, format!("{} ops, worst {:.2e} ({})", op_cases().len(), worst.0, worst.1)));

    let mut rng = Rng::seed_from(10);
    let batch = make_toy_batch(&eight(), 6, &mut rng).unwrap();
    for (lik, x) in [(Likelihood::Gaussian, batch.x.clone()), (Likelihood::Bernoulli, batch.x.map(|v| (v > 0.0) as u8 as f64))] {
        let cfg = VaeConfig { beta: 1.0, latent: 2, conditional: false };
        let model = Vae::new(2, 6, 2, &cfg, lik, None).unwrap();
        let mut store = ParamStore::new();
        model.init(&mut store, &mut rng).unwrap();
        let eps = rng.gaussian_tensor(&[6, 2]);
        let b = Batch { x: x.clone(), labels: None };
        let e = fd_check(|t, p| Ok(vae::elbo_with(&model, p, t, &b, 1.0, &eps)?.loss), &store, h).unwrap();
        parts.push(check(e < 1e-6, format!("elbo {}: {e:.2e}", lik.name())));
    }

    let sched = NoiseSchedule::default_linear();
    let model = EpsModel::new(2, 6, 2, sched.steps(), Some(8)).unwrap();
    let mut store = ParamStore::new();
    model.init(&mut store, &mut rng).unwrap();
    let draw = NoiseDraw {
        ts: vec![1, 17, 60, 110, 199, 200],
        eps: rng.gaussian_tensor(&[6, 2]),
        labels: Some(vec![0, 8, 3, 8, 5, 7]),
    };
    let e = fd_check(|t, p| diffusion::ddpm_loss_with(&model, p, t, &batch, &sched, &draw), &store, h).unwrap();
    parts.push(check(e < 1e-6, format!("ddpm loss: {e:.2e}")));

    let layer = CouplingLayer::new("cpl", vec![true, false, true, false], 6, 2).unwrap();
    let mut store = ParamStore::new();
    layer.init(&mut store, &mut rng).unwrap();
    for v in store.clone().names().map(String::from).collect::<Vec<_>>() {
        let t = store.get_mut(&v).unwrap();
        t.data_mut().iter_mut().for_each(|w| *w += 0.3 * rng.gaussian());
    }
    let x = rng.gaussian_tensor(&[5, 4]);
    let e = fd_check(|t, p| Ok(layer.forward(p, t.constant(x.clone()))?.1.sum()), &store, h).unwrap();
    parts.push(check(e < 1e-6, format!("coupling logdet: {e:.2e}")));
    all(parts)
}

fn c2_diffusion_oracle() -> Outcome {
    let sched = NoiseSchedule::default_linear();
    let oracle = UnitGaussianOracle { sched: &sched };
    let n = 10_000;
    let a = diffusion::ddpm_sample(&oracle, &sched, n, 1, &Guidance::None, &mut Rng::seed_from(2), None).unwrap();
    let (m, v) = mean_var(a.data());
    let b = diffusion::ddim_sample(&oracle, &sched, 20, 0.0, n, 1, &Guidance::None, &mut Rng::seed_from(3), None).unwrap();
    let (_, vd) = mean_var(b.data());
    all(vec![
        check(m.abs() < 0.05 && (v - 1.0).abs() < 0.1, format!("ddpm mean {m:.4} var {v:.4}")),
        check((0.85..=1.15).contains(&vd), format!("ddim var {vd:.4}")),
    ])
}

fn train_eps(classes: Option<usize>, seed: u64, steps: usize) -> (EpsModel, ParamStore, NoiseSchedule) {
    let sched = NoiseSchedule::default_linear();
    let model = EpsModel::new(2, 128, 3, sched.steps(), classes).unwrap();
    let mut rng = Rng::seed_from(seed);
    let mut store = ParamStore::new();
    model.init(&mut store, &mut rng).unwrap();
    let mut opt = adam(1e-3);
    let p_uncond = if classes.is_some() { 0.1 } else { 0.0 };
    for _ in 0..steps {
        let batch = make_toy_batch(&eight(), 128, &mut rng).unwrap();
        let batch = if classes.is_some() { batch } else { data::Batch { labels: None, ..batch } };
        diffusion::train_step(&model, &mut store, &mut opt, &batch, &sched, p_uncond, &mut rng).unwrap();
    }
    (model, store, sched)
}

fn c3_ddpm_eight() -> Outcome {
    let (model, store, sched) = train_eps(None, 30, 2000);
    let pred = Trained { model: &model, params: &store };
    let s = diffusion::ddpm_sample(&pred, &sched, 2000, 2, &Guidance::None, &mut Rng::seed_from(31), None).unwrap();
    let (modes, near) = coverage(&s);
    check(modes >= 7 && near >= 0.9, format!("modes {modes}/8, within 0.5: {:.3}", near))
}

fn class_accuracy(sample: impl Fn(usize, &mut Rng) -> Tensor, per_class: usize, seed: u64) -> f64 {
    let mut rng = Rng::seed_from(seed);
    let mut hits = 0;
    for k in 0..8 {
        let s = sample(k, &mut rng);
        assert_eq!(s.rows(), per_class);
        hits += (0..s.rows()).filter(|&r| nearest_center(s.row(r)).0 == k).count();
    }
    hits as f64 / (8 * per_class) as f64
}

fn c4_guidance() -> Outcome {
    let (model, store, sched) = train_eps(Some(8), 40, 2000);
    let pred = Trained { model: &model, params: &store };
    let cfg = class_accuracy(
        |k, rng| diffusion::ddpm_sample(&pred, &sched, 250, 2, &Guidance::Cfg { weight: 3.0 }, rng, Some(k)).unwrap(),
        250,
        41,
    );

    let (umodel, ustore, _) = train_eps(None, 42, 2000);
    let clf = NoisyClassifier::new(2, 64, 2, sched.steps(), 8).unwrap();
    let mut cstore = ParamStore::new();
    let mut rng = Rng::seed_from(43);
    clf.init(&mut cstore, &mut rng).unwrap();
    let mut opt = adam(1e-3);
    for _ in 0..2000 {
        let batch = make_toy_batch(&eight(), 128, &mut rng).unwrap();
        clf.train_step(&mut cstore, &mut opt, &batch, &sched, &mut rng).unwrap();
    }
    let upred = Trained { model: &umodel, params: &ustore };
    let guide = Guidance::Classifier { classifier: &clf, params: &cstore, weight: 5.0 };
    let cg = class_accuracy(|k, rng| diffusion::ddpm_sample(&upred, &sched, 250, 2, &guide, rng, Some(k)).unwrap(), 250, 44);
    all(vec![
        check(cfg >= 0.95, format!("cfg w=3 accuracy {cfg:.3}")),
        check(cg >= 0.90, format!("classifier w=5 accuracy {cg:.3}")),
    ])
}

fn c5_flow_matching() -> Outcome {
    let target = vec![1.5, -0.7, 0.25];
    let oracle = PointMassOracle { target: target.clone() };
    let mut worst = 0.0f64;
    let mut rng = Rng::seed_from(50);
    for steps in [1, 2, 3, 5, 10, 37, 100, 1000] {
        let x0 = rng.gaussian_tensor(&[200, 3]);
        let cfg = OdeConfig { steps, method: OdeMethod::Euler };
        let x1 = flowmatch::integrate(&oracle, x0, &cfg, None).unwrap();
        for (i, v) in x1.data().iter().enumerate() {
            worst = worst.max((v - target[i % 3]).abs());
        }
    }
    let model = VelocityModel::new(2, 128, 3, None).unwrap();
    let mut rng = Rng::seed_from(51);
    let mut store = ParamStore::new();
    model.init(&mut store, &mut rng).unwrap();
    let mut opt = adam(1e-3);
    for _ in 0..2000 {
        let batch = make_toy_batch(&eight(), 128, &mut rng).unwrap();
        flowmatch::train_step(&model, &mut store, &mut opt, &batch, &mut rng).unwrap();
    }
    let field = flowmatch::Trained { model: &model, params: &store };
    let s = flowmatch::ode_sample(&field, 2000, 2, &OdeConfig::default(), &mut Rng::seed_from(52), None).unwrap();
    let (modes, near) = coverage(&s);
    all(vec![
        check(worst < 1e-12, format!("point-mass oracle max error {worst:.2e}")),
        check(modes >= 7 && near >= 0.9, format!("trained cfm modes {modes}/8, within 0.5: {near:.3}")),
    ])
}

/// Mean negative log-likelihood of `test` under the Gaussian fitted to `train`.
fn gaussian_mle_nll(train: &Tensor, test: &Tensor) -> f64 {
    let n = train.rows() as f64;
    let mut mu = [0.0; 2];
    for r in 0..train.rows() {
        mu[0] += train.row(r)[0] / n;
        mu[1] += train.row(r)[1] / n;
    }
    let mut c = [0.0; 3];
    for r in 0..train.rows() {
        let (a, b) = (train.row(r)[0] - mu[0], train.row(r)[1] - mu[1]);
        c[0] += a * a / n;
        c[1] += a * b / n;
        c[2] += b * b / n;
    }
    let det = c[0] * c[2] - c[1] * c[1];
    let mut total = 0.0;
    for r in 0..test.rows() {
        let (a, b) = (test.row(r)[0] - mu[0], test.row(r)[1] - mu[1]);
        let q = (c[2] * a * a - 2.0 * c[1] * a * b + c[0] * b * b) / det;
        total += 0.5 * q + 0.5 * det.ln() + (2.0 * std::f64::consts::PI).ln();
    }
    total / test.rows() as f64
}

fn c6_realnvp() -> Outcome {
    let moons = ToySpec::new(Toy::Moons);
    let flow = RealNvp::new(2, 6, 64, 2).unwrap();
    let mut rng = Rng::seed_from(60);
    let mut store = ParamStore::new();
    flow.init(&mut store, &mut rng).unwrap();
    let mut opt = adam(1e-3);
    for _ in 0..3000 {
        let batch = make_toy_batch(&moons, 256, &mut rng).unwrap();
        nflow::train_step(&flow, &mut store, &mut opt, &batch.x).unwrap();
    }
    let fit = make_toy_batch(&moons, 10_000, &mut Rng::seed_from(61)).unwrap().x;
    let test = make_toy_batch(&moons, 4000, &mut Rng::seed_from(62)).unwrap().x;
    let base = gaussian_mle_nll(&fit, &test);
    let lp = flow.log_prob_values(&store, &test).unwrap();
    let nll = -lp.iter().sum::<f64>() / lp.len() as f64;

    let tape = Tape::new();
    let p = tape.bind_frozen(&store);
    let (z, _) = flow.forward(&p, tape.constant(test.clone())).unwrap();
    let back = flow.inverse(&p, z).unwrap().tensor();
    let inv_err = back.data().iter().zip(test.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);

    let k = 400;
    let cell = 8.0 / k as f64;
    let mut mass = 0.0;
    for i in 0..k {
        let x = -4.0 + (i as f64 + 0.5) * cell;
        let pts: Vec<f64> = (0..k).flat_map(|j| [x, -4.0 + (j as f64 + 0.5) * cell]).collect();
        let lp = flow.log_prob_values(&store, &Tensor::matrix(k, 2, pts).unwrap()).unwrap();
        mass += lp.iter().map(|v| v.exp()).sum::<f64>() * cell * cell;
    }
    all(vec![
        check(nll <= base - 0.3, format!("held-out nll {nll:.3} vs gaussian {base:.3}")),
        check(inv_err < 1e-10, format!("inverse error {inv_err:.2e}")),
        check((0.97..=1.01).contains(&mass), format!("mass on [-4,4]^2 {mass:.4}")),
    ])
}

fn c7_vae() -> Outcome {
    let cfg = VaeConfig { beta: 1.0, latent: 2, conditional: false };
    let model = Vae::new(2, 64, 2, &cfg, Likelihood::Gaussian, None).unwrap();
    let mut rng = Rng::seed_from(70);
    let mut store = ParamStore::new();
    model.init(&mut store, &mut rng).unwrap();
    let eval = make_toy_batch(&eight(), 2000, &mut Rng::seed_from(71)).unwrap();
    let eval = Batch { labels: None, ..eval };
    let eps = Rng::seed_from(72).gaussian_tensor(&[2000, 2]);
    let mut evaluated = 0usize;
    let mut elbo = |store: &ParamStore| {
        let tape = Tape::new();
        let e = vae::elbo_with(&model, &tape.bind_frozen(store), &tape, &eval, 1.0, &eps).unwrap();
        assert!(e.kl_items.iter().all(|&k| k >= 0.0), "negative KL on evaluation batch");
        evaluated += 1;
        e.loss.item()
    };
    let initial = elbo(&store);
    let mut opt = adam(1e-3);
    let mut batches = 0usize;
    for _ in 0..3000 {
        let batch = make_toy_batch(&eight(), 128, &mut rng).unwrap();
        let st = vae::train_step(&model, &mut store, &mut opt, &Batch { labels: None, ..batch }, &mut rng).unwrap();
        assert!(st.kl_min >= 0.0, "negative KL {} on training batch {batches}", st.kl_min);
        batches += 1;
    }
    let last = elbo(&store);
    let gain = (initial - last) / initial.abs();
    all(vec![
        check(true, format!("KL >= 0 on {} batches", batches + evaluated)),
        check(gain >= 0.3, format!("loss {initial:.3} -> {last:.3}, improvement {:.1}%", 100.0 * gain)),
    ])
}

fn train_gan(variant: GanVariant, seed: u64) -> usize {
    // λ = 0.1 is the usual penalty weight for 2-D toy data; at λ = 10 the
    // critic stays too flat to separate modes within 2000 steps.
    let config = GanConfig { lambda_gp: 0.1, ..GanConfig::new(variant) };
    let gan = Gan {
        config,
        gen: Generator::new(2, 64, 2, OutputActivation::None, None).unwrap(),
        critic: Critic::new(2, 64, 2, None).unwrap(),
    };
    let mut rng = Rng::seed_from(seed);
    let mut store = ParamStore::new();
    gan.init(&mut store, &mut rng).unwrap();
    let opt = || Adam::new(AdamConfig { lr: 1e-3, beta1: 0.5, beta2: 0.9, ..AdamConfig::default() });
    let (mut og, mut od) = (opt(), opt());
    for _ in 0..2000 {
        let batch = make_toy_batch(&eight(), 64, &mut rng).unwrap();
        gan::gan_train_step(&gan, &mut store, &Batch { labels: None, ..batch }, &mut rng, &mut og, &mut od).unwrap();
    }
    let s = gan::gan_sample(&gan.gen, &store, 2000, &mut Rng::seed_from(seed + 100), None).unwrap();
    coverage(&s).0
}

fn c8_gan() -> Outcome {
    let mut parts = Vec::new();
    for variant in [GanVariant::NsGan, GanVariant::WganGp] {
        let modes: Vec<usize> = (0..3).map(|s| train_gan(variant, 80 + s)).collect();
        let good = modes.iter().filter(|&&m| m >= 6).count();
        parts.push(check(good >= 2, format!("{} modes per seed {modes:?}", variant.name())));
    }
    let w = [3.0, 4.0];
    let mut rng = Rng::seed_from(89);
    let mut total = 0.0;
    let trials = 1000;
    for _ in 0..trials {
        let tape = Tape::new();
        let xhat = rng.gaussian_tensor(&[1, 2]);
        let dirs = gan::random_directions(64, 1, 2, &mut rng);
        let wv = tape.constant(Tensor::matrix(2, 1, w.to_vec()).unwrap());
        let est = gan::grad_norm_sq_estimate(|x| x.matmul(wv), &tape, &xhat, &dirs, 1e-3).unwrap();
        total += est.item();
    }
    let mean = total / trials as f64;
    parts.push(check((mean - 25.0).abs() <= 2.0, format!("linear critic |grad|^2 estimate {mean:.3}")));
    all(parts)
}

fn c9_rbm() -> Outcome {
    let mut rng = Rng::seed_from(90);
    let (mut fe_err, mut z_err) = (0.0f64, 0.0f64);
    for i in 0..50 {
        let (nv, nh) = (2 + i % 5, 1 + i % 4);
        let rbm = Rbm::random(nv, nh, 1.0, &mut rng);
        let mut joint = Vec::new();
        for a in 0..1 << nv {
            let v = ebm::bits(a, nv);
            let terms: Vec<f64> = (0..1 << nh).map(|b| -rbm.energy(&v, &ebm::bits(b, nh))).collect();
            let f = -venom::tensor::log_sum_exp(&terms);
            fe_err = fe_err.max((f - rbm.free_energy_one(&v)).abs());
            joint.extend(terms);
        }
        let lz = venom::tensor::log_sum_exp(&joint);
        z_err = z_err.max((lz - ebm::rbm_exact_logz(&rbm).unwrap()).abs());
    }

    // Each update sees every pattern 64 times so the negative phase averages
    // over 256 chains.
    let patterns = data::bit_patterns().x;
    let rows: Vec<Vec<f64>> = (0..256).map(|r| patterns.row(r % 4).to_vec()).collect();
    let batch = Tensor::stack_rows(&rows, 6).unwrap();
    let mut rbm = Rbm::random(6, 8, 0.01, &mut rng);
    let window = 200;
    let updates = 1000;
    let mut means = Vec::new();
    let mut acc = 0.0;
    let mut last = 0.0;
    for u in 1..=updates {
        ebm::cd_k_update(&mut rbm, &batch, 1, 0.3, &mut rng).unwrap();
        last = ebm::rbm_log_likelihood(&rbm, &patterns).unwrap();
        acc += last;
        if u % window == 0 {
            means.push(acc / window as f64);
            acc = 0.0;
        }
    }
    let monotone = means.windows(2).all(|w| w[1] > w[0]);
    let shown: Vec<String> = means.iter().map(|m| format!("{m:.3}")).collect();
    all(vec![
        check(fe_err < 1e-10, format!("free energy error {fe_err:.2e}")),
        check(z_err < 1e-10, format!("ln Z error {z_err:.2e}")),
        check(monotone, format!("window means [{}]", shown.join(", "))),
        check(last >= -1.8, format!("final log-likelihood {last:.3}")),
    ])
}

fn c10_langevin() -> Outcome {
    let energy = Energy::StdGaussian;
    let cfg = LangevinConfig { steps: 500, eta: 0.05, ..LangevinConfig::default() };
    let x = ebm::langevin_sample(&energy, &cfg, 5000, &mut Rng::seed_from(100), Exec::default()).unwrap();
    let mut parts = Vec::new();
    for c in 0..x.cols() {
        let col: Vec<f64> = (0..x.rows()).map(|r| x.row(r)[c]).collect();
        let (m, v) = mean_var(&col);
        parts.push(check(m.abs() < 0.05 && (0.9..=1.1).contains(&v), format!("coord {c}: mean {m:.4} var {v:.4}")));
    }
    all(parts)
}

fn cli(args: &[String]) -> i32 {
    venom::cli::main_with_args(std::iter::once("venom".to_string()).chain(args.iter().cloned()))
}

fn files_in(dir: &Path) -> Vec<PathBuf> {
    let mut v: Vec<PathBuf> = std::fs::read_dir(dir)
        .map(|d| d.map(|e| e.unwrap().path()).filter(|p| p.is_file()).collect())
        .unwrap_or_default();
    v.sort();
    v
}

fn c11_infrastructure() -> Outcome {
    let pairs = [
        ("diffusion", "ddpm", "--guidance classifier"),
        ("diffusion", "ddim", "--guidance cfg"),
        ("flowmatch", "cfm", ""),
        ("vae", "vae", ""),
        ("vae", "beta-vae", "--conditional"),
        ("nflow", "realnvp", ""),
        ("gan", "ns-gan", ""),
        ("gan", "wgan-gp", ""),
        ("ebm", "rbm", ""),
    ];
    let roots = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    let mut parts = Vec::new();
    let mut checkpoints = 0;
    let mut compared = 0;
    for (family, variant, extra) in pairs {
        let mut ok = true;
        for root in &roots {
            let mut args: Vec<String> = format!("train {family} --variant {variant} --epochs 2 --steps 4 --batch-size 16 --samples 6 {extra}")
                .split_whitespace()
                .map(String::from)
                .collect();
            if family != "ebm" {
                args.extend(["--hidden".into(), "8".into()]);
            }
            args.extend(["--out".into(), root.path().display().to_string()]);
            ok &= cli(&args) == 0;
            let dir = root.path().join(family).join(variant).join("seed0");
            for epoch in 1..=2 {
                let ckpt = dir.join(format!("model_{epoch:03}.vnmc"));
                let mut sample: Vec<String> = format!("sample {family} --variant {variant} --samples 5 --steps 6 --seed 3")
                    .split_whitespace()
                    .map(String::from)
                    .collect();
                if extra.contains("guidance") {
                    sample.extend(format!("{} --guidance-scale 2 --label 1", extra).split_whitespace().map(String::from));
                }
                sample.extend(["--checkpoint".into(), ckpt.display().to_string()]);
                ok &= cli(&sample) == 0;

                let (store, meta) = persist::load_checkpoint(&ckpt).unwrap();
                let copy = root.path().join(format!("copy_{family}_{variant}.vnmc"));
                persist::save_checkpoint(&store, &meta, &copy).unwrap();
                ok &= std::fs::read(&copy).unwrap() == std::fs::read(&ckpt).unwrap();
                ok &= persist::load_checkpoint(&copy).unwrap().0 == store;
                checkpoints += 1;
            }
        }
        let rel = Path::new(family).join(variant).join("seed0");
        let a = roots[0].path().join(&rel);
        let b = roots[1].path().join(&rel);
        for sub in [PathBuf::new(), PathBuf::from("samples")] {
            let fa = files_in(&a.join(&sub));
            let fb = files_in(&b.join(&sub));
            ok &= fa.len() == fb.len() && !fa.is_empty();
            for (x, y) in fa.iter().zip(&fb) {
                ok &= x.file_name() == y.file_name() && std::fs::read(x).unwrap() == std::fs::read(y).unwrap();
                compared += 1;
            }
        }
        parts.push(check(ok, format!("{family}/{variant}")));
    }
    let mut lv = true;
    let mut outs = Vec::new();
    for root in &roots {
        let args: Vec<String> = format!("sample ebm --variant langevin --samples 50 --steps 20 --out {}", root.path().display())
            .split_whitespace()
            .map(String::from)
            .collect();
        lv &= cli(&args) == 0;
        outs.push(std::fs::read(root.path().join("ebm/langevin/seed0/samples/langevin_std-gaussian_seed0.csv")).unwrap_or_default());
    }
    lv &= !outs[0].is_empty() && outs[0] == outs[1];
    parts.push(check(lv, "ebm/langevin"));
    let pass = parts.iter().all(|o| o.pass);
    let failed: Vec<String> = parts.iter().filter(|o| !o.pass).map(|o| o.detail.clone()).collect();
    check(
        pass,
        if pass {
            format!("{} train/sample pairs, {checkpoints} checkpoints round-tripped, {compared} files byte-identical across reruns", pairs.len() + 1)
        } else {
            format!("failing: {}", failed.join(", "))
        },
    )
}

type Criterion = (usize, &'static str, fn() -> Outcome);

fn main() {
    let criteria: Vec<Criterion> = vec![
        (1, "autodiff against finite differences", c1_autodiff),
        (2, "diffusion analytic oracle", c2_diffusion_oracle),
        (3, "trained DDPM on eight-gaussians", c3_ddpm_eight),
        (4, "classifier-free and classifier guidance", c4_guidance),
        (5, "flow matching", c5_flow_matching),
        (6, "RealNVP on moons", c6_realnvp),
        (7, "VAE ELBO", c7_vae),
        (8, "GAN mode coverage and gradient penalty", c8_gan),
        (9, "RBM identities and CD-1", c9_rbm),
        (10, "Langevin on a standard gaussian", c10_langevin),
        (11, "checkpoints, determinism and train/sample pairing", c11_infrastructure),
    ];
    let wanted: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for (id, name, run) in criteria {
        if !wanted.is_empty() && !wanted.contains(&id) {
            continue;
        }
        let start = Instant::now();
        let o = run();
        let secs = start.elapsed().as_secs_f64();
        println!("criterion {id:>2} {} {name} ({secs:.1}s): {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        if !o.pass {
            failed += 1;
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
