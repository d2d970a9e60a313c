//! `venom <train|sample> <family> --variant V [flags]`.
//!
//! Training writes `<out>/<family>/<variant>/seed<k>/` holding one
//! `model_<epoch>.vnmc` per epoch, `config.txt`, `metrics.csv` and an
//! end-of-epoch sample artifact. Sampling reads a checkpoint plus the
//! `config.txt` beside it and writes under `samples/` in the same directory.
//!
//! Exit codes: 0 success, 1 usage error, 2 runtime or data error.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};

use crate::data::{self, Batch, ImageSpec, Toy, ToySpec};
use crate::diffusion::{self, EpsModel, Guidance, GuidanceMode, NoiseSchedule, NoisyClassifier};
use crate::ebm::{self, Energy, LangevinConfig, Rbm};
use crate::error::{Error, Result};
use crate::flowmatch::{self, OdeConfig, OdeMethod, VelocityModel};
use crate::gan::{self, Critic, Gan, GanConfig, GanVariant, Generator};
use crate::nflow::{self, RealNvp};
use crate::nn::{Adam, AdamConfig, OutputActivation};
use crate::par::Exec;
use crate::params::ParamStore;
use crate::persist::{self, ImageGrid, Metadata};
use crate::rng::Rng;
use crate::tensor::Tensor;
use crate::vae::{self, Vae, VaeConfig};

pub const RUNS_DIR_ENV: &str = "VENOM_RUNS_DIR";
pub const DEFAULT_RUNS_DIR: &str = "runs";
pub const METRICS_FILE: &str = "metrics.csv";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Family {
    Diffusion,
    Flowmatch,
    Vae,
    Nflow,
    Gan,
    Ebm,
}

impl Family {
    pub const ALL: [Family; 6] = [
        Family::Diffusion,
        Family::Flowmatch,
        Family::Vae,
        Family::Nflow,
        Family::Gan,
        Family::Ebm,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Family::Diffusion => "diffusion",
            Family::Flowmatch => "flowmatch",
            Family::Vae => "vae",
            Family::Nflow => "nflow",
            Family::Gan => "gan",
            Family::Ebm => "ebm",
        }
    }

    pub fn variants(self) -> &'static [&'static str] {
        match self {
            Family::Diffusion => &["ddpm", "ddim"],
            Family::Flowmatch => &["cfm"],
            Family::Vae => &["vae", "beta-vae"],
            Family::Nflow => &["realnvp"],
            Family::Gan => &["ns-gan", "wgan-gp"],
            Family::Ebm => &["rbm", "langevin"],
        }
    }

    fn default_dataset(self) -> &'static str {
        match self {
            Family::Nflow => "moons",
            Family::Ebm => "patterns",
            _ => "eight-gaussians",
        }
    }
}

impl FromStr for Family {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Family::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| Error::Usage(format!("unknown family `{s}`")))
    }
}

impl std::fmt::Display for Family {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Command {
    Train,
    Sample,
}

#[derive(Parser, Debug)]
#[command(name = "venom", version, about = "Train and sample small generative models")]
struct Cli {
    #[command(subcommand)]
    command: Sub,
}

#[derive(Subcommand, Debug)]
enum Sub {
    /// Train a model and write checkpoints, metrics and samples.
    Train(Flags),
    /// Draw samples from a checkpoint.
    Sample(Flags),
}

/// Flags shared by both subcommands. Unset options fall back to per-family
/// defaults (train) or to the checkpoint's `config.txt` (sample).
#[derive(Args, Debug, Clone, Default)]
pub struct Flags {
    /// diffusion | flowmatch | vae | nflow | gan | ebm
    pub family: String,
    #[arg(long)]
    pub variant: String,
    /// moons | eight-gaussians | checkerboard | patterns | idx
    #[arg(long)]
    pub dataset: Option<String>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Training: optimizer steps per epoch. Sampling: sampler steps.
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub hidden: Option<usize>,
    #[arg(long)]
    pub layers: Option<usize>,
    /// Samples written per epoch (train) or per call (sample).
    #[arg(long)]
    pub samples: Option<usize>,
    /// none | cfg | classifier
    #[arg(long)]
    pub guidance: Option<String>,
    #[arg(long)]
    pub guidance_scale: Option<f64>,
    #[arg(long)]
    pub p_uncond: Option<f64>,
    #[arg(long)]
    pub label: Option<usize>,
    #[arg(long)]
    pub conditional: bool,
    #[arg(long)]
    pub timesteps: Option<usize>,
    /// DDIM stochasticity, or the Langevin step size.
    #[arg(long)]
    pub eta: Option<f64>,
    /// euler | heun
    #[arg(long)]
    pub method: Option<String>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub latent: Option<usize>,
    #[arg(long)]
    pub couplings: Option<usize>,
    #[arg(long)]
    pub n_critic: Option<usize>,
    #[arg(long)]
    pub lambda_gp: Option<f64>,
    #[arg(long)]
    pub gp_delta: Option<f64>,
    #[arg(long)]
    pub gp_directions: Option<usize>,
    #[arg(long)]
    pub n_hidden: Option<usize>,
    #[arg(long)]
    pub cd_k: Option<usize>,
    /// std-gaussian | mixture-of-8
    #[arg(long)]
    pub energy: Option<String>,
    #[arg(long)]
    pub idx_images: Option<PathBuf>,
    #[arg(long)]
    pub idx_labels: Option<PathBuf>,
    #[arg(long)]
    pub downsample: Option<usize>,
    #[arg(long)]
    pub limit: Option<usize>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// A parsed command with every setting resolved.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub command: Command,
    pub family: Family,
    pub variant: String,
    pub seed: u64,
    pub out: PathBuf,
    pub checkpoint: Option<PathBuf>,
    /// Training hyperparameters (train) or sampler options (sample).
    pub settings: Metadata,
}

/// `<out>/<family>/<variant>/seed<seed>`.
pub fn run_dir(out: &Path, family: Family, variant: &str, seed: u64) -> PathBuf {
    out.join(family.name()).join(variant).join(format!("seed{seed}"))
}

pub fn checkpoint_name(epoch: usize) -> String {
    format!("model_{epoch:03}.vnmc")
}

fn default_out() -> PathBuf {
    std::env::var_os(RUNS_DIR_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(DEFAULT_RUNS_DIR))
}

fn set(m: &mut Metadata, k: &str, v: impl ToString) {
    m.insert(k.to_string(), v.to_string());
}

fn get<T: FromStr>(m: &Metadata, k: &str) -> Result<T> {
    let raw = m
        .get(k)
        .ok_or_else(|| Error::contract(format!("config is missing `{k}`")))?;
    raw.parse()
        .map_err(|_| Error::contract(format!("config value `{k}={raw}` is malformed")))
}

fn get_opt<T: FromStr>(m: &Metadata, k: &str) -> Result<Option<T>> {
    match m.get(k).map(String::as_str) {
        None | Some("") => Ok(None),
        Some(_) => get(m, k).map(Some),
    }
}

/// Flag values as `(config key, flag name, value)`, only for flags given.
fn overrides(f: &Flags) -> Vec<(&'static str, &'static str, String)> {
    let mut v = Vec::new();
    macro_rules! opt {
        ($field:ident, $key:literal, $flag:literal) => {
            if let Some(x) = &f.$field {
                v.push(($key, $flag, x.to_string()));
            }
        };
    }
    macro_rules! path {
        ($field:ident, $key:literal, $flag:literal) => {
            if let Some(x) = &f.$field {
                v.push(($key, $flag, x.display().to_string()));
            }
        };
    }
    opt!(dataset, "dataset", "--dataset");
    opt!(epochs, "epochs", "--epochs");
    opt!(steps, "steps", "--steps");
    opt!(batch_size, "batch_size", "--batch-size");
    opt!(lr, "lr", "--lr");
    opt!(hidden, "hidden", "--hidden");
    opt!(layers, "layers", "--layers");
    opt!(samples, "samples", "--samples");
    opt!(guidance, "guidance", "--guidance");
    opt!(guidance_scale, "guidance_scale", "--guidance-scale");
    opt!(p_uncond, "p_uncond", "--p-uncond");
    opt!(label, "label", "--label");
    if f.conditional {
        v.push(("conditional", "--conditional", "true".into()));
    }
    opt!(timesteps, "timesteps", "--timesteps");
    opt!(eta, "eta", "--eta");
    opt!(method, "method", "--method");
    opt!(beta, "beta", "--beta");
    opt!(latent, "latent", "--latent");
    opt!(couplings, "couplings", "--couplings");
    opt!(n_critic, "n_critic", "--n-critic");
    opt!(lambda_gp, "lambda_gp", "--lambda-gp");
    opt!(gp_delta, "gp_delta", "--gp-delta");
    opt!(gp_directions, "gp_directions", "--gp-directions");
    opt!(n_hidden, "n_hidden", "--n-hidden");
    opt!(cd_k, "cd_k", "--cd-k");
    opt!(energy, "energy", "--energy");
    path!(idx_images, "idx_images", "--idx-images");
    path!(idx_labels, "idx_labels", "--idx-labels");
    opt!(downsample, "downsample", "--downsample");
    opt!(limit, "limit", "--limit");
    v
}

fn is_image_dataset(name: &str) -> bool {
    name == "idx"
}

/// Training defaults for a family and variant.
fn train_defaults(family: Family, variant: &str, dataset: &str) -> Metadata {
    let mut m = Metadata::new();
    let image = is_image_dataset(dataset);
    set(&mut m, "dataset", dataset);
    set(&mut m, "epochs", 5);
    set(&mut m, "steps", 400);
    set(&mut m, "batch_size", 128);
    set(&mut m, "lr", 1e-3);
    set(&mut m, "hidden", 128);
    set(&mut m, "layers", 3);
    set(&mut m, "samples", if image { 64 } else { 500 });
    set(&mut m, "conditional", false);
    if image {
        set(&mut m, "idx_images", "");
        set(&mut m, "idx_labels", "");
        set(&mut m, "downsample", 2);
        set(&mut m, "limit", "");
    }
    match family {
        Family::Diffusion => {
            set(&mut m, "timesteps", diffusion::DEFAULT_STEPS);
            set(&mut m, "beta_start", diffusion::DEFAULT_BETA_START);
            set(&mut m, "beta_end", diffusion::DEFAULT_BETA_END);
            set(&mut m, "guidance", "none");
            set(&mut m, "guidance_scale", 0.0);
            set(&mut m, "p_uncond", diffusion::DEFAULT_P_UNCOND);
            set(&mut m, "eta", 0.0);
            set(&mut m, "sample_steps", if variant == "ddim" { 50 } else { diffusion::DEFAULT_STEPS });
        }
        Family::Flowmatch => {
            set(&mut m, "method", "euler");
            set(&mut m, "sample_steps", flowmatch::DEFAULT_ODE_STEPS);
        }
        Family::Vae => {
            set(&mut m, "layers", 2);
            set(&mut m, "beta", if variant == "beta-vae" { 4.0 } else { 1.0 });
            set(&mut m, "latent", if image { 16 } else { 2 });
            set(&mut m, "likelihood", if image { "bernoulli" } else { "gaussian" });
        }
        Family::Nflow => {
            set(&mut m, "hidden", 64);
            set(&mut m, "layers", 2);
            set(&mut m, "batch_size", 256);
            set(&mut m, "couplings", nflow::DEFAULT_LAYERS);
        }
        Family::Gan => {
            let cfg = GanConfig::new(variant.parse().unwrap_or(GanVariant::NsGan));
            set(&mut m, "hidden", 64);
            set(&mut m, "layers", 2);
            set(&mut m, "lr", if image { 2e-4 } else { 1e-3 });
            set(&mut m, "adam_beta1", 0.5);
            set(&mut m, "adam_beta2", 0.9);
            set(&mut m, "n_critic", cfg.n_critic);
            set(&mut m, "lambda_gp", if image { cfg.lambda_gp } else { 0.1 });
            set(&mut m, "gp_delta", cfg.delta);
            set(&mut m, "gp_directions", cfg.directions);
        }
        Family::Ebm => {
            m.remove("hidden");
            m.remove("layers");
            m.remove("conditional");
            set(&mut m, "batch_size", if image { 64 } else { 256 });
            set(&mut m, "lr", if image { 0.1 } else { 0.3 });
            set(&mut m, "n_hidden", if image { 64 } else { 8 });
            set(&mut m, "cd_k", 1);
            set(&mut m, "samples", if image { 64 } else { 16 });
            set(&mut m, "sample_steps", 1000);
        }
    }
    m
}

/// Keys a sample command may set, with defaults filled later from config.txt.
const SAMPLE_KEYS: &[&str] = &["steps", "samples", "guidance", "guidance_scale", "label", "eta", "method", "energy"];

pub fn parse_args<I, T>(argv: I) -> std::result::Result<RunConfig, clap::Error>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = Cli::try_parse_from(argv)?;
    let (command, flags) = match cli.command {
        Sub::Train(f) => (Command::Train, f),
        Sub::Sample(f) => (Command::Sample, f),
    };
    resolve(command, &flags).map_err(|e| clap::Error::raw(clap::error::ErrorKind::InvalidValue, format!("{e}\n")))
}

/// Applies defaults and validates a parsed command line.
pub fn resolve(command: Command, flags: &Flags) -> Result<RunConfig> {
    let family: Family = flags.family.parse()?;
    let variant = flags.variant.clone();
    if !family.variants().contains(&variant.as_str()) {
        return Err(Error::Usage(format!(
            "unknown variant `{variant}` for {family} (expected one of {})",
            family.variants().join(", ")
        )));
    }
    let sample_only = family == Family::Ebm && variant == "langevin";
    let mut settings = Metadata::new();
    match command {
        Command::Train => {
            if sample_only {
                return Err(Error::Usage("variant `langevin` is sample-only; use `venom sample ebm --variant langevin`".into()));
            }
            if flags.checkpoint.is_some() {
                return Err(Error::Usage("`--checkpoint` applies to sample only".into()));
            }
            let dataset = flags.dataset.clone().unwrap_or_else(|| family.default_dataset().to_string());
            settings = train_defaults(family, &variant, &dataset);
            for (key, flag, value) in overrides(flags) {
                if !settings.contains_key(key) {
                    return Err(Error::Usage(format!("flag `{flag}` does not apply to `train {family}`")));
                }
                settings.insert(key.to_string(), value);
            }
            validate_train(family, &variant, &settings)?;
        }
        Command::Sample => {
            if flags.checkpoint.is_none() && !sample_only {
                return Err(Error::Usage("`sample` needs `--checkpoint <path>`".into()));
            }
            if flags.checkpoint.is_some() && sample_only {
                return Err(Error::Usage("`langevin` samples an analytic energy and takes no checkpoint".into()));
            }
            for (key, flag, value) in overrides(flags) {
                if !SAMPLE_KEYS.contains(&key) {
                    return Err(Error::Usage(format!("flag `{flag}` does not apply to `sample`")));
                }
                settings.insert(key.to_string(), value);
            }
            validate_sample(&settings)?;
        }
    }
    set(&mut settings, "family", family);
    set(&mut settings, "variant", &variant);
    set(&mut settings, "seed", flags.seed);
    Ok(RunConfig {
        command,
        family,
        variant,
        seed: flags.seed,
        out: flags.out.clone().unwrap_or_else(default_out),
        checkpoint: flags.checkpoint.clone(),
        settings,
    })
}

fn usage_parse<T: FromStr>(m: &Metadata, k: &str) -> Result<()> {
    match get_opt::<T>(m, k) {
        Ok(_) => Ok(()),
        Err(_) => Err(Error::Usage(format!("invalid value `{}` for `{k}`", m[k]))),
    }
}

fn validate_train(family: Family, variant: &str, m: &Metadata) -> Result<()> {
    let dataset = &m["dataset"];
    match dataset.as_str() {
        "moons" | "eight-gaussians" | "checkerboard" => {
            if family == Family::Ebm {
                return Err(Error::Usage(format!("dataset `{dataset}` is continuous; rbm needs `patterns` or `idx`")));
            }
        }
        "patterns" => {
            if family != Family::Ebm {
                return Err(Error::Usage("dataset `patterns` is for the rbm only".into()));
            }
        }
        "idx" => {
            if m.get("idx_images").is_none_or(|p| p.is_empty()) {
                return Err(Error::Usage("dataset `idx` needs `--idx-images`".into()));
            }
        }
        other => return Err(Error::Usage(format!("unknown dataset `{other}`"))),
    }
    for k in ["epochs", "steps", "batch_size", "samples", "hidden", "layers", "latent", "couplings", "n_critic", "gp_directions", "n_hidden", "cd_k", "timesteps", "downsample", "limit", "sample_steps"] {
        if m.contains_key(k) {
            usage_parse::<usize>(m, k)?;
        }
    }
    for k in ["lr", "beta", "guidance_scale", "p_uncond", "lambda_gp", "gp_delta", "eta"] {
        if m.contains_key(k) {
            usage_parse::<f64>(m, k)?;
        }
    }
    for k in ["epochs", "steps", "batch_size"] {
        if get::<usize>(m, k)? == 0 {
            return Err(Error::Usage(format!("`{k}` must be positive")));
        }
    }
    if let Some(g) = m.get("guidance") {
        let mode: GuidanceMode = g.parse()?;
        if mode != GuidanceMode::None && dataset != "eight-gaussians" && dataset != "moons" && dataset != "idx" {
            return Err(Error::Usage(format!("guidance needs a labelled dataset, `{dataset}` has none")));
        }
    }
    if let Some(meth) = m.get("method") {
        meth.parse::<OdeMethod>()?;
    }
    if family == Family::Gan {
        variant.parse::<GanVariant>()?;
    }
    Ok(())
}

fn validate_sample(m: &Metadata) -> Result<()> {
    for k in ["steps", "samples", "label"] {
        if m.contains_key(k) {
            usage_parse::<usize>(m, k)?;
        }
    }
    for k in ["guidance_scale", "eta"] {
        if m.contains_key(k) {
            usage_parse::<f64>(m, k)?;
        }
    }
    if let Some(g) = m.get("guidance") {
        g.parse::<GuidanceMode>()?;
    }
    if let Some(e) = m.get("method") {
        e.parse::<OdeMethod>()?;
    }
    if let Some(e) = m.get("energy") {
        e.parse::<Energy>()?;
    }
    Ok(())
}

/// Where training batches come from.
enum Source {
    Toy(ToySpec),
    Fixed { batch: Batch, order: Vec<usize>, cursor: usize },
}

impl Source {
    fn next(&mut self, n: usize, rng: &mut Rng) -> Result<Batch> {
        match self {
            Source::Toy(spec) => data::make_toy_batch(spec, n, rng),
            Source::Fixed { batch, order, cursor } => {
                let mut idx = Vec::with_capacity(n);
                while idx.len() < n {
                    if *cursor == order.len() {
                        shuffle(order, rng);
                        *cursor = 0;
                    }
                    idx.push(order[*cursor]);
                    *cursor += 1;
                }
                Ok(batch.select(&idx))
            }
        }
    }
}

fn shuffle(v: &mut [usize], rng: &mut Rng) {
    for i in (1..v.len()).rev() {
        v.swap(i, rng.below(i + 1));
    }
}

/// Layout of sample artifacts: CSV points for 2D data, PGM grids otherwise.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Artifact {
    Points,
    Image { height: usize, width: usize },
}

struct Loaded {
    source: Source,
    dim: usize,
    classes: Option<usize>,
    artifact: Artifact,
}

fn load_dataset(m: &Metadata) -> Result<Loaded> {
    let name = m["dataset"].as_str();
    match name {
        "idx" => {
            let spec = ImageSpec {
                images: PathBuf::from(&m["idx_images"]),
                labels: get_opt::<String>(m, "idx_labels")?.map(PathBuf::from),
                downsample: get(m, "downsample")?,
                binarize: m.get("likelihood").is_some_and(|l| l == "bernoulli") || m["family"] == "ebm",
                limit: get_opt(m, "limit")?,
            };
            let set = data::load_image_set(&spec)?;
            let n = set.batch.len();
            if n == 0 {
                return Err(Error::contract("image dataset is empty"));
            }
            Ok(Loaded {
                dim: set.batch.dim(),
                classes: set.classes,
                artifact: Artifact::Image { height: set.height, width: set.width },
                source: Source::Fixed { batch: set.batch, order: (0..n).collect(), cursor: n },
            })
        }
        "patterns" => {
            let batch = data::bit_patterns();
            Ok(Loaded {
                dim: batch.dim(),
                classes: Some(4),
                artifact: Artifact::Image { height: 1, width: batch.dim() },
                source: Source::Fixed { order: (0..batch.len()).collect(), cursor: batch.len(), batch },
            })
        }
        toy => {
            let toy: Toy = toy.parse()?;
            Ok(Loaded {
                source: Source::Toy(ToySpec::new(toy)),
                dim: 2,
                classes: toy.classes(),
                artifact: Artifact::Points,
            })
        }
    }
}

fn artifact_of(m: &Metadata) -> Result<Artifact> {
    match m.get("sample_format").map(String::as_str) {
        Some("pgm") => Ok(Artifact::Image {
            height: get(m, "image_height")?,
            width: get(m, "image_width")?,
        }),
        _ => Ok(Artifact::Points),
    }
}

fn record_artifact(m: &mut Metadata, a: Artifact) {
    match a {
        Artifact::Points => set(m, "sample_format", "csv"),
        Artifact::Image { height, width } => {
            set(m, "sample_format", "pgm");
            set(m, "image_height", height);
            set(m, "image_width", width);
        }
    }
}

fn write_artifact(a: Artifact, samples: &Tensor, path_stem: &Path) -> Result<PathBuf> {
    match a {
        Artifact::Points => {
            let p = path_stem.with_extension("csv");
            persist::write_csv_points(samples, None, &p)?;
            Ok(p)
        }
        Artifact::Image { height, width } => {
            let p = path_stem.with_extension("pgm");
            persist::write_pgm(&ImageGrid::for_samples(samples, height, width)?, &p)?;
            Ok(p)
        }
    }
}

/// A model rebuilt from its resolved settings.
enum Model {
    Diffusion {
        eps: EpsModel,
        sched: NoiseSchedule,
        clf: Option<NoisyClassifier>,
    },
    Flow(VelocityModel),
    Vae(Vae),
    Nflow(RealNvp),
    Gan(Gan),
    Rbm { n_vis: usize, n_hid: usize },
}

fn classes_of(m: &Metadata) -> Result<Option<usize>> {
    get_opt(m, "classes")
}

fn conditional_classes(m: &Metadata) -> Result<Option<usize>> {
    if get::<bool>(m, "conditional")? {
        let k = classes_of(m)?.ok_or_else(|| Error::contract("conditional training needs a labelled dataset"))?;
        Ok(Some(k))
    } else {
        Ok(None)
    }
}

fn build(family: Family, m: &Metadata) -> Result<Model> {
    let dim: usize = get(m, "data_dim")?;
    let image = artifact_of(m)? != Artifact::Points;
    Ok(match family {
        Family::Diffusion => {
            let t = get(m, "timesteps")?;
            let sched = NoiseSchedule::linear(t, get(m, "beta_start")?, get(m, "beta_end")?)?;
            let (hidden, layers) = (get(m, "hidden")?, get(m, "layers")?);
            let eps = EpsModel::new(dim, hidden, layers, t, conditional_classes(m)?)?;
            let clf = match m["guidance"].parse()? {
                GuidanceMode::Classifier => {
                    let k = classes_of(m)?.ok_or_else(|| Error::contract("classifier guidance needs labels"))?;
                    Some(NoisyClassifier::new(dim, hidden, 2, t, k)?)
                }
                _ => None,
            };
            Model::Diffusion { eps, sched, clf }
        }
        Family::Flowmatch => Model::Flow(VelocityModel::new(dim, get(m, "hidden")?, get(m, "layers")?, conditional_classes(m)?)?),
        Family::Vae => {
            let cfg = VaeConfig {
                beta: get(m, "beta")?,
                latent: get(m, "latent")?,
                conditional: get(m, "conditional")?,
            };
            Model::Vae(Vae::new(dim, get(m, "hidden")?, get(m, "layers")?, &cfg, get(m, "likelihood")?, classes_of(m)?)?)
        }
        Family::Nflow => Model::Nflow(RealNvp::new(dim, get(m, "couplings")?, get(m, "hidden")?, get(m, "layers")?)?),
        Family::Gan => {
            let variant: GanVariant = m["variant"].parse()?;
            let config = GanConfig {
                variant,
                n_critic: get(m, "n_critic")?,
                lambda_gp: get(m, "lambda_gp")?,
                delta: get(m, "gp_delta")?,
                directions: get(m, "gp_directions")?,
            };
            config.validate()?;
            let classes = conditional_classes(m)?;
            let (hidden, layers) = (get(m, "hidden")?, get(m, "layers")?);
            let out = if image { OutputActivation::Sigmoid } else { OutputActivation::None };
            Model::Gan(Gan {
                config,
                gen: Generator::new(dim, hidden, layers, out, classes)?,
                critic: Critic::new(dim, hidden, layers, classes)?,
            })
        }
        Family::Ebm => Model::Rbm { n_vis: dim, n_hid: get(m, "n_hidden")? },
    })
}

impl Model {
    fn init(&self, store: &mut ParamStore, rng: &mut Rng) -> Result<()> {
        match self {
            Model::Diffusion { eps, clf, .. } => {
                eps.init(store, rng)?;
                clf.as_ref().map_or(Ok(()), |c| c.init(store, rng))
            }
            Model::Flow(v) => v.init(store, rng),
            Model::Vae(v) => v.init(store, rng),
            Model::Nflow(f) => f.init(store, rng),
            Model::Gan(g) => g.init(store, rng),
            Model::Rbm { n_vis, n_hid } => {
                *store = Rbm::random(*n_vis, *n_hid, 0.01, rng).to_store()?;
                Ok(())
            }
        }
    }

    fn check(&self, store: &ParamStore) -> Result<()> {
        match self {
            Model::Diffusion { eps, clf, .. } => {
                eps.check(store)?;
                clf.as_ref().map_or(Ok(()), |c| c.check(store))
            }
            Model::Flow(v) => v.check(store),
            Model::Vae(v) => v.check(store),
            Model::Nflow(f) => f.check(store),
            Model::Gan(g) => g.check(store),
            Model::Rbm { n_vis, n_hid } => {
                let r = Rbm::from_store(store)?;
                if r.n_vis() != *n_vis || r.n_hid() != *n_hid {
                    return Err(Error::shape("rbm", format!("checkpoint is {}x{}, config says {n_hid}x{n_vis}", r.n_hid(), r.n_vis())));
                }
                Ok(())
            }
        }
    }

    fn metric_names(&self) -> &'static [&'static str] {
        match self {
            Model::Diffusion { clf: None, .. } => &["loss"],
            Model::Diffusion { clf: Some(_), .. } => &["loss", "clf_loss"],
            Model::Flow(_) => &["loss"],
            Model::Vae(_) => &["loss", "recon", "kl"],
            Model::Nflow(_) => &["nll"],
            Model::Gan(_) => &["d_loss", "g_loss", "penalty"],
            Model::Rbm { .. } => &["recon_error", "free_energy"],
        }
    }
}

/// Optimizer state for one training run.
struct Opt {
    main: Adam,
    aux: Adam,
}

fn train_one(model: &Model, m: &Metadata, store: &mut ParamStore, opt: &mut Opt, batch: &Batch, rng: &mut Rng) -> Result<Vec<f64>> {
    match model {
        Model::Diffusion { eps, sched, clf } => {
            let p_uncond = get(m, "p_uncond")?;
            let loss = diffusion::train_step(eps, store, &mut opt.main, batch, sched, p_uncond, rng)?;
            match clf {
                None => Ok(vec![loss]),
                Some(c) => Ok(vec![loss, c.train_step(store, &mut opt.aux, batch, sched, rng)?]),
            }
        }
        Model::Flow(v) => Ok(vec![flowmatch::train_step(v, store, &mut opt.main, batch, rng)?]),
        Model::Vae(v) => {
            let s = vae::train_step(v, store, &mut opt.main, batch, rng)?;
            if s.kl_min < 0.0 {
                return Err(Error::contract(format!("negative KL {}", s.kl_min)));
            }
            Ok(vec![s.loss, s.recon, s.kl])
        }
        Model::Nflow(f) => Ok(vec![nflow::train_step(f, store, &mut opt.main, &batch.x)?]),
        Model::Gan(g) => {
            let s = gan::gan_train_step(g, store, batch, rng, &mut opt.main, &mut opt.aux)?;
            Ok(vec![s.d_loss, s.g_loss, s.penalty])
        }
        Model::Rbm { .. } => {
            let mut rbm = Rbm::from_store(store)?;
            ebm::cd_k_update(&mut rbm, &batch.x, get(m, "cd_k")?, get(m, "lr")?, rng)?;
            let h = ebm::rbm_h_probs(&rbm, &batch.x)?;
            let recon = ebm::rbm_v_probs(&rbm, &h)?;
            let err = recon.data().iter().zip(batch.x.data()).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / batch.len() as f64;
            let f = ebm::rbm_free_energy(&rbm, &batch.x)?;
            *store = rbm.to_store()?;
            Ok(vec![err, f.iter().sum::<f64>() / f.len() as f64])
        }
    }
}

/// Options for drawing samples, train-time defaults overlaid by flags.
struct SampleOpts {
    variant: String,
    n: usize,
    steps: Option<usize>,
    guidance: GuidanceMode,
    scale: f64,
    label: Option<usize>,
    eta: f64,
    method: OdeMethod,
}

fn sample_opts(variant: &str, cfg: &Metadata, flags: &Metadata) -> Result<SampleOpts> {
    let pick = |k: &str| flags.get(k).or_else(|| cfg.get(k)).cloned();
    let guidance = match pick("guidance") {
        Some(g) => g.parse()?,
        None => GuidanceMode::None,
    };
    let label = match pick("label") {
        Some(l) => Some(l.parse().map_err(|_| Error::Usage(format!("invalid label `{l}`")))?),
        None => None,
    };
    let parse_f = |k: &str, d: f64| -> Result<f64> {
        pick(k).map_or(Ok(d), |v| v.parse().map_err(|_| Error::Usage(format!("invalid `{k}`"))))
    };
    let n = match pick("samples") {
        Some(v) => v.parse().map_err(|_| Error::Usage("invalid `samples`".into()))?,
        None => 500,
    };
    let steps = match flags.get("steps").or_else(|| cfg.get("sample_steps")) {
        Some(v) => Some(v.parse().map_err(|_| Error::Usage("invalid `steps`".into()))?),
        None => None,
    };
    let method = match pick("method") {
        Some(v) => v.parse()?,
        None => OdeMethod::Euler,
    };
    Ok(SampleOpts {
        variant: variant.to_string(),
        n,
        steps,
        guidance,
        scale: parse_f("guidance_scale", 0.0)?,
        label,
        eta: parse_f("eta", 0.0)?,
        method,
    })
}

fn draw_samples(model: &Model, store: &ParamStore, o: &SampleOpts, rng: &mut Rng) -> Result<Tensor> {
    match model {
        Model::Diffusion { eps, sched, clf } => {
            let pred = diffusion::Trained { model: eps, params: store };
            let guidance = match o.guidance {
                GuidanceMode::None => Guidance::None,
                GuidanceMode::Cfg => {
                    if eps.label.is_none() {
                        return Err(Error::contract("classifier-free guidance needs a conditionally trained model"));
                    }
                    Guidance::Cfg { weight: o.scale }
                }
                GuidanceMode::Classifier => {
                    let c = clf.as_ref().ok_or_else(|| Error::contract("checkpoint holds no guidance classifier"))?;
                    Guidance::Classifier { classifier: c, params: store, weight: o.scale }
                }
            };
            if o.guidance != GuidanceMode::None && o.label.is_none() {
                return Err(Error::Usage("guided sampling needs `--label`".into()));
            }
            let label = if o.guidance == GuidanceMode::None && eps.label.is_none() { None } else { o.label };
            let dim = eps.data_dim;
            match o.variant.as_str() {
                "ddim" => {
                    let s = o.steps.unwrap_or(50).min(sched.steps());
                    diffusion::ddim_sample(&pred, sched, s, o.eta, o.n, dim, &guidance, rng, label)
                }
                _ => diffusion::ddpm_sample(&pred, sched, o.n, dim, &guidance, rng, label),
            }
        }
        Model::Flow(v) => {
            let cfg = OdeConfig { steps: o.steps.unwrap_or(flowmatch::DEFAULT_ODE_STEPS), method: o.method };
            let label = match (&v.label, o.label) {
                (Some(_), None) => return Err(Error::Usage("conditional flow needs `--label`".into())),
                (_, l) => l,
            };
            flowmatch::ode_sample(&flowmatch::Trained { model: v, params: store }, o.n, v.data_dim, &cfg, rng, label)
        }
        Model::Vae(v) => vae::vae_sample(v, store, o.n, rng, o.label),
        Model::Nflow(f) => nflow::nf_sample(f, store, o.n, rng),
        Model::Gan(g) => gan::gan_sample(&g.gen, store, o.n, rng, o.label),
        Model::Rbm { .. } => {
            let rbm = Rbm::from_store(store)?;
            let v = ebm::gibbs_sample(&rbm, o.n, o.steps.unwrap_or(1000), rng)?;
            // Report visible probabilities of the final state for display.
            let h = ebm::rbm_h_probs(&rbm, &v)?;
            ebm::rbm_v_probs(&rbm, &h)
        }
    }
}

struct MetricsLog {
    text: String,
}

impl MetricsLog {
    fn new(names: &[&str]) -> Self {
        MetricsLog {
            text: format!("epoch,step,{}\n", names.join(",")),
        }
    }

    fn push(&mut self, epoch: usize, step: usize, values: &[f64]) {
        let _ = write!(self.text, "{epoch},{step}");
        for &v in values {
            if v == 0.0 || (1e-4..1e6).contains(&v.abs()) {
                let _ = write!(self.text, ",{v}");
            } else {
                let _ = write!(self.text, ",{v:e}");
            }
        }
        self.text.push('\n');
    }
}

/// Runs training and returns the run directory.
pub fn cmd_train(cfg: &RunConfig) -> Result<PathBuf> {
    let dir = run_dir(&cfg.out, cfg.family, &cfg.variant, cfg.seed);
    let mut meta = cfg.settings.clone();
    let mut loaded = load_dataset(&meta)?;
    set(&mut meta, "data_dim", loaded.dim);
    set(&mut meta, "classes", loaded.classes.map(|k| k.to_string()).unwrap_or_default());
    record_artifact(&mut meta, loaded.artifact);
    if let Some(g) = meta.get("guidance") {
        if g == "cfg" {
            set(&mut meta, "conditional", true);
        }
    }
    let model = build(cfg.family, &meta)?;
    persist::write_file(&dir.join(persist::CONFIG_FILE), persist::encode_metadata(&meta).as_bytes())?;

    let mut rng = Rng::seed_from(cfg.seed);
    let mut store = ParamStore::new();
    model.init(&mut store, &mut rng)?;
    let lr: f64 = get(&meta, "lr")?;
    let adam_cfg = AdamConfig {
        lr,
        beta1: get_opt(&meta, "adam_beta1")?.unwrap_or(0.9),
        beta2: get_opt(&meta, "adam_beta2")?.unwrap_or(0.999),
        ..AdamConfig::default()
    };
    let mut opt = Opt {
        main: Adam::new(adam_cfg.clone()),
        aux: Adam::new(adam_cfg),
    };
    let epochs: usize = get(&meta, "epochs")?;
    let steps: usize = get(&meta, "steps")?;
    let batch_size: usize = get(&meta, "batch_size")?;
    let names = model.metric_names();
    let mut log = MetricsLog::new(names);
    let metrics_path = dir.join(METRICS_FILE);
    let mut opts = sample_opts(&cfg.variant, &meta, &Metadata::new())?;
    if opts.label.is_none() {
        opts.guidance = GuidanceMode::None;
    }
    for epoch in 1..=epochs {
        for step in 1..=steps {
            let batch = loaded.source.next(batch_size, &mut rng)?;
            let values = train_one(&model, &meta, &mut store, &mut opt, &batch, &mut rng);
            let ok = matches!(&values, Ok(v) if v.iter().all(|x| x.is_finite()));
            if !ok {
                persist::write_file(&metrics_path, log.text.as_bytes())?;
                return Err(match values {
                    Err(e) if !matches!(e, Error::Domain { .. }) => e,
                    _ => Error::NonFinite { epoch, step },
                });
            }
            log.push(epoch, step, &values?);
        }
        persist::save_checkpoint(&store, &meta, &dir.join(checkpoint_name(epoch)))?;
        persist::write_file(&metrics_path, log.text.as_bytes())?;
        let mut srng = Rng::seed_from(cfg.seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let samples = draw_samples(&model, &store, &opts, &mut srng)?;
        write_artifact(loaded.artifact, &samples, &dir.join(format!("samples_{epoch:03}")))?;
    }
    Ok(dir)
}

/// Draws samples and returns the written file.
pub fn cmd_sample(cfg: &RunConfig) -> Result<PathBuf> {
    let mut rng = Rng::seed_from(cfg.seed);
    if cfg.family == Family::Ebm && cfg.variant == "langevin" {
        let energy: Energy = cfg.settings.get("energy").map_or(Ok(Energy::StdGaussian), |e| e.parse())?;
        let d = LangevinConfig::default();
        let lc = LangevinConfig {
            steps: get_opt(&cfg.settings, "steps")?.unwrap_or(d.steps),
            eta: get_opt(&cfg.settings, "eta")?.unwrap_or(d.eta),
            ..d
        };
        let n = get_opt(&cfg.settings, "samples")?.unwrap_or(1000);
        let x = ebm::langevin_sample(&energy, &lc, n, &mut rng, Exec::default())?;
        let dir = run_dir(&cfg.out, cfg.family, &cfg.variant, cfg.seed).join("samples");
        return write_artifact(Artifact::Points, &x, &dir.join(format!("langevin_{}_seed{}", energy.name(), cfg.seed)));
    }
    let ckpt = cfg.checkpoint.as_ref().ok_or_else(|| Error::Usage("`sample` needs `--checkpoint`".into()))?;
    let (store, meta) = persist::load_checkpoint(ckpt)?;
    let found = meta.get("family").cloned().unwrap_or_default();
    if found != cfg.family.name() {
        return Err(Error::Mismatch {
            found: format!("{found} ({})", ckpt.display()),
            requested: cfg.family.name().to_string(),
        });
    }
    let model = build(cfg.family, &meta)?;
    model.check(&store)?;
    let opts = sample_opts(&cfg.variant, &meta, &cfg.settings)?;
    let samples = draw_samples(&model, &store, &opts, &mut rng)?;
    let stem = ckpt.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let mut name = format!("{stem}_{}", cfg.variant);
    if opts.guidance != GuidanceMode::None {
        let _ = write!(name, "_{}{}", opts.guidance.name(), opts.scale);
    }
    if let Some(l) = opts.label {
        let _ = write!(name, "_label{l}");
    }
    let _ = write!(name, "_seed{}", cfg.seed);
    let dir = ckpt.parent().unwrap_or(Path::new(".")).join("samples");
    write_artifact(artifact_of(&meta)?, &samples, &dir.join(name))
}

pub fn run(cfg: &RunConfig) -> Result<PathBuf> {
    match cfg.command {
        Command::Train => cmd_train(cfg),
        Command::Sample => cmd_sample(cfg),
    }
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Usage(_) => 1,
        _ => 2,
    }
}

/// Parses `args` (including the program name), runs the command, and
/// returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    let (command, flags) = match cli.command {
        Sub::Train(f) => (Command::Train, f),
        Sub::Sample(f) => (Command::Sample, f),
    };
    let result = resolve(command, &flags).and_then(|cfg| run(&cfg));
    match result {
        Ok(path) => {
            println!("{}", path.display());
            0
        }
        Err(e) => {
            eprintln!("venom: {e}");
            exit_code(&e)
        }
    }
}
