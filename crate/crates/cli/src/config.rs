//! Line-based `key = value` experiment configuration with dotted keys.
//!
//! Layers are applied in order: preset, config file, `--set` overrides and
//! command-line flags. Setting `sensing.m` in a layer clears an inherited
//! `sensing.ratio` and vice versa; giving both in the same layer is an error.

use std::collections::BTreeMap;
use std::fmt;
use std::path::PathBuf;

use gpcs_core::adam::AdamConfig;
use gpcs_core::solvers::{InitPolicy, InnerConfig, InnerOptimizer, SolverConfig};
use gpcs_core::training::began::BeganConfig;
use gpcs_core::training::gan::{GanArchitecture, GanTrainConfig};
use gpcs_core::training::pinv::PinvTrainConfig;

use crate::error::CliError;

pub type Pairs = BTreeMap<String, String>;

/// Parses `key = value` lines. `#` starts a comment; blank lines are skipped.
pub fn parse_pairs(text: &str) -> Result<Pairs, CliError> {
    let mut out = Pairs::new();
    for (no, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| CliError::Config(format!("line {}: expected key = value, got {raw:?}", no + 1)))?;
        let key = k.trim();
        if key.is_empty() || !key.chars().all(|c| c.is_ascii_alphanumeric() || matches!(c, '.' | '_' | '-')) {
            return Err(CliError::Config(format!("line {}: bad key {key:?}", no + 1)));
        }
        if out.insert(key.to_string(), v.trim().to_string()).is_some() {
            return Err(CliError::Config(format!("line {}: duplicate key {key}", no + 1)));
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum ModelKind {
    /// Linear manifold with closed-form generator and pseudo-inverse.
    Synthetic,
    Gan,
    Cgan,
    BeganC,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Synthetic => "synthetic",
            ModelKind::Gan => "gan",
            ModelKind::Cgan => "cgan",
            ModelKind::BeganC => "began-c",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "synthetic" => ModelKind::Synthetic,
            "gan" => ModelKind::Gan,
            "cgan" => ModelKind::Cgan,
            "began-c" | "began" => ModelKind::BeganC,
            _ => return None,
        })
    }

    pub fn conditional(self) -> bool {
        matches!(self, ModelKind::Cgan | ModelKind::BeganC)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolverChoice {
    Pgd,
    Npgd,
    Both,
}

impl SolverChoice {
    pub fn runs_pgd(self) -> bool {
        self != SolverChoice::Npgd
    }

    pub fn runs_npgd(self) -> bool {
        self != SolverChoice::Pgd
    }
}

/// One entry of the SNR sweep.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Snr {
    Noiseless,
    Db(f64),
}

impl Snr {
    /// `+inf` for the noiseless case.
    pub fn db(self) -> f64 {
        match self {
            Snr::Noiseless => f64::INFINITY,
            Snr::Db(d) => d,
        }
    }

    pub fn label(self) -> String {
        match self {
            Snr::Noiseless => "noiseless".into(),
            Snr::Db(d) => format!("{d}dB"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Measurements {
    Count(usize),
    Ratio(f64),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Step {
    Fixed(f64),
    /// `1 / beta-hat` from a REC estimate on the generator range.
    Auto,
}

/// Ratio to measurement count used for MNIST in the reference experiments.
pub const MNIST_PINNED: [(f64, usize); 5] = [(0.02, 15), (0.03, 23), (0.05, 39), (0.10, 78), (0.20, 156)];

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub out: PathBuf,
    pub jobs: usize,
    pub timing: bool,
    pub grid_cols: usize,

    pub model: ModelKind,
    pub latent_dim: usize,

    pub train_images: PathBuf,
    pub test_images: PathBuf,
    pub train_count: usize,
    pub test_count: usize,
    pub test_offset: usize,
    pub synthetic_n: usize,
    pub synthetic_k: usize,

    pub measurements: Measurements,
    pub sensing_seed: u64,
    pub snrs: Vec<Snr>,

    pub solver: SolverChoice,
    pub solver_cfg: SolverConfig,
    pub step: Step,

    pub arch: GanArchitecture,
    pub gan: GanTrainConfig,
    pub began: BeganConfig,
    pub pinv: PinvTrainConfig,
    pub checkpoint_every: usize,

    pub certify_samples: usize,
    pub certify_oracle: InnerConfig,
}

const KEYS: &[&str] = &[
    "seed",
    "jobs",
    "output.dir",
    "output.timing",
    "output.grid_cols",
    "model.kind",
    "model.latent_dim",
    "model.hidden",
    "data.train_images",
    "data.test_images",
    "data.train_count",
    "data.test_count",
    "data.test_offset",
    "synthetic.n",
    "synthetic.k",
    "sensing.m",
    "sensing.ratio",
    "sensing.seed",
    "sensing.snr_db",
    "solver.kind",
    "solver.outer_iters",
    "solver.step",
    "solver.init",
    "solver.inner_iters",
    "solver.inner_lr",
    "solver.inner_optimizer",
    "solver.inner_warm_start",
    "solver.restarts",
    "train.epochs",
    "train.batch_size",
    "train.lr",
    "train.beta1",
    "train.beta2",
    "train.eps",
    "train.label_smoothing",
    "train.input_noise_std",
    "train.dropout",
    "train.checkpoint_every",
    "began.gamma",
    "began.lambda",
    "began.bottleneck",
    "pinv.epochs",
    "pinv.batch_size",
    "pinv.lr",
    "pinv.lambda",
    "pinv.sigma2_img",
    "pinv.sigma2_meas",
    "pinv.conditional",
    "pinv.samples_per_epoch",
    "certify.samples",
    "certify.oracle_iters",
    "certify.oracle_lr",
];

pub const PRESETS: &[&str] = &["smoke", "mnist-gan", "mnist-cgan", "mnist-began"];

/// Key/value layer of a named preset.
pub fn preset(name: &str) -> Result<Pairs, CliError> {
    let text = match name {
        "smoke" => {
            "model.kind = synthetic\nsynthetic.n = 16\nsynthetic.k = 4\nmodel.latent_dim = 4\nsensing.m = 8\n\
             sensing.snr_db = noiseless, 20\nsolver.kind = both\ndata.test_count = 8\noutput.grid_cols = 4\n"
        }
        "mnist-gan" | "mnist-cgan" | "mnist-began" => {
            let kind = match name {
                "mnist-gan" => "gan",
                "mnist-cgan" => "cgan",
                _ => "began-c",
            };
            return parse_pairs(&format!(
                "model.kind = {kind}\nmodel.latent_dim = 64\nsensing.m = 39\ntrain.batch_size = 64\n\
                 train.label_smoothing = 0.1\ntrain.input_noise_std = {}\ntrain.dropout = 0.5\n",
                0.5f64.sqrt()
            ));
        }
        other => {
            return Err(CliError::Usage(format!(
                "unknown preset {other:?} (available: {})",
                PRESETS.join(", ")
            )))
        }
    };
    parse_pairs(text)
}

/// Folds `layer` into `base` with the m/ratio exclusivity rule.
pub fn merge(base: &mut Pairs, layer: Pairs) -> Result<(), CliError> {
    if layer.contains_key("sensing.m") && layer.contains_key("sensing.ratio") {
        return Err(CliError::Config("give exactly one of sensing.m and sensing.ratio".into()));
    }
    if layer.contains_key("sensing.m") {
        base.remove("sensing.ratio");
    }
    if layer.contains_key("sensing.ratio") {
        base.remove("sensing.m");
    }
    base.extend(layer);
    Ok(())
}

struct Reader<'p> {
    pairs: &'p Pairs,
}

impl Reader<'_> {
    fn raw(&self, key: &str) -> Option<&str> {
        self.pairs.get(key).map(String::as_str)
    }

    fn bad(key: &str, v: &str, what: &str) -> CliError {
        CliError::Config(format!("{key} = {v:?}: expected {what}"))
    }

    fn get<T: std::str::FromStr>(&self, key: &str, default: T, what: &str) -> Result<T, CliError> {
        match self.raw(key) {
            None => Ok(default),
            Some(v) => v.parse().map_err(|_| Self::bad(key, v, what)),
        }
    }

    fn usize(&self, key: &str, default: usize) -> Result<usize, CliError> {
        self.get(key, default, "a non-negative integer")
    }

    fn f64(&self, key: &str, default: f64) -> Result<f64, CliError> {
        let v: f64 = self.get(key, default, "a number")?;
        if !v.is_finite() {
            return Err(CliError::Config(format!("{key} must be finite")));
        }
        Ok(v)
    }

    fn bool(&self, key: &str, default: bool) -> Result<bool, CliError> {
        match self.raw(key) {
            None => Ok(default),
            Some("true" | "yes" | "1" | "on") => Ok(true),
            Some("false" | "no" | "0" | "off") => Ok(false),
            Some(v) => Err(Self::bad(key, v, "a boolean")),
        }
    }

    fn path(&self, key: &str, default: &str) -> PathBuf {
        PathBuf::from(self.raw(key).unwrap_or(default))
    }
}

fn list<T>(s: &str, f: impl Fn(&str) -> Option<T>) -> Option<Vec<T>> {
    s.split(',').map(str::trim).filter(|p| !p.is_empty()).map(f).collect()
}

fn fmt_list<T: fmt::Display>(v: &[T]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

impl ExperimentConfig {
    pub fn from_pairs(pairs: &Pairs) -> Result<Self, CliError> {
        if let Some(k) = pairs.keys().find(|k| !KEYS.contains(&k.as_str())) {
            return Err(CliError::Config(format!("unknown key {k}")));
        }
        if pairs.contains_key("sensing.m") && pairs.contains_key("sensing.ratio") {
            return Err(CliError::Config("give exactly one of sensing.m and sensing.ratio".into()));
        }
        let r = Reader { pairs };
        let model = match r.raw("model.kind") {
            None => ModelKind::Gan,
            Some(v) => ModelKind::parse(v).ok_or_else(|| Reader::bad("model.kind", v, "synthetic, gan, cgan or began-c"))?,
        };
        let latent_dim = r.usize("model.latent_dim", 64)?;
        let hidden = match r.raw("model.hidden") {
            None => vec![256, 256],
            Some(v) => list(v, |p| p.parse().ok()).ok_or_else(|| Reader::bad("model.hidden", v, "comma-separated widths"))?,
        };
        let measurements = match (r.raw("sensing.m"), r.raw("sensing.ratio")) {
            (Some(_), _) => Measurements::Count(r.usize("sensing.m", 0)?),
            (None, Some(_)) => {
                let ratio = r.f64("sensing.ratio", 0.0)?;
                if !(ratio > 0.0 && ratio <= 1.0) {
                    return Err(CliError::Config(format!("sensing.ratio {ratio} outside (0, 1]")));
                }
                Measurements::Ratio(ratio)
            }
            (None, None) => Measurements::Count(39),
        };
        let snrs = match r.raw("sensing.snr_db") {
            None => vec![Snr::Noiseless],
            Some(v) => list(v, |p| match p {
                "noiseless" | "inf" => Some(Snr::Noiseless),
                d => d.parse::<f64>().ok().filter(|x| x.is_finite()).map(Snr::Db),
            })
            .filter(|l| !l.is_empty())
            .ok_or_else(|| Reader::bad("sensing.snr_db", v, "comma-separated dB values or noiseless"))?,
        };
        let solver = match r.raw("solver.kind").unwrap_or("both") {
            "pgd" => SolverChoice::Pgd,
            "npgd" => SolverChoice::Npgd,
            "both" => SolverChoice::Both,
            v => return Err(Reader::bad("solver.kind", v, "pgd, npgd or both")),
        };
        let step = match r.raw("solver.step") {
            Some("auto") => Step::Auto,
            _ => Step::Fixed(r.f64("solver.step", 0.5)?),
        };
        let init = match r.raw("solver.init").unwrap_or("zero") {
            "zero" => InitPolicy::Zero,
            "at_y" | "adjoint" => InitPolicy::AdjointY,
            v => return Err(Reader::bad("solver.init", v, "zero or at_y")),
        };
        let optimizer = match r.raw("solver.inner_optimizer").unwrap_or("gd") {
            "gd" => InnerOptimizer::GradientDescent,
            "adam" => InnerOptimizer::Adam,
            v => return Err(Reader::bad("solver.inner_optimizer", v, "gd or adam")),
        };
        let seed = r.get("seed", 0u64, "an unsigned integer")?;
        let solver_cfg = SolverConfig {
            outer_iters: r.usize("solver.outer_iters", 30)?,
            step: match step {
                Step::Fixed(s) => s,
                Step::Auto => 0.5,
            },
            init,
            inner: InnerConfig {
                iters: r.usize("solver.inner_iters", 100)?,
                lr: r.f64("solver.inner_lr", 0.01)?,
                optimizer,
                warm_start: r.bool("solver.inner_warm_start", true)?,
                restarts: r.usize("solver.restarts", 0)?,
            },
            seed,
            record_iterates: false,
        };
        let adam = AdamConfig {
            learning_rate: r.f64("train.lr", 1e-4)?,
            beta1: r.f64("train.beta1", 0.5)?,
            beta2: r.f64("train.beta2", 0.999)?,
            epsilon: r.f64("train.eps", 1e-8)?,
        };
        let epochs = r.usize("train.epochs", 200)?;
        let batch_size = r.usize("train.batch_size", 64)?;
        let gan = GanTrainConfig {
            epochs,
            batch_size,
            latent_dim,
            adam,
            conditional: model == ModelKind::Cgan,
            label_smoothing: r.f64("train.label_smoothing", 0.0)?,
            input_noise_std: r.f64("train.input_noise_std", 0.0)?,
            dropout_rate: r.f64("train.dropout", 0.0)?,
        };
        gan.validate().map_err(|e| CliError::Config(e.to_string()))?;
        let began = BeganConfig {
            epochs,
            batch_size,
            latent_dim,
            adam,
            gamma: r.f64("began.gamma", 0.5)?,
            lambda: r.f64("began.lambda", 0.001)?,
            conditional: true,
            bottleneck: match r.raw("began.bottleneck") {
                None => None,
                Some(_) => Some(r.usize("began.bottleneck", latent_dim)?),
            },
        };
        let pinv = PinvTrainConfig {
            epochs: r.usize("pinv.epochs", 100)?,
            batch_size: r.usize("pinv.batch_size", 64)?,
            lambda_latent: r.f64("pinv.lambda", 0.1)?,
            sigma2_meas: r.f64("pinv.sigma2_meas", 0.0)?,
            sigma2_img: r.f64("pinv.sigma2_img", 1.0)?,
            conditional_pinv: r.bool("pinv.conditional", false)?,
            adam: AdamConfig {
                learning_rate: r.f64("pinv.lr", adam.learning_rate)?,
                ..adam
            },
            samples_per_epoch: r.usize("pinv.samples_per_epoch", 10_000)?,
        };
        pinv.validate().map_err(|e| CliError::Config(e.to_string()))?;
        let cfg = Self {
            seed,
            out: r.path("output.dir", "runs/default"),
            jobs: r.usize("jobs", 1)?.max(1),
            timing: r.bool("output.timing", true)?,
            grid_cols: r.usize("output.grid_cols", 8)?.max(1),
            model,
            latent_dim,
            train_images: r.path("data.train_images", "data/mnist/train-images-idx3-ubyte"),
            test_images: r.path("data.test_images", "data/mnist/t10k-images-idx3-ubyte"),
            train_count: r.usize("data.train_count", 10_000)?,
            test_count: r.usize("data.test_count", 64)?,
            test_offset: r.usize("data.test_offset", 0)?,
            synthetic_n: r.usize("synthetic.n", 64)?,
            synthetic_k: r.usize("synthetic.k", 8)?,
            measurements,
            sensing_seed: r.get("sensing.seed", seed, "an unsigned integer")?,
            snrs,
            solver,
            solver_cfg,
            step,
            arch: GanArchitecture {
                generator_hidden: hidden.clone(),
                discriminator_hidden: hidden,
                ..GanArchitecture::default()
            },
            gan,
            began,
            pinv,
            checkpoint_every: r.usize("train.checkpoint_every", 0)?,
            certify_samples: r.usize("certify.samples", 64)?,
            certify_oracle: InnerConfig {
                iters: r.usize("certify.oracle_iters", 2000)?,
                lr: r.f64("certify.oracle_lr", 0.01)?,
                optimizer: InnerOptimizer::GradientDescent,
                warm_start: true,
                restarts: 0,
            },
        };
        cfg.validate()?;
        Ok(cfg)
    }

    fn validate(&self) -> Result<(), CliError> {
        if self.latent_dim == 0 {
            return Err(CliError::Config("model.latent_dim must be positive".into()));
        }
        if self.model == ModelKind::Synthetic {
            if self.synthetic_k == 0 || self.synthetic_k > self.synthetic_n {
                return Err(CliError::Config("need 1 <= synthetic.k <= synthetic.n".into()));
            }
            if self.latent_dim != self.synthetic_k {
                return Err(CliError::Config("model.latent_dim must equal synthetic.k".into()));
            }
        }
        if let Measurements::Count(0) = self.measurements {
            return Err(CliError::Config("sensing.m must be positive".into()));
        }
        if self.solver_cfg.outer_iters == 0 {
            return Err(CliError::Config("solver.outer_iters must be at least 1".into()));
        }
        Ok(())
    }

    /// The signal dimension without touching the data files.
    pub fn signal_dim_hint(&self) -> usize {
        match self.model {
            ModelKind::Synthetic => self.synthetic_n,
            _ => 28 * 28,
        }
    }

    /// Measurement count for signal dimension `n`: explicit `m`, the MNIST
    /// table for image models at `n = 784`, else `round(ratio * n)`.
    pub fn m_for(&self, n: usize) -> Result<usize, CliError> {
        let m = match self.measurements {
            Measurements::Count(m) => m,
            Measurements::Ratio(r) => {
                let pinned = (self.model != ModelKind::Synthetic && n == 784)
                    .then(|| MNIST_PINNED.iter().find(|(p, _)| (p - r).abs() < 1e-12).map(|&(_, m)| m))
                    .flatten();
                pinned.unwrap_or(((r * n as f64).round() as usize).max(1))
            }
        };
        if m == 0 || m > n {
            return Err(CliError::Config(format!("measurement count {m} outside 1..={n}")));
        }
        Ok(m)
    }

    /// Every key with its effective value; `from_pairs(to_pairs())` is the
    /// identity.
    pub fn to_pairs(&self) -> Pairs {
        let mut p = Pairs::new();
        let mut put = |k: &str, v: String| {
            p.insert(k.to_string(), v);
        };
        let s = &self.solver_cfg;
        put("seed", self.seed.to_string());
        put("jobs", self.jobs.to_string());
        put("output.dir", self.out.display().to_string());
        put("output.timing", self.timing.to_string());
        put("output.grid_cols", self.grid_cols.to_string());
        put("model.kind", self.model.name().into());
        put("model.latent_dim", self.latent_dim.to_string());
        put("model.hidden", fmt_list(&self.arch.generator_hidden));
        put("data.train_images", self.train_images.display().to_string());
        put("data.test_images", self.test_images.display().to_string());
        put("data.train_count", self.train_count.to_string());
        put("data.test_count", self.test_count.to_string());
        put("data.test_offset", self.test_offset.to_string());
        put("synthetic.n", self.synthetic_n.to_string());
        put("synthetic.k", self.synthetic_k.to_string());
        match self.measurements {
            Measurements::Count(m) => put("sensing.m", m.to_string()),
            Measurements::Ratio(r) => put("sensing.ratio", r.to_string()),
        }
        put("sensing.seed", self.sensing_seed.to_string());
        let snrs: Vec<String> = self
            .snrs
            .iter()
            .map(|s| match s {
                Snr::Noiseless => "noiseless".into(),
                Snr::Db(d) => d.to_string(),
            })
            .collect();
        put("sensing.snr_db", snrs.join(","));
        put(
            "solver.kind",
            match self.solver {
                SolverChoice::Pgd => "pgd",
                SolverChoice::Npgd => "npgd",
                SolverChoice::Both => "both",
            }
            .into(),
        );
        put("solver.outer_iters", s.outer_iters.to_string());
        put(
            "solver.step",
            match self.step {
                Step::Auto => "auto".into(),
                Step::Fixed(v) => v.to_string(),
            },
        );
        put(
            "solver.init",
            match s.init {
                InitPolicy::Zero => "zero",
                InitPolicy::AdjointY => "at_y",
            }
            .into(),
        );
        put("solver.inner_iters", s.inner.iters.to_string());
        put("solver.inner_lr", s.inner.lr.to_string());
        put(
            "solver.inner_optimizer",
            match s.inner.optimizer {
                InnerOptimizer::GradientDescent => "gd",
                InnerOptimizer::Adam => "adam",
            }
            .into(),
        );
        put("solver.inner_warm_start", s.inner.warm_start.to_string());
        put("solver.restarts", s.inner.restarts.to_string());
        let g = &self.gan;
        put("train.epochs", g.epochs.to_string());
        put("train.batch_size", g.batch_size.to_string());
        put("train.lr", g.adam.learning_rate.to_string());
        put("train.beta1", g.adam.beta1.to_string());
        put("train.beta2", g.adam.beta2.to_string());
        put("train.eps", g.adam.epsilon.to_string());
        put("train.label_smoothing", g.label_smoothing.to_string());
        put("train.input_noise_std", g.input_noise_std.to_string());
        put("train.dropout", g.dropout_rate.to_string());
        put("train.checkpoint_every", self.checkpoint_every.to_string());
        put("began.gamma", self.began.gamma.to_string());
        put("began.lambda", self.began.lambda.to_string());
        if let Some(b) = self.began.bottleneck {
            put("began.bottleneck", b.to_string());
        }
        let q = &self.pinv;
        put("pinv.epochs", q.epochs.to_string());
        put("pinv.batch_size", q.batch_size.to_string());
        put("pinv.lr", q.adam.learning_rate.to_string());
        put("pinv.lambda", q.lambda_latent.to_string());
        put("pinv.sigma2_img", q.sigma2_img.to_string());
        put("pinv.sigma2_meas", q.sigma2_meas.to_string());
        put("pinv.conditional", q.conditional_pinv.to_string());
        put("pinv.samples_per_epoch", q.samples_per_epoch.to_string());
        put("certify.samples", self.certify_samples.to_string());
        put("certify.oracle_iters", self.certify_oracle.iters.to_string());
        put("certify.oracle_lr", self.certify_oracle.lr.to_string());
        p
    }

    pub fn to_text(&self) -> String {
        self.to_pairs().iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}
