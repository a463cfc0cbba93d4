//! Run configuration: a TOML file parsed into raw sections, then resolved into
//! typed settings with field-path error messages.

use std::path::{Path, PathBuf};

use serde::Deserialize;

use crate::control::{GuidanceConfig, LossWeight};
use crate::error::{Error, Result};
use crate::numerics::Rng;
use crate::priors::GmmPrior;
use crate::schedule::{NoiseSchedule, ScheduleKind};
use crate::terminal::BlurKernel;

pub const SCHEMA_VERSION: u32 = 1;

/// Length of the 1-D grid signals rendered as 8x8 images.
pub const GRID_DIM: usize = 64;

#[derive(Debug, Clone, PartialEq)]
pub enum PriorKind {
    StandardNormal { dim: usize },
    Gmm(GmmPrior),
    /// Four 64-sample templates (random steps, square wave, spike train, sawtooth)
    /// with a shared isotropic variance.
    Templates { variance: f64 },
    /// Trained denoiser loaded from disk; ground truth is drawn from `N(0, I)`.
    Mlp { path: PathBuf },
}

impl PriorKind {
    /// Prior used for ground-truth draws and analytic references.
    pub fn data_prior(&self) -> Result<GmmPrior> {
        match self {
            PriorKind::StandardNormal { dim } => GmmPrior::standard_normal(*dim),
            PriorKind::Gmm(g) => Ok(g.clone()),
            PriorKind::Templates { variance } => template_prior(*variance),
            PriorKind::Mlp { path } => {
                let net = crate::priors::MlpDenoiser::load(path)?;
                GmmPrior::standard_normal(crate::priors::ScoreModel::dim(&net))
            }
        }
    }
}

/// The four-template signal prior on 64 samples.
pub fn template_prior(variance: f64) -> Result<GmmPrior> {
    let d = GRID_DIM;
    let mut r = Rng::new(2024);
    let mut level = 0.0;
    let steps: Vec<f64> = (0..d)
        .map(|i| {
            if i % 4 == 0 {
                level = if r.uniform() < 0.5 { 1.0 } else { -1.0 };
            }
            level
        })
        .collect();
    let square: Vec<f64> = (0..d).map(|i| if (i / 8) % 2 == 0 { 1.0 } else { -1.0 }).collect();
    let spikes: Vec<f64> = (0..d).map(|i| if i % 11 == 3 { 2.0 } else { -0.2 }).collect();
    let saw: Vec<f64> = (0..d).map(|i| (i % 16) as f64 / 8.0 - 1.0).collect();
    GmmPrior::new(vec![0.25; 4], vec![steps, square, spikes, saw], vec![variance; 4])
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScheduleConfig {
    pub kind: ScheduleKind,
    pub steps: usize,
    pub beta_min: f64,
    pub beta_max: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            kind: ScheduleKind::Linear,
            steps: 1000,
            beta_min: 1e-4,
            beta_max: 0.02,
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::build(self.kind, self.steps, self.beta_min, self.beta_max)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum OperatorKind {
    Identity,
    /// Fixed 0/1 entries, or drawn from the ground-truth RNG with drop probability.
    Mask { entries: Option<Vec<f64>>, drop: f64 },
    Downsample { factor: usize },
    Conv { kernel: BlurKernel },
    NonlinearBlur { kernel: BlurKernel, saturation: f64 },
    /// Convolution with an unknown kernel, estimated jointly from `init`.
    BlindConv { truth: BlurKernel, init: BlurKernel },
}

impl OperatorKind {
    pub fn name(&self) -> &'static str {
        match self {
            OperatorKind::Identity => "identity",
            OperatorKind::Mask { .. } => "mask",
            OperatorKind::Downsample { .. } => "downsample",
            OperatorKind::Conv { .. } => "conv",
            OperatorKind::NonlinearBlur { .. } => "nonlinear_blur",
            OperatorKind::BlindConv { .. } => "blind_conv",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProblemConfig {
    pub operator: OperatorKind,
    pub sigma_y: f64,
    pub truth_seed: u64,
}

impl Default for ProblemConfig {
    fn default() -> Self {
        Self {
            operator: OperatorKind::Identity,
            sigma_y: 0.01,
            truth_seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    /// DDIM with the guided run's plan and warm start but no control.
    Unguided,
    Ndtm,
    RbMod,
    Dps,
    LinearCg,
    /// Controlled reverse SDE.
    Ctdtm,
    /// Controlled flow.
    Ftm,
}

impl Method {
    pub const ALL: [Method; 7] = [
        Method::Unguided,
        Method::Ndtm,
        Method::RbMod,
        Method::Dps,
        Method::LinearCg,
        Method::Ctdtm,
        Method::Ftm,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Unguided => "unguided",
            Method::Ndtm => "ndtm",
            Method::RbMod => "rb_mod",
            Method::Dps => "dps",
            Method::LinearCg => "linear_cg",
            Method::Ctdtm => "ctdtm",
            Method::Ftm => "ftm",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == name)
            .ok_or_else(|| Error::config("method.name", format!("unknown method `{name}`, expected one of {}", names(&Method::ALL.map(|m| m.name())))))
    }
}

fn names(list: &[&str]) -> String {
    list.join(", ")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepParam {
    WT,
    Gamma,
    NInner,
    Steps,
}

impl SweepParam {
    pub fn name(self) -> &'static str {
        match self {
            SweepParam::WT => "w_t",
            SweepParam::Gamma => "gamma",
            SweepParam::NInner => "n_inner",
            SweepParam::Steps => "steps",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        [SweepParam::WT, SweepParam::Gamma, SweepParam::NInner, SweepParam::Steps]
            .into_iter()
            .find(|p| p.name() == name)
            .ok_or_else(|| Error::config("sweep.param", format!("unknown parameter `{name}`, expected one of w_t, gamma, n_inner, steps")))
    }

    /// Copy of `cfg` with this parameter set to `value`.
    pub fn apply(self, cfg: &GuidanceConfig, value: f64) -> Result<GuidanceConfig> {
        let mut out = cfg.clone();
        let count = |v: f64| {
            if v >= 0.0 && v.fract() == 0.0 && v <= u32::MAX as f64 {
                Ok(v as usize)
            } else {
                Err(Error::config("sweep.values", format!("{} needs a nonnegative integer, got {v}", self.name())))
            }
        };
        match self {
            SweepParam::WT => out.w_t = value,
            SweepParam::Gamma => out.gamma = value,
            SweepParam::NInner => out.n_inner = count(value)?,
            SweepParam::Steps => out.steps = count(value)?,
        }
        out.validate()?;
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepSpec {
    pub param: SweepParam,
    pub values: Vec<f64>,
    /// Each seed sets both the trajectory seed and the ground-truth seed.
    pub seeds: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub prior: PriorKind,
    pub schedule: ScheduleConfig,
    pub problem: ProblemConfig,
    pub guidance: GuidanceConfig,
    pub method: Method,
    /// DPS normalized step size.
    pub dps_step_size: f64,
    pub n_trajectories: usize,
    pub seed: u64,
    pub output_dir: Option<PathBuf>,
    pub sweep: Option<SweepSpec>,
}

impl RunConfig {
    pub fn new(prior: PriorKind) -> Self {
        Self {
            prior,
            schedule: ScheduleConfig::default(),
            problem: ProblemConfig::default(),
            guidance: GuidanceConfig::default(),
            method: Method::Ndtm,
            dps_step_size: 1.0,
            n_trajectories: 8,
            seed: 0,
            output_dir: None,
            sweep: None,
        }
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text, path.parent().unwrap_or(Path::new(".")))
    }

    /// Parses a config; relative file paths resolve against `base_dir`.
    pub fn from_toml_str(text: &str, base_dir: &Path) -> Result<Self> {
        let de = toml::Deserializer::parse(text).map_err(|e| Error::config("<root>", e.message().to_string()))?;
        let raw: RawConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let msg = e.inner().message().to_string();
            let mut field = e.path().to_string();
            // a missing key is reported at its parent; name the key itself
            if let Some(name) = msg.strip_prefix("missing field `").and_then(|r| r.split('`').next()) {
                field = if field == "." { name.to_string() } else { format!("{field}.{name}") };
            }
            if field == "." {
                field = "<root>".to_string();
            }
            Error::config(field, msg)
        })?;
        raw.resolve(base_dir)
    }

    pub fn validate(&self) -> Result<()> {
        self.guidance.validate()?;
        let dim = self.dim()?;
        if self.n_trajectories == 0 {
            return Err(Error::config("n_trajectories", "must be at least 1"));
        }
        if !(self.problem.sigma_y > 0.0) || !self.problem.sigma_y.is_finite() {
            return Err(Error::config("problem.sigma_y", format!("must be positive, got {}", self.problem.sigma_y)));
        }
        let sched = self
            .schedule
            .build()
            .map_err(|e| Error::config("schedule", e.to_string()))?;
        if self.guidance.start > sched.steps() || self.guidance.start == 0 {
            return Err(Error::config("guidance.start", format!("must lie in 1..={}, got {}", sched.steps(), self.guidance.start)));
        }
        if self.guidance.steps > self.guidance.start {
            return Err(Error::config("guidance.steps", format!("{} steps exceed start {}", self.guidance.steps, self.guidance.start)));
        }
        match &self.problem.operator {
            OperatorKind::Identity => {}
            OperatorKind::Mask { entries, drop } => {
                if let Some(m) = entries {
                    if m.len() != dim {
                        return Err(Error::config("problem.mask", format!("length {} does not match prior dimension {dim}", m.len())));
                    }
                } else if !(0.0..1.0).contains(drop) {
                    return Err(Error::config("problem.drop", format!("must lie in [0, 1), got {drop}")));
                }
            }
            OperatorKind::Downsample { factor } => {
                if *factor == 0 || dim % factor != 0 {
                    return Err(Error::config("problem.factor", format!("{factor} does not divide dimension {dim}")));
                }
            }
            OperatorKind::Conv { kernel } | OperatorKind::NonlinearBlur { kernel, .. } => {
                if kernel.len() > dim {
                    return Err(Error::config("problem.kernel_len", format!("{} exceeds dimension {dim}", kernel.len())));
                }
            }
            OperatorKind::BlindConv { truth, init } => {
                if truth.len() > dim || init.len() != truth.len() {
                    return Err(Error::config("problem.kernel_len", format!("kernel length {} incompatible with dimension {dim}", truth.len())));
                }
            }
        }
        if let OperatorKind::NonlinearBlur { saturation, .. } = self.problem.operator {
            if !(saturation > 0.0) {
                return Err(Error::config("problem.saturation", format!("must be positive, got {saturation}")));
            }
        }
        let blind = matches!(self.problem.operator, OperatorKind::BlindConv { .. });
        match self.method {
            Method::LinearCg => {
                if !matches!(self.prior, PriorKind::StandardNormal { .. }) {
                    return Err(Error::config("method.name", "linear_cg needs prior.kind = \"standard_normal\""));
                }
                if !matches!(self.problem.operator, OperatorKind::Identity | OperatorKind::Mask { .. }) {
                    return Err(Error::config("method.name", "linear_cg needs an identity or mask operator"));
                }
            }
            Method::Dps | Method::RbMod | Method::Ctdtm | Method::Ftm if blind => {
                return Err(Error::config("method.name", format!("{} does not support blind_conv", self.method.name())));
            }
            Method::Ftm if matches!(self.prior, PriorKind::Mlp { .. }) => {
                return Err(Error::config("method.name", "ftm needs an analytic prior"));
            }
            Method::Dps if !(self.dps_step_size > 0.0) => {
                return Err(Error::config("method.step_size", format!("must be positive, got {}", self.dps_step_size)));
            }
            _ => {}
        }
        if let Some(s) = &self.sweep {
            if s.values.is_empty() {
                return Err(Error::config("sweep.values", "grid must not be empty"));
            }
            if s.seeds.is_empty() {
                return Err(Error::config("sweep.seeds", "must not be empty"));
            }
        }
        Ok(())
    }

    /// Signal dimension implied by the prior.
    pub fn dim(&self) -> Result<usize> {
        match &self.prior {
            PriorKind::StandardNormal { dim } => Ok(*dim),
            PriorKind::Gmm(g) => Ok(g.means()[0].len()),
            PriorKind::Templates { .. } => Ok(GRID_DIM),
            PriorKind::Mlp { path } => {
                let net = crate::priors::MlpDenoiser::load(path).map_err(|e| Error::config("prior.model", e.to_string()))?;
                Ok(crate::priors::ScoreModel::dim(&net))
            }
        }
    }
}

/// Named guidance tuples `(N, gamma, eta, start, w_T, w_s, w_c)`.
pub fn preset(name: &str) -> Option<GuidanceConfig> {
    let base = GuidanceConfig::default();
    let tuple = |n_inner, gamma, eta, start, w_t, w_s, w_c| GuidanceConfig {
        n_inner,
        gamma,
        eta,
        start,
        w_t,
        w_s,
        w_c,
        ..base.clone()
    };
    let zero = LossWeight::Fixed(0.0);
    let ddim = LossWeight::Ddim;
    match name {
        "default" => Some(base.clone()),
        "sr4" => Some(tuple(5, 1.0, 0.7, 400, 50.0, ddim, ddim)),
        "inpaint" => Some(tuple(2, 4.0, 0.2, 500, 1.0, zero, zero)),
        "nonlinear_deblur" => Some(tuple(5, 5.0, 0.1, 400, 1.0, zero, zero)),
        "bid" => Some(GuidanceConfig {
            kernel_lr: 0.003,
            ..tuple(15, 1.0, 0.7, 400, 50.0, ddim, ddim)
        }),
        _ => None,
    }
}

pub const PRESETS: [&str; 5] = ["default", "sr4", "inpaint", "nonlinear_deblur", "bid"];

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    schema_version: u32,
    #[serde(default)]
    seed: u64,
    #[serde(default = "default_trajectories")]
    n_trajectories: usize,
    output_dir: Option<PathBuf>,
    preset: Option<String>,
    prior: RawPrior,
    #[serde(default)]
    schedule: RawSchedule,
    #[serde(default)]
    problem: RawProblem,
    guidance: Option<toml::Table>,
    #[serde(default)]
    method: RawMethod,
    sweep: Option<RawSweep>,
}

fn default_trajectories() -> usize {
    8
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawPrior {
    kind: String,
    dim: Option<usize>,
    weights: Option<Vec<f64>>,
    means: Option<Vec<Vec<f64>>>,
    variances: Option<Vec<f64>>,
    variance: Option<f64>,
    model: Option<PathBuf>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct RawSchedule {
    kind: String,
    steps: usize,
    beta_min: f64,
    beta_max: f64,
}

impl Default for RawSchedule {
    fn default() -> Self {
        let d = ScheduleConfig::default();
        Self {
            kind: "linear".into(),
            steps: d.steps,
            beta_min: d.beta_min,
            beta_max: d.beta_max,
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct RawProblem {
    operator: String,
    sigma_y: f64,
    truth_seed: u64,
    mask: Option<Vec<f64>>,
    drop: f64,
    factor: usize,
    kernel_len: usize,
    kernel_std: f64,
    saturation: f64,
    init_kernel: String,
}

impl Default for RawProblem {
    fn default() -> Self {
        Self {
            operator: "identity".into(),
            sigma_y: 0.01,
            truth_seed: 0,
            mask: None,
            drop: 0.5,
            factor: 4,
            kernel_len: 5,
            kernel_std: 1.0,
            saturation: 1.0,
            init_kernel: "uniform".into(),
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct RawMethod {
    name: String,
    step_size: f64,
}

impl Default for RawMethod {
    fn default() -> Self {
        Self {
            name: "ndtm".into(),
            step_size: 1.0,
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSweep {
    param: String,
    values: Vec<f64>,
    #[serde(default = "default_seeds")]
    seeds: Vec<u64>,
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

impl RawConfig {
    fn resolve(self, base_dir: &Path) -> Result<RunConfig> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::config(
                "schema_version",
                format!("unsupported version {}, expected {SCHEMA_VERSION}", self.schema_version),
            ));
        }
        let prior = self.prior.resolve(base_dir)?;
        let schedule = ScheduleConfig {
            kind: match self.schedule.kind.as_str() {
                "linear" => ScheduleKind::Linear,
                "cosine" => ScheduleKind::Cosine,
                other => return Err(Error::config("schedule.kind", format!("unknown schedule `{other}`, expected linear or cosine"))),
            },
            steps: self.schedule.steps,
            beta_min: self.schedule.beta_min,
            beta_max: self.schedule.beta_max,
        };
        let mut guidance = match &self.preset {
            Some(name) => preset(name).ok_or_else(|| Error::config("preset", format!("unknown preset `{name}`, expected one of {}", names(&PRESETS))))?,
            None => GuidanceConfig::default(),
        };
        if let Some(overrides) = self.guidance {
            let mut table = toml::Table::try_from(&guidance).map_err(|e| Error::config("guidance", e.to_string()))?;
            table.extend(overrides);
            guidance = serde_path_to_error::deserialize(toml::Value::Table(table)).map_err(|e| {
                Error::config(format!("guidance.{}", e.path()), e.inner().to_string())
            })?;
        }
        let cfg = RunConfig {
            prior,
            schedule,
            problem: self.problem.resolve()?,
            guidance,
            method: Method::parse(&self.method.name)?,
            dps_step_size: self.method.step_size,
            n_trajectories: self.n_trajectories,
            seed: self.seed,
            output_dir: self.output_dir.map(|p| base_dir.join(p)),
            sweep: self
                .sweep
                .map(|s| {
                    Ok::<_, Error>(SweepSpec {
                        param: SweepParam::parse(&s.param)?,
                        values: s.values,
                        seeds: s.seeds,
                    })
                })
                .transpose()?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

impl RawPrior {
    fn resolve(self, base_dir: &Path) -> Result<PriorKind> {
        fn need<T>(v: Option<T>, field: &str, kind: &str) -> Result<T> {
            v.ok_or_else(|| Error::config(format!("prior.{field}"), format!("required for kind `{kind}`")))
        }
        let kind = self.kind.as_str();
        match self.kind.as_str() {
            "standard_normal" => {
                let dim = need(self.dim, "dim", kind)?;
                if dim == 0 {
                    return Err(Error::config("prior.dim", "must be at least 1"));
                }
                Ok(PriorKind::StandardNormal { dim })
            }
            "gmm" => {
                let g = GmmPrior::new(
                    need(self.weights.clone(), "weights", kind)?,
                    need(self.means.clone(), "means", kind)?,
                    need(self.variances.clone(), "variances", kind)?,
                )
                .map_err(|e| Error::config("prior", e.to_string()))?;
                if let Some(d) = self.dim {
                    if d != g.means()[0].len() {
                        return Err(Error::config("prior.dim", format!("{d} disagrees with mean length {}", g.means()[0].len())));
                    }
                }
                Ok(PriorKind::Gmm(g))
            }
            "templates" => {
                let variance = self.variance.unwrap_or(0.02);
                if !(variance > 0.0) {
                    return Err(Error::config("prior.variance", format!("must be positive, got {variance}")));
                }
                Ok(PriorKind::Templates { variance })
            }
            "mlp" => {
                let path = base_dir.join(need(self.model.clone(), "model", kind)?);
                if !path.is_file() {
                    return Err(Error::config("prior.model", format!("file {} does not exist", path.display())));
                }
                Ok(PriorKind::Mlp { path })
            }
            other => Err(Error::config(
                "prior.kind",
                format!("unknown prior `{other}`, expected one of standard_normal, gmm, templates, mlp"),
            )),
        }
    }
}

impl RawProblem {
    fn resolve(self) -> Result<ProblemConfig> {
        let kernel = || {
            BlurKernel::gaussian(self.kernel_len, self.kernel_std).map_err(|e| Error::config("problem.kernel_len", e.to_string()))
        };
        let operator = match self.operator.as_str() {
            "identity" => OperatorKind::Identity,
            "mask" => OperatorKind::Mask {
                entries: self.mask.clone(),
                drop: self.drop,
            },
            "downsample" => OperatorKind::Downsample { factor: self.factor },
            "conv" => OperatorKind::Conv { kernel: kernel()? },
            "nonlinear_blur" => OperatorKind::NonlinearBlur {
                kernel: kernel()?,
                saturation: self.saturation,
            },
            "blind_conv" => {
                let init = match self.init_kernel.as_str() {
                    "uniform" => BlurKernel::uniform(self.kernel_len),
                    "delta" => {
                        let mut taps = vec![0.0; self.kernel_len];
                        taps[self.kernel_len / 2] = 1.0;
                        BlurKernel::new(taps)
                    }
                    other => return Err(Error::config("problem.init_kernel", format!("unknown initialization `{other}`, expected uniform or delta"))),
                }
                .map_err(|e| Error::config("problem.kernel_len", e.to_string()))?;
                OperatorKind::BlindConv { truth: kernel()?, init }
            }
            other => {
                return Err(Error::config(
                    "problem.operator",
                    format!("unknown operator `{other}`, expected one of identity, mask, downsample, conv, nonlinear_blur, blind_conv"),
                ))
            }
        };
        Ok(ProblemConfig {
            operator,
            sigma_y: self.sigma_y,
            truth_seed: self.truth_seed,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<RunConfig> {
        RunConfig::from_toml_str(text, Path::new("."))
    }

    fn field_of(e: Error) -> String {
        match e {
            Error::Config { field, .. } => field,
            other => panic!("expected config error, got {other}"),
        }
    }

    const MINIMAL: &str = "schema_version = 1\n[prior]\nkind = \"standard_normal\"\ndim = 2\n";

    #[test]
    fn minimal_config_takes_defaults() {
        let cfg = parse(MINIMAL).unwrap();
        assert_eq!(cfg.prior, PriorKind::StandardNormal { dim: 2 });
        assert_eq!(cfg.guidance, GuidanceConfig::default());
        assert_eq!(cfg.schedule, ScheduleConfig::default());
        assert_eq!(cfg.problem.sigma_y, 0.01);
        assert_eq!(cfg.method, Method::Ndtm);
    }

    #[test]
    fn full_config() {
        let text = r#"
schema_version = 1
seed = 7
n_trajectories = 3
preset = "sr4"

[prior]
kind = "templates"
variance = 0.05

[schedule]
kind = "cosine"
steps = 500

[problem]
operator = "downsample"
factor = 4
sigma_y = 0.05
truth_seed = 11

[guidance]
n_inner = 3
w_s = 0.5
w_c = "ddim"

[method]
name = "dps"
step_size = 0.5

[sweep]
param = "n_inner"
values = [1, 2, 4]
seeds = [0, 1]
"#;
        let cfg = parse(text).unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.schedule.kind, ScheduleKind::Cosine);
        assert_eq!(cfg.problem.operator, OperatorKind::Downsample { factor: 4 });
        assert_eq!(cfg.problem.truth_seed, 11);
        // preset supplies gamma and start, overrides win
        assert_eq!(cfg.guidance.start, 400);
        assert_eq!(cfg.guidance.n_inner, 3);
        assert_eq!(cfg.guidance.w_s, LossWeight::Fixed(0.5));
        assert_eq!(cfg.method, Method::Dps);
        assert_eq!(cfg.dps_step_size, 0.5);
        assert_eq!(cfg.sweep.unwrap().values, vec![1.0, 2.0, 4.0]);
    }

    #[test]
    fn errors_name_the_field() {
        let cases = [
            ("[prior]\nkind = \"standard_normal\"\ndim = 2\n", "schema_version"),
            ("schema_version = 2\n[prior]\nkind = \"standard_normal\"\ndim = 2\n", "schema_version"),
            (&format!("{MINIMAL}[problem]\noperator = \"warp\"\n"), "problem.operator"),
            (&format!("{MINIMAL}[problem]\nsigma_y = \"big\"\n"), "problem.sigma_y"),
            (&format!("{MINIMAL}[problem]\nbogus = 1\n"), "problem"),
            (&format!("{MINIMAL}[guidance]\ngamma = -1.0\n"), "guidance.gamma"),
            (&format!("{MINIMAL}[guidance]\nw_s = \"fast\"\n"), "guidance.w_s"),
            (&format!("{MINIMAL}[guidance]\nnope = 1\n"), "guidance"),
            (&format!("{MINIMAL}[method]\nname = \"magic\"\n"), "method.name"),
            (&format!("{MINIMAL}[problem]\noperator = \"mask\"\nmask = [1.0, 0.0, 1.0]\n"), "problem.mask"),
            (&format!("{MINIMAL}[problem]\noperator = \"downsample\"\nfactor = 3\n"), "problem.factor"),
            (&format!("{MINIMAL}[schedule]\nkind = \"sigmoid\"\n"), "schedule.kind"),
            (&format!("{MINIMAL}[sweep]\nparam = \"w_t\"\nvalues = []\n"), "sweep.values"),
            (&format!("{MINIMAL}[sweep]\nparam = \"lr\"\nvalues = [1.0]\n"), "sweep.param"),
            (&format!("preset = \"huge\"\n{MINIMAL}"), "preset"),
            ("schema_version = 1\n[prior]\nkind = \"mlp\"\nmodel = \"/nonexistent/net.bin\"\n", "prior.model"),
            ("schema_version = 1\n[prior]\nkind = \"gmm\"\nweights = [1.0]\n", "prior.means"),
            ("schema_version = 1\n[prior]\nkind = \"standard_normal\"\ndim = 2\n[method]\nname = \"linear_cg\"\n[problem]\noperator = \"downsample\"\nfactor = 2\n", "method.name"),
        ];
        for (text, field) in cases {
            let f = field_of(parse(text).unwrap_err());
            assert!(f.starts_with(field), "{text:?}: got `{f}`, want `{field}`");
        }
    }

    #[test]
    fn presets_are_valid() {
        for name in PRESETS {
            preset(name).unwrap().validate().unwrap();
        }
        let p = preset("inpaint").unwrap();
        assert_eq!((p.n_inner, p.gamma, p.eta, p.start, p.w_t), (2, 4.0, 0.2, 500, 1.0));
        assert_eq!((p.w_s, p.w_c), (LossWeight::Fixed(0.0), LossWeight::Fixed(0.0)));
        assert!(preset("nope").is_none());
    }

    #[test]
    fn sweep_apply() {
        let g = GuidanceConfig::default();
        assert_eq!(SweepParam::NInner.apply(&g, 8.0).unwrap().n_inner, 8);
        assert!(SweepParam::NInner.apply(&g, 2.5).is_err());
        assert!(SweepParam::Gamma.apply(&g, 0.0).is_err());
        assert_eq!(SweepParam::WT.apply(&g, 0.0).unwrap().w_t, 0.0);
    }
}
