//! Guidance methods that fall out as special cases: classifier guidance, the
//! Tweedie-gradient direction, the pure-terminal preset and the closed-form linear
//! control for Gaussian data.

use serde::{Deserialize, Serialize};

use crate::control::{GuidanceConfig, LossWeight};
use crate::error::{check_dim, Result};
use crate::numerics::{self, Rng};
use crate::oracle;
use crate::priors::ScoreModel;
use crate::samplers::{self, Sample};
use crate::schedule::{NoiseSchedule, StepPlan};
use crate::terminal::{ProblemSpec, ResidualCost, TerminalCost};

/// `s(x) + rho * likelihood_score`.
pub fn classifier_guidance_score(
    model: &dyn ScoreModel,
    x: &[f64],
    alpha_bar: f64,
    likelihood_score: &[f64],
    rho: f64,
) -> Result<Vec<f64>> {
    check_dim(model.dim(), x.len())?;
    check_dim(x.len(), likelihood_score.len())?;
    Ok(numerics::axpy(&model.score(x, alpha_bar), rho, likelihood_score))
}

#[derive(Debug, Clone, PartialEq)]
pub struct DpsDirection {
    /// `grad_x |y - A(xhat0(x))|^2`
    pub grad: Vec<f64>,
    /// `alpha / |y - A(xhat0)|^2`; zero when the residual vanishes.
    pub zeta: f64,
    /// `-zeta * grad`
    pub direction: Vec<f64>,
    pub residual_sq: f64,
}

/// Normalized gradient step through the Tweedie estimate.
pub fn dps_direction(
    model: &dyn ScoreModel,
    alpha_bar: f64,
    spec: &ProblemSpec,
    x_t: &[f64],
    step_size: f64,
) -> Result<DpsDirection> {
    check_dim(model.dim(), x_t.len())?;
    check_dim(spec.dim(), x_t.len())?;
    let cost = ResidualCost::new(spec.clone());
    let x0 = model.tweedie(x_t, alpha_bar);
    let residual_sq = cost.value(&x0);
    let grad = model.tweedie_vjp(x_t, alpha_bar, &cost.grad(&x0));
    if residual_sq == 0.0 {
        return Ok(DpsDirection {
            direction: vec![0.0; x_t.len()],
            grad,
            zeta: 0.0,
            residual_sq,
        });
    }
    let zeta = step_size / residual_sq;
    Ok(DpsDirection {
        direction: numerics::scale(&grad, -zeta),
        grad,
        zeta,
        residual_sq,
    })
}

/// DDIM where every step is followed by the normalized Tweedie-gradient correction
/// evaluated at the pre-step state.
#[allow(clippy::too_many_arguments)]
pub fn dps_sample(
    model: &dyn ScoreModel,
    sched: &NoiseSchedule,
    spec: &ProblemSpec,
    plan: &StepPlan,
    eta: f64,
    step_size: f64,
    init: Vec<f64>,
    rng: &mut Rng,
) -> Result<Vec<f64>> {
    let mut x = init;
    for (t, t_prev) in plan.transitions() {
        let dir = dps_direction(model, sched.alpha_bar(t), spec, &x, step_size)?;
        let next = samplers::ddim_step(model, sched, &x, t, t_prev, eta, rng)?;
        x = numerics::add(&next, &dir.direction);
    }
    Ok(x)
}

/// The pure terminal-cost preset: no transient regularization, unit guidance weight.
pub fn rb_modulation_config(base: &GuidanceConfig) -> GuidanceConfig {
    GuidanceConfig {
        w_s: LossWeight::Fixed(0.0),
        w_c: LossWeight::Fixed(0.0),
        gamma: 1.0,
        ..base.clone()
    }
}

/// Which gradient the linear control follows.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LikelihoodGradient {
    /// `grad log p(y | x_t)`
    #[default]
    Log,
    /// `grad p(y | x_t)`, for inspection only
    Density,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinearControlConfig {
    /// Diffusion coefficient `g(t)`.
    pub g: f64,
    pub w_t: f64,
    pub gradient: LikelihoodGradient,
}

impl LinearControlConfig {
    pub fn rho(&self) -> f64 {
        self.g * self.w_t
    }
}

/// `N(y; sqrt(ab) x_t, (1 - ab + sigma_y^2) I)`
pub fn gaussian_marginal_likelihood(alpha_bar: f64, x_t: &[f64], y: &[f64], sigma_y: f64) -> f64 {
    let var = 1.0 - alpha_bar + sigma_y * sigma_y;
    let sa = alpha_bar.sqrt();
    let sq: f64 = x_t.iter().zip(y).map(|(x, yi)| (yi - sa * x).powi(2)).sum();
    let d = x_t.len() as f64;
    (-0.5 * sq / var).exp() / (2.0 * std::f64::consts::PI * var).powf(0.5 * d)
}

/// Optimal linear control for standard-normal data and `Phi = -log N(y; x0, sigma_y^2 I)`.
pub fn linear_optimal_control_gaussian(
    alpha_bar: f64,
    x_t: &[f64],
    y: &[f64],
    sigma_y: f64,
    cfg: &LinearControlConfig,
) -> Result<Vec<f64>> {
    let s = oracle::conditional_score(alpha_bar, x_t, y, sigma_y)?;
    let scale = match cfg.gradient {
        LikelihoodGradient::Log => cfg.rho(),
        LikelihoodGradient::Density => cfg.rho() * gaussian_marginal_likelihood(alpha_bar, x_t, y, sigma_y),
    };
    Ok(numerics::scale(&s, scale))
}

/// DDIM for standard-normal data with the score replaced by the classifier-guided
/// score `s + rho grad log p(y | x_t)` under a 0/1 observation mask.
#[allow(clippy::too_many_arguments)]
pub fn linear_cg_sample(
    sched: &NoiseSchedule,
    mask: &[f64],
    y: &[f64],
    sigma_y: f64,
    rho: f64,
    plan: &StepPlan,
    eta: f64,
    init: Vec<f64>,
    rng: &mut Rng,
) -> Result<Vec<f64>> {
    check_dim(mask.len(), y.len())?;
    check_dim(mask.len(), init.len())?;
    let model = GuidedGaussian {
        mask: mask.to_vec(),
        y: y.to_vec(),
        sigma_y,
        rho,
    };
    let mut x = init;
    for (t, t_prev) in plan.transitions() {
        x = samplers::ddim_step(&model, sched, &x, t, t_prev, eta, rng)?;
    }
    Ok(x)
}

/// Standard-normal score plus a masked Gaussian likelihood score, expressed as a
/// noise prediction. The VJP is not needed for sampling and is exact anyway.
struct GuidedGaussian {
    mask: Vec<f64>,
    y: Vec<f64>,
    sigma_y: f64,
    rho: f64,
}

impl ScoreModel for GuidedGaussian {
    fn dim(&self) -> usize {
        self.mask.len()
    }

    fn epsilon(&self, x: &[f64], alpha_bar: f64) -> Vec<f64> {
        let sn = (1.0 - alpha_bar).sqrt();
        let ls = oracle::conditional_score_masked(alpha_bar, x, &self.y, self.sigma_y, &self.mask)
            .expect("dimensions checked at construction");
        x.iter()
            .zip(&ls)
            .map(|(xi, li)| sn * xi - sn * self.rho * li)
            .collect()
    }

    fn epsilon_vjp(&self, _x: &[f64], alpha_bar: f64, cot: &[f64]) -> Vec<f64> {
        let sn = (1.0 - alpha_bar).sqrt();
        let var = 1.0 - alpha_bar + self.sigma_y * self.sigma_y;
        cot.iter()
            .zip(&self.mask)
            .map(|(c, m)| sn * c * (1.0 + self.rho * m * alpha_bar / var))
            .collect()
    }
}

/// Checks that the operator is usable by [`linear_cg_sample`] and returns its mask.
pub fn linear_cg_mask(mask: Option<&[f64]>, dim: usize) -> Result<Vec<f64>> {
    match mask {
        Some(m) => {
            check_dim(dim, m.len())?;
            Ok(m.to_vec())
        }
        None => Ok(vec![1.0; dim]),
    }
}

/// Guided DDIM for the preset config; separate entry point so callers can name it.
pub fn rb_modulation_sample(
    model: &dyn ScoreModel,
    sched: &NoiseSchedule,
    cost: &dyn TerminalCost,
    base: &GuidanceConfig,
    rng: &mut Rng,
) -> Result<Sample> {
    samplers::ndtm_sample(model, sched, cost, &rb_modulation_config(base), rng)
}
