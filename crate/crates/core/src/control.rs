//! Per-step trajectory-matching objective and its inner optimizer.
//!
//! At a fixed state `x` the control `u` shifts the model input to `xbar = x + gamma u`.
//! The cost is
//!
//! ```text
//! C(u) = w_c |u|^2 + w_s |f(xbar) - f(x)|^2 + w_T Phi(xhat(xbar))
//! ```
//!
//! where `f` is the model output (noise prediction or velocity) and `xhat` the
//! clean-sample estimate built from it. The same loop serves DDIM, the reverse SDE
//! and flow sampling; only [`StepModel`] and the weights change.

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::numerics::{self, Adam};
use crate::priors::ScoreModel;
use crate::schedule::NoiseSchedule;
use crate::terminal::{BlindDeconvolution, TerminalCost};

/// A fixed number, or the sentinel `"ddim"` that resolves to the sampler's natural
/// weight (`tau^2` / `kappa^2` for DDIM).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "WeightRepr", into = "WeightRepr")]
pub enum LossWeight {
    Fixed(f64),
    Ddim,
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum WeightRepr {
    Value(f64),
    Name(String),
}

impl TryFrom<WeightRepr> for LossWeight {
    type Error = String;
    fn try_from(r: WeightRepr) -> std::result::Result<Self, String> {
        match r {
            WeightRepr::Value(v) => Ok(LossWeight::Fixed(v)),
            WeightRepr::Name(s) if s == "ddim" => Ok(LossWeight::Ddim),
            WeightRepr::Name(s) => Err(format!("expected a number or \"ddim\", got \"{s}\"")),
        }
    }
}

impl From<LossWeight> for WeightRepr {
    fn from(w: LossWeight) -> Self {
        match w {
            LossWeight::Fixed(v) => WeightRepr::Value(v),
            LossWeight::Ddim => WeightRepr::Name("ddim".into()),
        }
    }
}

impl LossWeight {
    pub fn resolve(self, natural: f64) -> f64 {
        match self {
            LossWeight::Fixed(v) => v,
            LossWeight::Ddim => natural,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrDecay {
    Linear,
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GuidanceConfig {
    /// Inner optimization steps per timestep.
    pub n_inner: usize,
    pub gamma: f64,
    pub w_t: f64,
    pub w_s: LossWeight,
    pub w_c: LossWeight,
    pub eta: f64,
    /// Truncation time; sampling starts from a noised warm start when below `T`.
    pub start: usize,
    /// Outer sampling steps.
    pub steps: usize,
    pub lr: f64,
    pub lr_decay: LrDecay,
    pub kernel_lr: f64,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self {
            n_inner: 5,
            gamma: 1.0,
            w_t: 50.0,
            w_s: LossWeight::Ddim,
            w_c: LossWeight::Ddim,
            eta: 0.7,
            start: 1000,
            steps: 50,
            lr: 0.01,
            lr_decay: LrDecay::Linear,
            kernel_lr: 0.01,
        }
    }
}

impl GuidanceConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, reason: String| Err(Error::config(format!("guidance.{field}"), reason));
        if !(self.gamma > 0.0) || !self.gamma.is_finite() {
            return bad("gamma", format!("must be positive, got {}", self.gamma));
        }
        if !(self.w_t >= 0.0) || !self.w_t.is_finite() {
            return bad("w_t", format!("must be nonnegative, got {}", self.w_t));
        }
        for (name, w) in [("w_s", self.w_s), ("w_c", self.w_c)] {
            if let LossWeight::Fixed(v) = w {
                if !(v >= 0.0) || !v.is_finite() {
                    return bad(name, format!("must be nonnegative, got {v}"));
                }
            }
        }
        if !(0.0..=1.0).contains(&self.eta) {
            return bad("eta", format!("must lie in [0, 1], got {}", self.eta));
        }
        if !(self.lr > 0.0) {
            return bad("lr", format!("must be positive, got {}", self.lr));
        }
        if !(self.kernel_lr > 0.0) {
            return bad("kernel_lr", format!("must be positive, got {}", self.kernel_lr));
        }
        if self.steps == 0 {
            return bad("steps", "must be at least 1".into());
        }
        Ok(())
    }

    /// Learning rate of inner step `i`.
    pub fn lr_at(&self, i: usize) -> f64 {
        match self.lr_decay {
            LrDecay::None => self.lr,
            LrDecay::Linear => self.lr * (1.0 - i as f64 / self.n_inner as f64),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct ControlCostParts {
    pub c_score: f64,
    pub c_control: f64,
    pub c_terminal: f64,
    pub total: f64,
}

impl ControlCostParts {
    fn new(c_score: f64, c_control: f64, c_terminal: f64) -> Self {
        Self {
            c_score,
            c_control,
            c_terminal,
            total: c_score + c_control + c_terminal,
        }
    }
}

/// Model output at the shifted state and the clean-sample estimate built from it.
pub trait StepModel {
    fn dim(&self) -> usize;
    fn output(&self, xbar: &[f64]) -> Vec<f64>;
    fn estimate(&self, xbar: &[f64], output: &[f64]) -> Vec<f64>;
    /// Gradient with respect to `xbar` of `<a, output> + <b, estimate>`.
    fn vjp(&self, xbar: &[f64], a: &[f64], b: &[f64]) -> Vec<f64>;
}

/// Noise prediction at a fixed noise level, with the Tweedie estimate.
pub struct EpsStep<'a> {
    pub model: &'a dyn ScoreModel,
    pub alpha_bar: f64,
}

impl StepModel for EpsStep<'_> {
    fn dim(&self) -> usize {
        self.model.dim()
    }
    fn output(&self, xbar: &[f64]) -> Vec<f64> {
        self.model.epsilon(xbar, self.alpha_bar)
    }
    fn estimate(&self, xbar: &[f64], output: &[f64]) -> Vec<f64> {
        crate::priors::tweedie_from_eps(xbar, output, self.alpha_bar)
    }
    fn vjp(&self, xbar: &[f64], a: &[f64], b: &[f64]) -> Vec<f64> {
        let (sa, sn) = (self.alpha_bar.sqrt(), (1.0 - self.alpha_bar).sqrt());
        let c: Vec<f64> = a.iter().zip(b).map(|(ai, bi)| ai - sn / sa * bi).collect();
        let j = self.model.epsilon_vjp(xbar, self.alpha_bar, &c);
        j.iter().zip(b).map(|(ji, bi)| ji + bi / sa).collect()
    }
}

/// Realized scalar weights of one objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Weights {
    pub gamma: f64,
    pub w_s: f64,
    pub w_c: f64,
    pub w_t: f64,
}

/// `(w_s, w_c)` for a DDIM transition; the sentinel gives `(tau^2, kappa^2)`.
pub fn resolve_ddim_weights(
    sched: &NoiseSchedule,
    t: usize,
    t_prev: usize,
    cfg: &GuidanceConfig,
) -> Result<(f64, f64)> {
    let (kappa, tau) = sched.ndtm_coefficients(t, t_prev, cfg.eta, cfg.gamma)?;
    Ok((cfg.w_s.resolve(tau * tau), cfg.w_c.resolve(kappa * kappa)))
}

pub struct Evaluation {
    pub parts: ControlCostParts,
    /// Unweighted terminal cost.
    pub phi: f64,
    pub estimate: Vec<f64>,
    pub grad: Vec<f64>,
}

/// The cost at one state, with the unguided model output cached.
pub struct Objective<'a> {
    pub step: &'a dyn StepModel,
    pub x: &'a [f64],
    pub weights: Weights,
    uncond: Vec<f64>,
}

impl<'a> Objective<'a> {
    pub fn new(step: &'a dyn StepModel, x: &'a [f64], weights: Weights) -> Result<Self> {
        check_dim(step.dim(), x.len())?;
        let uncond = step.output(x);
        Ok(Self { step, x, weights, uncond })
    }

    pub fn evaluate(&self, u: &[f64], cost: &dyn TerminalCost) -> Evaluation {
        let Weights { gamma, w_s, w_c, w_t } = self.weights;
        let xbar = numerics::axpy(self.x, gamma, u);
        let out = self.step.output(&xbar);
        let estimate = self.step.estimate(&xbar, &out);
        let diff = numerics::sub(&out, &self.uncond);
        let phi = cost.value(&estimate);
        let parts = ControlCostParts::new(w_s * numerics::norm_sq(&diff), w_c * numerics::norm_sq(u), w_t * phi);
        let a = numerics::scale(&diff, 2.0 * w_s);
        let b = numerics::scale(&cost.grad(&estimate), w_t);
        let g = self.step.vjp(&xbar, &a, &b);
        let grad = u.iter().zip(&g).map(|(ui, gi)| 2.0 * w_c * ui + gamma * gi).collect();
        Evaluation {
            parts,
            phi,
            estimate,
            grad,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ControlSolution {
    pub u: Vec<f64>,
    /// Cost parts at each inner iterate before its update.
    pub history: Vec<ControlCostParts>,
    /// Cost parts at the returned control.
    pub parts: ControlCostParts,
    pub phi: f64,
}

/// `n_inner` Adam steps from `u = 0` with fresh moments.
pub fn minimize(obj: &Objective, cost: &dyn TerminalCost, cfg: &GuidanceConfig) -> Result<ControlSolution> {
    let mut u = vec![0.0; obj.x.len()];
    let mut adam = Adam::new(u.len());
    let mut history = Vec::with_capacity(cfg.n_inner);
    for i in 0..cfg.n_inner {
        let ev = obj.evaluate(&u, cost);
        if !ev.parts.total.is_finite() || !numerics::all_finite(&ev.grad) {
            return Err(Error::OptimizationDiverged { step: i });
        }
        history.push(ev.parts);
        adam.step(&mut u, &ev.grad, cfg.lr_at(i))?;
    }
    let last = obj.evaluate(&u, cost);
    if !last.parts.total.is_finite() {
        return Err(Error::OptimizationDiverged { step: cfg.n_inner });
    }
    Ok(ControlSolution {
        u,
        history,
        parts: last.parts,
        phi: last.phi,
    })
}

fn ddim_objective_weights(sched: &NoiseSchedule, t: usize, t_prev: usize, cfg: &GuidanceConfig) -> Result<Weights> {
    let (w_s, w_c) = resolve_ddim_weights(sched, t, t_prev, cfg)?;
    Ok(Weights {
        gamma: cfg.gamma,
        w_s,
        w_c,
        w_t: cfg.w_t,
    })
}

fn check_t(sched: &NoiseSchedule, t: usize) -> Result<()> {
    if t == 0 || t > sched.steps() {
        return Err(Error::InvalidParameter {
            name: "t",
            reason: format!("must lie in [1, {}], got {t}", sched.steps()),
        });
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
pub fn control_cost(
    model: &dyn ScoreModel,
    sched: &NoiseSchedule,
    cost: &dyn TerminalCost,
    x_t: &[f64],
    u: &[f64],
    t: usize,
    t_prev: usize,
    cfg: &GuidanceConfig,
) -> Result<ControlCostParts> {
    Ok(evaluate_ddim(model, sched, cost, x_t, u, t, t_prev, cfg)?.parts)
}

#[allow(clippy::too_many_arguments)]
pub fn control_grad(
    model: &dyn ScoreModel,
    sched: &NoiseSchedule,
    cost: &dyn TerminalCost,
    x_t: &[f64],
    u: &[f64],
    t: usize,
    t_prev: usize,
    cfg: &GuidanceConfig,
) -> Result<Vec<f64>> {
    Ok(evaluate_ddim(model, sched, cost, x_t, u, t, t_prev, cfg)?.grad)
}

#[allow(clippy::too_many_arguments)]
fn evaluate_ddim(
    model: &dyn ScoreModel,
    sched: &NoiseSchedule,
    cost: &dyn TerminalCost,
    x_t: &[f64],
    u: &[f64],
    t: usize,
    t_prev: usize,
    cfg: &GuidanceConfig,
) -> Result<Evaluation> {
    check_t(sched, t)?;
    check_dim(x_t.len(), u.len())?;
    check_dim(cost.dim(), x_t.len())?;
    let step = EpsStep {
        model,
        alpha_bar: sched.alpha_bar(t),
    };
    let obj = Objective::new(&step, x_t, ddim_objective_weights(sched, t, t_prev, cfg)?)?;
    Ok(obj.evaluate(u, cost))
}

pub fn optimize_control(
    model: &dyn ScoreModel,
    sched: &NoiseSchedule,
    cost: &dyn TerminalCost,
    x_t: &[f64],
    t: usize,
    t_prev: usize,
    cfg: &GuidanceConfig,
) -> Result<ControlSolution> {
    check_t(sched, t)?;
    check_dim(cost.dim(), x_t.len())?;
    let step = EpsStep {
        model,
        alpha_bar: sched.alpha_bar(t),
    };
    let obj = Objective::new(&step, x_t, ddim_objective_weights(sched, t, t_prev, cfg)?)?;
    minimize(&obj, cost, cfg)
}

/// Joint inner loop over the control and the blur kernel. The kernel optimizer is
/// owned by the caller so its moments persist across timesteps; each kernel update
/// uses `cfg.kernel_lr` and is followed by projection onto nonnegative taps summing
/// to one.
#[allow(clippy::too_many_arguments)]
pub fn optimize_control_blind(
    model: &dyn ScoreModel,
    sched: &NoiseSchedule,
    cost: &mut BlindDeconvolution,
    kernel_adam: &mut Adam,
    x_t: &[f64],
    t: usize,
    t_prev: usize,
    cfg: &GuidanceConfig,
) -> Result<ControlSolution> {
    check_t(sched, t)?;
    check_dim(cost.dim(), x_t.len())?;
    let step = EpsStep {
        model,
        alpha_bar: sched.alpha_bar(t),
    };
    let obj = Objective::new(&step, x_t, ddim_objective_weights(sched, t, t_prev, cfg)?)?;
    let mut u = vec![0.0; x_t.len()];
    let mut adam = Adam::new(u.len());
    let mut history = Vec::with_capacity(cfg.n_inner);
    for i in 0..cfg.n_inner {
        let ev = obj.evaluate(&u, cost);
        if !ev.parts.total.is_finite() || !numerics::all_finite(&ev.grad) {
            return Err(Error::OptimizationDiverged { step: i });
        }
        let kgrad = numerics::scale(&cost.kernel_grad(&ev.estimate), cfg.w_t);
        history.push(ev.parts);
        adam.step(&mut u, &ev.grad, cfg.lr_at(i))?;
        if cfg.w_t > 0.0 {
            kernel_adam.step(cost.kernel.taps_mut(), &kgrad, cfg.kernel_lr)?;
            cost.kernel.project();
        }
    }
    let last = obj.evaluate(&u, cost);
    if !last.parts.total.is_finite() {
        return Err(Error::OptimizationDiverged { step: cfg.n_inner });
    }
    Ok(ControlSolution {
        u,
        history,
        parts: last.parts,
        phi: last.phi,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;
    use crate::oracle::{finite_diff_grad, rel_error};
    use crate::priors::GmmPrior;
    use crate::schedule::ScheduleKind;
    use crate::terminal::{BlurKernel, Identity, ProblemSpec, ResidualCost};
    use std::sync::Arc;

    fn sched() -> NoiseSchedule {
        NoiseSchedule::build(ScheduleKind::Linear, 1000, 1e-4, 0.02).unwrap()
    }

    fn identity_cost(y: Vec<f64>) -> ResidualCost {
        let d = y.len();
        ResidualCost::new(ProblemSpec::new(Arc::new(Identity { dim: d }), y, 0.01).unwrap())
    }

    fn gmm() -> GmmPrior {
        GmmPrior::new(
            vec![0.3, 0.7],
            vec![vec![1.0, -0.5, 0.2], vec![-1.0, 0.4, 0.0]],
            vec![0.2, 0.5],
        )
        .unwrap()
    }

    #[test]
    fn weight_serde() {
        #[derive(Deserialize)]
        struct W {
            a: LossWeight,
            b: LossWeight,
        }
        let w: W = toml::from_str("a = \"ddim\"\nb = 0.5").unwrap();
        assert_eq!(w.a, LossWeight::Ddim);
        assert_eq!(w.b, LossWeight::Fixed(0.5));
        assert!(toml::from_str::<W>("a = \"tau\"\nb = 1.0").is_err());
    }

    #[test]
    fn zero_control_parts() {
        let s = sched();
        let model = gmm();
        let cost = identity_cost(vec![0.3, 0.1, -0.2]);
        let x = [0.5, -0.3, 1.0];
        let cfg = GuidanceConfig::default();
        let p = control_cost(&model, &s, &cost, &x, &[0.0; 3], 500, 480, &cfg).unwrap();
        assert_eq!(p.c_score, 0.0);
        assert_eq!(p.c_control, 0.0);
        let x0 = model.tweedie(&x, s.alpha_bar(500));
        assert_eq!(p.total, cfg.w_t * crate::terminal::TerminalCost::value(&cost, &x0));
    }

    #[test]
    fn null_guidance_gradient_and_solution() {
        let s = sched();
        let model = gmm();
        let cost = identity_cost(vec![3.0, 1.0, -2.0]);
        let cfg = GuidanceConfig {
            w_t: 0.0,
            n_inner: 20,
            ..Default::default()
        };
        let x = [0.5, -0.3, 1.0];
        let g = control_grad(&model, &s, &cost, &x, &[0.0; 3], 300, 280, &cfg).unwrap();
        assert!(g.iter().all(|v| *v == 0.0));
        let sol = optimize_control(&model, &s, &cost, &x, 300, 280, &cfg).unwrap();
        assert!(sol.u.iter().all(|v| *v == 0.0));
        let p = control_cost(&model, &s, &cost, &x, &[0.4, -1.0, 0.2], 300, 280, &cfg).unwrap();
        assert_eq!(p.c_terminal, 0.0);
        assert!(p.total > 0.0);
    }

    #[test]
    fn no_inner_steps_gives_zero() {
        let s = sched();
        let cfg = GuidanceConfig {
            n_inner: 0,
            ..Default::default()
        };
        let sol = optimize_control(&gmm(), &s, &identity_cost(vec![1.0; 3]), &[0.2; 3], 100, 80, &cfg).unwrap();
        assert_eq!(sol.u, vec![0.0; 3]);
        assert!(sol.history.is_empty());
    }

    #[test]
    fn linear_model_score_cost() {
        let s = sched();
        let model = GmmPrior::standard_normal(2).unwrap();
        let cost = identity_cost(vec![0.0, 0.0]);
        let cfg = GuidanceConfig {
            gamma: 1.7,
            w_s: LossWeight::Fixed(3.0),
            ..Default::default()
        };
        let u = [0.3, -0.8];
        let p = control_cost(&model, &s, &cost, &[1.0, 2.0], &u, 600, 580, &cfg).unwrap();
        let expected = 3.0 * (1.0 - s.alpha_bar(600)) * 1.7f64.powi(2) * numerics::norm_sq(&u);
        assert!((p.c_score - expected).abs() < 1e-12 * expected);
        assert!((p.total - (p.c_score + p.c_control + p.c_terminal)).abs() < 1e-12);
    }

    #[test]
    fn ddim_weights_resolve_exactly() {
        let s = sched();
        let cfg = GuidanceConfig {
            gamma: 2.5,
            eta: 0.3,
            ..Default::default()
        };
        let (kappa, tau) = s.ndtm_coefficients(700, 680, 0.3, 2.5).unwrap();
        assert_eq!(resolve_ddim_weights(&s, 700, 680, &cfg).unwrap(), (tau * tau, kappa * kappa));
    }

    #[test]
    fn grad_matches_fd() {
        let s = sched();
        let model = gmm();
        let mut rng = Rng::new(12);
        let cost = identity_cost(rng.gaussian(3).unwrap());
        let cfg = GuidanceConfig {
            gamma: 1.3,
            w_t: 2.0,
            ..Default::default()
        };
        for _ in 0..20 {
            let t = 20 + rng.below(900);
            let x = rng.gaussian(3).unwrap();
            let u = numerics::scale(&rng.gaussian(3).unwrap(), 0.3);
            let g = control_grad(&model, &s, &cost, &x, &u, t, t - 20, &cfg).unwrap();
            let fd = finite_diff_grad(
                |v| control_cost(&model, &s, &cost, &x, v, t, t - 20, &cfg).unwrap().total,
                &u,
                1e-5,
            )
            .unwrap();
            assert!(rel_error(&fd, &g) < 1e-4, "t={t} {}", rel_error(&fd, &g));
        }
    }

    fn quadratic_setup() -> (NoiseSchedule, GmmPrior, ResidualCost, Vec<f64>, GuidanceConfig) {
        let cfg = GuidanceConfig {
            gamma: 1.5,
            w_t: 4.0,
            w_s: LossWeight::Fixed(0.7),
            w_c: LossWeight::Fixed(0.2),
            ..Default::default()
        };
        (sched(), GmmPrior::standard_normal(2).unwrap(), identity_cost(vec![1.0, -0.5]), vec![0.3, 0.9], cfg)
    }

    // C(u) = (w_c + w_s (1-a) g^2 + w_T a g^2) |u|^2 - 2 w_T sqrt(a) g <y - sqrt(a) x, u> + const
    fn quadratic_minimizer(a: f64, x: &[f64], y: &[f64], cfg: &GuidanceConfig) -> Vec<f64> {
        let g = cfg.gamma;
        let (w_s, w_c) = (cfg.w_s.resolve(0.0), cfg.w_c.resolve(0.0));
        let h = w_c + w_s * (1.0 - a) * g * g + cfg.w_t * a * g * g;
        x.iter()
            .zip(y)
            .map(|(xi, yi)| cfg.w_t * a.sqrt() * g * (yi - a.sqrt() * xi) / h)
            .collect()
    }

    #[test]
    fn quadratic_gradient_closed_form() {
        let (s, model, cost, x, cfg) = quadratic_setup();
        let t = 400;
        let a = s.alpha_bar(t);
        let u = [0.2, -0.1];
        let ustar = quadratic_minimizer(a, &x, &cost.spec.y, &cfg);
        let g = cfg.gamma;
        let h = 0.2 + 0.7 * (1.0 - a) * g * g + cfg.w_t * a * g * g;
        let expected: Vec<f64> = u.iter().zip(&ustar).map(|(ui, si)| 2.0 * h * (ui - si)).collect();
        let grad = control_grad(&model, &s, &cost, &x, &u, t, t - 20, &cfg).unwrap();
        for (e, v) in expected.iter().zip(&grad) {
            assert!((e - v).abs() < 1e-8, "{e} {v}");
        }
    }

    #[test]
    fn adam_reaches_quadratic_minimizer() {
        let (s, model, cost, x, mut cfg) = quadratic_setup();
        cfg.n_inner = 20_000;
        cfg.lr = 0.02;
        let t = 400;
        let sol = optimize_control(&model, &s, &cost, &x, t, t - 20, &cfg).unwrap();
        let ustar = quadratic_minimizer(s.alpha_bar(t), &x, &cost.spec.y, &cfg);
        let err = numerics::norm(&numerics::sub(&sol.u, &ustar));
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn blind_no_steps_leaves_kernel() {
        let s = sched();
        let model = GmmPrior::standard_normal(8).unwrap();
        let k = BlurKernel::gaussian(3, 1.0).unwrap();
        let mut cost = BlindDeconvolution::new(vec![0.5; 8], k.clone()).unwrap();
        let mut kadam = Adam::new(3);
        let cfg = GuidanceConfig {
            n_inner: 0,
            ..Default::default()
        };
        let sol = optimize_control_blind(&model, &s, &mut cost, &mut kadam, &[0.1; 8], 50, 30, &cfg).unwrap();
        assert_eq!(sol.u, vec![0.0; 8]);
        assert_eq!(cost.kernel, k);
    }
}
