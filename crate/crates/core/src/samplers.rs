//! Generation loops: DDIM with per-step control, a reverse VP SDE and a
//! conditional-OT flow. Unguided runs use the same step functions as the guided
//! ones, so a zero control reproduces the unguided trajectory bit for bit.

use serde::Serialize;

use crate::control::{self, ControlCostParts, ControlSolution, EpsStep, GuidanceConfig, Objective, StepModel, Weights};
use crate::error::{check_dim, Error, Result};
use crate::numerics::{self, Adam, Rng};
use crate::oracle::GaussianChain;
use crate::priors::{GmmPrior, ScoreModel};
use crate::schedule::{NoiseSchedule, StepCoefficients, StepPlan};
use crate::terminal::{BlindDeconvolution, BlurKernel, TerminalCost};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TraceRecord {
    /// Integer timestep for DDIM, continuous time for the SDE and flow samplers.
    pub t: f64,
    pub u_norm: f64,
    pub parts: ControlCostParts,
    /// `sqrt(Phi)` at the returned control; `|y - A(xhat)|` for residual costs.
    pub residual: f64,
    #[serde(skip)]
    pub u: Vec<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ControlTrace {
    pub records: Vec<TraceRecord>,
}

impl ControlTrace {
    fn push(&mut self, t: f64, sol: ControlSolution) {
        self.records.push(TraceRecord {
            t,
            u_norm: numerics::norm(&sol.u),
            parts: sol.parts,
            residual: sol.phi.sqrt(),
            u: sol.u,
        });
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct Sample {
    pub x0: Vec<f64>,
    pub trace: ControlTrace,
}

/// `sqrt(ab_prev) x0hat + direction eps`, the DDIM transition mean.
fn ddim_mean_from_eps(c: &StepCoefficients, x: &[f64], eps: &[f64]) -> Vec<f64> {
    let x0 = crate::priors::tweedie_from_eps(x, eps, c.alpha_bar);
    let sp = c.alpha_bar_prev.sqrt();
    x0.iter().zip(eps).map(|(a, e)| sp * a + c.direction * e).collect()
}

pub fn ddim_mean(model: &dyn ScoreModel, c: &StepCoefficients, x: &[f64]) -> Vec<f64> {
    ddim_mean_from_eps(c, x, &model.epsilon(x, c.alpha_bar))
}

pub fn ddim_step(
    model: &dyn ScoreModel,
    sched: &NoiseSchedule,
    x_in: &[f64],
    t: usize,
    t_prev: usize,
    eta: f64,
    rng: &mut Rng,
) -> Result<Vec<f64>> {
    check_dim(model.dim(), x_in.len())?;
    let c = sched.step_coefficients(t, t_prev, eta)?;
    let mut out = ddim_mean(model, &c, x_in);
    if c.sigma > 0.0 {
        for o in &mut out {
            *o += c.sigma * rng.normal();
        }
    }
    Ok(out)
}

/// Initial state at `start`: pure noise at `T`, otherwise the warm start noised to
/// level `start`.
pub fn initial_state(
    sched: &NoiseSchedule,
    dim: usize,
    start: usize,
    warm: Option<&[f64]>,
    rng: &mut Rng,
) -> Result<Vec<f64>> {
    let z = rng.gaussian(dim)?;
    if start == sched.steps() {
        return Ok(z);
    }
    let warm = warm.ok_or_else(|| Error::InvalidPlan(format!("start {start} below T needs a warm start")))?;
    check_dim(dim, warm.len())?;
    let ab = sched.alpha_bar(start);
    Ok(warm.iter().zip(&z).map(|(w, n)| ab.sqrt() * w + (1.0 - ab).sqrt() * n).collect())
}

fn guided_plan(sched: &NoiseSchedule, cfg: &GuidanceConfig) -> Result<StepPlan> {
    cfg.validate()?;
    sched.plan_steps(cfg.steps, cfg.start)
}

/// Unguided DDIM from `init` along `plan`.
pub fn ddim_sample(
    model: &dyn ScoreModel,
    sched: &NoiseSchedule,
    plan: &StepPlan,
    eta: f64,
    init: Vec<f64>,
    rng: &mut Rng,
) -> Result<Vec<f64>> {
    let mut x = init;
    for (t, t_prev) in plan.transitions() {
        x = ddim_step(model, sched, &x, t, t_prev, eta, rng)?;
    }
    Ok(x)
}

/// Guided DDIM: per timestep, optimize the control and step from `x + gamma u*`.
pub fn ndtm_sample(
    model: &dyn ScoreModel,
    sched: &NoiseSchedule,
    cost: &dyn TerminalCost,
    cfg: &GuidanceConfig,
    rng: &mut Rng,
) -> Result<Sample> {
    let plan = guided_plan(sched, cfg)?;
    check_dim(model.dim(), cost.dim())?;
    let warm = cost.warm_start();
    let mut x = initial_state(sched, model.dim(), cfg.start, warm.as_deref(), rng)?;
    let mut trace = ControlTrace::default();
    for (t, t_prev) in plan.transitions() {
        let sol = control::optimize_control(model, sched, cost, &x, t, t_prev, cfg)?;
        let xbar = numerics::axpy(&x, cfg.gamma, &sol.u);
        trace.push(t as f64, sol);
        x = ddim_step(model, sched, &xbar, t, t_prev, cfg.eta, rng)?;
    }
    Ok(Sample { x0: x, trace })
}

#[derive(Debug, Clone)]
pub struct BlindSample {
    pub x0: Vec<f64>,
    pub kernel: BlurKernel,
    pub trace: ControlTrace,
}

/// Guided DDIM with the blur kernel optimized jointly; the kernel and its Adam
/// moments carry over from one timestep to the next.
pub fn ndtm_sample_blind(
    model: &dyn ScoreModel,
    sched: &NoiseSchedule,
    mut cost: BlindDeconvolution,
    cfg: &GuidanceConfig,
    rng: &mut Rng,
) -> Result<BlindSample> {
    let plan = guided_plan(sched, cfg)?;
    check_dim(model.dim(), cost.dim())?;
    let warm = cost.warm_start();
    let mut x = initial_state(sched, model.dim(), cfg.start, warm.as_deref(), rng)?;
    let mut kadam = Adam::new(cost.kernel.len());
    let mut trace = ControlTrace::default();
    for (t, t_prev) in plan.transitions() {
        let sol = control::optimize_control_blind(model, sched, &mut cost, &mut kadam, &x, t, t_prev, cfg)?;
        let xbar = numerics::axpy(&x, cfg.gamma, &sol.u);
        trace.push(t as f64, sol);
        x = ddim_step(model, sched, &xbar, t, t_prev, cfg.eta, rng)?;
    }
    Ok(BlindSample {
        x0: x,
        kernel: cost.kernel,
        trace,
    })
}

/// DDIM transitions read as a Gaussian chain, optionally with fixed per-step
/// controls added to the model input.
pub struct DdimChain<'a> {
    pub model: &'a dyn ScoreModel,
    pub coeffs: Vec<StepCoefficients>,
    pub gamma: f64,
    pub controls: Option<Vec<Vec<f64>>>,
}

impl<'a> DdimChain<'a> {
    pub fn new(
        model: &'a dyn ScoreModel,
        sched: &NoiseSchedule,
        plan: &StepPlan,
        eta: f64,
        gamma: f64,
        controls: Option<Vec<Vec<f64>>>,
    ) -> Result<Self> {
        let coeffs = plan
            .transitions()
            .map(|(t, tp)| sched.step_coefficients(t, tp, eta))
            .collect::<Result<Vec<_>>>()?;
        if let Some(c) = &controls {
            check_dim(coeffs.len(), c.len())?;
            for u in c {
                check_dim(model.dim(), u.len())?;
            }
        }
        Ok(Self {
            model,
            coeffs,
            gamma,
            controls,
        })
    }
}

impl GaussianChain for DdimChain<'_> {
    fn dim(&self) -> usize {
        self.model.dim()
    }
    fn steps(&self) -> usize {
        self.coeffs.len()
    }
    fn mean(&self, step: usize, x: &[f64]) -> Vec<f64> {
        match &self.controls {
            Some(c) => ddim_mean(self.model, &self.coeffs[step], &numerics::axpy(x, self.gamma, &c[step])),
            None => ddim_mean(self.model, &self.coeffs[step], x),
        }
    }
    fn sigma(&self, step: usize) -> f64 {
        self.coeffs[step].sigma
    }
}

/// Per-step KL between the guided and unguided DDIM transitions from `x`.
pub fn ddim_step_kl(
    model: &dyn ScoreModel,
    c: &StepCoefficients,
    x: &[f64],
    u: &[f64],
    gamma: f64,
) -> Result<f64> {
    if !(c.sigma > 0.0) {
        return Err(Error::UndefinedKl { step: 0 });
    }
    let guided = ddim_mean(model, c, &numerics::axpy(x, gamma, u));
    let unguided = ddim_mean(model, c, x);
    Ok(crate::oracle::isotropic_gaussian_kl(&guided, &unguided, c.sigma))
}

/// Continuous variance-preserving SDE with linear `beta(s)` on `s in [0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VpSde {
    pub beta_min: f64,
    pub beta_max: f64,
    /// Integration stops at this time instead of zero.
    pub s_min: f64,
}

impl Default for VpSde {
    fn default() -> Self {
        Self {
            beta_min: 0.1,
            beta_max: 20.0,
            s_min: 1e-3,
        }
    }
}

impl VpSde {
    pub fn beta(&self, s: f64) -> f64 {
        self.beta_min + (self.beta_max - self.beta_min) * s
    }

    pub fn alpha_bar(&self, s: f64) -> f64 {
        (-(self.beta_min * s + 0.5 * (self.beta_max - self.beta_min) * s * s)).exp()
    }

    /// Step times from 1 downward and the common step size.
    pub fn grid(&self, n_steps: usize) -> (Vec<f64>, f64) {
        let dt = (1.0 - self.s_min) / n_steps as f64;
        ((0..n_steps).map(|i| 1.0 - i as f64 * dt).collect(), dt)
    }
}

/// One reverse Euler-Maruyama step from time `s` to `s - dt` with the score taken
/// at `x + gamma u`.
#[allow(clippy::too_many_arguments)]
pub fn sde_step_ctdtm(
    model: &dyn ScoreModel,
    sde: &VpSde,
    x: &[f64],
    u: &[f64],
    gamma: f64,
    s: f64,
    dt: f64,
    rng: &mut Rng,
) -> Result<Vec<f64>> {
    check_dim(model.dim(), x.len())?;
    check_dim(x.len(), u.len())?;
    if !(dt > 0.0) {
        return Err(Error::InvalidParameter {
            name: "dt",
            reason: format!("must be positive, got {dt}"),
        });
    }
    let beta = sde.beta(s);
    let score = model.score(&numerics::axpy(x, gamma, u), sde.alpha_bar(s));
    let noise = (beta * dt).sqrt();
    Ok(x.iter()
        .zip(&score)
        .map(|(xi, si)| xi + (0.5 * beta * xi + beta * si) * dt + noise * rng.normal())
        .collect())
}

pub fn sde_sample(model: &dyn ScoreModel, sde: &VpSde, n_steps: usize, rng: &mut Rng) -> Result<Vec<f64>> {
    let mut x = rng.gaussian(model.dim())?;
    let zero = vec![0.0; model.dim()];
    let (times, dt) = sde.grid(n_steps);
    for s in times {
        x = sde_step_ctdtm(model, sde, &x, &zero, 1.0, s, dt, rng)?;
    }
    Ok(x)
}

/// Reverse SDE with a control per step. The transient weight `g^2 dt / 2` on the
/// score difference becomes `beta dt / (2 (1 - alpha_bar))` on the noise difference;
/// this is what the `ddim` sentinel resolves to here, and `w_c` defaults to zero.
pub fn sde_sample_guided(
    model: &dyn ScoreModel,
    sde: &VpSde,
    cost: &dyn TerminalCost,
    cfg: &GuidanceConfig,
    rng: &mut Rng,
) -> Result<Sample> {
    cfg.validate()?;
    check_dim(model.dim(), cost.dim())?;
    let mut x = rng.gaussian(model.dim())?;
    let (times, dt) = sde.grid(cfg.steps);
    let mut trace = ControlTrace::default();
    for s in times {
        let ab = sde.alpha_bar(s);
        let step = EpsStep { model, alpha_bar: ab };
        let weights = Weights {
            gamma: cfg.gamma,
            w_s: cfg.w_s.resolve(sde.beta(s) * dt / (2.0 * (1.0 - ab))),
            w_c: cfg.w_c.resolve(0.0),
            w_t: cfg.w_t,
        };
        let obj = Objective::new(&step, &x, weights)?;
        let sol = control::minimize(&obj, cost, cfg)?;
        let next = sde_step_ctdtm(model, sde, &x, &sol.u, cfg.gamma, s, dt, rng)?;
        trace.push(s, sol);
        x = next;
    }
    Ok(Sample { x0: x, trace })
}

/// Velocity field on `t in [0, 1]`, noise at 0 and data at 1.
pub trait FlowModel: Send + Sync {
    fn dim(&self) -> usize;
    fn velocity(&self, x: &[f64], t: f64) -> Vec<f64>;
    fn velocity_vjp(&self, x: &[f64], t: f64, cotangent: &[f64]) -> Vec<f64>;
}

/// Exact conditional-OT velocity `E[x1 - x0 | x_t]` for a Gaussian-mixture target,
/// with `x_t = t x1 + (1 - t) x0` and `x0 ~ N(0, I)`.
#[derive(Debug, Clone)]
pub struct GmmFlow {
    pub target: GmmPrior,
}

struct FlowTerms {
    resp: Vec<f64>,
    /// `(t v_k - (1 - t)) / var_k`
    coef: Vec<f64>,
    /// `-(x - t mu_k) / var_k`
    grads: Vec<Vec<f64>>,
    vels: Vec<Vec<f64>>,
}

impl GmmFlow {
    fn terms(&self, x: &[f64], t: f64) -> FlowTerms {
        let p = &self.target;
        let d = x.len() as f64;
        let k = p.components();
        let (mut logp, mut coef, mut grads, mut vels) =
            (Vec::with_capacity(k), Vec::with_capacity(k), Vec::with_capacity(k), Vec::with_capacity(k));
        for c in 0..k {
            let v = p.variances()[c];
            let var = t * t * v + (1.0 - t) * (1.0 - t);
            let mu = &p.means()[c];
            let dev: Vec<f64> = x.iter().zip(mu).map(|(xi, mi)| xi - t * mi).collect();
            let cc = (t * v - (1.0 - t)) / var;
            logp.push(p.weights()[c].ln() - 0.5 * d * var.ln() - 0.5 * numerics::norm_sq(&dev) / var);
            vels.push(mu.iter().zip(&dev).map(|(m, e)| m + cc * e).collect());
            grads.push(numerics::scale(&dev, -1.0 / var));
            coef.push(cc);
        }
        let mx = logp.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut resp: Vec<f64> = logp.iter().map(|l| (l - mx).exp()).collect();
        let z: f64 = resp.iter().sum();
        resp.iter_mut().for_each(|r| *r /= z);
        FlowTerms {
            resp,
            coef,
            grads,
            vels,
        }
    }
}

impl FlowModel for GmmFlow {
    fn dim(&self) -> usize {
        self.target.means()[0].len()
    }

    fn velocity(&self, x: &[f64], t: f64) -> Vec<f64> {
        let f = self.terms(x, t);
        let mut out = vec![0.0; x.len()];
        for (r, v) in f.resp.iter().zip(&f.vels) {
            for (o, vi) in out.iter_mut().zip(v) {
                *o += r * vi;
            }
        }
        out
    }

    fn velocity_vjp(&self, x: &[f64], t: f64, cot: &[f64]) -> Vec<f64> {
        let f = self.terms(x, t);
        let mut gbar = vec![0.0; x.len()];
        for (r, g) in f.resp.iter().zip(&f.grads) {
            for (o, gi) in gbar.iter_mut().zip(g) {
                *o += r * gi;
            }
        }
        let mut out = vec![0.0; x.len()];
        for k in 0..f.resp.len() {
            let r = f.resp[k];
            let vc = numerics::dot(&f.vels[k], cot);
            for i in 0..x.len() {
                out[i] += r * f.coef[k] * cot[i] + r * (f.grads[k][i] - gbar[i]) * vc;
            }
        }
        out
    }
}

/// Velocity at `xbar` with the one-step extrapolation `x + (1 - t) v(xbar)` as the
/// clean estimate.
struct FlowStep<'a> {
    flow: &'a dyn FlowModel,
    x: &'a [f64],
    t: f64,
}

impl StepModel for FlowStep<'_> {
    fn dim(&self) -> usize {
        self.flow.dim()
    }
    fn output(&self, xbar: &[f64]) -> Vec<f64> {
        self.flow.velocity(xbar, self.t)
    }
    fn estimate(&self, _xbar: &[f64], output: &[f64]) -> Vec<f64> {
        numerics::axpy(self.x, 1.0 - self.t, output)
    }
    fn vjp(&self, xbar: &[f64], a: &[f64], b: &[f64]) -> Vec<f64> {
        let c = numerics::axpy(a, 1.0 - self.t, b);
        self.flow.velocity_vjp(xbar, self.t, &c)
    }
}

fn flow_euler(flow: &dyn FlowModel, x: &[f64], xbar: &[f64], t: f64, dt: f64) -> Vec<f64> {
    numerics::axpy(x, dt, &flow.velocity(xbar, t))
}

pub fn flow_sample(flow: &dyn FlowModel, n_steps: usize, rng: &mut Rng) -> Result<Vec<f64>> {
    let mut x = rng.gaussian(flow.dim())?;
    let dt = 1.0 / n_steps as f64;
    for i in 0..n_steps {
        x = flow_euler(flow, &x, &x, i as f64 * dt, dt);
    }
    Ok(x)
}

/// Euler integration with a control per step. The transient weight is `dt` on the
/// velocity difference (the `ddim` sentinel) and `w_c` defaults to zero.
pub fn ftm_sample(flow: &dyn FlowModel, cost: &dyn TerminalCost, cfg: &GuidanceConfig, rng: &mut Rng) -> Result<Sample> {
    cfg.validate()?;
    check_dim(flow.dim(), cost.dim())?;
    let mut x = rng.gaussian(flow.dim())?;
    let dt = 1.0 / cfg.steps as f64;
    let mut trace = ControlTrace::default();
    for i in 0..cfg.steps {
        let t = i as f64 * dt;
        let step = FlowStep { flow, x: &x, t };
        let weights = Weights {
            gamma: cfg.gamma,
            w_s: cfg.w_s.resolve(dt),
            w_c: cfg.w_c.resolve(0.0),
            w_t: cfg.w_t,
        };
        let obj = Objective::new(&step, &x, weights)?;
        let sol = control::minimize(&obj, cost, cfg)?;
        let xbar = numerics::axpy(&x, cfg.gamma, &sol.u);
        let next = flow_euler(flow, &x, &xbar, t, dt);
        trace.push(t, sol);
        x = next;
    }
    Ok(Sample { x0: x, trace })
}
