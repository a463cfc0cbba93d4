//! Finite-difference validation of every hand-written derivative, and a short
//! report of the closed-form oracle checks.

use std::path::Path;
use std::sync::Arc;

use serde::Serialize;

use super::io;
use crate::baselines::{self, LinearControlConfig};
use crate::control::{self, GuidanceConfig};
use crate::error::Result;
use crate::numerics::{self, Rng};
use crate::oracle::{self, finite_diff_grad, rel_error, vjp_rel_error};
use crate::priors::{GmmPrior, MlpDenoiser, ScoreModel};
use crate::samplers::{DdimChain, FlowModel, GmmFlow};
use crate::schedule::{NoiseSchedule, ScheduleKind};
use crate::terminal::{
    BlindDeconvolution, BlurKernel, CircularConv, Downsample, FeatureExtractor, ForwardOperator, GramStyleCost,
    Identity, Mask, NonlinearBlur, ProblemSpec, ResidualCost, TerminalCost,
};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradcheckConfig {
    pub probes: usize,
    pub tolerance: f64,
    pub bound_pairs: usize,
    pub seed: u64,
    /// Central-difference step.
    pub h: f64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            probes: 100,
            tolerance: 1e-4,
            bound_pairs: 100_000,
            seed: 0,
            h: 1e-5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckRow {
    pub component: String,
    pub probe: usize,
    /// Relative error for derivative rows, a count or rate for bound rows.
    pub value: f64,
    pub tolerance: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub rows: Vec<CheckRow>,
    pub factor2_violations: usize,
    /// Share of pairs violating `|a + b|^2 <= |a|^2 + |b|^2`; informational.
    pub uncorrected_violation_rate: f64,
}

impl GradcheckReport {
    pub fn all_pass(&self) -> bool {
        self.rows.iter().all(|r| r.pass)
    }

    /// Largest derivative error per component, in first-seen order.
    pub fn max_by_component(&self) -> Vec<(String, f64)> {
        let mut out: Vec<(String, f64)> = Vec::new();
        for r in &self.rows {
            match out.iter_mut().find(|(c, _)| *c == r.component) {
                Some((_, m)) => *m = m.max(r.value),
                None => out.push((r.component.clone(), r.value)),
            }
        }
        out
    }
}

/// Rows for one component: `probe` receives a fresh RNG per probe and returns the
/// relative error of the analytic derivative.
pub fn check_component(
    name: &str,
    cfg: &GradcheckConfig,
    probe: impl Fn(&mut Rng) -> f64,
) -> Vec<CheckRow> {
    (0..cfg.probes)
        .map(|i| {
            let mut rng = Rng::stream(cfg.seed ^ hash(name), i as u64);
            let err = probe(&mut rng);
            CheckRow {
                component: name.to_string(),
                probe: i,
                value: err,
                tolerance: cfg.tolerance,
                pass: err < cfg.tolerance,
            }
        })
        .collect()
}

/// FNV-1a, to give each component its own probe stream.
fn hash(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

/// Error of an operator VJP against central differences at a random point and
/// cotangent.
pub fn operator_probe(op: &dyn ForwardOperator, h: f64, rng: &mut Rng) -> f64 {
    let x = rng.gaussian(op.input_dim()).expect("nonzero dim");
    let c = rng.gaussian(op.output_dim()).expect("nonzero dim");
    vjp_rel_error(|z| op.apply(z), &x, &c, op.vjp(&x, &c), h)
}

/// Error of a terminal-cost gradient against central differences.
pub fn cost_probe(cost: &dyn TerminalCost, h: f64, rng: &mut Rng) -> f64 {
    let x = rng.gaussian(cost.dim()).expect("nonzero dim");
    grad_error(|z| cost.value(z), &x, cost.grad(&x), h)
}

fn grad_error(f: impl Fn(&[f64]) -> f64, x: &[f64], analytic: Vec<f64>, h: f64) -> f64 {
    match finite_diff_grad(f, x, h) {
        Ok(fd) => rel_error(&fd, &analytic),
        Err(_) => f64::INFINITY,
    }
}

fn test_schedule() -> NoiseSchedule {
    NoiseSchedule::build(ScheduleKind::Linear, 1000, 1e-4, 0.02).expect("valid schedule")
}

fn test_gmm(dim: usize) -> GmmPrior {
    let mut r = Rng::new(5);
    let means = (0..3).map(|_| r.gaussian(dim).expect("dim")).collect();
    GmmPrior::new(vec![0.2, 0.5, 0.3], means, vec![0.3, 0.8, 1.5]).expect("valid prior")
}

/// A mid-schedule noise level in `[0.05, 0.95]`.
fn random_alpha_bar(rng: &mut Rng) -> f64 {
    0.05 + 0.9 * rng.uniform()
}

fn model_probes(name: &str, model: &dyn ScoreModel, cfg: &GradcheckConfig, rows: &mut Vec<CheckRow>) {
    let d = model.dim();
    rows.extend(check_component(&format!("{name}_epsilon"), cfg, |rng| {
        let ab = random_alpha_bar(rng);
        let x = rng.gaussian(d).expect("dim");
        let c = rng.gaussian(d).expect("dim");
        vjp_rel_error(|z| model.epsilon(z, ab), &x, &c, model.epsilon_vjp(&x, ab, &c), cfg.h)
    }));
    rows.extend(check_component(&format!("{name}_tweedie"), cfg, |rng| {
        let ab = random_alpha_bar(rng);
        let x = rng.gaussian(d).expect("dim");
        let c = rng.gaussian(d).expect("dim");
        vjp_rel_error(|z| model.tweedie(z, ab), &x, &c, model.tweedie_vjp(&x, ab, &c), cfg.h)
    }));
}

/// Checks priors, operators, terminal costs, the control cost and the flow VJP,
/// then fuzzes the squared-norm bound.
pub fn run_gradcheck(cfg: &GradcheckConfig) -> Result<GradcheckReport> {
    let d = 12;
    let mut rows = Vec::new();
    let mut setup = Rng::new(cfg.seed);

    let gmm = test_gmm(d);
    model_probes("gmm", &gmm, cfg, &mut rows);
    let mlp = MlpDenoiser::init(d, 16, &mut setup)?;
    model_probes("mlp", &mlp, cfg, &mut rows);

    let kernel = BlurKernel::gaussian(5, 1.0)?;
    let ops: Vec<(&str, Arc<dyn ForwardOperator>)> = vec![
        ("op_identity", Arc::new(Identity { dim: d })),
        ("op_mask", Arc::new(Mask::random(d, 0.5, &mut setup)?)),
        ("op_downsample", Arc::new(Downsample::new(d, 3)?)),
        ("op_conv", Arc::new(CircularConv::new(kernel.clone(), d)?)),
        ("op_nonlinear_blur", Arc::new(NonlinearBlur::new(kernel.clone(), 1.5, d)?)),
    ];
    for (name, op) in &ops {
        rows.extend(check_component(name, cfg, |rng| operator_probe(op.as_ref(), cfg.h, rng)));
    }

    for (name, op) in [("cost_residual", ops[2].1.clone()), ("cost_residual_nonlinear", ops[4].1.clone())] {
        let x0 = setup.gaussian(d)?;
        let cost = ResidualCost::new(ProblemSpec::observe(op, &x0, 0.1, &mut setup)?);
        rows.extend(check_component(name, cfg, |rng| cost_probe(&cost, cfg.h, rng)));
    }
    let extractor = FeatureExtractor::random(d, 4, 3, &mut setup)?;
    let style = GramStyleCost::from_signal(extractor, &setup.gaussian(d)?)?;
    rows.extend(check_component("cost_gram", cfg, |rng| cost_probe(&style, cfg.h, rng)));

    let y = setup.gaussian(d)?;
    let blind = BlindDeconvolution::new(y.clone(), BlurKernel::new(vec![0.1, 0.2, 0.4, 0.2, 0.1])?)?;
    rows.extend(check_component("cost_blind_signal", cfg, |rng| cost_probe(&blind, cfg.h, rng)));
    rows.extend(check_component("cost_blind_kernel", cfg, |rng| {
        let x = rng.gaussian(d).expect("dim");
        let k: Vec<f64> = (0..5).map(|_| rng.uniform()).collect();
        let probe = BlindDeconvolution {
            y: y.clone(),
            kernel: BlurKernel::new(k.clone()).expect("finite taps"),
        };
        grad_error(|kk| probe.value_with_kernel(kk, &x), &k, probe.kernel_grad(&x), cfg.h)
    }));

    let sched = test_schedule();
    let nl_cost = {
        let x0 = setup.gaussian(d)?;
        ResidualCost::new(ProblemSpec::observe(ops[4].1.clone(), &x0, 0.1, &mut setup)?)
    };
    let guidance = GuidanceConfig {
        w_t: 5.0,
        gamma: 0.8,
        ..GuidanceConfig::default()
    };
    rows.extend(check_component("control_cost", cfg, |rng| {
        let t = 100 + rng.below(800);
        let t_prev = t - 20;
        let x = rng.gaussian(d).expect("dim");
        let u = numerics::scale(&rng.gaussian(d).expect("dim"), 0.3);
        let total = |uu: &[f64]| {
            control::control_cost(&gmm, &sched, &nl_cost, &x, uu, t, t_prev, &guidance)
                .map(|p| p.total)
                .unwrap_or(f64::NAN)
        };
        match control::control_grad(&gmm, &sched, &nl_cost, &x, &u, t, t_prev, &guidance) {
            Ok(g) => grad_error(total, &u, g, cfg.h),
            Err(_) => f64::INFINITY,
        }
    }));

    let flow = GmmFlow { target: test_gmm(d) };
    rows.extend(check_component("flow_velocity", cfg, |rng| {
        let t = 0.05 + 0.9 * rng.uniform();
        let x = rng.gaussian(d).expect("dim");
        let c = rng.gaussian(d).expect("dim");
        vjp_rel_error(|z| flow.velocity(z, t), &x, &c, flow.velocity_vjp(&x, t, &c), cfg.h)
    }));

    let (factor2_violations, uncorrected_violation_rate) = bound_fuzz(cfg.bound_pairs, cfg.seed)?;
    rows.push(CheckRow {
        component: "bound_factor2_violations".into(),
        probe: 0,
        value: factor2_violations as f64,
        tolerance: 0.0,
        pass: factor2_violations == 0,
    });
    rows.push(CheckRow {
        component: "bound_uncorrected_violation_rate".into(),
        probe: 0,
        value: uncorrected_violation_rate,
        tolerance: f64::INFINITY,
        pass: true,
    });
    Ok(GradcheckReport {
        rows,
        factor2_violations,
        uncorrected_violation_rate,
    })
}

/// Random pairs with random dimension, scale and correlation; returns the factor-2
/// violation count and the uncorrected violation rate.
pub fn bound_fuzz(pairs: usize, seed: u64) -> Result<(usize, f64)> {
    let mut rng = Rng::new(seed ^ hash("bound"));
    let mut factor2 = 0;
    let mut uncorrected = 0;
    for _ in 0..pairs {
        let dim = 1 + rng.below(8);
        let a = numerics::scale(&rng.gaussian(dim)?, (4.0 * rng.normal()).exp());
        let mix = 2.0 * rng.uniform() - 1.0;
        let b = numerics::axpy(&numerics::scale(&rng.gaussian(dim)?, (4.0 * rng.normal()).exp()), mix, &a);
        let check = oracle::check_squared_triangle_bound(&a, &b)?;
        factor2 += usize::from(!check.holds_factor2);
        uncorrected += usize::from(!check.holds_uncorrected);
    }
    Ok((factor2, uncorrected as f64 / pairs.max(1) as f64))
}

/// Columns: component,probe,value,tolerance,pass.
pub fn write_validation_csv(path: &Path, rows: &[CheckRow]) -> Result<()> {
    io::write_rows(path, rows, "component,probe,value,tolerance,pass")
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OracleRow {
    pub check: String,
    pub value: f64,
    pub reference: f64,
    pub tolerance: f64,
    pub pass: bool,
}

/// Closed-form cross-checks: the linear-control reduction, the chain KL estimator,
/// Tweedie against quadrature and the squared-norm bound.
pub fn run_oracle_report(seed: u64) -> Result<Vec<OracleRow>> {
    let mut rows = Vec::new();
    let mut rng = Rng::new(seed);

    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let d = 1 + rng.below(4);
        let ab = random_alpha_bar(&mut rng);
        let x = rng.gaussian(d)?;
        let y = rng.gaussian(d)?;
        let sigma_y = 0.05 + rng.uniform();
        let lc = LinearControlConfig {
            g: 0.1 + rng.uniform(),
            w_t: 0.1 + 10.0 * rng.uniform(),
            gradient: Default::default(),
        };
        let u = baselines::linear_optimal_control_gaussian(ab, &x, &y, sigma_y, &lc)?;
        let cs = oracle::conditional_score(ab, &x, &y, sigma_y)?;
        let expect = numerics::scale(&cs, lc.g * lc.w_t);
        let scale = numerics::norm(&expect).max(1.0);
        worst = worst.max(numerics::norm(&numerics::sub(&u, &expect)) / scale);
    }
    rows.push(OracleRow {
        check: "linear_control_reduction".into(),
        value: worst,
        reference: 0.0,
        tolerance: 1e-9,
        pass: worst < 1e-9,
    });

    // three steps, constant controls: each KL is |shift of the mean|^2 / (2 sigma^2)
    let sched = test_schedule();
    let prior = GmmPrior::standard_normal(2)?;
    let plan = sched.plan_steps(3, 900)?;
    let controls: Vec<Vec<f64>> = (0..3).map(|i| vec![0.3 * (i + 1) as f64, -0.2]).collect();
    let guided = DdimChain::new(&prior, &sched, &plan, 1.0, 1.0, Some(controls.clone()))?;
    let free = DdimChain::new(&prior, &sched, &plan, 1.0, 1.0, None)?;
    let kl = oracle::mc_chain_kl(&guided, &free, 10_000, &mut rng)?;
    let analytic: f64 = plan
        .transitions()
        .zip(&controls)
        .map(|((t, tp), u)| {
            let c = sched.step_coefficients(t, tp, 1.0).expect("valid plan");
            // standard-normal data: the DDIM mean is linear with slope
            // sqrt(ab_prev) sqrt(ab) + direction sqrt(1 - ab)
            let slope = c.alpha_bar_prev.sqrt() * c.alpha_bar.sqrt() + c.direction * (1.0 - c.alpha_bar).sqrt();
            let shift = numerics::scale(u, slope);
            numerics::norm_sq(&shift) / (2.0 * c.sigma * c.sigma)
        })
        .sum();
    // with state-independent controls on a linear chain every sample gives the same sum
    let rel = (kl.estimate - analytic).abs() / analytic;
    rows.push(OracleRow {
        check: "chain_kl_relative_error".into(),
        value: rel,
        reference: analytic,
        tolerance: 1e-9,
        pass: rel < 1e-9,
    });

    let bimodal = GmmPrior::new(vec![0.3, 0.7], vec![vec![-1.5], vec![2.0]], vec![0.2, 0.5])?;
    let mut worst_q: f64 = 0.0;
    for _ in 0..50 {
        let ab = random_alpha_bar(&mut rng);
        let x0 = bimodal.sample(&mut rng)[0];
        let xt = ab.sqrt() * x0 + (1.0 - ab).sqrt() * rng.normal();
        let q = oracle::quadrature_posterior_mean(&bimodal, xt, ab)?;
        worst_q = worst_q.max((bimodal.tweedie(&[xt], ab)[0] - q).abs());
    }
    rows.push(OracleRow {
        check: "tweedie_vs_quadrature".into(),
        value: worst_q,
        reference: 0.0,
        tolerance: 1e-6,
        pass: worst_q < 1e-6,
    });

    let (v2, rate) = bound_fuzz(100_000, seed)?;
    rows.push(OracleRow {
        check: "bound_factor2_violations".into(),
        value: v2 as f64,
        reference: 0.0,
        tolerance: 0.0,
        pass: v2 == 0,
    });
    rows.push(OracleRow {
        check: "bound_uncorrected_violation_rate".into(),
        value: rate,
        reference: 0.0,
        tolerance: f64::INFINITY,
        pass: true,
    });
    Ok(rows)
}

/// Columns: check,value,reference,tolerance,pass.
pub fn write_oracle_csv(path: &Path, rows: &[OracleRow]) -> Result<()> {
    io::write_rows(path, rows, "check,value,reference,tolerance,pass")
}
