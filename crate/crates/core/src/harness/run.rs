//! End-to-end runs: ground-truth synthesis, per-trajectory sampling on a thread
//! pool, metrics and output files.

use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::Serialize;

use super::config::{Method, OperatorKind, PriorKind, RunConfig, SweepSpec, GRID_DIM};
use super::io::{self, MetricsRecord, TraceRow, TrajectoryMetrics};
use crate::baselines;
use crate::error::{Error, Result};
use crate::numerics::{self, Rng};
use crate::oracle::{self, GaussianDist};
use crate::priors::{GmmPrior, MlpDenoiser, ScoreModel};
use crate::samplers::{self, ControlTrace, GmmFlow, VpSde};
use crate::schedule::NoiseSchedule;
use crate::terminal::{
    BlindDeconvolution, BlurKernel, CircularConv, Downsample, ForwardOperator, Identity, Mask, NonlinearBlur,
    ProblemSpec, ResidualCost, TerminalCost,
};

/// Salt separating the reference-sample stream from the trajectory streams.
const REFERENCE_SALT: u64 = 0x9e37_79b9_7f4a_7c15;

pub enum LoadedPrior {
    Gmm(GmmPrior),
    Mlp(MlpDenoiser),
}

impl LoadedPrior {
    pub fn load(kind: &PriorKind) -> Result<Self> {
        match kind {
            PriorKind::Mlp { path } => Ok(LoadedPrior::Mlp(MlpDenoiser::load(path)?)),
            other => Ok(LoadedPrior::Gmm(other.data_prior()?)),
        }
    }

    pub fn model(&self) -> &dyn ScoreModel {
        match self {
            LoadedPrior::Gmm(g) => g,
            LoadedPrior::Mlp(m) => m,
        }
    }
}

/// Ground truth and its observation.
#[derive(Debug, Clone)]
pub struct Problem {
    pub x0: Vec<f64>,
    pub spec: ProblemSpec,
    /// Mask entries for mask and identity operators.
    pub mask: Option<Vec<f64>>,
    pub blind: Option<BlindSetup>,
}

#[derive(Debug, Clone)]
pub struct BlindSetup {
    pub truth: BlurKernel,
    pub init: BlurKernel,
}

/// Draws `x0` from the data prior, then the operator's random parts, then the
/// observation noise, all from `Rng::new(truth_seed)`.
pub fn build_problem(cfg: &RunConfig) -> Result<Problem> {
    let data = cfg.prior.data_prior()?;
    let dim = cfg.dim()?;
    let mut rng = Rng::new(cfg.problem.truth_seed);
    let x0 = data.sample(&mut rng);
    let mut mask = None;
    let mut blind = None;
    let op: Arc<dyn ForwardOperator> = match &cfg.problem.operator {
        OperatorKind::Identity => {
            mask = Some(vec![1.0; dim]);
            Arc::new(Identity { dim })
        }
        OperatorKind::Mask { entries, drop } => {
            let m = match entries {
                Some(e) => Mask::new(e.clone())?,
                None => Mask::random(dim, *drop, &mut rng)?,
            };
            mask = Some(m.entries().to_vec());
            Arc::new(m)
        }
        OperatorKind::Downsample { factor } => Arc::new(Downsample::new(dim, *factor)?),
        OperatorKind::Conv { kernel } => Arc::new(CircularConv::new(kernel.clone(), dim)?),
        OperatorKind::NonlinearBlur { kernel, saturation } => Arc::new(NonlinearBlur::new(kernel.clone(), *saturation, dim)?),
        OperatorKind::BlindConv { truth, init } => {
            blind = Some(BlindSetup {
                truth: truth.clone(),
                init: init.clone(),
            });
            Arc::new(CircularConv::new(truth.clone(), dim)?)
        }
    };
    let spec = ProblemSpec::observe(op, &x0, cfg.problem.sigma_y, &mut rng)?;
    Ok(Problem { x0, spec, mask, blind })
}

/// Everything produced by a run, before anything is written.
#[derive(Debug, Clone)]
pub struct SolveOutput {
    pub metrics: MetricsRecord,
    pub problem: Problem,
    pub samples: Vec<Vec<f64>>,
    pub traces: Vec<ControlTrace>,
    /// Estimated kernels of blind runs, one per trajectory.
    pub kernels: Vec<BlurKernel>,
}

struct Trajectory {
    x0: Vec<f64>,
    trace: ControlTrace,
    kernel: Option<BlurKernel>,
    wall_time: f64,
}

struct Context<'a> {
    cfg: &'a RunConfig,
    sched: NoiseSchedule,
    prior: &'a LoadedPrior,
    problem: &'a Problem,
    cost: ResidualCost,
}

impl Context<'_> {
    fn init_state(&self, rng: &mut Rng) -> Result<Vec<f64>> {
        let warm = match &self.problem.blind {
            Some(_) => Some(self.problem.spec.y.clone()),
            None => self.cost.warm_start(),
        };
        samplers::initial_state(&self.sched, self.problem.x0.len(), self.cfg.guidance.start, warm.as_deref(), rng)
    }

    fn trajectory(&self, index: usize) -> Result<Trajectory> {
        let start = Instant::now();
        let g = &self.cfg.guidance;
        let model = self.prior.model();
        let mut rng = Rng::stream(self.cfg.seed, index as u64);
        let mut trace = ControlTrace::default();
        let mut kernel = None;
        let plan = || self.sched.plan_steps(g.steps, g.start);
        let x0 = match self.cfg.method {
            Method::Unguided => {
                let plan = plan()?;
                let init = self.init_state(&mut rng)?;
                samplers::ddim_sample(model, &self.sched, &plan, g.eta, init, &mut rng)?
            }
            Method::Ndtm => match &self.problem.blind {
                Some(b) => {
                    let cost = BlindDeconvolution::new(self.problem.spec.y.clone(), b.init.clone())?;
                    let out = samplers::ndtm_sample_blind(model, &self.sched, cost, g, &mut rng)?;
                    trace = out.trace;
                    kernel = Some(out.kernel);
                    out.x0
                }
                None => {
                    let out = samplers::ndtm_sample(model, &self.sched, &self.cost, g, &mut rng)?;
                    trace = out.trace;
                    out.x0
                }
            },
            Method::RbMod => {
                let out = baselines::rb_modulation_sample(model, &self.sched, &self.cost, g, &mut rng)?;
                trace = out.trace;
                out.x0
            }
            Method::Dps => {
                let plan = plan()?;
                let init = self.init_state(&mut rng)?;
                baselines::dps_sample(model, &self.sched, &self.problem.spec, &plan, g.eta, self.cfg.dps_step_size, init, &mut rng)?
            }
            Method::LinearCg => {
                let plan = plan()?;
                let init = self.init_state(&mut rng)?;
                let mask = baselines::linear_cg_mask(self.problem.mask.as_deref(), self.problem.x0.len())?;
                let p = &self.problem.spec;
                baselines::linear_cg_sample(&self.sched, &mask, &p.y, p.sigma_y, g.gamma, &plan, g.eta, init, &mut rng)?
            }
            Method::Ctdtm => {
                let out = samplers::sde_sample_guided(model, &VpSde::default(), &self.cost, g, &mut rng)?;
                trace = out.trace;
                out.x0
            }
            Method::Ftm => {
                let target = match self.prior {
                    LoadedPrior::Gmm(p) => p.clone(),
                    LoadedPrior::Mlp(_) => return Err(Error::config("method.name", "ftm needs an analytic prior")),
                };
                let out = samplers::ftm_sample(&GmmFlow { target }, &self.cost, g, &mut rng)?;
                trace = out.trace;
                out.x0
            }
        };
        Ok(Trajectory {
            x0,
            trace,
            kernel,
            wall_time: start.elapsed().as_secs_f64(),
        })
    }
}

/// Conjugate posterior when the data prior is a single isotropic Gaussian and the
/// operator is linear and known.
pub fn analytic_posterior(cfg: &RunConfig, problem: &Problem) -> Result<Option<GaussianDist>> {
    let data = cfg.prior.data_prior()?;
    let op = &problem.spec.operator;
    if data.components() != 1 || !op.is_linear() || problem.blind.is_some() {
        return Ok(None);
    }
    let d = op.input_dim();
    let m = op.output_dim();
    let mut a = DMatrix::zeros(m, d);
    let mut e = vec![0.0; d];
    for j in 0..d {
        e[j] = 1.0;
        for (i, v) in op.apply(&e).into_iter().enumerate() {
            a[(i, j)] = v;
        }
        e[j] = 0.0;
    }
    let mean = DVector::from_column_slice(&data.means()[0]);
    let cov = DMatrix::identity(d, d) * data.variances()[0];
    let y = DVector::from_column_slice(&problem.spec.y);
    oracle::gaussian_posterior(&mean, &cov, &a, problem.spec.sigma_y, &y).map(Some)
}

/// Runs the configured method for every trajectory without touching the disk.
pub fn solve(cfg: &RunConfig) -> Result<SolveOutput> {
    cfg.validate()?;
    let prior = LoadedPrior::load(&cfg.prior)?;
    let problem = build_problem(cfg)?;
    solve_with(cfg, &prior, &problem)
}

/// Like [`solve`] with a prior and problem supplied by the caller.
pub fn solve_with(cfg: &RunConfig, prior: &LoadedPrior, problem: &Problem) -> Result<SolveOutput> {
    let started = Instant::now();
    let ctx = Context {
        cfg,
        sched: cfg.schedule.build()?,
        prior,
        problem,
        cost: ResidualCost::new(problem.spec.clone()),
    };
    let results: Vec<Result<Trajectory>> = (0..cfg.n_trajectories).into_par_iter().map(|i| ctx.trajectory(i)).collect();
    let runs = results.into_iter().collect::<Result<Vec<_>>>()?;
    let wall_time = started.elapsed().as_secs_f64();

    let x0 = &problem.x0;
    let (lo, hi) = value_range(x0);
    let peak = if hi > lo { hi - lo } else { 1.0 };
    let mut per_trajectory = Vec::with_capacity(runs.len());
    for (index, r) in runs.iter().enumerate() {
        let residual = match &r.kernel {
            Some(k) => BlindDeconvolution::new(problem.spec.y.clone(), k.clone())?.value(&r.x0).sqrt(),
            None => numerics::norm(&problem.spec.residual(&r.x0)),
        };
        per_trajectory.push(TrajectoryMetrics {
            index,
            psnr: io::psnr(&r.x0, x0, peak)?,
            residual,
            wall_time: r.wall_time,
        });
    }
    let n = runs.len() as f64;
    let samples: Vec<Vec<f64>> = runs.iter().map(|r| r.x0.clone()).collect();
    let mut mean = vec![0.0; x0.len()];
    for s in &samples {
        mean = numerics::add(&mean, s);
    }
    let mean = numerics::scale(&mean, 1.0 / n);
    let (sample_mean_error, energy_distance) = match analytic_posterior(cfg, problem)? {
        Some(post) => {
            let mut rng = Rng::new(cfg.seed ^ REFERENCE_SALT);
            let reference: Vec<Vec<f64>> = (0..runs.len()).map(|_| post.sample(&mut rng)).collect();
            (
                numerics::norm(&numerics::sub(&mean, post.mean.as_slice())),
                io::energy_distance(&samples, &reference)?,
            )
        }
        None => (numerics::norm(&numerics::sub(&mean, x0)), io::energy_distance(&samples, std::slice::from_ref(x0))?),
    };
    let kernels: Vec<BlurKernel> = runs.iter().filter_map(|r| r.kernel.clone()).collect();
    let kernel_error = problem.blind.as_ref().filter(|_| !kernels.is_empty()).map(|b| {
        kernels.iter().map(|k| numerics::norm(&numerics::sub(k.taps(), b.truth.taps()))).sum::<f64>() / kernels.len() as f64
    });
    let metrics = MetricsRecord {
        psnr: per_trajectory.iter().map(|t| t.psnr).sum::<f64>() / n,
        residual: per_trajectory.iter().map(|t| t.residual).sum::<f64>() / n,
        sample_mean_error,
        energy_distance,
        kernel_error,
        wall_time,
        per_trajectory,
    };
    Ok(SolveOutput {
        metrics,
        problem: problem.clone(),
        samples,
        traces: runs.into_iter().map(|r| r.trace).collect(),
        kernels,
    })
}

fn value_range(x: &[f64]) -> (f64, f64) {
    x.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
}

/// Solves and, when the config names an output directory, writes `metrics.csv`,
/// `trace.csv`, `samples.bin`, `truth.bin`, `observation.bin`, `kernels.bin` for
/// blind runs and PGM images for 64-sample signals.
pub fn run_solve(cfg: &RunConfig) -> Result<MetricsRecord> {
    let out = solve(cfg)?;
    if let Some(dir) = &cfg.output_dir {
        write_solve_outputs(dir, &out)?;
    }
    Ok(out.metrics)
}

pub fn write_solve_outputs(dir: &Path, out: &SolveOutput) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    io::write_metrics_csv(&dir.join("metrics.csv"), &out.metrics)?;
    io::write_trace_csv(&dir.join("trace.csv"), &trace_rows(&out.traces))?;
    io::write_tensor(&dir.join("samples.bin"), &out.samples)?;
    io::write_tensor(&dir.join("truth.bin"), std::slice::from_ref(&out.problem.x0))?;
    io::write_tensor(&dir.join("observation.bin"), std::slice::from_ref(&out.problem.spec.y))?;
    if !out.kernels.is_empty() {
        let taps: Vec<Vec<f64>> = out.kernels.iter().map(|k| k.taps().to_vec()).collect();
        io::write_tensor(&dir.join("kernels.bin"), &taps)?;
    }
    let x0 = &out.problem.x0;
    if x0.len() == GRID_DIM {
        let side = 8;
        let (lo, hi) = value_range(x0);
        io::write_pgm(&dir.join("truth.pgm"), x0, side, side, lo, hi)?;
        let y = &out.problem.spec.y;
        let shown = if y.len() == GRID_DIM {
            y.clone()
        } else {
            out.problem.spec.operator.back_project(y)
        };
        io::write_pgm(&dir.join("observation.pgm"), &shown, side, side, lo, hi)?;
        if let Some(first) = out.samples.first() {
            io::write_pgm(&dir.join("reconstruction.pgm"), first, side, side, lo, hi)?;
        }
    }
    Ok(())
}

pub fn trace_rows(traces: &[ControlTrace]) -> Vec<TraceRow> {
    traces
        .iter()
        .enumerate()
        .flat_map(|(trajectory, tr)| {
            tr.records.iter().map(move |r| TraceRow {
                trajectory,
                t: r.t,
                u_norm: r.u_norm,
                c_score: r.parts.c_score,
                c_control: r.parts.c_control,
                c_terminal: r.parts.c_terminal,
                total: r.parts.total,
                residual: r.residual,
            })
        })
        .collect()
}

/// Unguided DDIM from pure noise with the configured steps and eta.
pub fn run_sample(cfg: &RunConfig) -> Result<Vec<Vec<f64>>> {
    cfg.validate()?;
    let prior = LoadedPrior::load(&cfg.prior)?;
    let sched = cfg.schedule.build()?;
    let plan = sched.plan_steps(cfg.guidance.steps, sched.steps())?;
    let dim = cfg.dim()?;
    let model = prior.model();
    (0..cfg.n_trajectories)
        .into_par_iter()
        .map(|i| {
            let mut rng = Rng::stream(cfg.seed, i as u64);
            let init = rng.gaussian(dim)?;
            samplers::ddim_sample(model, &sched, &plan, cfg.guidance.eta, init, &mut rng)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub param: String,
    pub value: f64,
    pub seed: u64,
    /// `ok` or `failed`.
    pub status: String,
    pub psnr: Option<f64>,
    pub residual: Option<f64>,
    pub sample_mean_error: Option<f64>,
    pub energy_distance: Option<f64>,
    pub wall_time: Option<f64>,
    pub error: String,
}

/// One solve per grid value and seed, in grid order. A failing point yields a
/// `failed` row and the sweep moves on.
pub fn run_sweep(cfg: &RunConfig, sweep: &SweepSpec) -> Result<Vec<SweepRow>> {
    if sweep.values.is_empty() {
        return Err(Error::config("sweep.values", "grid must not be empty"));
    }
    if sweep.seeds.is_empty() {
        return Err(Error::config("sweep.seeds", "must not be empty"));
    }
    cfg.validate()?;
    let prior = LoadedPrior::load(&cfg.prior)?;
    let mut rows = Vec::with_capacity(sweep.values.len() * sweep.seeds.len());
    for &value in &sweep.values {
        for &seed in &sweep.seeds {
            let point = || -> Result<MetricsRecord> {
                let mut c = cfg.clone();
                c.seed = seed;
                c.problem.truth_seed = seed;
                c.output_dir = None;
                c.guidance = sweep.param.apply(&cfg.guidance, value)?;
                c.validate()?;
                let problem = build_problem(&c)?;
                Ok(solve_with(&c, &prior, &problem)?.metrics)
            };
            let base = SweepRow {
                param: sweep.param.name().to_string(),
                value,
                seed,
                status: "ok".into(),
                psnr: None,
                residual: None,
                sample_mean_error: None,
                energy_distance: None,
                wall_time: None,
                error: String::new(),
            };
            rows.push(match point() {
                Ok(m) => SweepRow {
                    psnr: Some(m.psnr),
                    residual: Some(m.residual),
                    sample_mean_error: Some(m.sample_mean_error),
                    energy_distance: Some(m.energy_distance),
                    wall_time: Some(m.wall_time),
                    ..base
                },
                Err(e) => SweepRow {
                    status: "failed".into(),
                    error: e.to_string(),
                    ..base
                },
            });
        }
    }
    Ok(rows)
}

/// Columns: param,value,seed,status,psnr,residual,sample_mean_error,energy_distance,wall_time,error.
pub fn write_sweep_csv(path: &Path, rows: &[SweepRow]) -> Result<()> {
    io::write_rows(
        path,
        rows,
        "param,value,seed,status,psnr,residual,sample_mean_error,energy_distance,wall_time,error",
    )
}
