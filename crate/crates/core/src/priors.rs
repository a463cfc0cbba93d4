//! Score models: exact Gaussian-mixture priors and a small trainable denoiser.
//!
//! Every model is addressed by the noise level `alpha_bar` rather than an integer
//! timestep, so the same model serves discrete DDIM plans and the continuous-time
//! SDE. Use [`NoiseSchedule::alpha_bar`] to convert.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{check_dim, Error, Result};
use crate::numerics::{self, Adam, Rng};
use crate::schedule::NoiseSchedule;

/// Noise-prediction model with its vector-Jacobian product.
///
/// Implementations may assume `x.len() == self.dim()` and `0 < alpha_bar < 1`;
/// the checked free functions in this module validate inputs first.
pub trait ScoreModel: Send + Sync {
    fn dim(&self) -> usize;

    /// Predicted noise `eps(x, alpha_bar)`.
    fn epsilon(&self, x: &[f64], alpha_bar: f64) -> Vec<f64>;

    /// `(d eps / d x)^T cotangent`.
    fn epsilon_vjp(&self, x: &[f64], alpha_bar: f64, cotangent: &[f64]) -> Vec<f64>;

    /// `grad log p_t(x) = -eps / sqrt(1 - alpha_bar)`.
    fn score(&self, x: &[f64], alpha_bar: f64) -> Vec<f64> {
        let s = -1.0 / (1.0 - alpha_bar).sqrt();
        numerics::scale(&self.epsilon(x, alpha_bar), s)
    }

    /// Tweedie estimate `E[x0 | x] = (x - sqrt(1 - alpha_bar) eps) / sqrt(alpha_bar)`.
    fn tweedie(&self, x: &[f64], alpha_bar: f64) -> Vec<f64> {
        tweedie_from_eps(x, &self.epsilon(x, alpha_bar), alpha_bar)
    }

    /// `(d x0hat / d x)^T v`.
    fn tweedie_vjp(&self, x: &[f64], alpha_bar: f64, v: &[f64]) -> Vec<f64> {
        let jv = self.epsilon_vjp(x, alpha_bar, v);
        let (sa, sn) = (alpha_bar.sqrt(), (1.0 - alpha_bar).sqrt());
        v.iter().zip(&jv).map(|(vi, ji)| (vi - sn * ji) / sa).collect()
    }
}

pub fn tweedie_from_eps(x: &[f64], eps: &[f64], alpha_bar: f64) -> Vec<f64> {
    let (sa, sn) = (alpha_bar.sqrt(), (1.0 - alpha_bar).sqrt());
    x.iter().zip(eps).map(|(xi, ei)| (xi - sn * ei) / sa).collect()
}

fn check_level(sched: &NoiseSchedule, t: usize) -> Result<f64> {
    if t == 0 || t > sched.steps() {
        return Err(Error::InvalidParameter {
            name: "t",
            reason: format!("must lie in [1, {}], got {t}", sched.steps()),
        });
    }
    Ok(sched.alpha_bar(t))
}

pub fn epsilon(model: &dyn ScoreModel, sched: &NoiseSchedule, x: &[f64], t: usize) -> Result<Vec<f64>> {
    check_dim(model.dim(), x.len())?;
    Ok(model.epsilon(x, check_level(sched, t)?))
}

pub fn tweedie(model: &dyn ScoreModel, sched: &NoiseSchedule, x: &[f64], t: usize) -> Result<Vec<f64>> {
    check_dim(model.dim(), x.len())?;
    Ok(model.tweedie(x, check_level(sched, t)?))
}

pub fn epsilon_vjp(
    model: &dyn ScoreModel,
    sched: &NoiseSchedule,
    x: &[f64],
    t: usize,
    cotangent: &[f64],
) -> Result<Vec<f64>> {
    check_dim(model.dim(), x.len())?;
    check_dim(model.dim(), cotangent.len())?;
    Ok(model.epsilon_vjp(x, check_level(sched, t)?, cotangent))
}

/// Mixture of isotropic Gaussians. Under the VP forward process the marginal at
/// level `alpha_bar` stays a mixture with means `sqrt(alpha_bar) mu_k` and variances
/// `alpha_bar v_k + 1 - alpha_bar`, so score, Tweedie and Jacobian are exact.
#[derive(Debug, Clone, PartialEq)]
pub struct GmmPrior {
    weights: Vec<f64>,
    means: Vec<Vec<f64>>,
    variances: Vec<f64>,
    dim: usize,
}

struct MixtureTerms {
    resp: Vec<f64>,
    /// Per component `(m_k - x) / s_k`.
    grads: Vec<Vec<f64>>,
    /// Per component marginal variance `s_k`.
    var: Vec<f64>,
}

impl GmmPrior {
    pub fn new(weights: Vec<f64>, means: Vec<Vec<f64>>, variances: Vec<f64>) -> Result<Self> {
        let k = weights.len();
        if k == 0 || means.len() != k || variances.len() != k {
            return Err(Error::InvalidParameter {
                name: "gmm",
                reason: "weights, means and variances need one entry per component".into(),
            });
        }
        let dim = means[0].len();
        if dim == 0 {
            return Err(Error::EmptyDimension);
        }
        for m in &means {
            check_dim(dim, m.len())?;
        }
        if weights.iter().any(|w| !(*w > 0.0)) || (weights.iter().sum::<f64>() - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidParameter {
                name: "weights",
                reason: "must be positive and sum to 1".into(),
            });
        }
        if variances.iter().any(|v| !(*v > 0.0)) {
            return Err(Error::InvalidParameter {
                name: "variances",
                reason: "must be positive".into(),
            });
        }
        if means.iter().flatten().any(|m| !m.is_finite()) {
            return Err(Error::InvalidParameter {
                name: "means",
                reason: "must be finite".into(),
            });
        }
        Ok(Self {
            weights,
            means,
            variances,
            dim,
        })
    }

    pub fn standard_normal(dim: usize) -> Result<Self> {
        Self::new(vec![1.0], vec![vec![0.0; dim]], vec![1.0])
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn means(&self) -> &[Vec<f64>] {
        &self.means
    }

    pub fn variances(&self) -> &[f64] {
        &self.variances
    }

    pub fn components(&self) -> usize {
        self.weights.len()
    }

    pub fn sample(&self, rng: &mut Rng) -> Vec<f64> {
        let u = rng.uniform();
        let mut acc = 0.0;
        let mut k = self.weights.len() - 1;
        for (i, w) in self.weights.iter().enumerate() {
            acc += w;
            if u < acc {
                k = i;
                break;
            }
        }
        let sd = self.variances[k].sqrt();
        self.means[k].iter().map(|m| m + sd * rng.normal()).collect()
    }

    /// Posterior component probabilities under the noised marginal.
    pub fn responsibilities(&self, x: &[f64], alpha_bar: f64) -> Vec<f64> {
        self.terms(x, alpha_bar).resp
    }

    /// Checked form of [`GmmPrior::responsibilities`] at integer time `t` (0 allowed).
    pub fn responsibilities_at(&self, x: &[f64], sched: &NoiseSchedule, t: usize) -> Result<Vec<f64>> {
        check_dim(self.dim, x.len())?;
        if t > sched.steps() {
            return Err(Error::InvalidParameter {
                name: "t",
                reason: format!("exceeds schedule length {}", sched.steps()),
            });
        }
        Ok(self.responsibilities(x, sched.alpha_bar(t)))
    }

    fn terms(&self, x: &[f64], alpha_bar: f64) -> MixtureTerms {
        let sa = alpha_bar.sqrt();
        let d = self.dim as f64;
        let k = self.weights.len();
        let mut logp = Vec::with_capacity(k);
        let mut grads = Vec::with_capacity(k);
        let mut var = Vec::with_capacity(k);
        for c in 0..k {
            let s = alpha_bar * self.variances[c] + (1.0 - alpha_bar);
            let g: Vec<f64> = x
                .iter()
                .zip(&self.means[c])
                .map(|(xi, mi)| (sa * mi - xi) / s)
                .collect();
            let sq = numerics::norm_sq(&g) * s * s;
            logp.push(self.weights[c].ln() - 0.5 * d * s.ln() - 0.5 * sq / s);
            grads.push(g);
            var.push(s);
        }
        let mx = logp.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut resp: Vec<f64> = logp.iter().map(|l| (l - mx).exp()).collect();
        let z: f64 = resp.iter().sum();
        resp.iter_mut().for_each(|r| *r /= z);
        MixtureTerms { resp, grads, var }
    }

    fn score_from_terms(&self, terms: &MixtureTerms) -> Vec<f64> {
        let mut s = vec![0.0; self.dim];
        for (r, g) in terms.resp.iter().zip(&terms.grads) {
            for (si, gi) in s.iter_mut().zip(g) {
                *si += r * gi;
            }
        }
        s
    }

    /// Log density of the noised marginal (used by quadrature oracles).
    pub fn log_density(&self, x: &[f64], alpha_bar: f64) -> f64 {
        let sa = alpha_bar.sqrt();
        let d = self.dim as f64;
        let logs: Vec<f64> = (0..self.components())
            .map(|c| {
                let s = alpha_bar * self.variances[c] + (1.0 - alpha_bar);
                let sq: f64 = x
                    .iter()
                    .zip(&self.means[c])
                    .map(|(xi, mi)| (xi - sa * mi).powi(2))
                    .sum();
                self.weights[c].ln() - 0.5 * d * (2.0 * std::f64::consts::PI * s).ln() - 0.5 * sq / s
            })
            .collect();
        let mx = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        mx + logs.iter().map(|l| (l - mx).exp()).sum::<f64>().ln()
    }
}

impl ScoreModel for GmmPrior {
    fn dim(&self) -> usize {
        self.dim
    }

    fn score(&self, x: &[f64], alpha_bar: f64) -> Vec<f64> {
        self.score_from_terms(&self.terms(x, alpha_bar))
    }

    fn epsilon(&self, x: &[f64], alpha_bar: f64) -> Vec<f64> {
        let sn = (1.0 - alpha_bar).sqrt();
        self.score(x, alpha_bar).into_iter().map(|s| -sn * s).collect()
    }

    // The score Jacobian is the Hessian of log p_t:
    //   sum_k r_k (g_k g_k^T - I / s_k) - sbar sbar^T
    // which is symmetric, so the VJP is a plain matrix-vector product.
    fn epsilon_vjp(&self, x: &[f64], alpha_bar: f64, cotangent: &[f64]) -> Vec<f64> {
        let terms = self.terms(x, alpha_bar);
        let sbar = self.score_from_terms(&terms);
        let sbar_c = numerics::dot(&sbar, cotangent);
        let mut out: Vec<f64> = sbar.iter().map(|s| -s * sbar_c).collect();
        for ((r, g), s) in terms.resp.iter().zip(&terms.grads).zip(&terms.var) {
            let gc = numerics::dot(g, cotangent);
            for i in 0..self.dim {
                out[i] += r * (g[i] * gc - cotangent[i] / s);
            }
        }
        let sn = (1.0 - alpha_bar).sqrt();
        out.iter_mut().for_each(|o| *o *= -sn);
        out
    }
}

/// Three-layer tanh perceptron predicting noise from `x` concatenated with the
/// scalar embedding `sqrt(1 - alpha_bar)`.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpDenoiser {
    dim: usize,
    hidden: usize,
    params: Vec<f64>,
}

struct Layout {
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
    w3: usize,
    b3: usize,
    len: usize,
}

struct Activations {
    input: Vec<f64>,
    h1: Vec<f64>,
    h2: Vec<f64>,
    out: Vec<f64>,
}

const MLP_MAGIC: &[u8; 8] = b"DTMMLP01";

impl MlpDenoiser {
    pub fn init(dim: usize, hidden: usize, rng: &mut Rng) -> Result<Self> {
        if dim == 0 || hidden == 0 {
            return Err(Error::EmptyDimension);
        }
        let l = Self::layout_for(dim, hidden);
        let mut params = vec![0.0; l.len];
        let mut fill = |range: std::ops::Range<usize>, fan_in: usize| {
            let sd = (1.0 / fan_in as f64).sqrt();
            for p in &mut params[range] {
                *p = sd * rng.normal();
            }
        };
        fill(l.w1..l.b1, dim + 1);
        fill(l.w2..l.b2, hidden);
        fill(l.w3..l.b3, hidden);
        Ok(Self { dim, hidden, params })
    }

    fn layout_for(dim: usize, hidden: usize) -> Layout {
        let w1 = 0;
        let b1 = w1 + hidden * (dim + 1);
        let w2 = b1 + hidden;
        let b2 = w2 + hidden * hidden;
        let w3 = b2 + hidden;
        let b3 = w3 + dim * hidden;
        Layout {
            w1,
            b1,
            w2,
            b2,
            w3,
            b3,
            len: b3 + dim,
        }
    }

    fn layout(&self) -> Layout {
        Self::layout_for(self.dim, self.hidden)
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    fn forward(&self, x: &[f64], alpha_bar: f64) -> Activations {
        let l = self.layout();
        let p = &self.params;
        let (d, h) = (self.dim, self.hidden);
        let mut input = x.to_vec();
        input.push((1.0 - alpha_bar).sqrt());
        let h1: Vec<f64> = (0..h)
            .map(|j| {
                let row = &p[l.w1 + j * (d + 1)..l.w1 + (j + 1) * (d + 1)];
                (numerics::dot(row, &input) + p[l.b1 + j]).tanh()
            })
            .collect();
        let h2: Vec<f64> = (0..h)
            .map(|j| {
                let row = &p[l.w2 + j * h..l.w2 + (j + 1) * h];
                (numerics::dot(row, &h1) + p[l.b2 + j]).tanh()
            })
            .collect();
        let out = (0..d)
            .map(|j| {
                let row = &p[l.w3 + j * h..l.w3 + (j + 1) * h];
                numerics::dot(row, &h2) + p[l.b3 + j]
            })
            .collect();
        Activations { input, h1, h2, out }
    }

    /// Back-propagates `cot` (gradient w.r.t. the output). Accumulates parameter
    /// gradients into `param_grad` when given; returns the gradient w.r.t. `x`.
    fn backward(&self, act: &Activations, cot: &[f64], mut param_grad: Option<&mut [f64]>) -> Vec<f64> {
        let l = self.layout();
        let p = &self.params;
        let (d, h) = (self.dim, self.hidden);

        let mut dh2 = vec![0.0; h];
        for j in 0..d {
            let row = &p[l.w3 + j * h..l.w3 + (j + 1) * h];
            for (acc, w) in dh2.iter_mut().zip(row) {
                *acc += w * cot[j];
            }
        }
        let dz2: Vec<f64> = dh2.iter().zip(&act.h2).map(|(g, a)| g * (1.0 - a * a)).collect();
        let mut dh1 = vec![0.0; h];
        for j in 0..h {
            let row = &p[l.w2 + j * h..l.w2 + (j + 1) * h];
            for (acc, w) in dh1.iter_mut().zip(row) {
                *acc += w * dz2[j];
            }
        }
        let dz1: Vec<f64> = dh1.iter().zip(&act.h1).map(|(g, a)| g * (1.0 - a * a)).collect();
        let mut dinput = vec![0.0; d + 1];
        for j in 0..h {
            let row = &p[l.w1 + j * (d + 1)..l.w1 + (j + 1) * (d + 1)];
            for (acc, w) in dinput.iter_mut().zip(row) {
                *acc += w * dz1[j];
            }
        }

        if let Some(g) = param_grad.as_mut() {
            for j in 0..d {
                for i in 0..h {
                    g[l.w3 + j * h + i] += cot[j] * act.h2[i];
                }
                g[l.b3 + j] += cot[j];
            }
            for j in 0..h {
                for i in 0..h {
                    g[l.w2 + j * h + i] += dz2[j] * act.h1[i];
                }
                g[l.b2 + j] += dz2[j];
            }
            for j in 0..h {
                for i in 0..=d {
                    g[l.w1 + j * (d + 1) + i] += dz1[j] * act.input[i];
                }
                g[l.b1 + j] += dz1[j];
            }
        }

        dinput.truncate(d);
        dinput
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(24 + 8 * self.params.len());
        out.extend_from_slice(MLP_MAGIC);
        out.extend_from_slice(&(self.dim as u64).to_le_bytes());
        out.extend_from_slice(&(self.hidden as u64).to_le_bytes());
        for p in &self.params {
            out.extend_from_slice(&p.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 24 || &bytes[..8] != MLP_MAGIC {
            return Err(Error::Format("missing MLP magic header".into()));
        }
        let read_u64 = |at: usize| u64::from_le_bytes(bytes[at..at + 8].try_into().unwrap()) as usize;
        let (dim, hidden) = (read_u64(8), read_u64(16));
        if dim == 0 || hidden == 0 {
            return Err(Error::Format("zero dimension in header".into()));
        }
        let len = Self::layout_for(dim, hidden).len;
        if bytes.len() != 24 + 8 * len {
            return Err(Error::Format(format!(
                "expected {} bytes of weights, found {}",
                8 * len,
                bytes.len() - 24
            )));
        }
        let params: Vec<f64> = bytes[24..]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if !numerics::all_finite(&params) {
            return Err(Error::Format("non-finite weight".into()));
        }
        Ok(Self { dim, hidden, params })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::File::create(path)?.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}

impl ScoreModel for MlpDenoiser {
    fn dim(&self) -> usize {
        self.dim
    }

    fn epsilon(&self, x: &[f64], alpha_bar: f64) -> Vec<f64> {
        self.forward(x, alpha_bar).out
    }

    fn epsilon_vjp(&self, x: &[f64], alpha_bar: f64, cotangent: &[f64]) -> Vec<f64> {
        let act = self.forward(x, alpha_bar);
        self.backward(&act, cotangent, None)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub hidden: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Fresh (t, noise) draws per data point and epoch.
    pub draws_per_sample: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            hidden: 64,
            epochs: 100,
            batch_size: 64,
            lr: 1e-3,
            draws_per_sample: 1,
        }
    }
}

/// Denoising score matching with minibatch Adam. Returns the network and the
/// mean loss per epoch.
pub fn train_mlp_denoiser(
    dataset: &[Vec<f64>],
    sched: &NoiseSchedule,
    cfg: &TrainConfig,
    rng: &mut Rng,
) -> Result<(MlpDenoiser, Vec<f64>)> {
    let first = dataset.first().ok_or(Error::InvalidParameter {
        name: "dataset",
        reason: "must not be empty".into(),
    })?;
    let dim = first.len();
    for x in dataset {
        check_dim(dim, x.len())?;
    }
    let mut net = MlpDenoiser::init(dim, cfg.hidden, rng)?;
    let mut adam = Adam::new(net.params.len());
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let draws = cfg.draws_per_sample.max(1);
    let batch = cfg.batch_size.max(1);

    for epoch in 0..cfg.epochs {
        // Fisher-Yates
        for i in (1..order.len()).rev() {
            let j = rng.below(i + 1);
            order.swap(i, j);
        }
        let mut epoch_loss = 0.0;
        let mut count = 0usize;
        let samples: Vec<usize> = (0..draws).flat_map(|_| order.iter().copied()).collect();
        for chunk in samples.chunks(batch) {
            let mut grad = vec![0.0; net.params.len()];
            let mut batch_loss = 0.0;
            for &idx in chunk {
                let x0 = &dataset[idx];
                let t = 1 + rng.below(sched.steps());
                let ab = sched.alpha_bar(t);
                let noise = rng.gaussian(dim)?;
                let xt: Vec<f64> = x0
                    .iter()
                    .zip(&noise)
                    .map(|(x, e)| ab.sqrt() * x + (1.0 - ab).sqrt() * e)
                    .collect();
                let act = net.forward(&xt, ab);
                let diff = numerics::sub(&act.out, &noise);
                batch_loss += numerics::norm_sq(&diff) / dim as f64;
                let cot = numerics::scale(&diff, 2.0 / (dim * chunk.len()) as f64);
                net.backward(&act, &cot, Some(&mut grad));
            }
            if !batch_loss.is_finite() || !numerics::all_finite(&grad) {
                return Err(Error::TrainingDiverged { epoch });
            }
            adam.step(&mut net.params, &grad, cfg.lr)?;
            epoch_loss += batch_loss;
            count += chunk.len();
        }
        let mean = epoch_loss / count as f64;
        if !mean.is_finite() {
            return Err(Error::TrainingDiverged { epoch });
        }
        history.push(mean);
    }
    Ok((net, history))
}
