//! Variance-preserving noise schedules and the per-step DDIM / trajectory-matching
//! coefficients derived from them.
//!
//! `alpha_bar[t]` is the cumulative signal retention at step `t`, so the perturbation
//! kernel is `N(sqrt(alpha_bar[t]) x0, (1 - alpha_bar[t]) I)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    #[serde(alias = "linear-beta", alias = "linear_beta")]
    Linear,
    Cosine,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    /// Builds `T + 1` cumulative products `alpha_bar[0..=T]`.
    ///
    /// The betas are indexed from 0 so that `alpha_bar[0] = 1 - beta_min` rather than
    /// exactly one; Tweedie's division stays well posed down to `t = 0`.
    pub fn build(kind: ScheduleKind, steps: usize, beta_min: f64, beta_max: f64) -> Result<Self> {
        if steps < 2 {
            return Err(Error::Schedule(format!("need at least 2 steps, got {steps}")));
        }
        let betas: Vec<f64> = match kind {
            ScheduleKind::Linear => {
                if !(beta_min > 0.0 && beta_min < beta_max && beta_max < 1.0) {
                    return Err(Error::Schedule(format!(
                        "need 0 < beta_min < beta_max < 1, got [{beta_min}, {beta_max}]"
                    )));
                }
                (0..=steps)
                    .map(|s| beta_min + (beta_max - beta_min) * s as f64 / steps as f64)
                    .collect()
            }
            ScheduleKind::Cosine => {
                let offset = 0.008;
                let f = |s: f64| ((s + offset) / (1.0 + offset) * std::f64::consts::FRAC_PI_2).cos().powi(2);
                let n = (steps + 1) as f64;
                (0..=steps)
                    .map(|s| (1.0 - f((s + 1) as f64 / n) / f(s as f64 / n)).min(0.999))
                    .collect()
            }
        };
        let mut alpha_bar = Vec::with_capacity(steps + 1);
        let mut acc = 1.0;
        for b in betas {
            acc *= 1.0 - b;
            alpha_bar.push(acc);
        }
        Self::from_alpha_bar(alpha_bar)
    }

    /// Wraps an explicit `alpha_bar` sequence after checking the schedule invariants.
    pub fn from_alpha_bar(alpha_bar: Vec<f64>) -> Result<Self> {
        if alpha_bar.len() < 3 {
            return Err(Error::Schedule("need at least 3 alpha_bar values".into()));
        }
        if alpha_bar.iter().any(|a| !(*a > 0.0 && *a <= 1.0)) {
            return Err(Error::Schedule("alpha_bar values must lie in (0, 1]".into()));
        }
        if let Some(t) = alpha_bar.windows(2).position(|w| w[1] >= w[0]) {
            return Err(Error::Schedule(format!(
                "alpha_bar not strictly decreasing at t={}",
                t + 1
            )));
        }
        let first = alpha_bar[0];
        if !(first > 0.999) {
            return Err(Error::Schedule(format!("alpha_bar[0] = {first} must exceed 0.999")));
        }
        let last = *alpha_bar.last().unwrap();
        if !(last < 0.01) {
            return Err(Error::Schedule(format!("alpha_bar[T] = {last} must be below 0.01")));
        }
        Ok(Self { alpha_bar })
    }

    /// Number of diffusion steps `T`.
    pub fn steps(&self) -> usize {
        self.alpha_bar.len() - 1
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    pub fn step_coefficients(&self, t: usize, t_prev: usize, eta: f64) -> Result<StepCoefficients> {
        if t_prev >= t || t > self.steps() {
            return Err(Error::InvalidParameter {
                name: "t",
                reason: format!("need T >= t > t_prev >= 0, got t={t}, t_prev={t_prev}"),
            });
        }
        StepCoefficients::new(self.alpha_bar[t], self.alpha_bar[t_prev], eta).map_err(|e| match e {
            Error::Domain { value, .. } => Error::Domain { t, value },
            Error::ScheduleOrder {
                alpha_bar,
                alpha_bar_prev,
                ..
            } => Error::ScheduleOrder {
                t,
                t_prev,
                alpha_bar,
                alpha_bar_prev,
            },
            other => other,
        })
    }

    pub fn ddim_sigma(&self, t: usize, t_prev: usize, eta: f64) -> Result<f64> {
        Ok(self.step_coefficients(t, t_prev, eta)?.sigma)
    }

    /// `(kappa, tau)` weights of the trajectory-matching objective.
    pub fn ndtm_coefficients(&self, t: usize, t_prev: usize, eta: f64, gamma: f64) -> Result<(f64, f64)> {
        let c = self.step_coefficients(t, t_prev, eta)?;
        Ok((c.kappa(gamma), c.tau()))
    }

    /// `n_steps` timesteps evenly spaced in `1..=start`, first equal to `start`.
    pub fn plan_steps(&self, n_steps: usize, start: usize) -> Result<StepPlan> {
        if n_steps == 0 {
            return Err(Error::InvalidPlan("n_steps must be at least 1".into()));
        }
        if start > self.steps() {
            return Err(Error::InvalidPlan(format!(
                "start {start} exceeds schedule length {}",
                self.steps()
            )));
        }
        if n_steps > start {
            return Err(Error::InvalidPlan(format!(
                "n_steps {n_steps} exceeds start {start}"
            )));
        }
        let timesteps = (0..n_steps).map(|i| start - i * start / n_steps).collect();
        Ok(StepPlan { timesteps, start })
    }
}

/// Coefficients of one DDIM transition `t -> t_prev`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepCoefficients {
    pub alpha_bar: f64,
    pub alpha_bar_prev: f64,
    /// `eta * sigma_max`
    pub sigma: f64,
    /// `sqrt(1 - alpha_bar_prev - sigma^2)`, the weight of the predicted noise direction.
    pub direction: f64,
}

impl StepCoefficients {
    pub fn new(alpha_bar: f64, alpha_bar_prev: f64, eta: f64) -> Result<Self> {
        if alpha_bar >= alpha_bar_prev {
            return Err(Error::ScheduleOrder {
                t: 0,
                t_prev: 0,
                alpha_bar,
                alpha_bar_prev,
            });
        }
        if !(0.0..=1.0).contains(&eta) {
            return Err(Error::InvalidParameter {
                name: "eta",
                reason: format!("must lie in [0, 1], got {eta}"),
            });
        }
        let sigma = eta * Self::sigma_max(alpha_bar, alpha_bar_prev);
        let rem = 1.0 - alpha_bar_prev - sigma * sigma;
        if rem < 0.0 {
            return Err(Error::Domain { t: 0, value: rem });
        }
        Ok(Self {
            alpha_bar,
            alpha_bar_prev,
            sigma,
            direction: rem.sqrt(),
        })
    }

    /// Ancestral (eta = 1) standard deviation.
    pub fn sigma_max(alpha_bar: f64, alpha_bar_prev: f64) -> f64 {
        ((1.0 - alpha_bar_prev) / (1.0 - alpha_bar) * (1.0 - alpha_bar / alpha_bar_prev)).sqrt()
    }

    /// Coefficient of the control in the guided posterior mean.
    pub fn kappa(&self, gamma: f64) -> f64 {
        gamma * self.state_scale()
    }

    /// Coefficient of the noise prediction in the posterior mean.
    pub fn tau(&self) -> f64 {
        self.direction - (self.alpha_bar_prev * (1.0 - self.alpha_bar)).sqrt() / self.alpha_bar.sqrt()
    }

    /// Coefficient of the state in the posterior mean.
    pub fn state_scale(&self) -> f64 {
        self.alpha_bar_prev.sqrt() / self.alpha_bar.sqrt()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StepPlan {
    pub timesteps: Vec<usize>,
    pub start: usize,
}

impl StepPlan {
    /// `(t, t_prev)` pairs; the final transition lands on `t_prev = 0`.
    pub fn transitions(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.timesteps
            .iter()
            .enumerate()
            .map(move |(i, &t)| (t, self.timesteps.get(i + 1).copied().unwrap_or(0)))
    }

    pub fn len(&self) -> usize {
        self.timesteps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timesteps.is_empty()
    }
}
