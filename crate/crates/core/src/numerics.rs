//! Dense vector helpers, the seeded random stream, the differentiable-evaluation
//! contract and the Adam optimizer shared by every inner loop.
//!
//! State vectors are plain `Vec<f64>` / `&[f64]`. Everything runs in 64-bit floats.

use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;

use crate::error::{check_dim, Error, Result};

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm_sq(a: &[f64]) -> f64 {
    dot(a, a)
}

pub fn norm(a: &[f64]) -> f64 {
    norm_sq(a).sqrt()
}

pub fn sub(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

pub fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

pub fn scale(a: &[f64], s: f64) -> Vec<f64> {
    a.iter().map(|x| x * s).collect()
}

/// `a + s * b`
pub fn axpy(a: &[f64], s: f64, b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + s * y).collect()
}

pub fn all_finite(a: &[f64]) -> bool {
    a.iter().all(|x| x.is_finite())
}

/// Deterministic random stream. Identical seed and call sequence give an
/// identical output stream on every platform.
#[derive(Debug, Clone)]
pub struct Rng {
    seed: u64,
    inner: ChaCha12Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            inner: ChaCha12Rng::seed_from_u64(seed),
        }
    }

    /// Independent stream `index` under the same seed; used for per-trajectory streams.
    pub fn stream(seed: u64, index: u64) -> Self {
        let mut inner = ChaCha12Rng::seed_from_u64(seed);
        inner.set_stream(index);
        Self { seed, inner }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.random()
    }

    /// i.i.d. standard normal vector.
    pub fn gaussian(&mut self, dim: usize) -> Result<Vec<f64>> {
        if dim == 0 {
            return Err(Error::EmptyDimension);
        }
        Ok((0..dim).map(|_| self.normal()).collect())
    }
}

/// Free-function form of [`Rng::gaussian`].
pub fn gaussian_sample(rng: &mut Rng, dim: usize) -> Result<Vec<f64>> {
    rng.gaussian(dim)
}

/// A map with a hand-derived vector-Jacobian product.
pub trait Differentiable {
    fn input_dim(&self) -> usize;
    fn output_dim(&self) -> usize;
    fn eval(&self, x: &[f64]) -> Vec<f64>;
    /// `J(x)^T cotangent`
    fn vjp(&self, x: &[f64], cotangent: &[f64]) -> Vec<f64>;
}

/// Adapter turning a pair of closures into a [`Differentiable`].
pub struct FnMap<F, G> {
    pub input_dim: usize,
    pub output_dim: usize,
    pub f: F,
    pub vjp: G,
}

impl<F, G> Differentiable for FnMap<F, G>
where
    F: Fn(&[f64]) -> Vec<f64>,
    G: Fn(&[f64], &[f64]) -> Vec<f64>,
{
    fn input_dim(&self) -> usize {
        self.input_dim
    }
    fn output_dim(&self) -> usize {
        self.output_dim
    }
    fn eval(&self, x: &[f64]) -> Vec<f64> {
        (self.f)(x)
    }
    fn vjp(&self, x: &[f64], cotangent: &[f64]) -> Vec<f64> {
        (self.vjp)(x, cotangent)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamParams {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam moments with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub params: AdamParams,
    m: Vec<f64>,
    v: Vec<f64>,
    steps: i32,
}

impl Adam {
    pub fn new(dim: usize) -> Self {
        Self::with_params(dim, AdamParams::default())
    }

    pub fn with_params(dim: usize, params: AdamParams) -> Self {
        Self {
            params,
            m: vec![0.0; dim],
            v: vec![0.0; dim],
            steps: 0,
        }
    }

    pub fn steps_taken(&self) -> usize {
        self.steps as usize
    }

    pub fn step(&mut self, param: &mut [f64], grad: &[f64], lr: f64) -> Result<()> {
        check_dim(param.len(), grad.len())?;
        check_dim(self.m.len(), param.len())?;
        if !(lr > 0.0) {
            return Err(Error::InvalidParameter {
                name: "lr",
                reason: format!("must be positive, got {lr}"),
            });
        }
        let AdamParams { beta1, beta2, eps } = self.params;
        self.steps += 1;
        let bc1 = 1.0 - beta1.powi(self.steps);
        let bc2 = 1.0 - beta2.powi(self.steps);
        for i in 0..param.len() {
            let g = grad[i];
            self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * g;
            self.v[i] = beta2 * self.v[i] + (1.0 - beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            param[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
        Ok(())
    }
}
