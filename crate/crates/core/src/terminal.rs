//! Forward operators and terminal costs with hand-derived gradients.
//!
//! Signals are 1-D; length-64 signals double as 8x8 images. Convolutions are circular
//! with the kernel centered on tap `(k - 1) / 2`.

use std::sync::Arc;

use crate::error::{check_dim, Error, Result};
use crate::numerics::{self, Rng};

pub trait ForwardOperator: Send + Sync {
    fn input_dim(&self) -> usize;
    fn output_dim(&self) -> usize;
    fn apply(&self, x: &[f64]) -> Vec<f64>;
    /// `(dA/dx at x)^T cotangent`. Linear operators ignore `x`.
    fn vjp(&self, x: &[f64], cotangent: &[f64]) -> Vec<f64>;
    fn is_linear(&self) -> bool;

    /// Crude inverse used to warm-start truncated sampling. Defaults to the adjoint
    /// at the origin.
    fn back_project(&self, y: &[f64]) -> Vec<f64> {
        self.vjp(&vec![0.0; self.input_dim()], y)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Identity {
    pub dim: usize,
}

impl ForwardOperator for Identity {
    fn input_dim(&self) -> usize {
        self.dim
    }
    fn output_dim(&self) -> usize {
        self.dim
    }
    fn apply(&self, x: &[f64]) -> Vec<f64> {
        x.to_vec()
    }
    fn vjp(&self, _x: &[f64], cotangent: &[f64]) -> Vec<f64> {
        cotangent.to_vec()
    }
    fn is_linear(&self) -> bool {
        true
    }
}

/// Keeps observed entries and zeroes the rest; the output keeps dimension `d`.
#[derive(Debug, Clone, PartialEq)]
pub struct Mask {
    mask: Vec<f64>,
}

impl Mask {
    pub fn new(mask: Vec<f64>) -> Result<Self> {
        if mask.is_empty() {
            return Err(Error::EmptyDimension);
        }
        if let Some(i) = mask.iter().position(|m| *m != 0.0 && *m != 1.0) {
            return Err(Error::InvalidParameter {
                name: "mask",
                reason: format!("entry {i} is {}, expected 0 or 1", mask[i]),
            });
        }
        Ok(Self { mask })
    }

    /// Each entry observed independently with probability `1 - drop`.
    pub fn random(dim: usize, drop: f64, rng: &mut Rng) -> Result<Self> {
        if !(0.0..=1.0).contains(&drop) {
            return Err(Error::InvalidParameter {
                name: "drop",
                reason: format!("must lie in [0, 1], got {drop}"),
            });
        }
        Self::new((0..dim).map(|_| if rng.uniform() < drop { 0.0 } else { 1.0 }).collect())
    }

    pub fn entries(&self) -> &[f64] {
        &self.mask
    }
}

impl ForwardOperator for Mask {
    fn input_dim(&self) -> usize {
        self.mask.len()
    }
    fn output_dim(&self) -> usize {
        self.mask.len()
    }
    fn apply(&self, x: &[f64]) -> Vec<f64> {
        x.iter().zip(&self.mask).map(|(a, m)| a * m).collect()
    }
    fn vjp(&self, _x: &[f64], cotangent: &[f64]) -> Vec<f64> {
        self.apply(cotangent)
    }
    fn is_linear(&self) -> bool {
        true
    }
}

/// Block averaging by `factor`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Downsample {
    dim: usize,
    factor: usize,
}

impl Downsample {
    pub fn new(dim: usize, factor: usize) -> Result<Self> {
        if factor == 0 || dim == 0 || !dim.is_multiple_of(factor) {
            return Err(Error::InvalidParameter {
                name: "factor",
                reason: format!("dimension {dim} is not divisible by {factor}"),
            });
        }
        Ok(Self { dim, factor })
    }

    pub fn factor(&self) -> usize {
        self.factor
    }
}

impl ForwardOperator for Downsample {
    fn input_dim(&self) -> usize {
        self.dim
    }
    fn output_dim(&self) -> usize {
        self.dim / self.factor
    }
    fn apply(&self, x: &[f64]) -> Vec<f64> {
        let f = self.factor as f64;
        x.chunks(self.factor).map(|c| c.iter().sum::<f64>() / f).collect()
    }
    fn vjp(&self, _x: &[f64], cotangent: &[f64]) -> Vec<f64> {
        let f = self.factor as f64;
        cotangent
            .iter()
            .flat_map(|c| std::iter::repeat_n(c / f, self.factor))
            .collect()
    }
    fn is_linear(&self) -> bool {
        true
    }
    /// Nearest-neighbour upsampling.
    fn back_project(&self, y: &[f64]) -> Vec<f64> {
        y.iter().flat_map(|v| std::iter::repeat_n(*v, self.factor)).collect()
    }
}

/// Odd-length circular convolution kernel.
#[derive(Debug, Clone, PartialEq)]
pub struct BlurKernel {
    taps: Vec<f64>,
}

impl BlurKernel {
    pub fn new(taps: Vec<f64>) -> Result<Self> {
        if taps.len().is_multiple_of(2) {
            return Err(Error::InvalidParameter {
                name: "kernel",
                reason: format!("length must be odd, got {}", taps.len()),
            });
        }
        if !numerics::all_finite(&taps) {
            return Err(Error::InvalidParameter {
                name: "kernel",
                reason: "taps must be finite".into(),
            });
        }
        Ok(Self { taps })
    }

    /// Sampled Gaussian, `std` in tap units, normalized to sum 1.
    pub fn gaussian(len: usize, std: f64) -> Result<Self> {
        if !(std > 0.0) {
            return Err(Error::InvalidParameter {
                name: "std",
                reason: format!("must be positive, got {std}"),
            });
        }
        let c = (len as f64 - 1.0) / 2.0;
        let taps: Vec<f64> = (0..len)
            .map(|i| (-(i as f64 - c).powi(2) / (2.0 * std * std)).exp())
            .collect();
        let s: f64 = taps.iter().sum();
        Self::new(taps.into_iter().map(|v| v / s).collect())
    }

    pub fn uniform(len: usize) -> Result<Self> {
        Self::new(vec![1.0 / len as f64; len])
    }

    pub fn taps(&self) -> &[f64] {
        &self.taps
    }

    pub fn len(&self) -> usize {
        self.taps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.taps.is_empty()
    }

    /// Clamps taps at zero and rescales to sum one. A kernel with no positive
    /// mass is reset to uniform.
    pub fn project(&mut self) {
        for t in &mut self.taps {
            *t = t.max(0.0);
        }
        let s: f64 = self.taps.iter().sum();
        let n = self.taps.len() as f64;
        for t in &mut self.taps {
            *t = if s > 0.0 { *t / s } else { 1.0 / n };
        }
    }

    pub fn taps_mut(&mut self) -> &mut [f64] {
        &mut self.taps
    }
}

fn conv(taps: &[f64], x: &[f64]) -> Vec<f64> {
    let d = x.len();
    let c = taps.len() / 2;
    (0..d)
        .map(|i| {
            taps.iter()
                .enumerate()
                .map(|(j, k)| k * x[(i + d * 2 + c - j) % d])
                .sum()
        })
        .collect()
}

/// Adjoint of [`conv`] in `x`: correlation with the kernel.
fn conv_adjoint(taps: &[f64], cot: &[f64]) -> Vec<f64> {
    let d = cot.len();
    let c = taps.len() / 2;
    (0..d)
        .map(|m| {
            taps.iter()
                .enumerate()
                .map(|(j, k)| k * cot[(m + j + d * 2 - c) % d])
                .sum()
        })
        .collect()
}

/// `d <cot, k * x> / d k`.
fn conv_kernel_grad(len: usize, x: &[f64], cot: &[f64]) -> Vec<f64> {
    let d = x.len();
    let c = len / 2;
    (0..len)
        .map(|j| (0..d).map(|i| cot[i] * x[(i + d * 2 + c - j) % d]).sum())
        .collect()
}

fn check_kernel(kernel: &BlurKernel, dim: usize) -> Result<()> {
    if kernel.len() > dim {
        return Err(Error::InvalidParameter {
            name: "kernel",
            reason: format!("length {} exceeds signal length {dim}", kernel.len()),
        });
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct CircularConv {
    kernel: BlurKernel,
    dim: usize,
}

impl CircularConv {
    pub fn new(kernel: BlurKernel, dim: usize) -> Result<Self> {
        check_kernel(&kernel, dim)?;
        Ok(Self { kernel, dim })
    }

    pub fn kernel(&self) -> &BlurKernel {
        &self.kernel
    }
}

impl ForwardOperator for CircularConv {
    fn input_dim(&self) -> usize {
        self.dim
    }
    fn output_dim(&self) -> usize {
        self.dim
    }
    fn apply(&self, x: &[f64]) -> Vec<f64> {
        conv(self.kernel.taps(), x)
    }
    fn vjp(&self, _x: &[f64], cotangent: &[f64]) -> Vec<f64> {
        conv_adjoint(self.kernel.taps(), cotangent)
    }
    fn is_linear(&self) -> bool {
        true
    }
    fn back_project(&self, y: &[f64]) -> Vec<f64> {
        y.to_vec()
    }
}

/// Synthetic nonlinear blur `k * (tanh(a x) / a)`.
#[derive(Debug, Clone, PartialEq)]
pub struct NonlinearBlur {
    kernel: BlurKernel,
    saturation: f64,
    dim: usize,
}

impl NonlinearBlur {
    pub fn new(kernel: BlurKernel, saturation: f64, dim: usize) -> Result<Self> {
        check_kernel(&kernel, dim)?;
        if !(saturation > 0.0) {
            return Err(Error::InvalidParameter {
                name: "saturation",
                reason: format!("must be positive, got {saturation}"),
            });
        }
        Ok(Self {
            kernel,
            saturation,
            dim,
        })
    }
}

impl ForwardOperator for NonlinearBlur {
    fn input_dim(&self) -> usize {
        self.dim
    }
    fn output_dim(&self) -> usize {
        self.dim
    }
    fn apply(&self, x: &[f64]) -> Vec<f64> {
        let a = self.saturation;
        let h: Vec<f64> = x.iter().map(|v| (a * v).tanh() / a).collect();
        conv(self.kernel.taps(), &h)
    }
    fn vjp(&self, x: &[f64], cotangent: &[f64]) -> Vec<f64> {
        let a = self.saturation;
        conv_adjoint(self.kernel.taps(), cotangent)
            .into_iter()
            .zip(x)
            .map(|(g, v)| g * (1.0 - (a * v).tanh().powi(2)))
            .collect()
    }
    fn is_linear(&self) -> bool {
        false
    }
    fn back_project(&self, y: &[f64]) -> Vec<f64> {
        y.to_vec()
    }
}

pub fn apply_mask(mask: &[f64], x: &[f64]) -> Result<Vec<f64>> {
    check_dim(mask.len(), x.len())?;
    Ok(Mask::new(mask.to_vec())?.apply(x))
}

pub fn apply_downsample(factor: usize, x: &[f64]) -> Result<Vec<f64>> {
    Ok(Downsample::new(x.len(), factor)?.apply(x))
}

pub fn apply_circular_conv(kernel: &BlurKernel, x: &[f64]) -> Result<Vec<f64>> {
    check_kernel(kernel, x.len())?;
    Ok(conv(kernel.taps(), x))
}

pub fn apply_nonlinear_blur(kernel: &BlurKernel, saturation: f64, x: &[f64]) -> Result<Vec<f64>> {
    Ok(NonlinearBlur::new(kernel.clone(), saturation, x.len())?.apply(x))
}

/// Observation model `y = A(x0) + sigma_y z`.
#[derive(Clone)]
pub struct ProblemSpec {
    pub operator: Arc<dyn ForwardOperator>,
    pub y: Vec<f64>,
    pub sigma_y: f64,
}

impl std::fmt::Debug for ProblemSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ProblemSpec")
            .field("input_dim", &self.operator.input_dim())
            .field("y", &self.y)
            .field("sigma_y", &self.sigma_y)
            .finish()
    }
}

impl ProblemSpec {
    pub fn new(operator: Arc<dyn ForwardOperator>, y: Vec<f64>, sigma_y: f64) -> Result<Self> {
        check_dim(operator.output_dim(), y.len())?;
        if !(sigma_y >= 0.0) {
            return Err(Error::InvalidParameter {
                name: "sigma_y",
                reason: format!("must be nonnegative, got {sigma_y}"),
            });
        }
        Ok(Self { operator, y, sigma_y })
    }

    /// Synthesizes a noisy observation of `x0`.
    pub fn observe(operator: Arc<dyn ForwardOperator>, x0: &[f64], sigma_y: f64, rng: &mut Rng) -> Result<Self> {
        check_dim(operator.input_dim(), x0.len())?;
        let clean = operator.apply(x0);
        let y = clean.iter().map(|v| v + sigma_y * rng.normal()).collect();
        Self::new(operator, y, sigma_y)
    }

    pub fn dim(&self) -> usize {
        self.operator.input_dim()
    }

    /// `y - A(x)`
    pub fn residual(&self, x: &[f64]) -> Vec<f64> {
        numerics::sub(&self.y, &self.operator.apply(x))
    }
}

/// Differentiable scalar constraint on the clean-sample estimate.
pub trait TerminalCost: Send + Sync {
    fn dim(&self) -> usize;
    fn value(&self, x: &[f64]) -> f64;
    fn grad(&self, x: &[f64]) -> Vec<f64>;

    /// Initial clean estimate for truncated sampling, when the cost offers one.
    fn warm_start(&self) -> Option<Vec<f64>> {
        None
    }
}

/// `|y - A(x)|^2`
#[derive(Debug, Clone)]
pub struct ResidualCost {
    pub spec: ProblemSpec,
}

impl ResidualCost {
    pub fn new(spec: ProblemSpec) -> Self {
        Self { spec }
    }
}

impl TerminalCost for ResidualCost {
    fn dim(&self) -> usize {
        self.spec.dim()
    }
    fn value(&self, x: &[f64]) -> f64 {
        numerics::norm_sq(&self.spec.residual(x))
    }
    fn grad(&self, x: &[f64]) -> Vec<f64> {
        let r = self.spec.residual(x);
        numerics::scale(&self.spec.operator.vjp(x, &r), -2.0)
    }
    fn warm_start(&self) -> Option<Vec<f64>> {
        Some(self.spec.operator.back_project(&self.spec.y))
    }
}

pub fn residual_cost(spec: &ProblemSpec, x0hat: &[f64]) -> Result<f64> {
    check_dim(spec.dim(), x0hat.len())?;
    Ok(ResidualCost::new(spec.clone()).value(x0hat))
}

/// Checked gradient of any terminal cost.
pub fn cost_vjp(cost: &dyn TerminalCost, x0hat: &[f64]) -> Result<Vec<f64>> {
    check_dim(cost.dim(), x0hat.len())?;
    Ok(cost.grad(x0hat))
}

/// Seeded random linear map followed by `tanh`, read as an `m x p` feature matrix
/// (row-major: `m` channels, `p` positions).
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureExtractor {
    weights: Vec<f64>,
    dim: usize,
    m: usize,
    p: usize,
}

impl FeatureExtractor {
    pub fn random(dim: usize, m: usize, p: usize, rng: &mut Rng) -> Result<Self> {
        if dim == 0 || m == 0 || p == 0 {
            return Err(Error::EmptyDimension);
        }
        let s = 1.0 / (dim as f64).sqrt();
        let weights = (0..m * p * dim).map(|_| s * rng.normal()).collect();
        Ok(Self { weights, dim, m, p })
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.m, self.p)
    }

    fn pre(&self, x: &[f64]) -> Vec<f64> {
        self.weights.chunks(self.dim).map(|row| numerics::dot(row, x)).collect()
    }

    pub fn features(&self, x: &[f64]) -> Vec<f64> {
        self.pre(x).into_iter().map(f64::tanh).collect()
    }

    /// `(dF/dx)^T cot` for a flattened feature cotangent.
    pub fn vjp(&self, x: &[f64], cot: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        for (row, (z, c)) in self.weights.chunks(self.dim).zip(self.pre(x).iter().zip(cot)) {
            let g = c * (1.0 - z.tanh().powi(2));
            for (o, w) in out.iter_mut().zip(row) {
                *o += g * w;
            }
        }
        out
    }
}

/// `G(F) = F F^T / p` for row-major `F` of shape `m x p`.
pub fn gram(features: &[f64], m: usize, p: usize) -> Vec<f64> {
    let mut g = vec![0.0; m * m];
    for a in 0..m {
        for b in 0..m {
            g[a * m + b] = numerics::dot(&features[a * p..(a + 1) * p], &features[b * p..(b + 1) * p]) / p as f64;
        }
    }
    g
}

/// `|G(ref) - G(F(x))|_F^2`
#[derive(Debug, Clone)]
pub struct GramStyleCost {
    extractor: FeatureExtractor,
    ref_gram: Vec<f64>,
}

impl GramStyleCost {
    pub fn new(extractor: FeatureExtractor, ref_features: &[f64]) -> Result<Self> {
        let (m, p) = extractor.shape();
        check_dim(m * p, ref_features.len())?;
        Ok(Self {
            ref_gram: gram(ref_features, m, p),
            extractor,
        })
    }

    /// Style taken from the features of a reference signal.
    pub fn from_signal(extractor: FeatureExtractor, reference: &[f64]) -> Result<Self> {
        check_dim(extractor.dim, reference.len())?;
        let f = extractor.features(reference);
        Self::new(extractor, &f)
    }
}

impl TerminalCost for GramStyleCost {
    fn dim(&self) -> usize {
        self.extractor.dim
    }
    fn value(&self, x: &[f64]) -> f64 {
        let (m, p) = self.extractor.shape();
        let g = gram(&self.extractor.features(x), m, p);
        numerics::norm_sq(&numerics::sub(&g, &self.ref_gram))
    }
    fn grad(&self, x: &[f64]) -> Vec<f64> {
        let (m, p) = self.extractor.shape();
        let f = self.extractor.features(x);
        let diff = numerics::sub(&gram(&f, m, p), &self.ref_gram);
        // dC/dF = (4/p) (G - G_ref) F, using symmetry of both Grams
        let mut df = vec![0.0; m * p];
        for a in 0..m {
            for b in 0..m {
                let w = 4.0 / p as f64 * diff[a * m + b];
                for j in 0..p {
                    df[a * p + j] += w * f[b * p + j];
                }
            }
        }
        self.extractor.vjp(x, &df)
    }
}

pub fn gram_style_cost(ref_features: &[f64], extractor: &FeatureExtractor, x0hat: &[f64]) -> Result<f64> {
    check_dim(extractor.dim, x0hat.len())?;
    Ok(GramStyleCost::new(extractor.clone(), ref_features)?.value(x0hat))
}

/// Residual cost under circular convolution with a trainable kernel.
#[derive(Debug, Clone)]
pub struct BlindDeconvolution {
    pub y: Vec<f64>,
    pub kernel: BlurKernel,
}

impl BlindDeconvolution {
    pub fn new(y: Vec<f64>, kernel: BlurKernel) -> Result<Self> {
        check_kernel(&kernel, y.len())?;
        Ok(Self { y, kernel })
    }

    fn residual(&self, x: &[f64]) -> Vec<f64> {
        numerics::sub(&self.y, &conv(self.kernel.taps(), x))
    }

    /// `d Phi / d k`
    pub fn kernel_grad(&self, x: &[f64]) -> Vec<f64> {
        let r = self.residual(x);
        numerics::scale(&conv_kernel_grad(self.kernel.len(), x, &r), -2.0)
    }

    /// Cost as a function of the kernel taps for fixed `x`.
    pub fn value_with_kernel(&self, taps: &[f64], x: &[f64]) -> f64 {
        numerics::norm_sq(&numerics::sub(&self.y, &conv(taps, x)))
    }
}

impl TerminalCost for BlindDeconvolution {
    fn dim(&self) -> usize {
        self.y.len()
    }
    fn value(&self, x: &[f64]) -> f64 {
        numerics::norm_sq(&self.residual(x))
    }
    fn grad(&self, x: &[f64]) -> Vec<f64> {
        numerics::scale(&conv_adjoint(self.kernel.taps(), &self.residual(x)), -2.0)
    }
    fn warm_start(&self) -> Option<Vec<f64>> {
        Some(self.y.clone())
    }
}

pub fn blind_cost_kernel_grad(cost: &BlindDeconvolution, x0hat: &[f64]) -> Result<Vec<f64>> {
    check_dim(cost.dim(), x0hat.len())?;
    Ok(cost.kernel_grad(x0hat))
}
