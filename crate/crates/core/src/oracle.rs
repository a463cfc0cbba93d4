//! Ground-truth machinery: conjugate Gaussian posteriors, closed-form conditional
//! scores, finite differences, Rao-Blackwellized chain KL and the squared-norm
//! bound check.

use nalgebra::{Cholesky, DMatrix, DVector};

use crate::error::{check_dim, Error, Result};
use crate::numerics::{self, Rng};
use crate::priors::GmmPrior;

/// Central-difference gradient of a scalar function.
pub fn finite_diff_grad(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Result<Vec<f64>> {
    if !(h > 0.0) {
        return Err(Error::InvalidParameter {
            name: "h",
            reason: format!("must be positive, got {h}"),
        });
    }
    let mut probe = x.to_vec();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        probe[i] = x[i] + h;
        let fp = f(&probe);
        probe[i] = x[i] - h;
        let fm = f(&probe);
        probe[i] = x[i];
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::NonFinite { index: i });
        }
        grad.push((fp - fm) / (2.0 * h));
    }
    Ok(grad)
}

/// Relative error `|a - b| / max(|a|, |b|, floor)` in the Euclidean norm.
/// The floor (1e-6) keeps comparisons of near-zero gradients meaningful.
pub fn rel_error(a: &[f64], b: &[f64]) -> f64 {
    let diff = numerics::norm(&numerics::sub(a, b));
    diff / numerics::norm(a).max(numerics::norm(b)).max(1e-6)
}

/// Compares an analytic VJP against central differences of `<cotangent, f(x)>`.
/// Returns infinity when `f` is not finite around `x`.
pub fn vjp_rel_error(
    f: impl Fn(&[f64]) -> Vec<f64>,
    x: &[f64],
    cotangent: &[f64],
    analytic: Vec<f64>,
    h: f64,
) -> f64 {
    match finite_diff_grad(|z| numerics::dot(&f(z), cotangent), x, h) {
        Ok(fd) => rel_error(&fd, &analytic),
        Err(_) => f64::INFINITY,
    }
}

/// Multivariate normal with dense covariance.
#[derive(Debug, Clone)]
pub struct GaussianDist {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    chol: Cholesky<f64, nalgebra::Dyn>,
}

impl GaussianDist {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        let n = mean.len();
        if cov.nrows() != n || cov.ncols() != n {
            return Err(Error::InvalidDimension {
                expected: n,
                got: cov.nrows(),
            });
        }
        let asym = (&cov - cov.transpose()).amax();
        if asym > 1e-12 * cov.amax().max(1.0) {
            return Err(Error::InvalidParameter {
                name: "cov",
                reason: format!("not symmetric (max asymmetry {asym})"),
            });
        }
        let chol = Cholesky::new(cov.clone()).ok_or(Error::Singular("covariance is not positive definite"))?;
        Ok(Self { mean, cov, chol })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn sample(&self, rng: &mut Rng) -> Vec<f64> {
        let z = DVector::from_iterator(self.dim(), (0..self.dim()).map(|_| rng.normal()));
        (&self.mean + self.chol.l() * z).as_slice().to_vec()
    }
}

/// Posterior of `x0 ~ N(prior_mean, prior_cov)` given `y = A x0 + sigma_y z`.
pub fn gaussian_posterior(
    prior_mean: &DVector<f64>,
    prior_cov: &DMatrix<f64>,
    a: &DMatrix<f64>,
    sigma_y: f64,
    y: &DVector<f64>,
) -> Result<GaussianDist> {
    let d = prior_mean.len();
    check_dim(d, prior_cov.nrows())?;
    check_dim(d, a.ncols())?;
    check_dim(a.nrows(), y.len())?;
    if !(sigma_y > 0.0) {
        return Err(Error::InvalidParameter {
            name: "sigma_y",
            reason: "must be positive".into(),
        });
    }
    let prior_chol = Cholesky::new(prior_cov.clone()).ok_or(Error::Singular("prior covariance"))?;
    let prior_prec = prior_chol.inverse();
    let s2 = sigma_y * sigma_y;
    let mut prec = &prior_prec + a.transpose() * a / s2;
    prec = (&prec + prec.transpose()) * 0.5;
    let prec_chol = Cholesky::new(prec).ok_or(Error::Singular("posterior precision"))?;
    let rhs = &prior_prec * prior_mean + a.transpose() * y / s2;
    let mean = prec_chol.solve(&rhs);
    let mut cov = prec_chol.inverse();
    cov = (&cov + cov.transpose()) * 0.5;
    GaussianDist::new(mean, cov)
}

/// `grad_{x_t} log p(y | x_t)` for a standard-normal prior observed through the
/// identity with noise `sigma_y`.
pub fn conditional_score(alpha_bar: f64, x_t: &[f64], y: &[f64], sigma_y: f64) -> Result<Vec<f64>> {
    check_dim(x_t.len(), y.len())?;
    let sa = alpha_bar.sqrt();
    let denom = 1.0 - alpha_bar + sigma_y * sigma_y;
    Ok(x_t.iter().zip(y).map(|(x, y)| sa * (y - sa * x) / denom).collect())
}

/// As [`conditional_score`] for a 0/1 mask; unobserved coordinates get zero.
pub fn conditional_score_masked(
    alpha_bar: f64,
    x_t: &[f64],
    y: &[f64],
    sigma_y: f64,
    mask: &[f64],
) -> Result<Vec<f64>> {
    check_dim(x_t.len(), mask.len())?;
    let full = conditional_score(alpha_bar, x_t, y, sigma_y)?;
    Ok(full.iter().zip(mask).map(|(s, m)| s * m).collect())
}

fn trapezoid(values: &[f64], dx: f64) -> f64 {
    let n = values.len();
    dx * (values.iter().sum::<f64>() - 0.5 * (values[0] + values[n - 1]))
}

const GRID_POINTS: usize = 2001;
const GRID_HALF_WIDTH: f64 = 8.0;

/// `E[x0 | x_t]` for a one-dimensional mixture prior by quadrature of
/// `p(x0) p(x_t | x0)` over 2001 points spanning 8 standard deviations.
pub fn quadrature_posterior_mean(prior: &GmmPrior, x_t: f64, alpha_bar: f64) -> Result<f64> {
    check_dim(1, prior.means()[0].len())?;
    let (lo, hi) = prior_range(prior);
    let dx = (hi - lo) / (GRID_POINTS - 1) as f64;
    let noise_var = 1.0 - alpha_bar;
    let mut logw = Vec::with_capacity(GRID_POINTS);
    let mut grid = Vec::with_capacity(GRID_POINTS);
    for i in 0..GRID_POINTS {
        let x0 = lo + dx * i as f64;
        let lp = prior.log_density(&[x0], 1.0);
        let ll = -0.5 * (x_t - alpha_bar.sqrt() * x0).powi(2) / noise_var;
        logw.push(lp + ll);
        grid.push(x0);
    }
    let mx = logw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = logw.iter().map(|l| (l - mx).exp()).collect();
    let wx: Vec<f64> = w.iter().zip(&grid).map(|(w, x)| w * x).collect();
    Ok(trapezoid(&wx, dx) / trapezoid(&w, dx))
}

fn prior_range(prior: &GmmPrior) -> (f64, f64) {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for (m, v) in prior.means().iter().zip(prior.variances()) {
        let sd = v.sqrt();
        lo = lo.min(m[0] - GRID_HALF_WIDTH * sd);
        hi = hi.max(m[0] + GRID_HALF_WIDTH * sd);
    }
    (lo, hi)
}

/// `log p(y | x_t)` for a scalar standard-normal prior and identity observation,
/// by quadrature over the posterior `p(x0 | x_t)` (no closed form used).
pub fn quadrature_log_likelihood(alpha_bar: f64, x_t: f64, y: f64, sigma_y: f64) -> f64 {
    let prior = GmmPrior::standard_normal(1).expect("valid prior");
    let (lo, hi) = prior_range(&prior);
    let dx = (hi - lo) / (GRID_POINTS - 1) as f64;
    let noise_var = 1.0 - alpha_bar;
    let s2 = sigma_y * sigma_y;
    let mut post = Vec::with_capacity(GRID_POINTS);
    let mut lik = Vec::with_capacity(GRID_POINTS);
    for i in 0..GRID_POINTS {
        let x0 = lo + dx * i as f64;
        let lp = -0.5 * x0 * x0 - 0.5 * (x_t - alpha_bar.sqrt() * x0).powi(2) / noise_var;
        post.push(lp.exp());
        lik.push((-0.5 * (y - x0).powi(2) / s2).exp() / (2.0 * std::f64::consts::PI * s2).sqrt());
    }
    let z = trapezoid(&post, dx);
    let joint: Vec<f64> = post.iter().zip(&lik).map(|(p, l)| p * l).collect();
    (trapezoid(&joint, dx) / z).ln()
}

/// `KL(N(mu_p, sigma^2 I) || N(mu_q, sigma^2 I))`.
pub fn isotropic_gaussian_kl(mu_p: &[f64], mu_q: &[f64], sigma: f64) -> f64 {
    numerics::norm_sq(&numerics::sub(mu_p, mu_q)) / (2.0 * sigma * sigma)
}

/// A Markov chain whose transitions are isotropic Gaussians.
pub trait GaussianChain {
    fn dim(&self) -> usize;
    fn steps(&self) -> usize;
    fn mean(&self, step: usize, x: &[f64]) -> Vec<f64>;
    fn sigma(&self, step: usize) -> f64;
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChainKl {
    pub estimate: f64,
    pub stderr: f64,
}

pub const MAX_CHAIN_STEPS: usize = 4;

/// Path KL between a guided and an unguided Gaussian chain started from
/// `x_T ~ N(0, I)`. Each sampled guided trajectory contributes the sum of the
/// analytic per-step KLs; the estimate is their mean.
pub fn mc_chain_kl(
    guided: &dyn GaussianChain,
    unguided: &dyn GaussianChain,
    n_samples: usize,
    rng: &mut Rng,
) -> Result<ChainKl> {
    let steps = guided.steps();
    check_dim(steps, unguided.steps())?;
    check_dim(guided.dim(), unguided.dim())?;
    if steps == 0 || steps > MAX_CHAIN_STEPS {
        return Err(Error::InvalidParameter {
            name: "n_steps",
            reason: format!("must lie in [1, {MAX_CHAIN_STEPS}], got {steps}"),
        });
    }
    if n_samples < 2 {
        return Err(Error::InvalidParameter {
            name: "n_samples",
            reason: "need at least 2 samples".into(),
        });
    }
    for step in 0..steps {
        let s = guided.sigma(step);
        if !(s > 0.0) || !(unguided.sigma(step) > 0.0) {
            return Err(Error::UndefinedKl { step });
        }
        if s != unguided.sigma(step) {
            return Err(Error::InvalidParameter {
                name: "sigma",
                reason: format!("chains disagree on sigma at step {step}"),
            });
        }
    }
    let mut totals = Vec::with_capacity(n_samples);
    for _ in 0..n_samples {
        let mut x = rng.gaussian(guided.dim())?;
        let mut total = 0.0;
        for step in 0..steps {
            let sigma = guided.sigma(step);
            let mp = guided.mean(step, &x);
            let mq = unguided.mean(step, &x);
            total += isotropic_gaussian_kl(&mp, &mq, sigma);
            x = mp.iter().map(|m| m + sigma * rng.normal()).collect();
        }
        totals.push(total);
    }
    let n = n_samples as f64;
    let estimate = totals.iter().sum::<f64>() / n;
    let var = totals.iter().map(|v| (v - estimate).powi(2)).sum::<f64>() / (n - 1.0);
    Ok(ChainKl {
        estimate,
        stderr: (var / n).sqrt(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BoundCheck {
    /// `|a + b|^2 <= |a|^2 + |b|^2`
    pub holds_uncorrected: bool,
    /// `|a + b|^2 <= 2 |a|^2 + 2 |b|^2`
    pub holds_factor2: bool,
}

pub fn check_squared_triangle_bound(a: &[f64], b: &[f64]) -> Result<BoundCheck> {
    check_dim(a.len(), b.len())?;
    let lhs = numerics::norm_sq(&numerics::add(a, b));
    let (na, nb) = (numerics::norm_sq(a), numerics::norm_sq(b));
    Ok(BoundCheck {
        holds_uncorrected: lhs <= na + nb,
        holds_factor2: lhs <= 2.0 * na + 2.0 * nb,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;
    use proptest::prelude::*;

    #[test]
    fn fd_quadratic() {
        let g = finite_diff_grad(|x| x[0] * x[0], &[3.0], 1e-3).unwrap();
        assert!((g[0] - 6.0).abs() < 1e-5);
        let g = finite_diff_grad(|_| 4.2, &[1.0, 2.0], 1e-3).unwrap();
        assert_eq!(g, vec![0.0, 0.0]);
        assert!(matches!(
            finite_diff_grad(|x| (x[0] - 1e-3).ln(), &[0.0], 1e-3),
            Err(Error::NonFinite { index: 0 })
        ));
    }

    #[test]
    fn scalar_posterior() {
        let post = gaussian_posterior(
            &DVector::from_element(1, 0.0),
            &DMatrix::identity(1, 1),
            &DMatrix::identity(1, 1),
            1.0,
            &DVector::from_element(1, 2.0),
        )
        .unwrap();
        assert!((post.mean[0] - 1.0).abs() < 1e-14);
        assert!((post.cov[(0, 0)] - 0.5).abs() < 1e-14);
    }

    #[test]
    fn uninformative_and_zero_operator_limits() {
        let pm = DVector::from_vec(vec![0.5, -1.0]);
        let pc = DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 1.0]);
        let y = DVector::from_vec(vec![3.0, -2.0]);
        let wide = gaussian_posterior(&pm, &pc, &DMatrix::identity(2, 2), 1e6, &y).unwrap();
        assert!((wide.mean.clone() - &pm).amax() < 1e-5);
        let zero = gaussian_posterior(&pm, &pc, &DMatrix::zeros(2, 2), 0.1, &y).unwrap();
        assert!((zero.mean.clone() - &pm).amax() < 1e-12);
        assert!((zero.cov.clone() - &pc).amax() < 1e-12);
    }

    #[test]
    fn singular_prior_rejected() {
        let r = gaussian_posterior(
            &DVector::zeros(2),
            &DMatrix::zeros(2, 2),
            &DMatrix::identity(2, 2),
            1.0,
            &DVector::zeros(2),
        );
        assert!(matches!(r, Err(Error::Singular(_))));
    }

    #[test]
    fn conditional_score_values() {
        let ab: f64 = 0.3;
        let s = conditional_score(ab, &[2.0], &[ab.sqrt() * 2.0], 0.2).unwrap();
        assert_eq!(s, vec![0.0]);
        let s = conditional_score(0.25, &[1.0], &[2.0], 1.0).unwrap();
        assert!((s[0] - 0.428571428571).abs() < 1e-9);
    }

    #[test]
    fn conditional_score_matches_quadrature() {
        let mut rng = Rng::new(3);
        for _ in 0..20 {
            let ab = 0.1 + 0.8 * rng.uniform();
            let sigma_y = 0.3 + rng.uniform();
            let x = rng.normal();
            let y = rng.normal() * 1.5;
            let fd = finite_diff_grad(|z| quadrature_log_likelihood(ab, z[0], y, sigma_y), &[x], 1e-5).unwrap();
            let exact = conditional_score(ab, &[x], &[y], sigma_y).unwrap();
            let rel = (fd[0] - exact[0]).abs() / exact[0].abs().max(1e-3);
            assert!(rel < 1e-5, "rel {rel}");
        }
    }

    struct Shifted {
        shift: Vec<Vec<f64>>,
        sigma: Vec<f64>,
    }

    impl GaussianChain for Shifted {
        fn dim(&self) -> usize {
            self.shift[0].len()
        }
        fn steps(&self) -> usize {
            self.sigma.len()
        }
        fn mean(&self, step: usize, x: &[f64]) -> Vec<f64> {
            numerics::add(&numerics::scale(x, 0.8), &self.shift[step])
        }
        fn sigma(&self, step: usize) -> f64 {
            self.sigma[step]
        }
    }

    #[test]
    fn identical_chains_have_zero_kl() {
        let c = Shifted {
            shift: vec![vec![0.0; 2]; 3],
            sigma: vec![0.5, 0.4, 0.3],
        };
        let kl = mc_chain_kl(&c, &c, 100, &mut Rng::new(1)).unwrap();
        assert_eq!(kl, ChainKl { estimate: 0.0, stderr: 0.0 });
    }

    #[test]
    fn single_step_shift() {
        let p = Shifted {
            shift: vec![vec![1.0]],
            sigma: vec![0.5],
        };
        let q = Shifted {
            shift: vec![vec![0.0]],
            sigma: vec![0.5],
        };
        let kl = mc_chain_kl(&p, &q, 10, &mut Rng::new(1)).unwrap();
        assert_eq!(kl.estimate, 2.0);
        assert_eq!(kl.stderr, 0.0);
    }

    #[test]
    fn zero_sigma_is_undefined() {
        let p = Shifted {
            shift: vec![vec![1.0], vec![0.0]],
            sigma: vec![0.5, 0.0],
        };
        assert!(matches!(
            mc_chain_kl(&p, &p, 10, &mut Rng::new(1)),
            Err(Error::UndefinedKl { step: 1 })
        ));
    }

    #[test]
    fn bound_examples() {
        let b = check_squared_triangle_bound(&[1.0], &[1.0]).unwrap();
        assert!(!b.holds_uncorrected && b.holds_factor2);
        let b = check_squared_triangle_bound(&[1.0], &[-1.0]).unwrap();
        assert!(b.holds_uncorrected && b.holds_factor2);
    }

    proptest! {
        #[test]
        fn factor2_bound_always_holds(a in proptest::collection::vec(-1e3f64..1e3, 1..8), seed in any::<u64>()) {
            let mut rng = Rng::new(seed);
            let b: Vec<f64> = a.iter().map(|_| 100.0 * rng.normal()).collect();
            prop_assert!(check_squared_triangle_bound(&a, &b).unwrap().holds_factor2);
        }

        #[test]
        fn posterior_precision_is_spd(seed in any::<u64>(), sigma_y in 0.01f64..10.0) {
            let mut rng = Rng::new(seed);
            let d = 3;
            let l = DMatrix::from_fn(d, d, |_, _| rng.normal());
            let prior_cov = &l * l.transpose() + DMatrix::identity(d, d) * 0.1;
            let a = DMatrix::from_fn(2, d, |_, _| rng.normal());
            let y = DVector::from_fn(2, |_, _| rng.normal());
            let post = gaussian_posterior(&DVector::zeros(d), &prior_cov, &a, sigma_y, &y).unwrap();
            prop_assert!(Cholesky::new(post.cov.clone()).is_some());
            prop_assert!((&post.cov - post.cov.transpose()).amax() <= 1e-12 * post.cov.amax().max(1.0));
        }
    }
}
