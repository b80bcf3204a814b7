//! Noise models and per-point predictive laws.
//!
//! The contaminated-normal (CN) model is the centerpiece:
//!
//! `p(y | f) = pi * N(y | f, tau * s2) + (1 - pi) * N(y | f, s2)`
//!
//! with outlier proportion `pi` in (0,1), variance inflation `tau > 0`, and
//! base noise variance `s2 > 0`. Gaussian, Student-t, and Laplace models are
//! carried as baselines. This module owns densities, expected log-likelihoods
//! under a Gaussian latent marginal, CN responsibilities, and the per-point
//! predictive distributions used for NLPD and interval evaluation.

use serde::{Deserialize, Serialize};
use statrs::distribution::ContinuousCDF;
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};
use crate::numerics::{gh_expect, ln_normal_pdf, normal_cdf, normal_quantile, GaussHermite};

/// Parameters of the contaminated-normal noise model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CnParams {
    /// Mixture weight of the inflated component (outlier proportion).
    pub outlier_prob: f64,
    /// Variance inflation factor of the outlier component.
    pub inflation: f64,
    /// Base noise variance shared by both components.
    pub noise_var: f64,
}

impl CnParams {
    pub fn new(outlier_prob: f64, inflation: f64, noise_var: f64) -> Result<Self> {
        let p = Self {
            outlier_prob,
            inflation,
            noise_var,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.outlier_prob > 0.0 && self.outlier_prob < 1.0) {
            return Err(Error::InvalidParameter(format!(
                "outlier_prob must be in (0,1), got {}",
                self.outlier_prob
            )));
        }
        if !(self.inflation > 0.0 && self.inflation.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "inflation must be positive, got {}",
                self.inflation
            )));
        }
        if !(self.noise_var > 0.0 && self.noise_var.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "noise_var must be positive, got {}",
                self.noise_var
            )));
        }
        Ok(())
    }

    /// Swap mixture labels so the inflated component has `inflation >= 1`.
    ///
    /// `(pi, tau, s2) -> (1 - pi, 1/tau, tau * s2)` when `tau < 1`; the mixture
    /// density is pointwise identical before and after, but the reported
    /// parameters regain their reading as outlier proportion and inflation.
    pub fn canonicalize(self) -> CnParams {
        if self.inflation >= 1.0 {
            return self;
        }
        CnParams {
            outlier_prob: 1.0 - self.outlier_prob,
            inflation: 1.0 / self.inflation,
            noise_var: self.inflation * self.noise_var,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum NoiseFamily {
    Gaussian,
    Cn,
    StudentT,
    Laplace,
}

/// Observation noise model, centered at the latent function value.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum NoiseModel {
    Gaussian { noise_var: f64 },
    Cn(CnParams),
    StudentT { dof: f64, scale: f64 },
    Laplace { scale: f64 },
}

impl NoiseModel {
    pub fn gaussian(noise_var: f64) -> Result<Self> {
        if !(noise_var > 0.0 && noise_var.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "noise_var must be positive, got {noise_var}"
            )));
        }
        Ok(Self::Gaussian { noise_var })
    }

    pub fn cn(outlier_prob: f64, inflation: f64, noise_var: f64) -> Result<Self> {
        Ok(Self::Cn(CnParams::new(outlier_prob, inflation, noise_var)?))
    }

    /// Student-t with `dof > 2` so the noise variance stays finite.
    pub fn student_t(dof: f64, scale: f64) -> Result<Self> {
        if !(dof > 2.0 && dof.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "dof must be > 2, got {dof}"
            )));
        }
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "scale must be positive, got {scale}"
            )));
        }
        Ok(Self::StudentT { dof, scale })
    }

    pub fn laplace(scale: f64) -> Result<Self> {
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "scale must be positive, got {scale}"
            )));
        }
        Ok(Self::Laplace { scale })
    }

    pub fn family(&self) -> NoiseFamily {
        match self {
            Self::Gaussian { .. } => NoiseFamily::Gaussian,
            Self::Cn(_) => NoiseFamily::Cn,
            Self::StudentT { .. } => NoiseFamily::StudentT,
            Self::Laplace { .. } => NoiseFamily::Laplace,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            Self::Gaussian { noise_var } => Self::gaussian(noise_var).map(|_| ()),
            Self::Cn(p) => p.validate(),
            Self::StudentT { dof, scale } => Self::student_t(dof, scale).map(|_| ()),
            Self::Laplace { scale } => Self::laplace(scale).map(|_| ()),
        }
    }

    /// Marginal noise variance.
    pub fn variance(&self) -> f64 {
        match *self {
            Self::Gaussian { noise_var } => noise_var,
            Self::Cn(p) => {
                p.outlier_prob * p.inflation * p.noise_var + (1.0 - p.outlier_prob) * p.noise_var
            }
            Self::StudentT { dof, scale } => scale * scale * dof / (dof - 2.0),
            Self::Laplace { scale } => 2.0 * scale * scale,
        }
    }

    /// Log noise density of `y` centered at `f`. Finite for all finite inputs.
    pub fn log_density(&self, y: f64, f: f64) -> f64 {
        match *self {
            Self::Gaussian { noise_var } => ln_normal_pdf(y, f, noise_var),
            Self::Cn(p) => {
                let lo = p.outlier_prob.ln() + ln_normal_pdf(y, f, p.inflation * p.noise_var);
                let li = (1.0 - p.outlier_prob).ln() + ln_normal_pdf(y, f, p.noise_var);
                log_sum_exp(lo, li)
            }
            Self::StudentT { dof, scale } => ln_student_t_pdf(y - f, dof, scale),
            Self::Laplace { scale } => -(2.0 * scale).ln() - (y - f).abs() / scale,
        }
    }

    /// Noise CDF of `y` centered at `f`.
    pub fn cdf(&self, y: f64, f: f64) -> f64 {
        let r = y - f;
        match *self {
            Self::Gaussian { noise_var } => normal_cdf(r / noise_var.sqrt()),
            Self::Cn(p) => {
                let sd_out = (p.inflation * p.noise_var).sqrt();
                let sd_in = p.noise_var.sqrt();
                p.outlier_prob * normal_cdf(r / sd_out)
                    + (1.0 - p.outlier_prob) * normal_cdf(r / sd_in)
            }
            Self::StudentT { dof, scale } => statrs::distribution::StudentsT::new(0.0, scale, dof)
                .expect("validated Student-t parameters")
                .cdf(r),
            Self::Laplace { scale } => {
                if r < 0.0 {
                    0.5 * (r / scale).exp()
                } else {
                    1.0 - 0.5 * (-r / scale).exp()
                }
            }
        }
    }

    /// Unconstrained parameter vector used by gradient-based training:
    /// Gaussian `[ln s2]`; CN `[logit pi, ln tau, ln s2]`;
    /// Student-t `[raw dof, ln scale]` with `dof = 2 + softplus(raw)`;
    /// Laplace `[ln scale]`.
    pub fn unconstrained(&self) -> Vec<f64> {
        match *self {
            Self::Gaussian { noise_var } => vec![noise_var.ln()],
            Self::Cn(p) => vec![
                logit(p.outlier_prob),
                p.inflation.ln(),
                p.noise_var.ln(),
            ],
            Self::StudentT { dof, scale } => vec![inv_softplus(dof - 2.0), scale.ln()],
            Self::Laplace { scale } => vec![scale.ln()],
        }
    }

    /// Inverse of [`Self::unconstrained`].
    pub fn set_unconstrained(&mut self, u: &[f64]) {
        match self {
            Self::Gaussian { noise_var } => {
                debug_assert_eq!(u.len(), 1);
                *noise_var = u[0].exp();
            }
            Self::Cn(p) => {
                debug_assert_eq!(u.len(), 3);
                p.outlier_prob = sigmoid(u[0]).clamp(1e-12, 1.0 - 1e-12);
                p.inflation = u[1].exp();
                p.noise_var = u[2].exp();
            }
            Self::StudentT { dof, scale } => {
                debug_assert_eq!(u.len(), 2);
                *dof = 2.0 + softplus(u[0]);
                *scale = u[1].exp();
            }
            Self::Laplace { scale } => {
                debug_assert_eq!(u.len(), 1);
                *scale = u[0].exp();
            }
        }
    }
}

/// Gaussian latent marginal `q(f_i) = N(mean, var)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LatentMarginal {
    pub mean: f64,
    pub var: f64,
}

/// `E_{q(f)}[log p(y | f)]` under a Gaussian latent marginal.
///
/// Gaussian noise has the closed form `-0.5 ln(2 pi s2) - D / (2 s2)` with
/// `D = (y - mean)^2 + var`. Student-t and Laplace use Gauss-Hermite
/// quadrature. The CN case quadratures the exact mixture log-density; it is a
/// diagnostic — training uses the responsibility-augmented bound instead.
pub fn expected_loglik(
    model: &NoiseModel,
    y: f64,
    q: LatentMarginal,
    rule: &GaussHermite,
) -> Result<f64> {
    if q.var < 0.0 {
        return Err(Error::InvalidParameter(format!(
            "latent variance must be nonnegative, got {}",
            q.var
        )));
    }
    if let NoiseModel::Gaussian { noise_var } = *model {
        let d = (y - q.mean) * (y - q.mean) + q.var;
        return Ok(-0.5 * (2.0 * std::f64::consts::PI * noise_var).ln() - d / (2.0 * noise_var));
    }
    if q.var == 0.0 {
        return Ok(model.log_density(y, q.mean));
    }
    gh_expect(q.mean, q.var, |f| model.log_density(y, f), rule)
}

/// Posterior probability that `y` came from the inflated component, with the
/// latent marginalized into each component:
///
/// `alpha = pi Psi(tau s2) / [pi Psi(tau s2) + (1 - pi) Psi(s2)]`,
/// `Psi(x) = N(y | mean, var + x)`.
///
/// Computed in log space. When the two component evidences coincide (`tau = 1`
/// in particular) the Psi terms cancel and `pi` is returned exactly.
pub fn cn_responsibility(y: f64, q: &LatentMarginal, params: &CnParams) -> f64 {
    let l_out = ln_normal_pdf(y, q.mean, q.var + params.inflation * params.noise_var);
    let l_in = ln_normal_pdf(y, q.mean, q.var + params.noise_var);
    if l_out == l_in {
        return params.outlier_prob;
    }
    sigmoid(logit(params.outlier_prob) + l_out - l_in)
}

/// Entropy of a Bernoulli with success probability `a`, with `0 ln 0 = 0`.
pub(crate) fn bernoulli_entropy(a: f64) -> f64 {
    let mut h = 0.0;
    if a > 0.0 {
        h -= a * a.ln();
    }
    if a < 1.0 {
        h -= (1.0 - a) * (1.0 - a).ln();
    }
    h
}

/// Per-point predictive law.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum PredictiveDistribution {
    /// `N(mean, var)`.
    Gaussian { mean: f64, var: f64 },
    /// Two-component Gaussian mixture sharing its mean (CN predictive):
    /// `weight * N(mean, var_outlier) + (1 - weight) * N(mean, var_inlier)`.
    Mixture {
        weight: f64,
        mean: f64,
        var_outlier: f64,
        var_inlier: f64,
    },
    /// Equal-weight mixture of the noise law centered at latent samples.
    Sampled { latent: Vec<f64>, noise: NoiseModel },
}

impl PredictiveDistribution {
    pub fn validate(&self) -> Result<()> {
        match self {
            Self::Gaussian { var, .. } => {
                if !(*var > 0.0) {
                    return Err(Error::InvalidParameter(format!(
                        "predictive variance must be positive, got {var}"
                    )));
                }
            }
            Self::Mixture {
                weight,
                var_outlier,
                var_inlier,
                ..
            } => {
                if !(*weight > 0.0 && *weight < 1.0) {
                    return Err(Error::InvalidParameter(format!(
                        "mixture weight must be in (0,1), got {weight}"
                    )));
                }
                if !(*var_outlier > 0.0 && *var_inlier > 0.0) {
                    return Err(Error::InvalidParameter(
                        "mixture variances must be positive".to_string(),
                    ));
                }
            }
            Self::Sampled { latent, noise } => {
                if latent.is_empty() {
                    return Err(Error::InvalidParameter(
                        "sampled predictive needs at least one latent draw".to_string(),
                    ));
                }
                noise.validate()?;
            }
        }
        Ok(())
    }

    pub fn mean(&self) -> f64 {
        match self {
            Self::Gaussian { mean, .. } | Self::Mixture { mean, .. } => *mean,
            Self::Sampled { latent, .. } => latent.iter().sum::<f64>() / latent.len() as f64,
        }
    }

    /// Predictive variance. For the shared-mean mixture this is the weighted
    /// component variance; for samples it is the latent sample variance plus
    /// the marginal noise variance.
    pub fn var(&self) -> f64 {
        match self {
            Self::Gaussian { var, .. } => *var,
            Self::Mixture {
                weight,
                var_outlier,
                var_inlier,
                ..
            } => weight * var_outlier + (1.0 - weight) * var_inlier,
            Self::Sampled { latent, noise } => {
                let m = self.mean();
                let lat_var = latent.iter().map(|f| (f - m) * (f - m)).sum::<f64>()
                    / latent.len() as f64;
                lat_var + noise.variance()
            }
        }
    }

    /// Negative log predictive density at `y`.
    ///
    /// For the sampled form this is the Monte-Carlo estimate
    /// `-(1/M) Σ_m log p(y | f_m)`.
    pub fn nlpd(&self, y: f64) -> f64 {
        match self {
            Self::Gaussian { mean, var } => -ln_normal_pdf(y, *mean, *var),
            Self::Mixture {
                weight,
                mean,
                var_outlier,
                var_inlier,
            } => {
                let lo = weight.ln() + ln_normal_pdf(y, *mean, *var_outlier);
                let li = (1.0 - weight).ln() + ln_normal_pdf(y, *mean, *var_inlier);
                -log_sum_exp(lo, li)
            }
            Self::Sampled { latent, noise } => {
                let s: f64 = latent.iter().map(|f| noise.log_density(y, *f)).sum();
                -(s / latent.len() as f64)
            }
        }
    }

    /// Predictive CDF at `t`.
    pub fn cdf(&self, t: f64) -> f64 {
        match self {
            Self::Gaussian { mean, var } => normal_cdf((t - mean) / var.sqrt()),
            Self::Mixture {
                weight,
                mean,
                var_outlier,
                var_inlier,
            } => {
                weight * normal_cdf((t - mean) / var_outlier.sqrt())
                    + (1.0 - weight) * normal_cdf((t - mean) / var_inlier.sqrt())
            }
            Self::Sampled { latent, noise } => {
                latent.iter().map(|f| noise.cdf(t, *f)).sum::<f64>() / latent.len() as f64
            }
        }
    }

    /// Central interval `[q_{(1-level)/2}, q_{(1+level)/2}]`.
    ///
    /// The Gaussian case uses the normal quantile; mixtures and sampled
    /// predictives bisect their CDF.
    pub fn interval(&self, level: f64) -> Result<(f64, f64)> {
        if !(level > 0.0 && level < 1.0) {
            return Err(Error::InvalidParameter(format!(
                "interval level must be in (0,1), got {level}"
            )));
        }
        match self {
            Self::Gaussian { mean, var } => {
                let z = normal_quantile((1.0 + level) / 2.0);
                let sd = var.sqrt();
                Ok((mean - z * sd, mean + z * sd))
            }
            Self::Mixture {
                mean,
                var_outlier,
                var_inlier,
                ..
            } => {
                let spread = 15.0 * var_outlier.max(*var_inlier).sqrt();
                let lo = self.cdf_root((1.0 - level) / 2.0, mean - spread, mean + spread);
                let hi = self.cdf_root((1.0 + level) / 2.0, mean - spread, mean + spread);
                Ok((lo, hi))
            }
            Self::Sampled { latent, noise } => {
                let spread = 15.0 * noise.variance().sqrt();
                let min = latent.iter().cloned().fold(f64::INFINITY, f64::min) - spread;
                let max = latent.iter().cloned().fold(f64::NEG_INFINITY, f64::max) + spread;
                let lo = self.cdf_root((1.0 - level) / 2.0, min, max);
                let hi = self.cdf_root((1.0 + level) / 2.0, min, max);
                Ok((lo, hi))
            }
        }
    }

    /// Bisection solve of `cdf(t) = p` on `[a, b]`.
    fn cdf_root(&self, p: f64, mut a: f64, mut b: f64) -> f64 {
        // 100 halvings take the bracket below 1e-12 relative for any sane span.
        for _ in 0..100 {
            let mid = 0.5 * (a + b);
            if self.cdf(mid) < p {
                a = mid;
            } else {
                b = mid;
            }
            if (b - a).abs() <= 1e-13 * b.abs().max(a.abs()).max(1.0) {
                break;
            }
        }
        0.5 * (a + b)
    }
}

fn ln_student_t_pdf(r: f64, dof: f64, scale: f64) -> f64 {
    let u = r * r / (dof * scale * scale);
    ln_gamma((dof + 1.0) / 2.0)
        - ln_gamma(dof / 2.0)
        - 0.5 * (dof * std::f64::consts::PI).ln()
        - scale.ln()
        - (dof + 1.0) / 2.0 * u.ln_1p()
}

#[inline]
pub(crate) fn log_sum_exp(a: f64, b: f64) -> f64 {
    let (hi, lo) = if a >= b { (a, b) } else { (b, a) };
    if hi == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    hi + (lo - hi).exp().ln_1p()
}

#[inline]
pub(crate) fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub(crate) fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

#[inline]
pub(crate) fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

#[inline]
pub(crate) fn inv_softplus(y: f64) -> f64 {
    if y > 30.0 {
        y
    } else {
        y.exp_m1().ln()
    }
}
