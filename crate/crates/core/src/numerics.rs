//! Low-level numerical kernels: positive-definite factorization with a jitter
//! escalation schedule, Gauss-Hermite quadrature, and scalar Gaussian helpers.
//!
//! Kernel matrices built from smooth covariances are frequently singular to
//! working precision (near-duplicate inputs, fast spectral decay), so the
//! factorization here retries with a growing diagonal jitter instead of
//! failing outright. The realized jitter is always reported to the caller.

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Jitter escalation schedule for [`cholesky_psd`].
///
/// The first attempt uses no jitter at all. Subsequent attempts add
/// `initial_jitter * mean(diag) * growth_factor^k` to the diagonal for
/// `k = 0, 1, ..., max_attempts - 1`.
#[derive(Debug, Clone, Copy)]
pub struct JitterPolicy {
    /// First nonzero jitter, relative to the mean diagonal entry.
    pub initial_jitter: f64,
    /// Multiplier between consecutive attempts (> 1).
    pub growth_factor: f64,
    /// Number of nonzero-jitter attempts after the clean attempt.
    pub max_attempts: usize,
}

impl JitterPolicy {
    pub fn new(initial_jitter: f64, growth_factor: f64, max_attempts: usize) -> Result<Self> {
        if !(initial_jitter >= 0.0) {
            return Err(Error::InvalidParameter(format!(
                "initial_jitter must be >= 0, got {initial_jitter}"
            )));
        }
        if !(growth_factor > 1.0) {
            return Err(Error::InvalidParameter(format!(
                "growth_factor must be > 1, got {growth_factor}"
            )));
        }
        if max_attempts == 0 {
            return Err(Error::InvalidParameter(
                "max_attempts must be >= 1".to_string(),
            ));
        }
        Ok(Self {
            initial_jitter,
            growth_factor,
            max_attempts,
        })
    }
}

impl Default for JitterPolicy {
    fn default() -> Self {
        Self {
            initial_jitter: 1e-8,
            growth_factor: 10.0,
            max_attempts: 6,
        }
    }
}

/// Lower-triangular factor of `A + jitter * I`.
#[derive(Debug, Clone)]
pub struct PsdFactor {
    /// Lower-triangular factor with strictly positive diagonal.
    pub l: DMatrix<f64>,
    /// The diagonal shift that made the factorization succeed (0 when clean).
    pub jitter: f64,
}

/// Cholesky factorization of a symmetric positive semi-definite matrix,
/// escalating diagonal jitter per `policy` until a factorization with a
/// strictly positive diagonal succeeds.
///
/// Rejects matrices that are not symmetric to within `1e-10` relative to the
/// largest entry magnitude.
pub fn cholesky_psd(a: &DMatrix<f64>, policy: &JitterPolicy) -> Result<PsdFactor> {
    let n = a.nrows();
    if n != a.ncols() {
        return Err(Error::DimensionMismatch(format!(
            "expected square matrix, got {}x{}",
            a.nrows(),
            a.ncols()
        )));
    }
    let max_abs = a.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
    let sym_tol = 1e-10 * max_abs.max(1e-300);
    for i in 0..n {
        for j in 0..i {
            if (a[(i, j)] - a[(j, i)]).abs() > sym_tol {
                return Err(Error::InvalidParameter(format!(
                    "matrix is not symmetric at ({i},{j})"
                )));
            }
        }
    }

    let mean_diag = a.diagonal().sum() / n as f64;
    let mut last_jitter = 0.0;
    for attempt in 0..=policy.max_attempts {
        let jitter = if attempt == 0 {
            0.0
        } else {
            policy.initial_jitter * mean_diag * policy.growth_factor.powi(attempt as i32 - 1)
        };
        last_jitter = jitter;
        if attempt > 0 && !(jitter > 0.0 && jitter.is_finite()) {
            break; // non-positive mean diagonal: escalation cannot help
        }
        if let Some(l) = raw_cholesky(a, jitter) {
            return Ok(PsdFactor { l, jitter });
        }
    }
    Err(Error::NotPositiveDefinite {
        attempts: policy.max_attempts + 1,
        last_jitter,
    })
}

/// Plain lower Cholesky of `a + eps * I`; `None` if any pivot is not strictly
/// positive and finite.
fn raw_cholesky(a: &DMatrix<f64>, eps: f64) -> Option<DMatrix<f64>> {
    let n = a.nrows();
    let mut l = DMatrix::<f64>::zeros(n, n);
    for j in 0..n {
        let mut d = a[(j, j)] + eps;
        for k in 0..j {
            d -= l[(j, k)] * l[(j, k)];
        }
        if !(d > 0.0) || !d.is_finite() {
            return None;
        }
        let dj = d.sqrt();
        l[(j, j)] = dj;
        for i in (j + 1)..n {
            let mut s = a[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / dj;
        }
    }
    Some(l)
}

/// Physicists' Gauss-Hermite rule: nodes and weights for
/// `∫ g(t) exp(-t²) dt ≈ Σ_k w_k g(t_k)`, with `Σ w_k = √π`.
#[derive(Debug, Clone)]
pub struct GaussHermite {
    nodes: Vec<f64>,
    weights: Vec<f64>,
}

impl GaussHermite {
    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }
}

pub const MAX_GH_NODES: usize = 64;

/// Gauss-Hermite nodes/weights via Golub-Welsch: eigendecomposition of the
/// symmetric tridiagonal Jacobi matrix with off-diagonals `sqrt(k/2)`.
/// Weights are `√π` times the squared first eigenvector components.
pub fn gauss_hermite(k: usize) -> Result<GaussHermite> {
    if k < 1 || k > MAX_GH_NODES {
        return Err(Error::InvalidParameter(format!(
            "Gauss-Hermite node count must be in [1, {MAX_GH_NODES}], got {k}"
        )));
    }
    if k == 1 {
        return Ok(GaussHermite {
            nodes: vec![0.0],
            weights: vec![std::f64::consts::PI.sqrt()],
        });
    }
    let mut jacobi = DMatrix::<f64>::zeros(k, k);
    for i in 1..k {
        let b = (i as f64 / 2.0).sqrt();
        jacobi[(i - 1, i)] = b;
        jacobi[(i, i - 1)] = b;
    }
    let eig = jacobi.symmetric_eigen();
    let mu0 = std::f64::consts::PI.sqrt();
    let mut pairs: Vec<(f64, f64)> = (0..k)
        .map(|j| {
            let first = eig.eigenvectors[(0, j)];
            (eig.eigenvalues[j], mu0 * first * first)
        })
        .collect();
    pairs.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    Ok(GaussHermite {
        nodes: pairs.iter().map(|p| p.0).collect(),
        weights: pairs.iter().map(|p| p.1).collect(),
    })
}

/// `E[g(F)]` for `F ~ N(mu, var)` by Gauss-Hermite quadrature:
/// `π^{-1/2} Σ_k w_k g(mu + √2 · √var · t_k)`.
///
/// Non-finite integrand values are reported as [`Error::Evaluation`].
pub fn gh_expect(mu: f64, var: f64, g: impl Fn(f64) -> f64, rule: &GaussHermite) -> Result<f64> {
    if !(var > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "gh_expect requires var > 0, got {var}"
        )));
    }
    let scale = (2.0 * var).sqrt();
    let mut acc = 0.0;
    for (idx, (&t, &w)) in rule.nodes.iter().zip(rule.weights.iter()).enumerate() {
        let v = g(mu + scale * t);
        if !v.is_finite() {
            return Err(Error::Evaluation { node: idx });
        }
        acc += w * v;
    }
    Ok(acc / std::f64::consts::PI.sqrt())
}

/// Log density of `N(x | mean, var)`.
#[inline]
pub fn ln_normal_pdf(x: f64, mean: f64, var: f64) -> f64 {
    let r = x - mean;
    -0.5 * ((2.0 * std::f64::consts::PI * var).ln() + r * r / var)
}

/// Standard normal CDF.
#[inline]
pub fn normal_cdf(z: f64) -> f64 {
    0.5 * statrs::function::erf::erfc(-z / std::f64::consts::SQRT_2)
}

/// Standard normal quantile. Acklam's rational approximation polished with
/// two Newton steps against the erfc-based CDF; accurate to ~1e-15 on (0,1).
pub fn normal_quantile(p: f64) -> f64 {
    assert!(p > 0.0 && p < 1.0, "quantile probability must be in (0,1)");
    const A: [f64; 6] = [
        -3.969683028665376e+01,
        2.209460984245205e+02,
        -2.759285104469687e+02,
        1.383577518672690e+02,
        -3.066479806614716e+01,
        2.506628277459239e+00,
    ];
    const B: [f64; 5] = [
        -5.447609879822406e+01,
        1.615858368580409e+02,
        -1.556989798598866e+02,
        6.680131188771972e+01,
        -1.328068155288572e+01,
    ];
    const C: [f64; 6] = [
        -7.784894002430293e-03,
        -3.223964580411365e-01,
        -2.400758277161838e+00,
        -2.549732539343734e+00,
        4.374664141464968e+00,
        2.938163982698783e+00,
    ];
    const D: [f64; 4] = [
        7.784695709041462e-03,
        3.224671290700398e-01,
        2.445134137142996e+00,
        3.754408661907416e+00,
    ];
    let plow = 0.02425;
    let mut x = if p < plow {
        let q = (-2.0 * p.ln()).sqrt();
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    } else if p <= 1.0 - plow {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    } else {
        let q = (-2.0 * (1.0 - p).ln()).sqrt();
        -(((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    };
    for _ in 0..2 {
        let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
        if pdf <= 0.0 {
            break;
        }
        x -= (normal_cdf(x) - p) / pdf;
    }
    x
}
