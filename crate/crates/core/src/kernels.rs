//! ARD covariance functions and kernel-matrix assembly.
//!
//! Two stationary families, each with one lengthscale per input dimension:
//!
//! * squared exponential: `k(x, x') = s * exp(-Σ_j (x_j - x'_j)² / (2 ℓ_j²))`
//! * Matérn 3/2: `k(x, x') = s * (1 + √3 d) * exp(-√3 d)` with
//!   `d = sqrt(Σ_j (x_j - x'_j)² / ℓ_j²)`
//!
//! where `s` is the output scale (the variance at zero distance).
//! Hyperparameters are optimized in log-space; the adjoint accumulation used
//! by the trainer therefore produces gradients with respect to
//! `ln s` and `ln ℓ_j` directly.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum KernelFamily {
    SeArd,
    Matern32Ard,
}

/// Covariance function: family, output scale, and per-dimension lengthscales.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KernelSpec {
    pub family: KernelFamily,
    pub output_scale: f64,
    pub lengthscales: DVector<f64>,
}

impl KernelSpec {
    pub fn new(family: KernelFamily, output_scale: f64, lengthscales: Vec<f64>) -> Result<Self> {
        let spec = Self {
            family,
            output_scale,
            lengthscales: DVector::from_vec(lengthscales),
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Unit kernel: output scale 1 and all lengthscales 1.
    pub fn unit(family: KernelFamily, input_dim: usize) -> Self {
        Self {
            family,
            output_scale: 1.0,
            lengthscales: DVector::from_element(input_dim, 1.0),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.output_scale > 0.0 && self.output_scale.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "output_scale must be positive and finite, got {}",
                self.output_scale
            )));
        }
        if self.lengthscales.is_empty() {
            return Err(Error::InvalidParameter(
                "at least one lengthscale is required".to_string(),
            ));
        }
        if self.lengthscales.iter().any(|l| !(*l > 0.0 && l.is_finite())) {
            return Err(Error::InvalidParameter(
                "all lengthscales must be positive and finite".to_string(),
            ));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.lengthscales.len()
    }

    /// Covariance between two points.
    pub fn value(&self, x: &[f64], y: &[f64]) -> Result<f64> {
        let p = self.input_dim();
        if x.len() != p || y.len() != p {
            return Err(Error::DimensionMismatch(format!(
                "kernel expects dimension {p}, got {} and {}",
                x.len(),
                y.len()
            )));
        }
        Ok(self.value_by(|j| x[j] - y[j]))
    }

    /// Covariance between row `i` of `a` and row `j` of `b` (dims unchecked).
    #[inline]
    pub(crate) fn value_rows(&self, a: &DMatrix<f64>, i: usize, b: &DMatrix<f64>, j: usize) -> f64 {
        self.value_by(|d| a[(i, d)] - b[(j, d)])
    }

    #[inline]
    fn value_by(&self, diff: impl Fn(usize) -> f64) -> f64 {
        let p = self.input_dim();
        let mut r2 = 0.0;
        for j in 0..p {
            let d = diff(j) / self.lengthscales[j];
            r2 += d * d;
        }
        match self.family {
            KernelFamily::SeArd => self.output_scale * (-0.5 * r2).exp(),
            KernelFamily::Matern32Ard => {
                let sd = (3.0 * r2).sqrt();
                self.output_scale * (1.0 + sd) * (-sd).exp()
            }
        }
    }

    /// Cross-covariance matrix with entry `(i, j) = k(x1_i, x2_j)`.
    ///
    /// For `x1 == x2` the result is exactly symmetric: the entry formula is
    /// evaluated identically for `(i, j)` and `(j, i)`.
    pub fn matrix(&self, x1: &DMatrix<f64>, x2: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let p = self.input_dim();
        if x1.ncols() != p || x2.ncols() != p {
            return Err(Error::DimensionMismatch(format!(
                "kernel expects dimension {p}, got inputs with {} and {} columns",
                x1.ncols(),
                x2.ncols()
            )));
        }
        let (a, b) = (x1.nrows(), x2.nrows());
        let mut k = DMatrix::<f64>::zeros(a, b);
        for i in 0..a {
            for j in 0..b {
                k[(i, j)] = self.value_rows(x1, i, x2, j);
            }
        }
        Ok(k)
    }

    /// Hyperparameters in log-space: `[ln output_scale, ln ℓ_1, ..., ln ℓ_p]`.
    pub fn log_params(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(1 + self.input_dim());
        v.push(self.output_scale.ln());
        v.extend(self.lengthscales.iter().map(|l| l.ln()));
        v
    }

    /// Inverse of [`Self::log_params`].
    pub fn set_log_params(&mut self, params: &[f64]) {
        debug_assert_eq!(params.len(), 1 + self.input_dim());
        self.output_scale = params[0].exp();
        for j in 0..self.input_dim() {
            self.lengthscales[j] = params[1 + j].exp();
        }
    }

    /// Adjoint of one kernel entry. Given `w = ∂E/∂k(x1_i, x2_j)`, accumulates
    /// `∂E/∂ln s`, `∂E/∂ln ℓ_j`, and (optionally) `∂E/∂x1_i`, `∂E/∂x2_j`.
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn entry_adjoint(
        &self,
        x1: &DMatrix<f64>,
        i: usize,
        x2: &DMatrix<f64>,
        j: usize,
        w: f64,
        grad: &mut KernelGrad,
        mut dx1: Option<(&mut DMatrix<f64>, usize)>,
        mut dx2: Option<(&mut DMatrix<f64>, usize)>,
    ) {
        let p = self.input_dim();
        let mut r2 = 0.0;
        for d in 0..p {
            let t = (x1[(i, d)] - x2[(j, d)]) / self.lengthscales[d];
            r2 += t * t;
        }
        // g is defined so that dk/d(ln ℓ_j) = g Δ_j²/ℓ_j² and
        // dk/dx1_j = -g Δ_j/ℓ_j² for both families.
        let (k, g) = match self.family {
            KernelFamily::SeArd => {
                let k = self.output_scale * (-0.5 * r2).exp();
                (k, k)
            }
            KernelFamily::Matern32Ard => {
                let sd = (3.0 * r2).sqrt();
                let e = (-sd).exp();
                (
                    self.output_scale * (1.0 + sd) * e,
                    3.0 * self.output_scale * e,
                )
            }
        };
        grad.d_log_output += w * k;
        for d in 0..p {
            let ell2 = self.lengthscales[d] * self.lengthscales[d];
            let delta = x1[(i, d)] - x2[(j, d)];
            let base = g * delta / ell2;
            grad.d_log_length[d] += w * base * delta;
            if let Some((m, row)) = dx1.as_mut() {
                m[(*row, d)] -= w * base;
            }
            if let Some((m, row)) = dx2.as_mut() {
                m[(*row, d)] += w * base;
            }
        }
    }
}

/// Accumulator for log-hyperparameter gradients.
#[derive(Debug, Clone)]
pub(crate) struct KernelGrad {
    pub d_log_output: f64,
    pub d_log_length: DVector<f64>,
}

impl KernelGrad {
    pub fn zeros(input_dim: usize) -> Self {
        Self {
            d_log_output: 0.0,
            d_log_length: DVector::zeros(input_dim),
        }
    }
}
