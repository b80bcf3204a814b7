//! Inducing-point variational posterior.
//!
//! The state is `q(u) = N(m, S)` over function values at inducing inputs `Z`,
//! with `S = L L'` kept as a lower-triangular factor. The induced latent
//! marginals at inputs `X` are
//!
//! `q(f_i) = N(a_i' m, k(x_i, x_i) + a_i' (S - K_mm) a_i)`,
//!
//! where `a_i = K_mm^{-1} k_i` and `k_i` is the vector of covariances between
//! `x_i` and the inducing inputs. The factor diagonal is stored in log space
//! so gradient steps cannot leave the feasible set.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::KernelSpec;
use crate::likelihoods::LatentMarginal;
use crate::numerics::{cholesky_psd, JitterPolicy};

/// Floor applied to latent variances to guard downstream logs and divisions
/// against roundoff-negative values.
pub const VAR_FLOOR: f64 = 1e-12;

/// Variational state: inducing inputs `Z`, mean `m`, and covariance factor.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VariationalState {
    inducing_inputs: DMatrix<f64>,
    mean: DVector<f64>,
    /// Lower triangle of the covariance factor; the diagonal holds the log of
    /// the factor diagonal.
    cov_raw: DMatrix<f64>,
}

impl VariationalState {
    /// Build from an explicit lower-triangular factor with positive diagonal.
    pub fn from_cov_factor(
        inducing_inputs: DMatrix<f64>,
        mean: DVector<f64>,
        cov_factor: DMatrix<f64>,
    ) -> Result<Self> {
        let m = inducing_inputs.nrows();
        if m == 0 {
            return Err(Error::InvalidParameter(
                "at least one inducing point is required".to_string(),
            ));
        }
        if mean.len() != m || cov_factor.nrows() != m || cov_factor.ncols() != m {
            return Err(Error::DimensionMismatch(format!(
                "inconsistent variational dimensions: Z has {m} rows, mean {}, factor {}x{}",
                mean.len(),
                cov_factor.nrows(),
                cov_factor.ncols()
            )));
        }
        let mut cov_raw = DMatrix::<f64>::zeros(m, m);
        for i in 0..m {
            let d = cov_factor[(i, i)];
            if !(d > 0.0 && d.is_finite()) {
                return Err(Error::InvalidParameter(format!(
                    "covariance factor diagonal must be positive, got {d} at {i}"
                )));
            }
            cov_raw[(i, i)] = d.ln();
            for j in 0..i {
                cov_raw[(i, j)] = cov_factor[(i, j)];
            }
        }
        Ok(Self {
            inducing_inputs,
            mean,
            cov_raw,
        })
    }

    pub fn num_inducing(&self) -> usize {
        self.inducing_inputs.nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.inducing_inputs.ncols()
    }

    pub fn inducing_inputs(&self) -> &DMatrix<f64> {
        &self.inducing_inputs
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    /// Materialize the lower-triangular covariance factor.
    pub fn cov_factor(&self) -> DMatrix<f64> {
        let m = self.num_inducing();
        let mut l = DMatrix::<f64>::zeros(m, m);
        for i in 0..m {
            l[(i, i)] = self.cov_raw[(i, i)].exp();
            for j in 0..i {
                l[(i, j)] = self.cov_raw[(i, j)];
            }
        }
        l
    }

    /// Sum of the logs of the factor diagonal (half the log-determinant of S).
    pub(crate) fn log_det_half(&self) -> f64 {
        (0..self.num_inducing()).map(|i| self.cov_raw[(i, i)]).sum()
    }

    pub(crate) fn cov_raw(&self) -> &DMatrix<f64> {
        &self.cov_raw
    }

    pub(crate) fn parts_mut(&mut self) -> (&mut DMatrix<f64>, &mut DVector<f64>, &mut DMatrix<f64>) {
        (&mut self.inducing_inputs, &mut self.mean, &mut self.cov_raw)
    }
}

/// Per-point means and variances of `q(f)` at the rows of `x`.
///
/// Variances are floored at [`VAR_FLOOR`].
pub fn latent_marginals(
    state: &VariationalState,
    spec: &KernelSpec,
    x: &DMatrix<f64>,
) -> Result<Vec<LatentMarginal>> {
    if x.ncols() != state.input_dim() || spec.input_dim() != state.input_dim() {
        return Err(Error::DimensionMismatch(format!(
            "inputs have {} columns, inducing inputs {}, kernel dimension {}",
            x.ncols(),
            state.input_dim(),
            spec.input_dim()
        )));
    }
    let kmm = spec.matrix(state.inducing_inputs(), state.inducing_inputs())?;
    let factor = cholesky_psd(&kmm, &JitterPolicy::default())?;
    let kxm = spec.matrix(x, state.inducing_inputs())?;

    // V = L^{-1} K_mx, A = (K_mm^{-1} K_mx)' computed through both triangles.
    let v = factor
        .l
        .solve_lower_triangular(&kxm.transpose())
        .ok_or_else(not_pd)?;
    let w = factor.l.tr_solve_lower_triangular(&v).ok_or_else(not_pd)?;
    let a = w.transpose();
    let mu = &a * state.mean();
    let t1 = &a * state.cov_factor();

    let n = x.nrows();
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let s_quad: f64 = t1.row(i).iter().map(|t| t * t).sum();
        let k_quad: f64 = v.column(i).iter().map(|t| t * t).sum();
        let var = (spec.output_scale + s_quad - k_quad).max(VAR_FLOOR);
        out.push(LatentMarginal { mean: mu[i], var });
    }
    Ok(out)
}

/// `KL[q(u) || N(0, K_mm)]`:
/// `0.5 [tr(K^{-1} S) + m' K^{-1} m - M - ln det S + ln det K]`.
pub fn kl_to_prior(state: &VariationalState, spec: &KernelSpec) -> Result<f64> {
    let kmm = spec.matrix(state.inducing_inputs(), state.inducing_inputs())?;
    let factor = cholesky_psd(&kmm, &JitterPolicy::default())?;
    let l_s = state.cov_factor();
    let g = factor.l.solve_lower_triangular(&l_s).ok_or_else(not_pd)?;
    let u1 = factor
        .l
        .solve_lower_triangular(state.mean())
        .ok_or_else(not_pd)?;
    let trace: f64 = g.iter().map(|t| t * t).sum();
    let quad: f64 = u1.iter().map(|t| t * t).sum();
    let log_det_k_half: f64 = (0..factor.l.nrows()).map(|i| factor.l[(i, i)].ln()).sum();
    let m = state.num_inducing() as f64;
    Ok(0.5 * (trace + quad - m) + log_det_k_half - state.log_det_half())
}

fn not_pd() -> Error {
    Error::NotPositiveDefinite {
        attempts: 1,
        last_jitter: 0.0,
    }
}
