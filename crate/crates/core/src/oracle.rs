//! Exact dense GP regression with Gaussian noise.
//!
//! Ground-truth reference for small-instance equivalence tests: posterior
//! means/variances and the exact log marginal likelihood, both through a
//! cached factor of `K_nn + s2 I`. The O(n^3) cost is guarded by a hard size
//! cap; this module exists for verification, not production fits.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::kernels::KernelSpec;
use crate::numerics::{cholesky_psd, JitterPolicy, PsdFactor};

pub const DEFAULT_SIZE_CAP: usize = 2000;

pub struct ExactGpFit {
    x_train: DMatrix<f64>,
    spec: KernelSpec,
    noise_var: f64,
    factor: PsdFactor,
    /// `(K_nn + s2 I)^{-1} y`
    alpha: DVector<f64>,
    y_train: DVector<f64>,
}

impl ExactGpFit {
    pub fn fit(
        x_train: DMatrix<f64>,
        y_train: DVector<f64>,
        spec: KernelSpec,
        noise_var: f64,
        size_cap: Option<usize>,
    ) -> Result<Self> {
        let cap = size_cap.unwrap_or(DEFAULT_SIZE_CAP);
        let n = x_train.nrows();
        if n > cap {
            return Err(Error::SizeCapExceeded { n, cap });
        }
        if y_train.len() != n {
            return Err(Error::DimensionMismatch(format!(
                "{} targets for {} inputs",
                y_train.len(),
                n
            )));
        }
        if !(noise_var > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "noise_var must be positive, got {noise_var}"
            )));
        }
        let mut knn = spec.matrix(&x_train, &x_train)?;
        for i in 0..n {
            knn[(i, i)] += noise_var;
        }
        let factor = cholesky_psd(&knn, &JitterPolicy::default())?;
        let u = factor
            .l
            .solve_lower_triangular(&y_train)
            .ok_or_else(not_pd)?;
        let alpha = factor.l.tr_solve_lower_triangular(&u).ok_or_else(not_pd)?;
        Ok(Self {
            x_train,
            spec,
            noise_var,
            factor,
            alpha,
            y_train,
        })
    }

    pub fn noise_var(&self) -> f64 {
        self.noise_var
    }

    /// Posterior mean and latent variance at each row of `x_star`.
    ///
    /// Mean `k' (K + s2 I)^{-1} y`; latent variance
    /// `k(x,x) - k' (K + s2 I)^{-1} k`. Add [`Self::noise_var`] for the
    /// predictive variance.
    pub fn posterior(&self, x_star: &DMatrix<f64>) -> Result<(Vec<f64>, Vec<f64>)> {
        let k_star = self.spec.matrix(&self.x_train, x_star)?; // n x k
        let v = self
            .factor
            .l
            .solve_lower_triangular(&k_star)
            .ok_or_else(not_pd)?;
        let k = x_star.nrows();
        let mut means = Vec::with_capacity(k);
        let mut vars = Vec::with_capacity(k);
        for j in 0..k {
            means.push(k_star.column(j).dot(&self.alpha));
            let reduction: f64 = v.column(j).iter().map(|t| t * t).sum();
            vars.push(self.spec.output_scale - reduction);
        }
        Ok((means, vars))
    }

    /// Exact log marginal likelihood `ln N(y | 0, K_nn + s2 I)`.
    pub fn log_marginal(&self) -> f64 {
        let n = self.y_train.len() as f64;
        let log_det_half: f64 = (0..self.factor.l.nrows())
            .map(|i| self.factor.l[(i, i)].ln())
            .sum();
        -0.5 * self.y_train.dot(&self.alpha)
            - log_det_half
            - 0.5 * n * (2.0 * std::f64::consts::PI).ln()
    }
}

fn not_pd() -> Error {
    Error::NotPositiveDefinite {
        attempts: 1,
        last_jitter: 0.0,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::KernelFamily;
    use approx::assert_relative_eq;

    fn unit_spec() -> KernelSpec {
        KernelSpec::new(KernelFamily::SeArd, 1.0, vec![1.0]).unwrap()
    }

    #[test]
    fn single_point_posterior_algebra() {
        let x = DMatrix::from_row_slice(1, 1, &[0.0]);
        let y = DVector::from_vec(vec![2.0]);
        let fit = ExactGpFit::fit(x.clone(), y, unit_spec(), 1.0, None).unwrap();
        let (means, vars) = fit.posterior(&x).unwrap();
        assert_relative_eq!(means[0], 1.0, epsilon = 1e-12);
        assert_relative_eq!(vars[0], 0.5, epsilon = 1e-12);
        assert_relative_eq!(vars[0] + fit.noise_var(), 1.5, epsilon = 1e-12);
    }

    #[test]
    fn huge_noise_recovers_prior() {
        let x = DMatrix::from_row_slice(3, 1, &[0.0, 1.0, 2.0]);
        let y = DVector::from_vec(vec![1.0, -2.0, 0.5]);
        let fit = ExactGpFit::fit(x.clone(), y, unit_spec(), 1e10, None).unwrap();
        let (means, vars) = fit.posterior(&x).unwrap();
        for (m, v) in means.iter().zip(&vars) {
            assert_relative_eq!(*m, 0.0, epsilon = 1e-8);
            assert_relative_eq!(*v, 1.0, epsilon = 1e-8);
        }
    }

    #[test]
    fn tiny_noise_interpolates() {
        let x = DMatrix::from_row_slice(4, 1, &[0.0, 1.0, 2.3, 3.7]);
        let y = DVector::from_vec(vec![0.3, -0.8, 1.1, 0.4]);
        let fit = ExactGpFit::fit(x.clone(), y.clone(), unit_spec(), 1e-10, None).unwrap();
        let (means, _) = fit.posterior(&x).unwrap();
        for (m, t) in means.iter().zip(y.iter()) {
            assert_relative_eq!(*m, *t, epsilon = 1e-4);
        }
    }

    #[test]
    fn univariate_log_marginal() {
        let x = DMatrix::from_row_slice(1, 1, &[0.0]);
        let y = DVector::from_vec(vec![0.0]);
        let fit = ExactGpFit::fit(x, y, unit_spec(), 1.0, None).unwrap();
        // ln N(0 | 0, 2) = -ln(4 pi) / 2
        assert_relative_eq!(
            fit.log_marginal(),
            -0.5 * (4.0 * std::f64::consts::PI).ln(),
            epsilon = 1e-12
        );
        assert_relative_eq!(fit.log_marginal(), -1.26551, epsilon = 1e-5);
    }

    #[test]
    fn scaling_targets_up_decreases_log_marginal() {
        let x = DMatrix::from_row_slice(5, 1, &[0.0, 0.9, 1.7, 2.8, 3.6]);
        let y = DVector::from_vec(vec![0.4, -0.2, 0.9, -1.1, 0.3]);
        let base = ExactGpFit::fit(x.clone(), y.clone(), unit_spec(), 0.5, None)
            .unwrap()
            .log_marginal();
        let scaled = ExactGpFit::fit(x, y * 10.0, unit_spec(), 0.5, None)
            .unwrap()
            .log_marginal();
        assert!(scaled < base);
    }

    #[test]
    fn size_cap_is_enforced() {
        let x = DMatrix::from_row_slice(3, 1, &[0.0, 1.0, 2.0]);
        let y = DVector::from_vec(vec![0.0, 0.0, 0.0]);
        assert!(matches!(
            ExactGpFit::fit(x, y, unit_spec(), 1.0, Some(2)),
            Err(Error::SizeCapExceeded { n: 3, cap: 2 })
        ));
    }
}
