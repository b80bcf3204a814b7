//! Evidence-lower-bound evaluation with analytic gradients.
//!
//! One pass computes, for a minibatch `B` of a dataset of size `n`,
//!
//! `(n/|B|) Σ_{i in B} term_i(mu_i, v_i, theta) - KL[q(u) || p(u)]`
//!
//! where `(mu_i, v_i)` are the latent marginals induced by the variational
//! state and `term_i` depends on the noise model:
//!
//! * Gaussian / Student-t / Laplace: the expected log-likelihood (closed form
//!   for Gaussian, Gauss-Hermite otherwise);
//! * contaminated normal: the responsibility-augmented bound
//!   `a_i [ln pi + E ln N(y|f, tau s2)] + (1-a_i)[ln(1-pi) + E ln N(y|f, s2)] + H(a_i)`
//!   with the responsibilities `a_i` held fixed during differentiation, as
//!   the alternating trainer requires.
//!
//! Gradients are accumulated in reverse through the sparse-GP algebra:
//! adjoints of the latent means/variances propagate to the variational mean,
//! the covariance factor, both kernel matrices, and from there to the log
//! kernel hyperparameters and (optionally) the inducing inputs.

use nalgebra::{DMatrix, DVector};
use statrs::function::gamma::{digamma, ln_gamma};

use crate::error::{Error, Result};
use crate::kernels::KernelGrad;
use crate::likelihoods::{bernoulli_entropy, cn_responsibility, CnParams, LatentMarginal, NoiseModel};
use crate::numerics::{cholesky_psd, GaussHermite, JitterPolicy};
use crate::variational::VAR_FLOOR;

use super::ModelState;

/// Which gradient blocks to compute.
#[derive(Debug, Clone, Copy, Default)]
pub struct GradRequest {
    /// Variational mean and covariance factor.
    pub phi: bool,
    /// Unconstrained noise parameters.
    pub theta: bool,
    /// Log kernel hyperparameters.
    pub kernel: bool,
    /// Inducing inputs.
    pub inducing: bool,
}

/// Gradient blocks of the batch bound, in the parameterizations the trainer
/// steps in.
#[derive(Debug, Clone)]
pub struct ElboGradients {
    /// d/d variational mean.
    pub phi_mean: DVector<f64>,
    /// d/d raw covariance factor entries (lower triangle; diagonal in log
    /// parameterization).
    pub phi_cov_raw: DMatrix<f64>,
    /// d/d inducing inputs, when requested.
    pub phi_inducing: Option<DMatrix<f64>>,
    /// d/d unconstrained noise parameters.
    pub theta: Vec<f64>,
    /// `[d/d ln output_scale, d/d ln ell_1, ...]`.
    pub kernel_log: Vec<f64>,
}

/// Result of one bound evaluation.
#[derive(Debug)]
pub struct ElboEvaluation {
    pub value: f64,
    /// CN responsibilities actually used for the batch (recomputed here
    /// unless supplied by the caller); `None` for other noise models.
    pub responsibilities: Option<Vec<f64>>,
    pub grads: Option<ElboGradients>,
    /// Jitter applied to factorize the inducing covariance.
    pub jitter: f64,
}

pub(crate) use ElboEvaluation as EvalOutput;

/// Evaluate the bound (and optionally its gradients) on a batch.
///
/// `fixed_resp` pins the CN responsibilities; when `None` they are recomputed
/// from the current state. Gradients treat the responsibilities as constants.
pub(crate) fn evaluate(
    model: &ModelState,
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    batch: &[usize],
    n_total: usize,
    gh: &GaussHermite,
    fixed_resp: Option<&[f64]>,
    req: Option<GradRequest>,
) -> Result<EvalOutput> {
    let spec = &model.kernel;
    let state = &model.variational;
    let b = batch.len();
    let p = spec.input_dim();
    let m = state.num_inducing();
    if b == 0 {
        return Err(Error::InvalidParameter("empty batch".to_string()));
    }
    if x.ncols() != p || state.input_dim() != p {
        return Err(Error::DimensionMismatch(format!(
            "inputs have {} columns, kernel dimension {}, inducing dimension {}",
            x.ncols(),
            p,
            state.input_dim()
        )));
    }
    if y.len() != x.nrows() {
        return Err(Error::DimensionMismatch(format!(
            "{} targets for {} inputs",
            y.len(),
            x.nrows()
        )));
    }
    if batch.iter().any(|&i| i >= x.nrows()) {
        return Err(Error::InvalidParameter("batch index out of range".to_string()));
    }
    if n_total == 0 {
        return Err(Error::InvalidParameter("n_total must be positive".to_string()));
    }
    if let Some(r) = fixed_resp {
        if r.len() != b {
            return Err(Error::DimensionMismatch(format!(
                "{} responsibilities for a batch of {b}",
                r.len()
            )));
        }
        if !matches!(model.noise, NoiseModel::Cn(_)) {
            return Err(Error::InvalidParameter(
                "responsibilities are only meaningful for the CN model".to_string(),
            ));
        }
    }

    let mut xb = DMatrix::<f64>::zeros(b, p);
    let mut yb = Vec::with_capacity(b);
    for (r, &i) in batch.iter().enumerate() {
        for c in 0..p {
            xb[(r, c)] = x[(i, c)];
        }
        yb.push(y[i]);
    }

    let z = state.inducing_inputs();
    let kmm = spec.matrix(z, z)?;
    let factor = cholesky_psd(&kmm, &JitterPolicy::default())?;
    let lk = &factor.l;
    let kbm = spec.matrix(&xb, z)?;

    // V = L^{-1} K_mb, A = K_bm K_mm^{-1} via two triangular solves.
    let v = lk
        .solve_lower_triangular(&kbm.transpose())
        .ok_or_else(not_pd)?;
    let w = lk.tr_solve_lower_triangular(&v).ok_or_else(not_pd)?;
    let a = w.transpose();
    let l_s = state.cov_factor();
    let mu_vec = &a * state.mean();
    let t1 = &a * &l_s;

    let mut mu = vec![0.0; b];
    let mut var = vec![0.0; b];
    let mut clamped = vec![false; b];
    for i in 0..b {
        let s_quad: f64 = t1.row(i).iter().map(|t| t * t).sum();
        let k_quad: f64 = v.column(i).iter().map(|t| t * t).sum();
        let raw = spec.output_scale + s_quad - k_quad;
        mu[i] = mu_vec[i];
        if raw < VAR_FLOOR {
            var[i] = VAR_FLOOR;
            clamped[i] = true;
        } else {
            var[i] = raw;
        }
    }

    let resp: Option<Vec<f64>> = match (&model.noise, fixed_resp) {
        (NoiseModel::Cn(_), Some(r)) => Some(r.to_vec()),
        (NoiseModel::Cn(params), None) => Some(
            (0..b)
                .map(|i| {
                    cn_responsibility(
                        yb[i],
                        &LatentMarginal {
                            mean: mu[i],
                            var: var[i],
                        },
                        params,
                    )
                })
                .collect(),
        ),
        _ => None,
    };

    let want = req.is_some();
    let ctx = LikelihoodCtx::new(&model.noise);
    let n_theta = ctx.theta_dim();
    let mut data_value = 0.0;
    let mut dmu = vec![0.0; b];
    let mut dvar = vec![0.0; b];
    let mut dtheta = vec![0.0; n_theta];
    for i in 0..b {
        let pt = ctx.point_term(
            yb[i],
            mu[i],
            var[i],
            resp.as_ref().map(|r| r[i]),
            gh,
            want,
        )?;
        data_value += pt.value;
        if want {
            dmu[i] = pt.dmu;
            dvar[i] = if clamped[i] { 0.0 } else { pt.dvar };
            for (acc, g) in dtheta.iter_mut().zip(&pt.dtheta[..n_theta]) {
                *acc += g;
            }
        }
    }
    let scale = n_total as f64 / b as f64;

    // KL[q(u) || N(0, K_mm)] through the factor of the (jittered) K_mm.
    let g_mat = lk.solve_lower_triangular(&l_s).ok_or_else(not_pd)?;
    let u1 = lk
        .solve_lower_triangular(state.mean())
        .ok_or_else(not_pd)?;
    let trace: f64 = g_mat.iter().map(|t| t * t).sum();
    let quad: f64 = u1.iter().map(|t| t * t).sum();
    let logdet_k_half: f64 = (0..m).map(|i| lk[(i, i)].ln()).sum();
    let kl = 0.5 * (trace + quad - m as f64) + logdet_k_half - state.log_det_half();
    let value = scale * data_value - kl;

    let grads = match req {
        None => None,
        Some(req) => {
            let gmu = DVector::from_iterator(b, dmu.iter().map(|g| scale * g));
            let gv: Vec<f64> = dvar.iter().map(|g| scale * g).collect();
            let c_vec = lk.tr_solve_lower_triangular(&u1).ok_or_else(not_pd)?;
            let pls = lk.tr_solve_lower_triangular(&g_mat).ok_or_else(not_pd)?;

            let mut out = ElboGradients {
                phi_mean: DVector::zeros(m),
                phi_cov_raw: DMatrix::zeros(m, m),
                phi_inducing: None,
                theta: Vec::new(),
                kernel_log: Vec::new(),
            };
            if req.theta {
                out.theta = dtheta.iter().map(|g| scale * g).collect();
            }
            if req.phi {
                out.phi_mean = a.transpose() * &gmu - &c_vec;
                // S path: 2 A' diag(gv) (A L_S); KL path: -K^{-1} L_S plus the
                // log-determinant's 1/diag.
                let mut d_t1 = t1.clone();
                for i in 0..b {
                    for j in 0..m {
                        d_t1[(i, j)] *= gv[i];
                    }
                }
                let mut lbar = a.transpose() * d_t1 * 2.0 - &pls;
                for i in 0..m {
                    lbar[(i, i)] += 1.0 / l_s[(i, i)];
                }
                for i in 0..m {
                    // Chain through the log-diagonal storage.
                    out.phi_cov_raw[(i, i)] = lbar[(i, i)] * l_s[(i, i)];
                    for j in 0..i {
                        out.phi_cov_raw[(i, j)] = lbar[(i, j)];
                    }
                }
            }
            if req.kernel || req.inducing {
                // abar = d value / d A = gmu m' + 2 diag(gv) (T1 L_S' - K_bm),
                // using A K_mm = K_bm exactly (A is built from the jittered
                // matrix).
                let mut abar = &t1 * l_s.transpose() - &kbm;
                for i in 0..b {
                    for j in 0..m {
                        abar[(i, j)] *= 2.0 * gv[i];
                    }
                }
                abar += &gmu * state.mean().transpose();

                // kbar_bm = abar K_mm^{-1}
                let h = lk
                    .solve_lower_triangular(&abar.transpose())
                    .ok_or_else(not_pd)?;
                let h2 = lk.tr_solve_lower_triangular(&h).ok_or_else(not_pd)?;
                let kbar_bm = h2.transpose();

                // kbar_mm: the -a_i' K_mm a_i variance term, the chain through
                // A = K_bm K_mm^{-1}, and the KL terms
                // +(K^{-1} S K^{-1} + cc')/2 - K^{-1}/2.
                let li = lk
                    .solve_lower_triangular(&DMatrix::<f64>::identity(m, m))
                    .ok_or_else(not_pd)?;
                let p_inv = li.transpose() * &li;
                let mut kbar_mm = &pls * pls.transpose() * 0.5;
                kbar_mm += &c_vec * c_vec.transpose() * 0.5;
                kbar_mm -= p_inv * 0.5;
                let mut ga = a.clone();
                for i in 0..b {
                    for j in 0..m {
                        ga[(i, j)] *= gv[i];
                    }
                }
                kbar_mm -= a.transpose() * ga;
                kbar_mm -= a.transpose() * &kbar_bm;
                let kbar_mm = (&kbar_mm + kbar_mm.transpose()) * 0.5;

                let mut kgrad = KernelGrad::zeros(p);
                let mut dz = if req.inducing {
                    Some(DMatrix::<f64>::zeros(m, p))
                } else {
                    None
                };
                // Symmetrized adjoint + ordered-pair loop accumulates the
                // full dZ contribution of K_mm through the first argument.
                for r in 0..m {
                    for c in 0..m {
                        let wgt = kbar_mm[(r, c)];
                        if wgt != 0.0 {
                            spec.entry_adjoint(
                                z,
                                r,
                                z,
                                c,
                                wgt,
                                &mut kgrad,
                                dz.as_mut().map(|d| (d, r)),
                                None,
                            );
                        }
                    }
                }
                for i in 0..b {
                    for c in 0..m {
                        let wgt = kbar_bm[(i, c)];
                        if wgt != 0.0 {
                            spec.entry_adjoint(
                                &xb,
                                i,
                                z,
                                c,
                                wgt,
                                &mut kgrad,
                                None,
                                dz.as_mut().map(|d| (d, c)),
                            );
                        }
                    }
                }
                // Diagonal k(x_i, x_i) = output_scale contributes only to the
                // output-scale gradient.
                let gv_sum: f64 = gv.iter().sum();
                kgrad.d_log_output += gv_sum * spec.output_scale;

                if req.kernel {
                    let mut klog = Vec::with_capacity(1 + p);
                    klog.push(kgrad.d_log_output);
                    klog.extend(kgrad.d_log_length.iter());
                    out.kernel_log = klog;
                }
                out.phi_inducing = dz;
            }
            Some(out)
        }
    };

    Ok(EvalOutput {
        value,
        responsibilities: resp,
        grads,
        jitter: factor.jitter,
    })
}

struct PointTerm {
    value: f64,
    dmu: f64,
    dvar: f64,
    dtheta: [f64; 3],
}

/// Per-batch precomputed constants of the noise model.
enum LikelihoodCtx {
    Gaussian {
        s2: f64,
    },
    Cn {
        params: CnParams,
        ln_pi: f64,
        ln_1m_pi: f64,
    },
    StudentT {
        dof: f64,
        s2: f64,
        norm: f64,
        dnorm_dnu: f64,
        dnu_draw: f64,
    },
    Laplace {
        b: f64,
    },
}

impl LikelihoodCtx {
    fn new(noise: &NoiseModel) -> Self {
        match *noise {
            NoiseModel::Gaussian { noise_var } => Self::Gaussian { s2: noise_var },
            NoiseModel::Cn(params) => Self::Cn {
                params,
                ln_pi: params.outlier_prob.ln(),
                ln_1m_pi: (1.0 - params.outlier_prob).ln(),
            },
            NoiseModel::StudentT { dof, scale } => Self::StudentT {
                dof,
                s2: scale * scale,
                norm: ln_gamma((dof + 1.0) / 2.0)
                    - ln_gamma(dof / 2.0)
                    - 0.5 * (dof * std::f64::consts::PI).ln()
                    - scale.ln(),
                dnorm_dnu: 0.5 * digamma((dof + 1.0) / 2.0)
                    - 0.5 * digamma(dof / 2.0)
                    - 0.5 / dof,
                // dof = 2 + softplus(raw)  =>  d dof / d raw = 1 - e^{-(dof-2)}
                dnu_draw: 1.0 - (-(dof - 2.0)).exp(),
            },
            NoiseModel::Laplace { scale } => Self::Laplace { b: scale },
        }
    }

    fn theta_dim(&self) -> usize {
        match self {
            Self::Gaussian { .. } | Self::Laplace { .. } => 1,
            Self::StudentT { .. } => 2,
            Self::Cn { .. } => 3,
        }
    }

    /// One data term and its partials with respect to the latent marginal and
    /// the unconstrained noise parameters.
    fn point_term(
        &self,
        y: f64,
        mu: f64,
        var: f64,
        resp: Option<f64>,
        gh: &GaussHermite,
        want_grads: bool,
    ) -> Result<PointTerm> {
        const LN_2PI: f64 = 1.8378770664093453;
        match *self {
            Self::Gaussian { s2 } => {
                let d = (y - mu) * (y - mu) + var;
                let value = -0.5 * ((s2.ln() + LN_2PI) + d / s2);
                let mut pt = PointTerm {
                    value,
                    dmu: 0.0,
                    dvar: 0.0,
                    dtheta: [0.0; 3],
                };
                if want_grads {
                    pt.dmu = (y - mu) / s2;
                    pt.dvar = -0.5 / s2;
                    pt.dtheta[0] = -0.5 + d / (2.0 * s2);
                }
                Ok(pt)
            }
            Self::Cn {
                params,
                ln_pi,
                ln_1m_pi,
            } => {
                let alpha = resp.expect("CN point term requires a responsibility");
                let s2 = params.noise_var;
                let ts2 = params.inflation * s2;
                let d = (y - mu) * (y - mu) + var;
                let g_out = -0.5 * ((ts2.ln() + LN_2PI) + d / ts2);
                let g_in = -0.5 * ((s2.ln() + LN_2PI) + d / s2);
                let value = alpha * (ln_pi + g_out)
                    + (1.0 - alpha) * (ln_1m_pi + g_in)
                    + bernoulli_entropy(alpha);
                let mut pt = PointTerm {
                    value,
                    dmu: 0.0,
                    dvar: 0.0,
                    dtheta: [0.0; 3],
                };
                if want_grads {
                    let wgt = alpha / ts2 + (1.0 - alpha) / s2;
                    pt.dmu = (y - mu) * wgt;
                    pt.dvar = -0.5 * wgt;
                    let d_out = -0.5 + d / (2.0 * ts2);
                    let d_in = -0.5 + d / (2.0 * s2);
                    pt.dtheta[0] = alpha - params.outlier_prob; // d/d logit(pi)
                    pt.dtheta[1] = alpha * d_out; // d/d ln tau
                    pt.dtheta[2] = alpha * d_out + (1.0 - alpha) * d_in; // d/d ln s2
                }
                Ok(pt)
            }
            Self::StudentT {
                dof,
                s2,
                norm,
                dnorm_dnu,
                dnu_draw,
            } => {
                let ghq = |f: f64, pt: &mut PointTerm, w: f64, dfdvar: f64| {
                    let r = y - f;
                    let u = r * r / (dof * s2);
                    let log1pu = u.ln_1p();
                    let val = norm - (dof + 1.0) / 2.0 * log1pu;
                    pt.value += w * val;
                    if want_grads {
                        let dg_df = (dof + 1.0) * r / (dof * s2 * (1.0 + u));
                        pt.dmu += w * dg_df;
                        pt.dvar += w * dg_df * dfdvar;
                        let dg_dnu =
                            dnorm_dnu - 0.5 * log1pu + (dof + 1.0) * u / (2.0 * dof * (1.0 + u));
                        let dg_dlns = -1.0 + (dof + 1.0) * u / (1.0 + u);
                        pt.dtheta[0] += w * dg_dnu * dnu_draw;
                        pt.dtheta[1] += w * dg_dlns;
                    }
                };
                quadrature_point(mu, var, gh, ghq)
            }
            Self::Laplace { b } => {
                let ghq = |f: f64, pt: &mut PointTerm, w: f64, dfdvar: f64| {
                    let r = y - f;
                    let val = -(2.0 * b).ln() - r.abs() / b;
                    pt.value += w * val;
                    if want_grads {
                        let dg_df = r.signum() / b;
                        pt.dmu += w * dg_df;
                        pt.dvar += w * dg_df * dfdvar;
                        pt.dtheta[0] += w * (-1.0 + r.abs() / b);
                    }
                };
                quadrature_point(mu, var, gh, ghq)
            }
        }
    }
}

/// Shared Gauss-Hermite accumulation: calls `body(f, pt, weight, df/dvar)` at
/// each transformed node and normalizes by sqrt(pi).
fn quadrature_point(
    mu: f64,
    var: f64,
    gh: &GaussHermite,
    mut body: impl FnMut(f64, &mut PointTerm, f64, f64),
) -> Result<PointTerm> {
    let mut pt = PointTerm {
        value: 0.0,
        dmu: 0.0,
        dvar: 0.0,
        dtheta: [0.0; 3],
    };
    let scale = (2.0 * var).sqrt();
    for (idx, (&t, &w)) in gh.nodes().iter().zip(gh.weights()).enumerate() {
        let f = mu + scale * t;
        let dfdvar = t / scale; // d(mu + sqrt(2 var) t)/d var = t / sqrt(2 var)
        body(f, &mut pt, w, dfdvar);
        if !pt.value.is_finite() {
            return Err(Error::Evaluation { node: idx });
        }
    }
    let inv_sqrt_pi = 1.0 / std::f64::consts::PI.sqrt();
    pt.value *= inv_sqrt_pi;
    pt.dmu *= inv_sqrt_pi;
    pt.dvar *= inv_sqrt_pi;
    for g in &mut pt.dtheta {
        *g *= inv_sqrt_pi;
    }
    Ok(pt)
}

fn not_pd() -> Error {
    Error::NotPositiveDefinite {
        attempts: 1,
        last_jitter: 0.0,
    }
}
