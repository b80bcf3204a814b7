//! Stochastic alternating trainer.
//!
//! Each epoch shuffles the data and walks minibatches. For the CN model a
//! batch is processed in two moves: a forward step refreshes the
//! responsibilities and takes one Adam ascent step on the variational
//! parameters, then a backward step moves the hyperparameters — either a
//! per-batch Adam step on the unconstrained noise and kernel parameters, or
//! (default) a kernel-only step per batch with closed-form mixture updates
//! once per epoch over the full dataset. Other noise models take a joint
//! Adam step on everything. Learning rates decay exponentially per epoch.
//!
//! `fit` runs several independently seeded restarts and keeps the run with
//! the largest final full-data bound.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::kernels::{KernelFamily, KernelSpec};
use crate::likelihoods::{cn_responsibility, CnParams, NoiseFamily, NoiseModel};
use crate::metrics;
use crate::numerics::{cholesky_psd, gauss_hermite, GaussHermite, JitterPolicy};
use crate::rng::{self, streams};
use crate::variational::{latent_marginals, VariationalState};

use super::elbo::{evaluate, ElboGradients, GradRequest};
use super::{predict, ModelState, PredictConfig};

/// Training configuration. `lr_decay` multiplies both learning rates once per
/// epoch; `closed_form_theta` selects the closed-form CN updates over
/// per-batch gradient steps; `early_stop_patience` of 0 disables early
/// stopping even when a validation set is supplied.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub inducing_count: usize,
    pub lr_phi_init: f64,
    pub lr_theta_init: f64,
    pub lr_decay: f64,
    pub restarts: usize,
    pub seed: u64,
    pub early_stop_patience: usize,
    pub closed_form_theta: bool,
    pub gh_nodes: usize,
    pub mc_samples: usize,
    pub optimize_inducing: bool,
    pub kernel_family: KernelFamily,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 256,
            inducing_count: 500,
            lr_phi_init: 0.1,
            lr_theta_init: 0.1,
            lr_decay: 0.9,
            restarts: 5,
            seed: 0,
            early_stop_patience: 5,
            closed_form_theta: true,
            gh_nodes: 20,
            mc_samples: 1000,
            optimize_inducing: true,
            kernel_family: KernelFamily::SeArd,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, n: usize) -> Result<()> {
        if self.epochs == 0 || self.restarts == 0 || self.batch_size == 0 {
            return Err(Error::InvalidParameter(
                "epochs, restarts, and batch_size must be positive".to_string(),
            ));
        }
        if self.batch_size > n {
            return Err(Error::InvalidParameter(format!(
                "batch_size {} exceeds dataset size {n}",
                self.batch_size
            )));
        }
        if n < self.inducing_count {
            return Err(Error::DataTooSmall(format!(
                "need at least {} rows to place inducing points, got {n}",
                self.inducing_count
            )));
        }
        if !(self.lr_phi_init > 0.0 && self.lr_theta_init > 0.0) {
            return Err(Error::InvalidParameter(
                "learning rates must be positive".to_string(),
            ));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(Error::InvalidParameter(format!(
                "lr_decay must be in (0,1], got {}",
                self.lr_decay
            )));
        }
        if self.mc_samples == 0 {
            return Err(Error::InvalidParameter(
                "mc_samples must be positive".to_string(),
            ));
        }
        Ok(())
    }
}

/// Adam with bias correction; `ascend` moves parameters uphill.
struct Adam {
    m1: Vec<f64>,
    m2: Vec<f64>,
    t: u64,
}

impl Adam {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(dim: usize) -> Self {
        Self {
            m1: vec![0.0; dim],
            m2: vec![0.0; dim],
            t: 0,
        }
    }

    fn ascend(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        debug_assert_eq!(params.len(), grad.len());
        debug_assert_eq!(params.len(), self.m1.len());
        self.t += 1;
        let b1c = 1.0 - Self::BETA1.powi(self.t as i32);
        let b2c = 1.0 - Self::BETA2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grad[i];
            self.m1[i] = Self::BETA1 * self.m1[i] + (1.0 - Self::BETA1) * g;
            self.m2[i] = Self::BETA2 * self.m2[i] + (1.0 - Self::BETA2) * g * g;
            if lr != 0.0 {
                let mhat = self.m1[i] / b1c;
                let vhat = self.m2[i] / b2c;
                params[i] += lr * mhat / (vhat.sqrt() + Self::EPS);
            }
        }
    }
}

fn phi_dim(state: &VariationalState, with_z: bool) -> usize {
    let m = state.num_inducing();
    let p = state.input_dim();
    m + m * (m + 1) / 2 + if with_z { m * p } else { 0 }
}

fn pack_phi(state: &VariationalState, with_z: bool) -> Vec<f64> {
    let m = state.num_inducing();
    let p = state.input_dim();
    let mut v = Vec::with_capacity(phi_dim(state, with_z));
    v.extend(state.mean().iter());
    let raw = state.cov_raw();
    for i in 0..m {
        for j in 0..=i {
            v.push(raw[(i, j)]);
        }
    }
    if with_z {
        let z = state.inducing_inputs();
        for r in 0..m {
            for c in 0..p {
                v.push(z[(r, c)]);
            }
        }
    }
    v
}

fn unpack_phi(state: &mut VariationalState, v: &[f64], with_z: bool) {
    let m = state.num_inducing();
    let p = state.input_dim();
    let (z, mean, raw) = state.parts_mut();
    let mut idx = 0;
    for i in 0..m {
        mean[i] = v[idx];
        idx += 1;
    }
    for i in 0..m {
        for j in 0..=i {
            raw[(i, j)] = v[idx];
            idx += 1;
        }
    }
    if with_z {
        for r in 0..m {
            for c in 0..p {
                z[(r, c)] = v[idx];
                idx += 1;
            }
        }
    }
    debug_assert_eq!(idx, v.len());
}

fn pack_phi_grad(g: &ElboGradients, m: usize, p: usize, with_z: bool) -> Vec<f64> {
    let mut v = Vec::with_capacity(m + m * (m + 1) / 2 + if with_z { m * p } else { 0 });
    v.extend(g.phi_mean.iter());
    for i in 0..m {
        for j in 0..=i {
            v.push(g.phi_cov_raw[(i, j)]);
        }
    }
    if with_z {
        let dz = g
            .phi_inducing
            .as_ref()
            .expect("inducing gradient requested but absent");
        for r in 0..m {
            for c in 0..p {
                v.push(dz[(r, c)]);
            }
        }
    }
    v
}

fn all_finite(v: &[f64]) -> bool {
    v.iter().all(|x| x.is_finite())
}

/// Owns a model plus optimizer state for one training run.
pub struct Trainer<'d> {
    model: ModelState,
    x: &'d DMatrix<f64>,
    y: &'d DVector<f64>,
    gh: GaussHermite,
    adam_phi: Adam,
    adam_theta: Adam,
    adam_kernel: Adam,
    optimize_inducing: bool,
    all_rows: Vec<usize>,
}

impl<'d> Trainer<'d> {
    pub fn new(
        model: ModelState,
        x: &'d DMatrix<f64>,
        y: &'d DVector<f64>,
        gh_nodes: usize,
        optimize_inducing: bool,
    ) -> Result<Self> {
        if x.nrows() != y.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} inputs vs {} targets",
                x.nrows(),
                y.len()
            )));
        }
        let gh = gauss_hermite(gh_nodes)?;
        let n_phi = phi_dim(&model.variational, optimize_inducing);
        let n_theta = model.noise.unconstrained().len();
        let n_kernel = 1 + model.kernel.input_dim();
        Ok(Self {
            model,
            x,
            y,
            gh,
            adam_phi: Adam::new(n_phi),
            adam_theta: Adam::new(n_theta),
            adam_kernel: Adam::new(n_kernel),
            optimize_inducing,
            all_rows: (0..x.nrows()).collect(),
        })
    }

    pub fn model(&self) -> &ModelState {
        &self.model
    }

    pub fn into_model(self) -> ModelState {
        self.model
    }

    /// Forward step: refresh responsibilities at the current state (CN), then
    /// one Adam ascent step on the variational parameters with the
    /// responsibilities held fixed. With `lr = 0` the state is untouched but
    /// responsibilities are still returned. Aborts without any state change
    /// when a gradient is non-finite.
    pub fn forward_step(&mut self, batch: &[usize], lr: f64) -> Result<Option<Vec<f64>>> {
        let out = evaluate(
            &self.model,
            self.x,
            self.y,
            batch,
            self.x.nrows(),
            &self.gh,
            None,
            Some(GradRequest {
                phi: true,
                inducing: self.optimize_inducing,
                ..GradRequest::default()
            }),
        )?;
        let g = out.grads.as_ref().expect("gradients requested");
        let m = self.model.variational.num_inducing();
        let p = self.model.variational.input_dim();
        let grad = pack_phi_grad(g, m, p, self.optimize_inducing);
        if !all_finite(&grad) {
            return Err(Error::AbortStep(format!(
                "non-finite variational gradient on a batch of {}",
                batch.len()
            )));
        }
        let mut params = pack_phi(&self.model.variational, self.optimize_inducing);
        self.adam_phi.ascend(&mut params, &grad, lr);
        unpack_phi(&mut self.model.variational, &params, self.optimize_inducing);
        Ok(out.responsibilities)
    }

    /// Backward step, gradient flavor: one Adam ascent step on the
    /// unconstrained noise parameters and log kernel hyperparameters, with
    /// responsibilities recomputed at the current state and held fixed.
    pub fn backward_step_sgd(&mut self, batch: &[usize], lr: f64) -> Result<()> {
        let out = evaluate(
            &self.model,
            self.x,
            self.y,
            batch,
            self.x.nrows(),
            &self.gh,
            None,
            Some(GradRequest {
                theta: true,
                kernel: true,
                ..GradRequest::default()
            }),
        )?;
        let g = out.grads.as_ref().expect("gradients requested");
        if !all_finite(&g.theta) || !all_finite(&g.kernel_log) {
            return Err(Error::AbortStep(format!(
                "non-finite hyperparameter gradient on a batch of {}",
                batch.len()
            )));
        }
        let mut theta = self.model.noise.unconstrained();
        self.adam_theta.ascend(&mut theta, &g.theta, lr);
        self.model.noise.set_unconstrained(&theta);
        let mut klog = self.model.kernel.log_params();
        self.adam_kernel.ascend(&mut klog, &g.kernel_log, lr);
        self.model.kernel.set_log_params(&klog);
        Ok(())
    }

    /// Kernel-only Adam step (used per batch when the noise parameters are
    /// updated in closed form).
    pub fn kernel_step(&mut self, batch: &[usize], lr: f64) -> Result<()> {
        let out = evaluate(
            &self.model,
            self.x,
            self.y,
            batch,
            self.x.nrows(),
            &self.gh,
            None,
            Some(GradRequest {
                kernel: true,
                ..GradRequest::default()
            }),
        )?;
        let g = out.grads.as_ref().expect("gradients requested");
        if !all_finite(&g.kernel_log) {
            return Err(Error::AbortStep(format!(
                "non-finite kernel gradient on a batch of {}",
                batch.len()
            )));
        }
        let mut klog = self.model.kernel.log_params();
        self.adam_kernel.ascend(&mut klog, &g.kernel_log, lr);
        self.model.kernel.set_log_params(&klog);
        Ok(())
    }

    /// Joint step for non-CN models: Adam ascent on variational, noise, and
    /// kernel parameters from one gradient evaluation.
    pub fn joint_step(&mut self, batch: &[usize], lr_phi: f64, lr_theta: f64) -> Result<()> {
        let out = evaluate(
            &self.model,
            self.x,
            self.y,
            batch,
            self.x.nrows(),
            &self.gh,
            None,
            Some(GradRequest {
                phi: true,
                theta: true,
                kernel: true,
                inducing: self.optimize_inducing,
            }),
        )?;
        let g = out.grads.as_ref().expect("gradients requested");
        let m = self.model.variational.num_inducing();
        let p = self.model.variational.input_dim();
        let phi_grad = pack_phi_grad(g, m, p, self.optimize_inducing);
        if !all_finite(&phi_grad) || !all_finite(&g.theta) || !all_finite(&g.kernel_log) {
            return Err(Error::AbortStep(format!(
                "non-finite gradient on a batch of {}",
                batch.len()
            )));
        }
        let mut phi = pack_phi(&self.model.variational, self.optimize_inducing);
        self.adam_phi.ascend(&mut phi, &phi_grad, lr_phi);
        unpack_phi(&mut self.model.variational, &phi, self.optimize_inducing);
        let mut theta = self.model.noise.unconstrained();
        self.adam_theta.ascend(&mut theta, &g.theta, lr_theta);
        self.model.noise.set_unconstrained(&theta);
        let mut klog = self.model.kernel.log_params();
        self.adam_kernel.ascend(&mut klog, &g.kernel_log, lr_theta);
        self.model.kernel.set_log_params(&klog);
        Ok(())
    }

    /// Backward step, closed-form flavor: with responsibilities `a_i` and
    /// expected squared residuals `D_i` over the FULL dataset at the current
    /// state,
    ///
    /// `pi <- mean(a)`,
    /// `s2 <- mean[(1 + (1/tau_old - 1) a_i) D_i]`,
    /// `tau <- sum(a_i D_i) / (s2_new * sum(a))`,
    ///
    /// in exactly that order. A vanishing responsibility mass keeps `tau`
    /// unchanged and updates only `pi` and `s2`.
    pub fn backward_step_closed_form(&mut self) -> Result<CnParams> {
        let NoiseModel::Cn(old) = self.model.noise else {
            return Err(Error::InvalidParameter(
                "closed-form updates require the CN noise model".to_string(),
            ));
        };
        let marginals = latent_marginals(&self.model.variational, &self.model.kernel, self.x)?;
        let n = self.x.nrows();
        let mut sum_a = 0.0;
        let mut sum_ad = 0.0;
        let mut sum_weighted = 0.0;
        let inv_tau_m1 = 1.0 / old.inflation - 1.0;
        for i in 0..n {
            let a = cn_responsibility(self.y[i], &marginals[i], &old);
            let r = self.y[i] - marginals[i].mean;
            let d = r * r + marginals[i].var;
            sum_a += a;
            sum_ad += a * d;
            sum_weighted += (1.0 + inv_tau_m1 * a) * d;
        }
        let nf = n as f64;
        // Stability floor: the estimate itself may hit 0 or 1 exactly.
        let pi_new = (sum_a / nf).clamp(1e-10, 1.0 - 1e-10);
        let s2_new = sum_weighted / nf;
        let tau_new = if sum_a < 1e-12 {
            old.inflation
        } else {
            sum_ad / (s2_new * sum_a)
        };
        let params = CnParams {
            outlier_prob: pi_new,
            inflation: tau_new,
            noise_var: s2_new,
        };
        self.model.noise = NoiseModel::Cn(params);
        Ok(params)
    }

    /// Full-data bound at the current state.
    pub fn full_elbo(&self) -> Result<f64> {
        Ok(evaluate(
            &self.model,
            self.x,
            self.y,
            &self.all_rows,
            self.x.nrows(),
            &self.gh,
            None,
            None,
        )?
        .value)
    }
}

#[derive(Debug, Clone)]
pub struct EpochRecord {
    /// 0 is the initial state; training epochs start at 1.
    pub epoch: usize,
    /// Full-data bound after this epoch.
    pub elbo: f64,
    /// Noise parameters after this epoch (pre-canonicalization).
    pub noise: NoiseModel,
    pub val_nlpd: Option<f64>,
}

#[derive(Debug, Clone, Default)]
pub struct TrainTrace {
    pub epochs: Vec<EpochRecord>,
}

#[derive(Debug)]
pub struct FitReport {
    pub model: ModelState,
    pub trace: TrainTrace,
    /// Full-data bound of the selected run at its final state.
    pub final_elbo: f64,
    /// Index of the selected restart.
    pub restart: usize,
}

/// Consecutive aborted steps tolerated before a restart is declared failed.
const MAX_ABORT_STREAK: usize = 5;

/// Fit a model by stochastic alternating maximization with multiple seeded
/// restarts, returning the run with the largest final full-data bound. For
/// the CN model the reported parameters are canonicalized so the inflation
/// factor is at least 1.
pub fn fit(
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    family: NoiseFamily,
    config: &TrainConfig,
    validation: Option<(&DMatrix<f64>, &DVector<f64>)>,
) -> Result<FitReport> {
    let n = x.nrows();
    if y.len() != n {
        return Err(Error::DimensionMismatch(format!(
            "{} targets for {n} inputs"
        , y.len())));
    }
    config.validate(n)?;
    if let Some((xv, yv)) = validation {
        if xv.ncols() != x.ncols() || xv.nrows() != yv.len() {
            return Err(Error::DimensionMismatch(
                "validation set shape mismatch".to_string(),
            ));
        }
    }

    let mut best: Option<FitReport> = None;
    let mut last_failure: Option<Error> = None;
    for restart in 0..config.restarts {
        match run_restart(x, y, family, config, validation, restart) {
            Ok(report) => {
                let better = best
                    .as_ref()
                    .map(|b| report.final_elbo > b.final_elbo)
                    .unwrap_or(true);
                if better {
                    best = Some(report);
                }
            }
            Err(e @ (Error::NonFiniteObjective(_) | Error::AbortStep(_))) => {
                last_failure = Some(e);
            }
            Err(e) => return Err(e),
        }
    }
    let mut report = match best {
        Some(r) => r,
        None => {
            return Err(last_failure.unwrap_or_else(|| {
                Error::NonFiniteObjective("all restarts failed".to_string())
            }))
        }
    };
    if let NoiseModel::Cn(params) = report.model.noise {
        report.model.noise = NoiseModel::Cn(params.canonicalize());
    }
    Ok(report)
}

fn run_restart(
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    family: NoiseFamily,
    config: &TrainConfig,
    validation: Option<(&DMatrix<f64>, &DVector<f64>)>,
    restart: usize,
) -> Result<FitReport> {
    use rand::Rng;
    let n = x.nrows();
    let p = x.ncols();
    let mut init_rng = rng::stream(config.seed, streams::INIT_BASE + restart as u64);

    // Noise initialization. The CN law spans outlier regimes from mild to
    // heavy; the others scale to the sample variance of the targets.
    let y_mean = y.iter().sum::<f64>() / n as f64;
    let var_y = y.iter().map(|t| (t - y_mean) * (t - y_mean)).sum::<f64>() / (n as f64 - 1.0);
    let var_y = var_y.max(1e-12);
    let noise = match family {
        NoiseFamily::Cn => {
            let pi = init_rng.random_range(0.05..0.3);
            let tau = init_rng.random_range(2.0..20.0);
            let s2 = var_y * init_rng.random_range(0.5..1.5);
            NoiseModel::cn(pi, tau, s2)?
        }
        NoiseFamily::Gaussian => {
            let s2 = var_y * init_rng.random_range(0.5..1.5);
            NoiseModel::gaussian(s2)?
        }
        NoiseFamily::StudentT => {
            let target_var = var_y * init_rng.random_range(0.5..1.5);
            let dof = 5.0;
            NoiseModel::student_t(dof, (target_var * (dof - 2.0) / dof).sqrt())?
        }
        NoiseFamily::Laplace => {
            let target_var = var_y * init_rng.random_range(0.5..1.5);
            NoiseModel::laplace((target_var / 2.0).sqrt())?
        }
    };

    // Lengthscales and output scale start at 1; restarts vary the noise and
    // inducing draw, not the kernel start.
    let kernel = KernelSpec::unit(config.kernel_family, p);
    // Inducing inputs: a random sample of the training inputs.
    let chosen = rand::seq::index::sample(&mut init_rng, n, config.inducing_count);
    let mut z = DMatrix::<f64>::zeros(config.inducing_count, p);
    for (r, idx) in chosen.iter().enumerate() {
        for c in 0..p {
            z[(r, c)] = x[(idx, c)];
        }
    }
    // S = K_mm at initialization (zero KL start).
    let kmm = kernel.matrix(&z, &z)?;
    let factor = cholesky_psd(&kmm, &JitterPolicy::default())?;
    let state = VariationalState::from_cov_factor(
        z,
        DVector::zeros(config.inducing_count),
        factor.l,
    )?;
    let model = ModelState {
        kernel,
        noise,
        variational: state,
    };

    let mut trainer = Trainer::new(model, x, y, config.gh_nodes, config.optimize_inducing)?;
    let is_cn = family == NoiseFamily::Cn;

    let initial_elbo = trainer.full_elbo()?;
    if !initial_elbo.is_finite() {
        return Err(Error::NonFiniteObjective(
            "initial bound is non-finite".to_string(),
        ));
    }
    let mut trace = TrainTrace::default();
    trace.epochs.push(EpochRecord {
        epoch: 0,
        elbo: initial_elbo,
        noise: trainer.model().noise,
        val_nlpd: validation
            .map(|(xv, yv)| validation_nlpd(trainer.model(), xv, yv, config))
            .transpose()?,
    });

    let mut shuffle_rng = rng::stream(config.seed, streams::SHUFFLE_BASE + restart as u64);
    let mut order: Vec<usize> = (0..n).collect();
    let mut abort_streak = 0usize;
    let mut best_val = f64::INFINITY;
    let mut stale = 0usize;

    for epoch in 1..=config.epochs {
        let lr_phi = config.lr_phi_init * config.lr_decay.powi(epoch as i32 - 1);
        let lr_theta = config.lr_theta_init * config.lr_decay.powi(epoch as i32 - 1);
        order.shuffle(&mut shuffle_rng);
        for batch in order.chunks(config.batch_size) {
            let step = if is_cn {
                trainer.forward_step(batch, lr_phi).map(|_| ()).and_then(|_| {
                    if config.closed_form_theta {
                        trainer.kernel_step(batch, lr_theta)
                    } else {
                        trainer.backward_step_sgd(batch, lr_theta)
                    }
                })
            } else {
                trainer.joint_step(batch, lr_phi, lr_theta)
            };
            match step {
                Ok(()) => abort_streak = 0,
                Err(Error::AbortStep(msg)) => {
                    abort_streak += 1;
                    if abort_streak > MAX_ABORT_STREAK {
                        return Err(Error::NonFiniteObjective(format!(
                            "aborted {abort_streak} consecutive steps; last: {msg}"
                        )));
                    }
                }
                Err(e) => return Err(e),
            }
        }
        if is_cn && config.closed_form_theta {
            trainer.backward_step_closed_form()?;
        }
        let elbo = trainer.full_elbo()?;
        if !elbo.is_finite() {
            return Err(Error::NonFiniteObjective(format!(
                "bound became non-finite at epoch {epoch}"
            )));
        }
        let val_nlpd = validation
            .map(|(xv, yv)| validation_nlpd(trainer.model(), xv, yv, config))
            .transpose()?;
        trace.epochs.push(EpochRecord {
            epoch,
            elbo,
            noise: trainer.model().noise,
            val_nlpd,
        });
        if config.early_stop_patience > 0 {
            if let Some(v) = val_nlpd {
                if v < best_val {
                    best_val = v;
                    stale = 0;
                } else {
                    stale += 1;
                    if stale >= config.early_stop_patience {
                        break;
                    }
                }
            }
        }
    }

    let final_elbo = trace.epochs.last().expect("at least the initial record").elbo;
    Ok(FitReport {
        model: trainer.into_model(),
        trace,
        final_elbo,
        restart,
    })
}

fn validation_nlpd(
    model: &ModelState,
    xv: &DMatrix<f64>,
    yv: &DVector<f64>,
    config: &TrainConfig,
) -> Result<f64> {
    let preds = predict(
        model,
        xv,
        &PredictConfig {
            mc_samples: config.mc_samples,
            seed: config.seed,
        },
    )?;
    metrics::nlpd(&preds, yv.as_slice())
}
