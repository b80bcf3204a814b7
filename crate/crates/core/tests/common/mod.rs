//! Shared helpers for the integration and acceptance suites.

use cngp::inference::{
    elbo, elbo_evaluation, elbo_with_responsibilities, cn_responsibilities, GradRequest,
    ModelState,
};
use cngp::kernels::{KernelFamily, KernelSpec};
use cngp::likelihoods::{NoiseFamily, NoiseModel};
use cngp::rng;
use cngp::variational::VariationalState;
use nalgebra::{DMatrix, DVector};
use rand::Rng;

pub struct InstanceCfg {
    pub seed: u64,
    pub noise: NoiseFamily,
    pub kernel: KernelFamily,
    pub n: usize,
    pub m: usize,
    pub p: usize,
    /// Use the first `batch` points as the minibatch (full batch when equal
    /// to `n`), exercising the `n/|B|` scaling.
    pub batch: usize,
    pub optimize_inducing: bool,
}

/// Deterministic, well-conditioned random instance. Inducing points are
/// spread apart so the unjittered factorization succeeds and the variance
/// floor stays inactive.
pub fn random_instance(cfg: &InstanceCfg) -> (ModelState, DMatrix<f64>, DVector<f64>) {
    let mut r = rng::stream(cfg.seed, 0xAB);
    let x = DMatrix::from_fn(cfg.n, cfg.p, |_, _| r.random_range(-2.0f64..2.0));
    let y = DVector::from_fn(cfg.n, |i, _| {
        (1.3 * x[(i, 0)]).sin() + 0.3 * r.random_range(-1.0f64..1.0)
    });
    // Spread inducing points on a jittered lattice to keep K_mm well away
    // from singularity.
    let z = DMatrix::from_fn(cfg.m, cfg.p, |row, c| {
        -2.0 + 4.0 * (row as f64 + 0.5) / cfg.m as f64
            + 0.3 * r.random_range(-1.0f64..1.0)
            + 0.1 * c as f64
    });
    let lengths: Vec<f64> = (0..cfg.p).map(|_| r.random_range(0.8f64..1.6)).collect();
    let spec = KernelSpec::new(cfg.kernel, r.random_range(0.6f64..1.8), lengths).unwrap();
    let mut l_s = DMatrix::<f64>::zeros(cfg.m, cfg.m);
    for i in 0..cfg.m {
        l_s[(i, i)] = r.random_range(0.4f64..1.1);
        for j in 0..i {
            l_s[(i, j)] = r.random_range(-0.15f64..0.15);
        }
    }
    let mean = DVector::from_fn(cfg.m, |_, _| r.random_range(-0.8f64..0.8));
    let noise = match cfg.noise {
        NoiseFamily::Gaussian => NoiseModel::gaussian(r.random_range(0.3f64..1.5)).unwrap(),
        NoiseFamily::Cn => NoiseModel::cn(
            r.random_range(0.08f64..0.4),
            r.random_range(2.0f64..12.0),
            r.random_range(0.3f64..1.2),
        )
        .unwrap(),
        NoiseFamily::StudentT => {
            NoiseModel::student_t(r.random_range(3.0f64..8.0), r.random_range(0.5f64..1.3))
                .unwrap()
        }
        NoiseFamily::Laplace => NoiseModel::laplace(r.random_range(0.4f64..1.2)).unwrap(),
    };
    let state = VariationalState::from_cov_factor(z, mean, l_s).unwrap();
    (
        ModelState {
            kernel: spec,
            noise,
            variational: state,
        },
        x,
        y,
    )
}

const GH_NODES: usize = 20;
const FD_STEP: f64 = 1e-5;
const REL_TOL: f64 = 1e-4;
const ABS_FLOOR: f64 = 1e-7;

fn rebuild(model: &ModelState, z: DMatrix<f64>, mean: DVector<f64>, l_s: DMatrix<f64>) -> ModelState {
    ModelState {
        kernel: model.kernel.clone(),
        noise: model.noise,
        variational: VariationalState::from_cov_factor(z, mean, l_s).unwrap(),
    }
}

/// Check every analytic gradient block of one instance against central
/// finite differences. Returns a description of each mismatch.
pub fn gradient_check(cfg: &InstanceCfg) -> Vec<String> {
    let (model, x, y) = random_instance(cfg);
    let batch: Vec<usize> = (0..cfg.batch).collect();
    let n_total = cfg.n;

    let eval = elbo_evaluation(
        &model,
        &x,
        &y,
        &batch,
        n_total,
        GH_NODES,
        GradRequest {
            phi: true,
            theta: true,
            kernel: true,
            inducing: cfg.optimize_inducing,
        },
    )
    .expect("analytic evaluation");
    assert_eq!(
        eval.jitter, 0.0,
        "instance seed {} required jitter; pick better-conditioned geometry",
        cfg.seed
    );
    let grads = eval.grads.as_ref().unwrap();
    // Responsibilities frozen at the base point so the finite differences
    // probe the same fixed-responsibility objective the trainer ascends.
    let resp = if cfg.noise == NoiseFamily::Cn {
        Some(cn_responsibilities(&model, &x, &y, &batch).unwrap())
    } else {
        None
    };
    let value_at = |m: &ModelState| -> f64 {
        match &resp {
            Some(r) => elbo_with_responsibilities(m, &x, &y, &batch, n_total, r).unwrap(),
            None => elbo(m, &x, &y, &batch, n_total, GH_NODES).unwrap(),
        }
    };

    let mut failures = Vec::new();
    let mut check = |label: String, analytic: f64, plus: &ModelState, minus: &ModelState| {
        let fd = (value_at(plus) - value_at(minus)) / (2.0 * FD_STEP);
        let scale = fd.abs().max(analytic.abs());
        if (fd - analytic).abs() > REL_TOL * scale + ABS_FLOOR {
            failures.push(format!(
                "seed {} {:?}/{:?} {label}: analytic {analytic:.8e} vs fd {fd:.8e}",
                cfg.seed, cfg.noise, cfg.kernel
            ));
        }
    };

    let z0 = model.variational.inducing_inputs().clone();
    let mean0 = model.variational.mean().clone();
    let ls0 = model.variational.cov_factor();

    // Variational mean.
    for i in 0..cfg.m {
        let mut mp = mean0.clone();
        let mut mm = mean0.clone();
        mp[i] += FD_STEP;
        mm[i] -= FD_STEP;
        check(
            format!("mean[{i}]"),
            grads.phi_mean[i],
            &rebuild(&model, z0.clone(), mp, ls0.clone()),
            &rebuild(&model, z0.clone(), mm, ls0.clone()),
        );
    }
    // Covariance factor: off-diagonal entries are raw, the diagonal is
    // log-parameterized.
    for i in 0..cfg.m {
        for j in 0..=i {
            let (mut lp, mut lm) = (ls0.clone(), ls0.clone());
            if i == j {
                lp[(i, i)] = (ls0[(i, i)].ln() + FD_STEP).exp();
                lm[(i, i)] = (ls0[(i, i)].ln() - FD_STEP).exp();
            } else {
                lp[(i, j)] += FD_STEP;
                lm[(i, j)] -= FD_STEP;
            }
            check(
                format!("cov_raw[{i},{j}]"),
                grads.phi_cov_raw[(i, j)],
                &rebuild(&model, z0.clone(), mean0.clone(), lp),
                &rebuild(&model, z0.clone(), mean0.clone(), lm),
            );
        }
    }
    // Inducing inputs.
    if cfg.optimize_inducing {
        let dz = grads.phi_inducing.as_ref().unwrap();
        for r in 0..cfg.m {
            for c in 0..cfg.p {
                let (mut zp, mut zm) = (z0.clone(), z0.clone());
                zp[(r, c)] += FD_STEP;
                zm[(r, c)] -= FD_STEP;
                check(
                    format!("z[{r},{c}]"),
                    dz[(r, c)],
                    &rebuild(&model, zp, mean0.clone(), ls0.clone()),
                    &rebuild(&model, zm, mean0.clone(), ls0.clone()),
                );
            }
        }
    }
    // Unconstrained noise parameters.
    let theta0 = model.noise.unconstrained();
    for k in 0..theta0.len() {
        let mut up = theta0.clone();
        let mut um = theta0.clone();
        up[k] += FD_STEP;
        um[k] -= FD_STEP;
        let mut mp = model.clone();
        mp.noise.set_unconstrained(&up);
        let mut mm = model.clone();
        mm.noise.set_unconstrained(&um);
        check(format!("theta[{k}]"), grads.theta[k], &mp, &mm);
    }
    // Log kernel hyperparameters.
    let klog0 = model.kernel.log_params();
    for k in 0..klog0.len() {
        let mut up = klog0.clone();
        let mut um = klog0.clone();
        up[k] += FD_STEP;
        um[k] -= FD_STEP;
        let mut mp = model.clone();
        mp.kernel.set_log_params(&up);
        let mut mm = model.clone();
        mm.kernel.set_log_params(&um);
        check(format!("kernel_log[{k}]"), grads.kernel_log[k], &mp, &mm);
    }
    failures
}

/// The instance battery used by both the quick test and the acceptance gate.
pub fn gradient_suite_instances(count: usize) -> Vec<InstanceCfg> {
    let noises = [
        NoiseFamily::Gaussian,
        NoiseFamily::Cn,
        NoiseFamily::StudentT,
        NoiseFamily::Laplace,
    ];
    let kernels = [KernelFamily::SeArd, KernelFamily::Matern32Ard];
    (0..count)
        .map(|i| {
            let p = 1 + i % 3;
            let n = 10 + (i % 4) * 4;
            InstanceCfg {
                seed: 1000 + i as u64,
                noise: noises[i % noises.len()],
                kernel: kernels[(i / 4) % 2],
                n,
                m: 3 + i % 3,
                p,
                batch: if i % 2 == 0 { n } else { n / 2 },
                optimize_inducing: i % 3 != 2,
            }
        })
        .collect()
}
