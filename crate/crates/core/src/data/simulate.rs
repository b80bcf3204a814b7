//! Simulation generators used by the benchmark studies.
//!
//! Both generators retain the noise-free latent values and an outlier mask so
//! fits can be scored against the truth.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::data::Dataset;
use crate::error::Result;
use crate::likelihoods::CnParams;
use crate::rng::{self, streams};

/// Center of the replacement distribution for Friedman outliers.
pub const FRIEDMAN_OUTLIER_MEAN: f64 = 15.0;

/// A simulated dataset plus its generating truth.
#[derive(Debug, Clone)]
pub struct SimData {
    pub dataset: Dataset,
    /// Noise-free latent value per row.
    pub latent: Vec<f64>,
    /// Rows whose target came from the outlier mechanism.
    pub outlier_mask: Vec<bool>,
}

/// Smooth 1-d test function on [0, 5]:
/// `0.3 + 0.4 x + 0.5 sin(2.7 x) + 1.1 / (1 + x^2)`.
pub fn sim1_function(x: f64) -> f64 {
    0.3 + 0.4 * x + 0.5 * (2.7 * x).sin() + 1.1 / (1.0 + x * x)
}

/// 1-d regression draw: `x ~ U(0, 5)`, `y = f(x) + e` with contaminated-normal
/// noise `e` (inflated-variance component with probability `outlier_prob`).
pub fn simulate_sim1(n: usize, params: &CnParams, seed: u64) -> Result<SimData> {
    params.validate()?;
    let mut rng = rng::stream(seed, streams::DATASET);
    let xs: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..5.0)).collect();
    let mut target = DVector::<f64>::zeros(n);
    let mut latent = Vec::with_capacity(n);
    let mut mask = Vec::with_capacity(n);
    let sd_out = (params.inflation * params.noise_var).sqrt();
    let sd_in = params.noise_var.sqrt();
    for i in 0..n {
        let f = sim1_function(xs[i]);
        let is_outlier = rng.random::<f64>() < params.outlier_prob;
        let z: f64 = StandardNormal.sample(&mut rng);
        target[i] = f + z * if is_outlier { sd_out } else { sd_in };
        latent.push(f);
        mask.push(is_outlier);
    }
    let features = DMatrix::from_iterator(n, 1, xs);
    let dataset = Dataset::new(features, target, vec!["x1".to_string()])?;
    Ok(SimData {
        dataset,
        latent,
        outlier_mask: mask,
    })
}

/// The 10-input benchmark function
/// `10 sin(pi x1 x2) + 20 (x3 - 0.5)^2 + 10 x4 + 5 x5`
/// (inputs 6..10 are inert).
pub fn friedman_function(x: &[f64]) -> f64 {
    10.0 * (std::f64::consts::PI * x[0] * x[1]).sin()
        + 20.0 * (x[2] - 0.5) * (x[2] - 0.5)
        + 10.0 * x[3]
        + 5.0 * x[4]
}

/// Friedman draw on the unit 10-cube with standard normal noise, then a
/// uniformly chosen `floor(p_outlier * n)` subset of the targets REPLACED by
/// draws from `N(15, sigma_outlier^2)`.
pub fn simulate_friedman(
    n: usize,
    p_outlier: f64,
    sigma_outlier: f64,
    seed: u64,
) -> Result<SimData> {
    if !(0.0..1.0).contains(&p_outlier) {
        return Err(crate::error::Error::InvalidParameter(format!(
            "p_outlier must be in [0,1), got {p_outlier}"
        )));
    }
    if !(sigma_outlier > 0.0) {
        return Err(crate::error::Error::InvalidParameter(format!(
            "sigma_outlier must be positive, got {sigma_outlier}"
        )));
    }
    let mut rng = rng::stream(seed, streams::DATASET);
    let mut sim = friedman_base(n, &mut rng, true)?;
    let n_out = (p_outlier * n as f64).floor() as usize;
    let chosen = rand::seq::index::sample(&mut rng, n, n_out);
    for idx in chosen.iter() {
        let z: f64 = StandardNormal.sample(&mut rng);
        sim.dataset.target[idx] = FRIEDMAN_OUTLIER_MEAN + sigma_outlier * z;
        sim.outlier_mask[idx] = true;
    }
    Ok(sim)
}

/// Noise-free Friedman draw (`y = f(x)` exactly): evaluation targets.
pub fn simulate_friedman_noise_free(n: usize, seed: u64) -> Result<SimData> {
    let mut rng = rng::stream(seed, streams::DATASET);
    friedman_base(n, &mut rng, false)
}

fn friedman_base(n: usize, rng: &mut impl Rng, noisy: bool) -> Result<SimData> {
    let p = 10;
    let mut features = DMatrix::<f64>::zeros(n, p);
    for r in 0..n {
        for c in 0..p {
            features[(r, c)] = rng.random::<f64>();
        }
    }
    let mut target = DVector::<f64>::zeros(n);
    let mut latent = Vec::with_capacity(n);
    for r in 0..n {
        let row: Vec<f64> = (0..p).map(|c| features[(r, c)]).collect();
        let f = friedman_function(&row);
        let noise: f64 = if noisy {
            StandardNormal.sample(rng)
        } else {
            0.0
        };
        target[r] = f + noise;
        latent.push(f);
    }
    let names = (1..=p).map(|j| format!("x{j}")).collect();
    let dataset = Dataset::new(features, target, names)?;
    Ok(SimData {
        dataset,
        latent,
        outlier_mask: vec![false; n],
    })
}
