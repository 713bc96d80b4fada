//! Simulation-extrapolation (SIMEX).
//!
//! Additional measurement error of variance ζ·σ_u² is added to the surrogate
//! in a resampling-like stage; the naive estimate's trend in ζ is modelled by
//! the cubic polynomial G(ζ) = γ₁ + γ₂ζ + γ₃ζ² + γ₄ζ³ and extrapolated back
//! to ζ = −1. The variance of the SIMEX estimate is obtained by a weighted
//! bootstrap of the entire pipeline.

use super::{bootstrap_weights, fit_naive, fit_naive_from, DEFAULT_LEVEL};
use crate::domain::{Cohort, FitResult, Method, StepFn, Subject, ThetaVector, DIVERGENCE_BOUND};
use crate::error::Error;
use crate::errormodel::ErrorModelParams;
use crate::variance;
use crate::Result;
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use std::sync::Arc;

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct SimexConfig {
    /// added-noise variance multipliers ζ > 0 (ζ = 0 is implicit: the naive fit)
    pub zeta_grid: Vec<f64>,
    /// naive refits per grid point
    pub b_per_zeta: usize,
    /// weighted-bootstrap replicates for the covariance; 0 disables
    pub cov_bootstrap: usize,
    pub rng_seed: u64,
}

impl Default for SimexConfig {
    fn default() -> Self {
        SimexConfig {
            zeta_grid: vec![0.5, 1.0, 1.5, 2.0],
            b_per_zeta: 100,
            cov_bootstrap: 25,
            rng_seed: 0,
        }
    }
}

impl SimexConfig {
    fn validate(&self) -> Result<()> {
        if self.zeta_grid.is_empty() || self.zeta_grid.iter().any(|&z| !(z > 0.0)) {
            return Err(Error::InvalidConfig(
                "SIMEX grid must be non-empty with strictly positive multipliers".into(),
            ));
        }
        if self.b_per_zeta < 25 {
            return Err(Error::InvalidConfig(
                "SIMEX needs at least 25 replicates per grid point".into(),
            ));
        }
        Ok(())
    }
}

/// SIMEX fit. With σ_u² = 0 no noise is added and the extrapolation returns
/// the naive estimate.
pub fn fit_simex(
    cohort: &Cohort,
    em: &ErrorModelParams,
    tau: f64,
    sc: &SimexConfig,
) -> Result<FitResult> {
    sc.validate()?;
    let naive = fit_naive(cohort, tau)?;
    if !naive.converged {
        return Err(Error::Numeric(
            "naive fit did not converge; SIMEX unavailable".into(),
        ));
    }
    let theta = simex_point(cohort, em, tau, sc, &naive.theta_hat, sc.rng_seed, None)?;
    let d = theta.dim();

    let covariance = if sc.cov_bootstrap >= 2 {
        let n = cohort.n();
        let estimates: Vec<Option<DVector<f64>>> = (0..sc.cov_bootstrap)
            .into_par_iter()
            .map(|j| {
                let mut rng = crate::stats::rng::stream(sc.rng_seed, &[0x5358, j as u64]);
                let weights = bootstrap_weights(n, 5.0, &mut rng);
                let reweighted = cohort.reweighted(&weights);
                let naive_b = fit_naive_from(&reweighted, tau, &naive.theta_hat).ok()?;
                if !naive_b.converged {
                    return None;
                }
                simex_point(
                    &reweighted,
                    em,
                    tau,
                    sc,
                    &naive_b.theta_hat,
                    sc.rng_seed ^ 0x9E37_79B9,
                    Some(j as u64),
                )
                .ok()
                .map(|t| t.flatten())
            })
            .collect();
        let kept: Vec<&DVector<f64>> = estimates.iter().flatten().collect();
        if kept.len() * 2 < sc.cov_bootstrap {
            return Err(Error::BootstrapUnstable {
                failed: sc.cov_bootstrap - kept.len(),
                total: sc.cov_bootstrap,
            });
        }
        let mut mean = DVector::<f64>::zeros(d);
        for t in &kept {
            mean += *t;
        }
        mean /= kept.len() as f64;
        let mut cov = DMatrix::<f64>::zeros(d, d);
        for t in &kept {
            let dev = *t - &mean;
            cov.ger(1.0, &dev, &dev, 1.0);
        }
        cov /= (kept.len() - 1) as f64;
        cov
    } else {
        DMatrix::zeros(d, d)
    };

    let within_bound = theta.flatten().iter().all(|x| x.abs() <= DIVERGENCE_BOUND);
    let ci = variance::wald_ci_parts(&theta, &covariance, DEFAULT_LEVEL);
    Ok(FitResult {
        method: Method::Simex,
        theta_hat: theta,
        covariance,
        ci,
        level: DEFAULT_LEVEL,
        converged: true,
        within_bound,
        iterations: naive.iterations,
        baseline: None,
    })
}

/// One full SIMEX point estimate: grid means then cubic extrapolation.
fn simex_point(
    cohort: &Cohort,
    em: &ErrorModelParams,
    tau: f64,
    sc: &SimexConfig,
    naive_theta: &ThetaVector,
    noise_seed: u64,
    noise_path: Option<u64>,
) -> Result<ThetaVector> {
    let d = naive_theta.dim();
    let sigma_u = em.sigma_u2.sqrt();
    let mut zeta_means: Vec<(f64, DVector<f64>)> = Vec::with_capacity(sc.zeta_grid.len() + 1);
    zeta_means.push((0.0, naive_theta.flatten()));

    for (zi, &zeta) in sc.zeta_grid.iter().enumerate() {
        let cells: Vec<Option<DVector<f64>>> = (0..sc.b_per_zeta)
            .into_par_iter()
            .map(|b| {
                let path: Vec<u64> = match noise_path {
                    Some(j) => vec![j, zi as u64, b as u64],
                    None => vec![zi as u64, b as u64],
                };
                let mut rng = crate::stats::rng::stream(noise_seed, &path);
                let noisy = add_noise(cohort, zeta.sqrt() * sigma_u, &mut rng);
                match fit_naive_from(&noisy, tau, naive_theta) {
                    Ok(f) if f.converged && f.within_bound => Some(f.theta_hat.flatten()),
                    _ => None,
                }
            })
            .collect();
        let kept: Vec<&DVector<f64>> = cells.iter().flatten().collect();
        if kept.len() * 2 < sc.b_per_zeta {
            return Err(Error::SimexGridUnstable { zeta });
        }
        let mut mean = DVector::<f64>::zeros(d);
        for t in &kept {
            mean += *t;
        }
        mean /= kept.len() as f64;
        zeta_means.push((zeta, mean));
    }

    // least-squares cubic per component, evaluated at ζ = −1
    let npts = zeta_means.len();
    let mut design = DMatrix::<f64>::zeros(npts, 4);
    for (row, (zeta, _)) in zeta_means.iter().enumerate() {
        let mut pw = 1.0;
        for col in 0..4 {
            design[(row, col)] = pw;
            pw *= zeta;
        }
    }
    let svd = design.svd(true, true);
    let mut extrapolated = DVector::<f64>::zeros(d);
    for comp in 0..d {
        let y = DVector::from_iterator(npts, zeta_means.iter().map(|(_, m)| m[comp]));
        let coef = svd
            .solve(&y, 1e-12)
            .map_err(|e| Error::Numeric(format!("SIMEX extrapolation solve failed: {e}")))?;
        extrapolated[comp] = coef[0] - coef[1] + coef[2] - coef[3];
    }
    if !extrapolated.iter().all(|x| x.is_finite()) {
        return Err(Error::Numeric("SIMEX extrapolation not finite".into()));
    }
    Ok(ThetaVector::from_flat(&extrapolated, tau))
}

/// A copy of the cohort with N(0, sd²) noise added to every surrogate
/// measurement (one independent draw per grid point of each W path).
fn add_noise(cohort: &Cohort, sd: f64, rng: &mut impl Rng) -> Cohort {
    let subjects: Vec<Subject> = cohort
        .subjects
        .iter()
        .map(|s| {
            let times = s.w_path.times().to_vec();
            let values: Vec<f64> = s
                .w_path
                .values()
                .iter()
                .map(|&w| w + sd * rng.sample::<f64, _>(StandardNormal))
                .collect();
            let mut out = s.clone();
            out.w_path = Arc::new(StepFn::new(times, values).expect("valid path"));
            out
        })
        .collect();
    Cohort {
        subjects,
        t_star: cohort.t_star,
        p: cohort.p,
    }
}

/// Residual of the cubic fit at the grid nodes; used to confirm that with
/// exactly four points the least-squares cubic interpolates.
pub fn cubic_fit_residual(points: &[(f64, f64)]) -> f64 {
    let n = points.len();
    let mut design = DMatrix::<f64>::zeros(n, 4);
    let mut y = DVector::<f64>::zeros(n);
    for (row, &(x, v)) in points.iter().enumerate() {
        let mut pw = 1.0;
        for col in 0..4 {
            design[(row, col)] = pw;
            pw *= x;
        }
        y[row] = v;
    }
    let coef = design.clone().svd(true, true).solve(&y, 1e-14).unwrap();
    (design * coef - y).amax()
}
