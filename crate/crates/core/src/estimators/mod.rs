//! The seven estimation methods, each returning a [`FitResult`].
//!
//! Starting values follow the complexity hierarchy: naive from zero, RC1
//! from naive, RC2 from RC1, RR1 from RC2, RR2 and MPPLE from RR1. Warm-start
//! variants (`*_from`) are provided so a harness running several methods can
//! chain estimates without refitting the lower rungs.

mod mpple;
mod simex;

pub use mpple::{fit_mpple, fit_mpple_from, MppleConfig, MppleCov};
pub use simex::{cubic_fit_residual, fit_simex, SimexConfig};

use crate::domain::{Cohort, FitResult, Method, ThetaVector, DIVERGENCE_BOUND};
use crate::error::Error;
use crate::errormodel::{
    cond_mean_x, rr_kernel_mu, surrogate_pair, ErrorModelParams, SurrogateKind,
};
use crate::partial_lik::{self, Maximized, NewtonOptions, RelRisk, RiskEval};
use crate::variance;
use crate::Result;
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::Exp1;
use rayon::prelude::*;

/// Exponential-form risk exp(θᵀ(z, g₁, g₂)) over a surrogate pair.
pub struct SurrogateRisk {
    pub kind: SurrogateKind,
    pub em: Option<ErrorModelParams>,
    pub tau: f64,
    p: usize,
    time_dependent: bool,
}

impl SurrogateRisk {
    pub fn new(kind: SurrogateKind, em: Option<ErrorModelParams>, tau: f64, cohort: &Cohort) -> Self {
        Self::with_dims(kind, em, tau, cohort.p, !cohort.is_time_fixed())
    }

    pub fn with_dims(
        kind: SurrogateKind,
        em: Option<ErrorModelParams>,
        tau: f64,
        p: usize,
        time_dependent: bool,
    ) -> Self {
        SurrogateRisk {
            kind,
            em,
            tau,
            p,
            time_dependent,
        }
    }
}

impl RelRisk for SurrogateRisk {
    fn dim(&self) -> usize {
        self.p + 2
    }

    fn time_dependent(&self) -> bool {
        self.time_dependent
    }

    fn eval(
        &self,
        subject: &crate::domain::Subject,
        t: f64,
        theta: &ThetaVector,
        out: &mut RiskEval,
    ) -> Result<()> {
        let w = subject.w_at(t)?;
        let z = subject.z_at(t)?;
        let (g1, g2) = match self.kind {
            SurrogateKind::Naive => (w, (w - self.tau).max(0.0)),
            kind => {
                let em = self.em.as_ref().ok_or_else(|| {
                    Error::InvalidConfig("RC surrogates need error-model parameters".into())
                })?;
                surrogate_pair(kind, w, z, em, self.tau)
            }
        };
        let d = self.p + 2;
        let mut lin = theta.beta * g1 + theta.omega * g2;
        for a in 0..self.p {
            lin += theta.gamma[a] * z[a];
        }
        let r = lin.exp();
        out.value = r;
        let v = &mut out.grad;
        for a in 0..self.p {
            v[a] = z[a];
        }
        v[self.p] = g1;
        v[self.p + 1] = g2;
        for a in 0..d {
            for b in 0..d {
                out.hess[a * d + b] = v[a] * v[b] * r;
            }
        }
        for a in 0..d {
            v[a] *= r;
        }
        Ok(())
    }
}

/// Induced relative risk E[exp(βX + ω(X−τ)₊) | W, Z]·exp(γᵀz) for RR1/RR2.
pub struct InducedRisk {
    pub em: ErrorModelParams,
    pub tau: f64,
    p: usize,
    time_dependent: bool,
}

impl InducedRisk {
    pub fn new(em: ErrorModelParams, tau: f64, cohort: &Cohort) -> Self {
        Self::with_dims(em, tau, cohort.p, !cohort.is_time_fixed())
    }

    pub fn with_dims(em: ErrorModelParams, tau: f64, p: usize, time_dependent: bool) -> Self {
        InducedRisk {
            em,
            tau,
            p,
            time_dependent,
        }
    }
}

impl RelRisk for InducedRisk {
    fn dim(&self) -> usize {
        self.p + 2
    }

    fn time_dependent(&self) -> bool {
        self.time_dependent
    }

    fn eval(
        &self,
        subject: &crate::domain::Subject,
        t: f64,
        theta: &ThetaVector,
        out: &mut RiskEval,
    ) -> Result<()> {
        let w = subject.w_at(t)?;
        let z = subject.z_at(t)?;
        let mu = cond_mean_x(w, z, &self.em);
        let k = rr_kernel_mu(theta.beta, theta.omega, mu, self.em.eta(), self.tau);
        let ez = theta.gamma.dot(z).exp();
        let p = self.p;
        let d = p + 2;
        let value = ez * k.value;
        out.value = value;
        for a in 0..p {
            out.grad[a] = z[a] * value;
        }
        out.grad[p] = ez * k.grad[0];
        out.grad[p + 1] = ez * k.grad[1];
        for a in 0..p {
            for b in 0..p {
                out.hess[a * d + b] = z[a] * z[b] * value;
            }
            out.hess[a * d + p] = z[a] * ez * k.grad[0];
            out.hess[p * d + a] = out.hess[a * d + p];
            out.hess[a * d + p + 1] = z[a] * ez * k.grad[1];
            out.hess[(p + 1) * d + a] = out.hess[a * d + p + 1];
        }
        out.hess[p * d + p] = ez * k.hess[0];
        out.hess[p * d + p + 1] = ez * k.hess[1];
        out.hess[(p + 1) * d + p] = ez * k.hess[1];
        out.hess[(p + 1) * d + p + 1] = ez * k.hess[2];
        Ok(())
    }
}

/// Default confidence level for reported intervals.
pub const DEFAULT_LEVEL: f64 = 0.95;

pub(crate) fn assemble_fit(
    cohort: &Cohort,
    rr: &dyn RelRisk,
    maxed: Maximized,
    method: Method,
) -> Result<FitResult> {
    let d = rr.dim();
    let covariance = if maxed.converged {
        variance::sandwich_cov(cohort, rr, &maxed.theta)?
    } else {
        DMatrix::zeros(d, d)
    };
    let ci = variance::wald_ci_parts(&maxed.theta, &covariance, DEFAULT_LEVEL);
    Ok(FitResult {
        method,
        theta_hat: maxed.theta,
        covariance,
        ci,
        level: DEFAULT_LEVEL,
        converged: maxed.converged,
        within_bound: maxed.within_bound,
        iterations: maxed.iterations,
        baseline: None,
    })
}

/// Naive fit: Cox partial likelihood with W plugged in for X, from θ₀ = 0.
pub fn fit_naive(cohort: &Cohort, tau: f64) -> Result<FitResult> {
    fit_naive_from(cohort, tau, &ThetaVector::zeros(cohort.p, tau))
}

pub fn fit_naive_from(cohort: &Cohort, tau: f64, theta0: &ThetaVector) -> Result<FitResult> {
    let rr = SurrogateRisk::new(SurrogateKind::Naive, None, tau, cohort);
    let maxed = partial_lik::maximize(cohort, &rr, theta0, &NewtonOptions::default())?;
    assemble_fit(cohort, &rr, maxed, Method::Naive)
}

/// Regression-calibration variant.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RcVariant {
    Rc1,
    Rc2,
}

impl RcVariant {
    fn surrogate(self) -> SurrogateKind {
        match self {
            RcVariant::Rc1 => SurrogateKind::Rc1,
            RcVariant::Rc2 => SurrogateKind::Rc2,
        }
    }

    fn method(self) -> Method {
        match self {
            RcVariant::Rc1 => Method::Rc1,
            RcVariant::Rc2 => Method::Rc2,
        }
    }
}

/// Regression-calibration fit; the starting value is the estimate one rung
/// lower in the hierarchy (naive for RC1, RC1 for RC2).
pub fn fit_rc(
    cohort: &Cohort,
    em: &ErrorModelParams,
    variant: RcVariant,
    tau: f64,
) -> Result<FitResult> {
    let start = match variant {
        RcVariant::Rc1 => fit_naive(cohort, tau)?.theta_hat,
        RcVariant::Rc2 => fit_rc(cohort, em, RcVariant::Rc1, tau)?.theta_hat,
    };
    fit_rc_from(cohort, em, variant, tau, &start)
}

pub fn fit_rc_from(
    cohort: &Cohort,
    em: &ErrorModelParams,
    variant: RcVariant,
    tau: f64,
    theta0: &ThetaVector,
) -> Result<FitResult> {
    let rr = SurrogateRisk::new(variant.surrogate(), Some(em.clone()), tau, cohort);
    let maxed = partial_lik::maximize(cohort, &rr, theta0, &NewtonOptions::default())?;
    assemble_fit(cohort, &rr, maxed, variant.method())
}

/// Induced-relative-risk fit (rare-disease approximation), started from RC2.
pub fn fit_rr1(cohort: &Cohort, em: &ErrorModelParams, tau: f64) -> Result<FitResult> {
    let start = fit_rc(cohort, em, RcVariant::Rc2, tau)?.theta_hat;
    fit_rr1_from(cohort, em, tau, &start)
}

pub fn fit_rr1_from(
    cohort: &Cohort,
    em: &ErrorModelParams,
    tau: f64,
    theta0: &ThetaVector,
) -> Result<FitResult> {
    let rr = InducedRisk::new(em.clone(), tau, cohort);
    let maxed = partial_lik::maximize(cohort, &rr, theta0, &NewtonOptions::default())?;
    assemble_fit(cohort, &rr, maxed, Method::Rr1)
}

/// Weighted-bootstrap configuration for RR2 (and other bootstrap passes).
#[derive(Debug, Clone)]
pub struct BootstrapConfig {
    /// number of bootstrap replicates
    pub b: usize,
    /// weight truncation point for the Exp(1) draws
    pub truncation: f64,
    pub rng_seed: u64,
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        BootstrapConfig {
            b: 50,
            truncation: 5.0,
            rng_seed: 0,
        }
    }
}

impl BootstrapConfig {
    fn validate(&self) -> Result<()> {
        if self.b < 1 || !(self.truncation > 0.0) {
            return Err(Error::InvalidConfig(
                "bootstrap needs b >= 1 and truncation > 0".into(),
            ));
        }
        Ok(())
    }
}

/// Standardized weighted-bootstrap weights: κᵢ ~ Exp(1) truncated at
/// `truncation`, divided by their sample mean (so they sum to n).
pub fn bootstrap_weights(n: usize, truncation: f64, rng: &mut impl Rng) -> Vec<f64> {
    let mut k: Vec<f64> = (0..n)
        .map(|_| rng.sample::<f64, _>(Exp1).min(truncation))
        .collect();
    let mean = k.iter().sum::<f64>() / n as f64;
    if mean > 0.0 {
        k.iter_mut().for_each(|x| *x /= mean);
    } else {
        k.iter_mut().for_each(|x| *x = 1.0);
    }
    k
}

/// RR2 output: the bias-corrected estimate together with the quantities the
/// correction is built from.
#[derive(Debug, Clone)]
pub struct Rr2Fit {
    pub result: FitResult,
    /// RR1 estimate on the original data
    pub theta_rr1: ThetaVector,
    /// mean of the bootstrap RR1 estimates
    pub theta_boot_mean: ThetaVector,
    pub replicates_used: usize,
    pub replicates_dropped: usize,
}

/// Bootstrap bias-corrected RR estimate θ_corr = 2θ̂ − θ̃, where θ̃ is the
/// mean RR1 estimate over weighted-bootstrap replicates. The reported
/// covariance is the RR1 sandwich covariance.
pub fn fit_rr2(
    cohort: &Cohort,
    em: &ErrorModelParams,
    tau: f64,
    bc: &BootstrapConfig,
) -> Result<Rr2Fit> {
    let rr1 = fit_rr1(cohort, em, tau)?;
    fit_rr2_from(cohort, em, tau, &rr1, bc)
}

pub fn fit_rr2_from(
    cohort: &Cohort,
    em: &ErrorModelParams,
    tau: f64,
    rr1: &FitResult,
    bc: &BootstrapConfig,
) -> Result<Rr2Fit> {
    bc.validate()?;
    if !rr1.converged {
        return Err(Error::Numeric(
            "RR1 did not converge on the original data; RR2 unavailable".into(),
        ));
    }
    let n = cohort.n();
    let theta_hat = rr1.theta_hat.clone();
    let boot: Vec<Option<DVector<f64>>> = (0..bc.b)
        .into_par_iter()
        .map(|j| {
            let mut rng = crate::stats::rng::stream(bc.rng_seed, &[j as u64]);
            let weights = bootstrap_weights(n, bc.truncation, &mut rng);
            let reweighted = cohort.reweighted(&weights);
            match fit_rr1_from(&reweighted, em, tau, &theta_hat) {
                Ok(fit) if fit.converged && fit.within_bound => Some(fit.theta_hat.flatten()),
                _ => None,
            }
        })
        .collect();
    let kept: Vec<&DVector<f64>> = boot.iter().flatten().collect();
    let dropped = bc.b - kept.len();
    if kept.len() * 2 < bc.b {
        return Err(Error::BootstrapUnstable {
            failed: dropped,
            total: bc.b,
        });
    }
    let d = theta_hat.dim();
    let mut mean = DVector::<f64>::zeros(d);
    for t in &kept {
        mean += *t;
    }
    mean /= kept.len() as f64;
    let corr = theta_hat.flatten() * 2.0 - &mean;
    let theta_corr = ThetaVector::from_flat(&corr, tau);
    let within_bound = corr.iter().all(|x| x.abs() <= DIVERGENCE_BOUND);
    let ci = variance::wald_ci_parts(&theta_corr, &rr1.covariance, DEFAULT_LEVEL);
    Ok(Rr2Fit {
        result: FitResult {
            method: Method::Rr2,
            theta_hat: theta_corr,
            covariance: rr1.covariance.clone(),
            ci,
            level: DEFAULT_LEVEL,
            converged: true,
            within_bound,
            iterations: rr1.iterations,
            baseline: None,
        },
        theta_rr1: theta_hat,
        theta_boot_mean: ThetaVector::from_flat(&mean, tau),
        replicates_used: kept.len(),
        replicates_dropped: dropped,
    })
}
