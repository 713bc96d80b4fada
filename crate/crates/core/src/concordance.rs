//! Harrell's concordance index with the induced relative risk as the
//! predictive marker.

use crate::domain::{Cohort, CumHazard, ThetaVector};
use crate::error::Error;
use crate::errormodel::{
    cond_mean_x, plus_mean_mu, rr_kernel_mu, ErrorModelParams,
};
use crate::stats::quadrature::gauss_hermite;
use crate::Result;

/// Marker construction per method family.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MarkerKind {
    /// r at the raw surrogate: exp(βw + ω(w−τ)₊ + γᵀz)
    NaiveForm,
    /// r at the calibrated covariates (RC2 surrogates)
    RcForm,
    /// induced relative risk E[exp(βX + ω(X−τ)₊)|W,Z]·exp(γᵀz)
    RrForm,
    /// MPPLE induced hazard exp(φ(θ, w, z, Λ̂₀(t))), evaluated at the
    /// comparison time of each pair
    MppleForm,
}

/// Marker specification: kind, fitted parameters and, where needed, the
/// error model and baseline cumulative hazard.
#[derive(Debug, Clone)]
pub struct MarkerSpec {
    pub kind: MarkerKind,
    pub theta: ThetaVector,
    pub em: Option<ErrorModelParams>,
    /// required by [`MarkerKind::MppleForm`]
    pub baseline: Option<CumHazard>,
}

impl MarkerSpec {
    fn validate(&self) -> Result<()> {
        match self.kind {
            MarkerKind::NaiveForm => Ok(()),
            MarkerKind::RcForm | MarkerKind::RrForm => {
                if self.em.is_none() {
                    return Err(Error::InvalidConfig(
                        "the RC/RR markers need error-model parameters".into(),
                    ));
                }
                Ok(())
            }
            MarkerKind::MppleForm => {
                if self.em.is_none() || self.baseline.is_none() {
                    return Err(Error::InvalidConfig(
                        "the MPPLE marker needs error-model parameters and a baseline hazard"
                            .into(),
                    ));
                }
                Ok(())
            }
        }
    }
}

/// Harrell's C-index over censoring-comparable pairs within each stratum:
/// pairs where the earlier exit is an event (ties event-vs-censored count,
/// event-vs-event ties do not), with the later subject under observation at
/// the event time. Marker ties contribute 1/2.
///
/// Time-varying covariate paths enter through their first observed value;
/// the MPPLE marker is additionally time-dependent through Λ̂₀ and is
/// evaluated at each pair's comparison time.
pub fn c_index(cohort: &Cohort, ms: &MarkerSpec) -> Result<f64> {
    ms.validate()?;
    let n = cohort.n();
    // baseline covariate values per subject
    let base: Vec<(f64, &nalgebra::DVector<f64>)> = cohort
        .subjects
        .iter()
        .map(|s| (s.w_path.values()[0], &s.z_path.values()[0]))
        .collect();

    let static_marker: Option<Vec<f64>> = match ms.kind {
        MarkerKind::MppleForm => None,
        _ => Some(
            base.iter()
                .map(|&(w, z)| static_marker_value(ms, w, z))
                .collect(),
        ),
    };

    let mut comparable = 0.0f64;
    let mut score = 0.0f64;
    for i in 0..n {
        let si = &cohort.subjects[i];
        if !si.event {
            continue;
        }
        let ti = si.exit_time;
        for j in 0..n {
            if i == j {
                continue;
            }
            let sj = &cohort.subjects[j];
            if sj.stratum != si.stratum {
                continue;
            }
            // j must be under observation when i fails, and outlive i
            // (strictly, or tie with i's event while censored)
            if sj.entry_time >= ti {
                continue;
            }
            let usable = sj.exit_time > ti || (sj.exit_time == ti && !sj.event);
            if !usable {
                continue;
            }
            comparable += 1.0;
            let (mi, mj) = match &static_marker {
                Some(m) => (m[i], m[j]),
                None => (
                    mpple_marker_value(ms, base[i].0, base[i].1, ti)?,
                    mpple_marker_value(ms, base[j].0, base[j].1, ti)?,
                ),
            };
            if mi > mj {
                score += 1.0;
            } else if mi == mj {
                score += 0.5;
            }
        }
    }
    if comparable == 0.0 {
        return Err(Error::NoComparablePairs);
    }
    Ok(score / comparable)
}

fn static_marker_value(ms: &MarkerSpec, w: f64, z: &nalgebra::DVector<f64>) -> f64 {
    let theta = &ms.theta;
    let gz = theta.gamma.dot(z);
    match ms.kind {
        MarkerKind::NaiveForm => {
            (gz + theta.beta * w + theta.omega * (w - theta.tau).max(0.0)).exp()
        }
        MarkerKind::RcForm => {
            let em = ms.em.as_ref().expect("validated");
            let mu = cond_mean_x(w, z, em);
            let g2 = plus_mean_mu(mu, em.eta(), theta.tau);
            (gz + theta.beta * mu + theta.omega * g2).exp()
        }
        MarkerKind::RrForm => {
            let em = ms.em.as_ref().expect("validated");
            let mu = cond_mean_x(w, z, em);
            gz.exp() * rr_kernel_mu(theta.beta, theta.omega, mu, em.eta(), theta.tau).value
        }
        MarkerKind::MppleForm => unreachable!("handled separately"),
    }
}

fn mpple_marker_value(
    ms: &MarkerSpec,
    w: f64,
    z: &nalgebra::DVector<f64>,
    t: f64,
) -> Result<f64> {
    let em = ms.em.as_ref().expect("validated");
    let baseline = ms.baseline.as_ref().expect("validated");
    let theta = &ms.theta;
    let c = baseline.value_left(t) * theta.gamma.dot(z).exp();
    let mu = cond_mean_x(w, z, em);
    let eta = em.eta();
    if eta == 0.0 {
        let r = (theta.beta * mu + theta.omega * (mu - theta.tau).max(0.0)).exp();
        return Ok(theta.gamma.dot(z).exp() * r);
    }
    let (u, wq) = gauss_hermite(20);
    let inv_sqrt_pi = 1.0 / std::f64::consts::PI.sqrt();
    let scale = std::f64::consts::SQRT_2 * eta;
    let mut rs = [0.0f64; 20];
    let mut rmin = f64::INFINITY;
    for q in 0..20 {
        let x = mu + scale * u[q];
        let r = (theta.beta * x + theta.omega * (x - theta.tau).max(0.0)).exp();
        rs[q] = r;
        rmin = rmin.min(r);
    }
    let mut num = 0.0;
    let mut den = 0.0;
    for q in 0..20 {
        let e = wq[q] * inv_sqrt_pi * (c * (rmin - rs[q])).exp();
        num += e * rs[q];
        den += e;
    }
    Ok(theta.gamma.dot(z).exp() * num / den)
}
