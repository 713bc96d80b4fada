//! Sandwich covariance estimators, the correction for estimated
//! measurement-error nuisance parameters, and Wald confidence intervals.

use crate::domain::{Cohort, FitResult, ThetaVector};
use crate::error::Error;
use crate::errormodel::ReliabilityStudy;
use crate::partial_lik::{self, EventStats, RelRisk, RiskEval};
use crate::stats::normal;
use crate::Result;
use nalgebra::{DMatrix, DVector};

/// Per-subject influence terms H_i of the score: the subject's own event
/// contributions minus the martingale-compensator term, with the population
/// dF̃ replaced by its empirical counterpart dN̄(t)/n.
pub fn score_residuals(
    cohort: &Cohort,
    rr: &dyn RelRisk,
    theta_hat: &ThetaVector,
) -> Result<Vec<DVector<f64>>> {
    let d = rr.dim();
    let stats = partial_lik::event_stats(cohort, rr, theta_hat)?;

    // group event stats per stratum, ascending in time, with prefix sums of
    // dΛ = d̄/S⁰ and v̄·dΛ for the time-fixed fast path
    let mut strata_ids: Vec<u32> = stats.iter().map(|e| e.stratum).collect();
    strata_ids.dedup();
    let per_stratum: Vec<(u32, Vec<&EventStats>)> = strata_ids
        .iter()
        .map(|&sid| (sid, stats.iter().filter(|e| e.stratum == sid).collect()))
        .collect();

    let time_fixed = !rr.time_dependent();
    let mut residuals = vec![DVector::<f64>::zeros(d); cohort.n()];
    let mut ev = RiskEval::zeros(d);

    for (sid, events) in &per_stratum {
        let times: Vec<f64> = events.iter().map(|e| e.time).collect();
        // prefix[k] = sum over the first k event times
        let mut prefix_dlam = vec![0.0; times.len() + 1];
        let mut prefix_vdlam = vec![DVector::<f64>::zeros(d); times.len() + 1];
        for (k, e) in events.iter().enumerate() {
            let dlam = e.d_weight / e.s0;
            prefix_dlam[k + 1] = prefix_dlam[k] + dlam;
            prefix_vdlam[k + 1] = &prefix_vdlam[k] + &e.vbar * dlam;
        }

        for (i, s) in cohort.subjects.iter().enumerate() {
            if s.stratum != *sid {
                continue;
            }
            let h = &mut residuals[i];
            // own-event term w·[∇log r − v̄] at T_i
            if s.event {
                let k = times.partition_point(|&t| t < s.exit_time);
                rr.eval(s, s.exit_time, theta_hat, &mut ev)?;
                for a in 0..d {
                    h[a] += s.weight * (ev.grad[a] / ev.value - events[k].vbar[a]);
                }
            }
            // compensator over event times in (entry, exit]
            let lo = times.partition_point(|&t| t <= s.entry_time);
            let hi = times.partition_point(|&t| t <= s.exit_time);
            if lo >= hi {
                continue;
            }
            if time_fixed {
                rr.eval(s, s.exit_time, theta_hat, &mut ev)?;
                let r = ev.value;
                let a_win = prefix_dlam[hi] - prefix_dlam[lo];
                let b_win = &prefix_vdlam[hi] - &prefix_vdlam[lo];
                for a in 0..d {
                    h[a] -= s.weight * ((ev.grad[a] / r) * r * a_win - r * b_win[a]);
                }
            } else {
                for k in lo..hi {
                    let t = times[k];
                    rr.eval(s, t, theta_hat, &mut ev)?;
                    let dlam = events[k].d_weight / events[k].s0;
                    for a in 0..d {
                        h[a] -=
                            s.weight * ev.value * (ev.grad[a] / ev.value - events[k].vbar[a]) * dlam;
                    }
                }
            }
        }
    }
    Ok(residuals)
}

fn invert_information(info: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    info.clone()
        .try_inverse()
        .filter(|m| m.iter().all(|x| x.is_finite()))
        .ok_or(Error::SingularInformation)
}

/// Sandwich covariance of θ̂: I⁻¹ (Σᵢ Hᵢ Hᵢᵀ) I⁻¹, already scaled as the
/// covariance of the estimate.
pub fn sandwich_cov(
    cohort: &Cohort,
    rr: &dyn RelRisk,
    theta_hat: &ThetaVector,
) -> Result<DMatrix<f64>> {
    let d = rr.dim();
    let info = partial_lik::information(cohort, rr, theta_hat)?;
    let inv = invert_information(&info)?;
    let residuals = score_residuals(cohort, rr, theta_hat)?;
    let mut meat = DMatrix::<f64>::zeros(d, d);
    for h in &residuals {
        meat.ger(1.0, h, h, 1.0);
    }
    let cov = &inv * meat * &inv;
    Ok(symmetrize(cov))
}

fn symmetrize(m: DMatrix<f64>) -> DMatrix<f64> {
    let t = m.transpose();
    (m + t) * 0.5
}

/// Estimating-function machinery of the reliability-study ANOVA, used to
/// propagate nuisance-estimation noise into the main-study covariance.
///
/// φ = (α₀, σ_x², σ_u²); Ψ_i are per-subject moment equations whose joint
/// root is the ANOVA estimator, so Σ Ψ_i(φ̂) = 0 holds exactly (when the
/// σ_x² floor is not active).
#[derive(Debug, Clone)]
pub struct NuisanceScore {
    pub phi_hat: [f64; 3],
    /// per-subject Ψ_i(φ̂), m × 3
    pub psi: Vec<[f64; 3]>,
    /// Jacobian Σ ∂Ψ_i/∂φ (3 × 3)
    pub psi_jacobian: DMatrix<f64>,
    /// estimated covariance of φ̂ (3 × 3)
    pub cov_phi: DMatrix<f64>,
    pub m: usize,
    /// (main-study index, reliability index) pairs present in both samples;
    /// empty under the external reliability design
    pub overlap: Vec<(usize, usize)>,
}

impl NuisanceScore {
    /// Builds the estimating-function view of the one-way ANOVA fit.
    pub fn from_anova(study: &ReliabilityStudy) -> Result<Self> {
        let fit = crate::errormodel::estimate_nuisance(study)?;
        let m = study.m();
        let k = study.k() as f64;
        let mf = m as f64;
        let cm = mf / (mf - 1.0);
        let phi = fit.params.phi();
        let means = study.subject_means();

        let mut psi = Vec::with_capacity(m);
        let mut jac = DMatrix::<f64>::zeros(3, 3);
        let mut meat = DMatrix::<f64>::zeros(3, 3);
        for (row, &mi) in study.measurements.iter().zip(&means) {
            let dev = mi - phi[0];
            let s2 = row.iter().map(|&w| (w - mi).powi(2)).sum::<f64>() / (k - 1.0);
            let p = [
                dev,
                cm * dev * dev - phi[2] / k - phi[1],
                s2 - phi[2],
            ];
            let pd = DMatrix::<f64>::from_row_slice(
                3,
                3,
                &[
                    -1.0,
                    0.0,
                    0.0,
                    -2.0 * cm * dev,
                    -1.0,
                    -1.0 / k,
                    0.0,
                    0.0,
                    -1.0,
                ],
            );
            jac += &pd;
            let pv = DVector::from_column_slice(&p);
            meat.ger(1.0, &pv, &pv, 1.0);
            psi.push(p);
        }
        let jac_inv = jac
            .clone()
            .try_inverse()
            .ok_or_else(|| Error::Numeric("singular nuisance Jacobian".into()))?;
        let cov_phi = &jac_inv * meat * jac_inv.transpose();
        Ok(NuisanceScore {
            phi_hat: phi,
            psi,
            psi_jacobian: jac,
            cov_phi: symmetrize(cov_phi),
            m,
            overlap: Vec::new(),
        })
    }
}

/// Covariance of θ̂ corrected for the estimated nuisance parameters:
///
/// I⁻¹ [ Σ HᵢHᵢᵀ + U̇_φ Cov(φ̂) U̇_φᵀ − sym(Φ̂ (ΣΨ̇)⁻ᵀ U̇_φᵀ) ] I⁻¹,
///
/// with U̇_φ obtained by central finite differences of the score in φ and
/// Φ̂ = Σ_{overlap} Hᵢ Ψᵢᵀ (zero under the external reliability design).
/// Reduces to [`sandwich_cov`] when Cov(φ̂) = 0 and Φ̂ = 0.
pub fn nuisance_corrected_cov(
    cohort: &Cohort,
    theta_hat: &ThetaVector,
    ns: &NuisanceScore,
    rr_at_phi: &dyn Fn([f64; 3]) -> Result<Box<dyn RelRisk>>,
) -> Result<DMatrix<f64>> {
    let rr = rr_at_phi(ns.phi_hat)?;
    let d = rr.dim();
    let info = partial_lik::information(cohort, rr.as_ref(), theta_hat)?;
    let inv = invert_information(&info)?;
    let residuals = score_residuals(cohort, rr.as_ref(), theta_hat)?;
    let mut meat = DMatrix::<f64>::zeros(d, d);
    for h in &residuals {
        meat.ger(1.0, h, h, 1.0);
    }

    // U̇_φ by central differences, column per nuisance coordinate
    let mut u_dot = DMatrix::<f64>::zeros(d, 3);
    for j in 0..3 {
        let scale = ns.phi_hat[j].abs().max(1e-2);
        let h = 1e-4 * scale;
        let mut hi = ns.phi_hat;
        let mut lo = ns.phi_hat;
        hi[j] += h;
        lo[j] -= h;
        let u_hi = partial_lik::score(cohort, rr_at_phi(hi)?.as_ref(), theta_hat)?;
        let u_lo = partial_lik::score(cohort, rr_at_phi(lo)?.as_ref(), theta_hat)?;
        let col = (u_hi - u_lo) / (2.0 * h);
        u_dot.set_column(j, &col);
    }

    let mut corrected = meat + &u_dot * &ns.cov_phi * u_dot.transpose();
    if !ns.overlap.is_empty() {
        let mut phi_cross = DMatrix::<f64>::zeros(d, 3);
        for &(i_main, i_rel) in &ns.overlap {
            let h = &residuals[i_main];
            let p = ns.psi[i_rel];
            for a in 0..d {
                for b in 0..3 {
                    phi_cross[(a, b)] += h[a] * p[b];
                }
            }
        }
        let jac_inv_t = ns
            .psi_jacobian
            .clone()
            .try_inverse()
            .ok_or_else(|| Error::Numeric("singular nuisance Jacobian".into()))?
            .transpose();
        let cross = phi_cross * jac_inv_t * u_dot.transpose();
        corrected -= &cross + cross.transpose();
    }
    Ok(symmetrize(&inv * corrected * &inv))
}

/// Wald intervals θ̂_j ± z_{(1+level)/2}·SE_j for every component.
pub fn wald_ci(fit: &FitResult, level: f64) -> Vec<(f64, f64)> {
    wald_ci_parts(&fit.theta_hat, &fit.covariance, level)
}

pub(crate) fn wald_ci_parts(
    theta: &ThetaVector,
    covariance: &DMatrix<f64>,
    level: f64,
) -> Vec<(f64, f64)> {
    assert!((0.0..1.0).contains(&level), "level must be in [0,1)");
    let z = if level == 0.0 {
        0.0
    } else {
        normal::inv_cdf(0.5 * (1.0 + level))
    };
    let flat = theta.flatten();
    (0..theta.dim())
        .map(|j| {
            let se = covariance[(j, j)].max(0.0).sqrt();
            (flat[j] - z * se, flat[j] + z * se)
        })
        .collect()
}

/// Two-sided normal-approximation p-value for θ̂_j / SE_j.
pub fn wald_p_value(estimate: f64, se: f64) -> f64 {
    if se <= 0.0 {
        return if estimate == 0.0 { 1.0 } else { 0.0 };
    }
    2.0 * normal::sf((estimate / se).abs())
}
