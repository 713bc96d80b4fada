//! Measurement-error nuisance parameters and the conditional-expectation
//! formulas behind the regression-calibration and induced-relative-risk
//! corrections.
//!
//! The error model is classical and normal: W(t) = X(t) + U with
//! X | Z ~ N(α₀ + α₁ᵀz, σ_x²) and U ~ N(0, σ_u²) independent, so that
//! E[X | W, Z] = (1−λ)μ_x(z) + λW with attenuation λ = σ_x²/σ_w² and
//! Var(X | W, Z) = η² = σ_x²(1−λ).

use crate::domain::ThetaVector;
use crate::error::Error;
use crate::stats::normal;
use crate::Result;
use nalgebra::DVector;
use serde::{Deserialize, Serialize};

/// Nuisance parameters of the measurement-error model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorModelParams {
    pub alpha0: f64,
    /// slope of μ_x(z) = α₀ + α₁ᵀz; empty when there are no z covariates
    pub alpha1: Vec<f64>,
    pub sigma_x2: f64,
    pub sigma_u2: f64,
}

impl ErrorModelParams {
    pub fn new(alpha0: f64, alpha1: Vec<f64>, sigma_x2: f64, sigma_u2: f64) -> Result<Self> {
        if !(sigma_x2 > 0.0) || !(sigma_u2 >= 0.0) || !sigma_x2.is_finite() || !sigma_u2.is_finite()
        {
            return Err(Error::InvalidInput(
                "need sigma_x2 > 0 and sigma_u2 >= 0".into(),
            ));
        }
        Ok(ErrorModelParams {
            alpha0,
            alpha1,
            sigma_x2,
            sigma_u2,
        })
    }

    /// Error-free model (λ = 1): the surrogate is the truth.
    pub fn exact(sigma_x2: f64) -> Self {
        ErrorModelParams {
            alpha0: 0.0,
            alpha1: Vec::new(),
            sigma_x2,
            sigma_u2: 0.0,
        }
    }

    /// The simulation-study parametrization: X ~ N(0, 1) and σ_u² chosen to
    /// give the requested corr(X, W).
    pub fn from_rho(rho_xw: f64) -> Result<Self> {
        if !(rho_xw > 0.0 && rho_xw <= 1.0) {
            return Err(Error::InvalidInput("rho_xw must be in (0, 1]".into()));
        }
        let sigma_u2 = 1.0 / (rho_xw * rho_xw) - 1.0;
        ErrorModelParams::new(0.0, Vec::new(), 1.0, sigma_u2)
    }

    /// Conditional-mean parametrization E[X|W] = a + bW, Var(X|W) = v, as
    /// produced by a calibration regression under Berkson-style error.
    /// Requires slope b ∈ (0, 1).
    pub fn from_conditional(intercept: f64, slope: f64, cond_var: f64) -> Result<Self> {
        if !(slope > 0.0 && slope < 1.0) || !(cond_var > 0.0) {
            return Err(Error::InvalidInput(
                "conditional parametrization needs slope in (0,1) and positive variance".into(),
            ));
        }
        let sigma_x2 = cond_var / (1.0 - slope);
        let sigma_w2 = sigma_x2 / slope;
        let alpha0 = intercept / (1.0 - slope);
        ErrorModelParams::new(alpha0, Vec::new(), sigma_x2, sigma_w2 - sigma_x2)
    }

    pub fn sigma_w2(&self) -> f64 {
        self.sigma_x2 + self.sigma_u2
    }

    /// Attenuation factor λ = σ_x²/σ_w² ∈ (0, 1].
    pub fn lambda(&self) -> f64 {
        self.sigma_x2 / self.sigma_w2()
    }

    /// Residual variance η² = Var(X | W, Z) = σ_x²(1−λ).
    pub fn eta2(&self) -> f64 {
        self.sigma_x2 * (1.0 - self.lambda())
    }

    pub fn eta(&self) -> f64 {
        self.eta2().sqrt()
    }

    /// μ_x(z) = α₀ + α₁ᵀz.
    pub fn mu_x(&self, z: &DVector<f64>) -> f64 {
        let mut m = self.alpha0;
        for (a, zi) in self.alpha1.iter().zip(z.iter()) {
            m += a * zi;
        }
        m
    }

    /// Flattened nuisance vector φ = (α₀, σ_x², σ_u²) used by the
    /// nuisance-corrected covariance.
    pub fn phi(&self) -> [f64; 3] {
        [self.alpha0, self.sigma_x2, self.sigma_u2]
    }

    pub fn with_phi(&self, phi: [f64; 3]) -> Result<Self> {
        ErrorModelParams::new(phi[0], self.alpha1.clone(), phi[1], phi[2])
    }
}

/// External reliability study: m subjects with k replicate surrogate
/// measurements each.
#[derive(Debug, Clone)]
pub struct ReliabilityStudy {
    /// row-major m × k matrix of readings
    pub measurements: Vec<Vec<f64>>,
}

impl ReliabilityStudy {
    pub fn new(measurements: Vec<Vec<f64>>) -> Result<Self> {
        let m = measurements.len();
        if m < 2 {
            return Err(Error::InvalidInput(
                "reliability study needs at least 2 subjects".into(),
            ));
        }
        let k = measurements[0].len();
        if k < 2 || measurements.iter().any(|r| r.len() != k) {
            return Err(Error::InvalidInput(
                "reliability study needs k >= 2 replicates per subject, no missing cells".into(),
            ));
        }
        if measurements.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(
                "reliability measurements must be finite".into(),
            ));
        }
        Ok(ReliabilityStudy { measurements })
    }

    pub fn m(&self) -> usize {
        self.measurements.len()
    }

    pub fn k(&self) -> usize {
        self.measurements[0].len()
    }

    pub fn subject_means(&self) -> Vec<f64> {
        let k = self.k() as f64;
        self.measurements
            .iter()
            .map(|row| row.iter().sum::<f64>() / k)
            .collect()
    }
}

/// Outcome of the one-way random-effects ANOVA on a reliability study.
#[derive(Debug, Clone)]
pub struct NuisanceFit {
    pub params: ErrorModelParams,
    /// between/within mean squares
    pub msb: f64,
    pub msw: f64,
    /// true when MSB ≤ MSW forced the σ_x² floor
    pub floored: bool,
}

/// Floor applied to σ̂_x² when the between-subject mean square does not
/// exceed the within-subject one, keeping λ ∈ (0, 1].
fn sigma_x2_floor(msw: f64) -> f64 {
    1e-8 * msw.max(f64::MIN_POSITIVE)
}

/// One-way random-effects ANOVA estimates of (α₀, σ_x², σ_u²):
/// σ̂_u² = MSW, σ̂_x² = (MSB − MSW)/k floored at a small positive value,
/// α̂₀ = grand mean, α̂₁ = 0 (the reliability study carries no z).
pub fn estimate_nuisance(study: &ReliabilityStudy) -> Result<NuisanceFit> {
    let m = study.m() as f64;
    let k = study.k() as f64;
    let means = study.subject_means();
    let grand = means.iter().sum::<f64>() / m;
    let msb = k * means.iter().map(|&mi| (mi - grand).powi(2)).sum::<f64>() / (m - 1.0);
    let msw = study
        .measurements
        .iter()
        .zip(&means)
        .map(|(row, &mi)| row.iter().map(|&w| (w - mi).powi(2)).sum::<f64>())
        .sum::<f64>()
        / (m * (k - 1.0));
    let raw = (msb - msw) / k;
    let floor = sigma_x2_floor(msw);
    let (sigma_x2, floored) = if raw > floor { (raw, false) } else { (floor, true) };
    Ok(NuisanceFit {
        params: ErrorModelParams::new(grand, Vec::new(), sigma_x2, msw)?,
        msb,
        msw,
        floored,
    })
}

/// E[X | W = w, Z = z] = (1−λ)μ_x(z) + λw.
pub fn cond_mean_x(w: f64, z: &DVector<f64>, em: &ErrorModelParams) -> f64 {
    let lambda = em.lambda();
    (1.0 - lambda) * em.mu_x(z) + lambda * w
}

/// E[(X−τ)₊ | W = w, Z = z] by the truncated-normal mean formula
/// (1 − Φ((τ−μ)/η))(μ−τ) + η·φ((τ−μ)/η); degenerates to (μ−τ)₊ when η = 0.
pub fn cond_plus_mean(w: f64, z: &DVector<f64>, em: &ErrorModelParams, tau: f64) -> f64 {
    let mu = cond_mean_x(w, z, em);
    plus_mean_mu(mu, em.eta(), tau)
}

/// Truncated-normal mean with the conditional mean given directly.
pub fn plus_mean_mu(mu: f64, eta: f64, tau: f64) -> f64 {
    if eta == 0.0 {
        return (mu - tau).max(0.0);
    }
    let c = (tau - mu) / eta;
    normal::sf(c) * (mu - tau) + normal::pdf(c) * eta
}

/// Value, gradient and Hessian in (β, ω) of
/// E[exp(βX + ω(X−τ)₊) | W, Z]  — the induced relative-risk kernel.
/// The γᵀz factor is deliberately not included.
#[derive(Debug, Clone, Copy)]
pub struct RrKernel {
    pub value: f64,
    /// (∂/∂β, ∂/∂ω)
    pub grad: [f64; 2],
    /// [∂²/∂β², ∂²/∂β∂ω, ∂²/∂ω²]
    pub hess: [f64; 3],
}

/// Closed form of the induced relative-risk kernel at conditional mean μ and
/// conditional standard deviation η:
///
/// e^{η²β²/2 + βμ} Φ((τ − η²β − μ)/η)
///   + e^{−ωτ + η²(β+ω)²/2 + (β+ω)μ} Φ((−τ + η²(β+ω) + μ)/η).
///
/// At η = 0 the expectation degenerates to exp(βμ + ω(μ−τ)₊).
pub fn rr_kernel_mu(beta: f64, omega: f64, mu: f64, eta: f64, tau: f64) -> RrKernel {
    if eta == 0.0 {
        let plus = (mu - tau).max(0.0);
        let v = (beta * mu + omega * plus).exp();
        return RrKernel {
            value: v,
            grad: [mu * v, plus * v],
            hess: [mu * mu * v, mu * plus * v, plus * plus * v],
        };
    }
    let eta2 = eta * eta;
    let u = beta + omega;

    let a1 = 0.5 * eta2 * beta * beta + beta * mu;
    let c1 = (tau - eta2 * beta - mu) / eta;
    let a2 = -omega * tau + 0.5 * eta2 * u * u + u * mu;
    let c2 = (-tau + eta2 * u + mu) / eta;

    let e1 = a1.exp();
    let e2 = a2.exp();
    let cdf1 = normal::cdf(c1);
    let cdf2 = normal::cdf(c2);
    let pdf1 = normal::pdf(c1);
    let pdf2 = normal::pdf(c2);

    let t1 = e1 * cdf1;
    let t2 = e2 * cdf2;

    // ∂a/∂(β, ω) for each term; the Φ arguments move by ∓η per unit slope
    let k = eta2 * beta + mu;
    let lb = eta2 * u + mu;
    let lo = -tau + eta2 * u + mu;

    let d_beta = e1 * (k * cdf1 - eta * pdf1) + e2 * (lb * cdf2 + eta * pdf2);
    let d_omega = e2 * (lo * cdf2 + eta * pdf2);

    let d_bb = e1 * ((k * k + eta2) * cdf1 - (2.0 * k + eta * c1) * eta * pdf1)
        + e2 * ((lb * lb + eta2) * cdf2 + (2.0 * lb - eta * c2) * eta * pdf2);
    let d_bo = e2 * ((lb * lo + eta2) * cdf2 + (lb + lo - eta * c2) * eta * pdf2);
    let d_oo = e2 * ((lo * lo + eta2) * cdf2 + (2.0 * lo - eta * c2) * eta * pdf2);

    RrKernel {
        value: t1 + t2,
        grad: [d_beta, d_omega],
        hess: [d_bb, d_bo, d_oo],
    }
}

/// E[exp(βX + ω(X−τ)₊) | W = w, Z = z] (γᵀz factor excluded).
pub fn rr_cond_expectation(
    theta: &ThetaVector,
    w: f64,
    z: &DVector<f64>,
    em: &ErrorModelParams,
) -> f64 {
    let mu = cond_mean_x(w, z, em);
    rr_kernel_mu(theta.beta, theta.omega, mu, em.eta(), theta.tau).value
}

/// (∂/∂β, ∂/∂ω) of [`rr_cond_expectation`].
pub fn rr_cond_gradient(
    theta: &ThetaVector,
    w: f64,
    z: &DVector<f64>,
    em: &ErrorModelParams,
) -> [f64; 2] {
    let mu = cond_mean_x(w, z, em);
    rr_kernel_mu(theta.beta, theta.omega, mu, em.eta(), theta.tau).grad
}

/// Surrogate kind for the exponential-form estimators.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SurrogateKind {
    Naive,
    Rc1,
    Rc2,
}

/// The surrogate pair (g₁, g₂) standing in for (X, (X−τ)₊):
/// naive → (w, (w−τ)₊); RC1 → (μ, (μ−τ)₊); RC2 → (μ, E[(X−τ)₊|W,Z]).
pub fn surrogate_pair(
    method: SurrogateKind,
    w: f64,
    z: &DVector<f64>,
    em: &ErrorModelParams,
    tau: f64,
) -> (f64, f64) {
    match method {
        SurrogateKind::Naive => (w, (w - tau).max(0.0)),
        SurrogateKind::Rc1 => {
            let mu = cond_mean_x(w, z, em);
            (mu, (mu - tau).max(0.0))
        }
        SurrogateKind::Rc2 => {
            let mu = cond_mean_x(w, z, em);
            (mu, plus_mean_mu(mu, em.eta(), tau))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stats::quadrature::integrate_gl;
    use rand::Rng;

    fn z0() -> DVector<f64> {
        DVector::zeros(0)
    }

    #[test]
    fn anova_zero_within_spread() {
        let study = ReliabilityStudy::new(vec![vec![0.0, 0.0], vec![1.0, 1.0]]).unwrap();
        let fit = estimate_nuisance(&study).unwrap();
        assert_eq!(fit.params.sigma_u2, 0.0);
        assert!((fit.params.sigma_x2 - 0.5).abs() < 1e-15);
        assert_eq!(fit.params.lambda(), 1.0);
        assert!(!fit.floored);
    }

    #[test]
    fn anova_degenerate_rows_floor() {
        let study = ReliabilityStudy::new(vec![vec![0.0, 1.0], vec![0.0, 1.0]]).unwrap();
        let fit = estimate_nuisance(&study).unwrap();
        assert_eq!(fit.msb, 0.0);
        assert!((fit.msw - 0.5).abs() < 1e-15);
        assert!(fit.floored);
        assert!(fit.params.sigma_x2 > 0.0 && fit.params.lambda() > 0.0);
    }

    #[test]
    fn anova_unbiased_at_design_scale() {
        // oracle: average ANOVA estimates over many synthetic studies drawn at
        // the simulation design (m = 500, k = 2, sigma_x2 = 1, sigma_u2 = 1.77)
        let truth = ErrorModelParams::from_rho(0.6).unwrap();
        let reps = 1000;
        let mut rng = crate::stats::rng::stream(90, &[7]);
        let (mut sx, mut su) = (0.0, 0.0);
        let (mut sx2, mut su2) = (0.0, 0.0);
        for _ in 0..reps {
            let rows: Vec<Vec<f64>> = (0..500)
                .map(|_| {
                    let x: f64 = rng.gen::<f64>();
                    let x = crate::stats::normal::inv_cdf(x); // N(0,1)
                    (0..2)
                        .map(|_| {
                            x + truth.sigma_u2.sqrt()
                                * crate::stats::normal::inv_cdf(rng.gen::<f64>())
                        })
                        .collect()
                })
                .collect();
            let fit = estimate_nuisance(&ReliabilityStudy::new(rows).unwrap()).unwrap();
            sx += fit.params.sigma_x2;
            su += fit.params.sigma_u2;
            sx2 += fit.params.sigma_x2.powi(2);
            su2 += fit.params.sigma_u2.powi(2);
        }
        let n = reps as f64;
        let (mx, mu_) = (sx / n, su / n);
        let se_x = ((sx2 / n - mx * mx) / n).sqrt();
        let se_u = ((su2 / n - mu_ * mu_) / n).sqrt();
        assert!((mx - truth.sigma_x2).abs() < 3.0 * se_x, "sigma_x2 {mx} ± {se_x}");
        assert!((mu_ - truth.sigma_u2).abs() < 3.0 * se_u, "sigma_u2 {mu_} ± {se_u}");
    }

    #[test]
    fn anova_invariant_to_relabeling() {
        let rows = vec![
            vec![0.3, -0.1],
            vec![1.4, 1.1],
            vec![-0.7, -0.2],
            vec![0.9, 0.4],
        ];
        let fit = estimate_nuisance(&ReliabilityStudy::new(rows.clone()).unwrap()).unwrap();
        let mut shuffled = rows;
        shuffled.swap(0, 3);
        shuffled.swap(1, 2);
        for row in shuffled.iter_mut() {
            row.reverse();
        }
        let fit2 = estimate_nuisance(&ReliabilityStudy::new(shuffled).unwrap()).unwrap();
        assert!((fit.params.sigma_x2 - fit2.params.sigma_x2).abs() < 1e-14);
        assert!((fit.params.sigma_u2 - fit2.params.sigma_u2).abs() < 1e-14);
        assert!((fit.params.alpha0 - fit2.params.alpha0).abs() < 1e-14);
    }

    #[test]
    fn cond_mean_cases() {
        let exact = ErrorModelParams::exact(1.0);
        assert_eq!(cond_mean_x(1.7, &z0(), &exact), 1.7);

        // lambda = rho² = 0.64 at sigma_u2 = 0.5625
        let em = ErrorModelParams::from_rho(0.8).unwrap();
        assert!((em.sigma_u2 - 0.5625).abs() < 1e-12);
        assert!((em.lambda() - 0.64).abs() < 1e-12);
        assert!((cond_mean_x(1.0, &z0(), &em) - 0.64).abs() < 1e-12);

        // fixed point at the mean, for every lambda
        let em = ErrorModelParams::new(0.7, Vec::new(), 1.0, 2.5).unwrap();
        let w = em.mu_x(&z0());
        assert!((cond_mean_x(w, &z0(), &em) - w).abs() < 1e-12);
    }

    #[test]
    fn attenuation_identity_for_rho_grid() {
        for (rho, su2) in [(0.8, 0.5625), (0.6, 16.0 / 9.0), (0.4, 5.25)] {
            let em = ErrorModelParams::from_rho(rho).unwrap();
            assert!((em.sigma_u2 - su2).abs() < 1e-12);
            assert!((em.lambda() - rho * rho).abs() < 1e-12);
        }
    }

    #[test]
    fn plus_mean_cases() {
        assert_eq!(plus_mean_mu(2.0, 0.0, 1.0), 1.0);
        assert_eq!(plus_mean_mu(0.5, 0.0, 1.0), 0.0);
        // mu = tau: (1−Φ(0))·0 + φ(0)·η
        let v = plus_mean_mu(1.3, 0.6, 1.3);
        assert!((v - 0.6 * normal::pdf(0.0)).abs() < 1e-14);
        assert!((v - 0.2393653682408596).abs() < 1e-12);
    }

    #[test]
    fn plus_mean_matches_quadrature() {
        // frozen from the quadrature oracle: ∫ (x-0.5)+ N(x; 0, 0.36) dx
        assert!((plus_mean_mu(0.0, 0.6, 0.5) - 0.067982934764360).abs() < 1e-12);
        // oracle re-run: integrate over [tau, mu+12eta]
        for (mu, eta, tau) in [(0.0, 0.6, 0.5), (-0.4, 0.9, 0.3), (1.1, 0.25, 0.6)] {
            let oracle = integrate_gl(tau, mu + 12.0 * eta, 24, 40, |x| {
                (x - tau) * normal::pdf((x - mu) / eta) / eta
            });
            assert!(
                (plus_mean_mu(mu, eta, tau) - oracle).abs() < 1e-10,
                "mu={mu} eta={eta} tau={tau}"
            );
        }
    }

    #[test]
    fn plus_mean_converges_to_hinge_as_error_vanishes() {
        let tau = 0.4;
        for mu in [-1.0, 0.0, 0.4, 1.5] {
            let mut prev_gap = f64::INFINITY;
            for su2 in [0.1, 0.01, 0.001, 1e-5] {
                let em = ErrorModelParams::new(0.0, Vec::new(), 1.0, su2).unwrap();
                let gap = (plus_mean_mu(mu, em.eta(), tau) - (mu - tau).max(0.0)).abs();
                assert!(gap <= prev_gap + 1e-12);
                prev_gap = gap;
            }
            assert!(prev_gap < 2e-3);
        }
    }

    #[test]
    fn rr_kernel_trivial_identities() {
        // beta = omega = 0 → Φ(a) + Φ(−a) = 1
        for (mu, eta, tau) in [(0.3, 0.6, 0.1), (-1.0, 0.2, 0.5), (2.0, 1.1, -0.4)] {
            let k = rr_kernel_mu(0.0, 0.0, mu, eta, tau);
            assert!((k.value - 1.0).abs() < 1e-14);
        }
        // omega = 0 → lognormal moment, independent of tau
        let k = rr_kernel_mu(0.405, 0.0, 0.0, 0.6, 0.7);
        assert!((k.value - (0.5 * 0.36 * 0.405f64.powi(2)).exp()).abs() < 1e-12);
    }

    #[test]
    fn rr_kernel_matches_frozen_oracle_value() {
        // frozen from a split adaptive quadrature of exp(βx+ω(x−τ)₊)·N(x;0.3,0.36)
        let k = rr_kernel_mu(0.405, 0.693, 0.3, 0.6, 0.0);
        assert!((k.value - 1.780180736517922).abs() < 1e-12, "{}", k.value);
    }

    #[test]
    fn rr_kernel_matches_monte_carlo_oracle() {
        use rand_distr::{Distribution, Normal};
        let (beta, omega, mu, eta, tau): (f64, f64, f64, f64, f64) = (0.405, 0.693, 0.3, 0.6, 0.0);
        let normal_x = Normal::new(mu, eta).unwrap();
        let mut rng = crate::stats::rng::stream(20_000, &[1]);
        let n = 200_000;
        let (mut s, mut s2) = (0.0, 0.0);
        for _ in 0..n {
            let x = normal_x.sample(&mut rng);
            let v: f64 = (beta * x + omega * (x - tau).max(0.0)).exp();
            s += v;
            s2 += v * v;
        }
        let mean = s / n as f64;
        let se = ((s2 / n as f64 - mean * mean) / n as f64).sqrt();
        let k = rr_kernel_mu(beta, omega, mu, eta, tau);
        assert!(
            (k.value - mean).abs() < 3.0 * se,
            "closed {} vs MC {mean} ± {se}",
            k.value
        );
    }

    #[test]
    fn rr_gradient_finite_difference_grid() {
        let mut rng = crate::stats::rng::stream(5, &[3]);
        let h = 1e-5;
        for _ in 0..100 {
            let beta = rng.gen_range(-1.0..1.0);
            let omega = rng.gen_range(-1.0..1.0);
            let mu = rng.gen_range(-2.0..2.0);
            let eta = rng.gen_range(0.1..1.1);
            let tau = rng.gen_range(-1.3..1.3);
            let k = rr_kernel_mu(beta, omega, mu, eta, tau);
            let fb = (rr_kernel_mu(beta + h, omega, mu, eta, tau).value
                - rr_kernel_mu(beta - h, omega, mu, eta, tau).value)
                / (2.0 * h);
            let fo = (rr_kernel_mu(beta, omega + h, mu, eta, tau).value
                - rr_kernel_mu(beta, omega - h, mu, eta, tau).value)
                / (2.0 * h);
            assert!((k.grad[0] - fb).abs() / (1.0 + k.grad[0].abs()) < 1e-6);
            assert!((k.grad[1] - fo).abs() / (1.0 + k.grad[1].abs()) < 1e-6);
            // Hessian against gradient differences
            let gb = rr_kernel_mu(beta + h, omega, mu, eta, tau).grad;
            let gb2 = rr_kernel_mu(beta - h, omega, mu, eta, tau).grad;
            let go = rr_kernel_mu(beta, omega + h, mu, eta, tau).grad;
            let go2 = rr_kernel_mu(beta, omega - h, mu, eta, tau).grad;
            let fbb = (gb[0] - gb2[0]) / (2.0 * h);
            let fbo = (go[0] - go2[0]) / (2.0 * h);
            let foo = (go[1] - go2[1]) / (2.0 * h);
            assert!((k.hess[0] - fbb).abs() / (1.0 + k.hess[0].abs()) < 1e-5);
            assert!((k.hess[1] - fbo).abs() / (1.0 + k.hess[1].abs()) < 1e-5);
            assert!((k.hess[2] - foo).abs() / (1.0 + k.hess[2].abs()) < 1e-5);
        }
    }

    #[test]
    fn rr_gradient_edge_behaviour() {
        // mean-zero conditional at beta = omega = 0, tau = 0, mu = 0:
        // ∂/∂β = E[X | W] = 0
        let k = rr_kernel_mu(0.0, 0.0, 0.0, 0.6, 0.0);
        assert!(k.grad[0].abs() < 1e-14);
        // plus-part sensitivity decays (polynomially) as omega → −∞
        let seq: Vec<f64> = [-5.0, -10.0, -20.0, -40.0]
            .iter()
            .map(|&o| rr_kernel_mu(0.3, o, 0.2, 0.6, 0.0).grad[1].abs())
            .collect();
        assert!(seq.windows(2).all(|w| w[1] < w[0]), "not decaying: {seq:?}");
        assert!(seq[3] < 1e-3, "grad at omega=-40: {}", seq[3]);
    }

    #[test]
    fn surrogate_pair_cases() {
        let em = ErrorModelParams::from_rho(0.8).unwrap();
        let (g1, g2) = surrogate_pair(SurrogateKind::Naive, 1.2, &z0(), &em, 0.5);
        assert_eq!((g1, g2), (1.2, 0.7f64));

        // no error: RC1 collapses onto the naive pair
        let exact = ErrorModelParams::exact(1.0);
        for w in [-1.0, 0.2, 2.5] {
            let a = surrogate_pair(SurrogateKind::Naive, w, &z0(), &exact, 0.3);
            let b = surrogate_pair(SurrogateKind::Rc1, w, &z0(), &exact, 0.3);
            assert_eq!(a, b);
        }
    }

    #[test]
    fn rc2_dominates_rc1_plus_part() {
        // Jensen: E[(X−τ)₊|W] ≥ (E[X|W]−τ)₊, equality iff η = 0
        let mut rng = crate::stats::rng::stream(17, &[0]);
        for _ in 0..200 {
            let em = ErrorModelParams::new(
                rng.gen_range(-0.5..0.5),
                Vec::new(),
                rng.gen_range(0.2..2.0),
                rng.gen_range(0.0..2.0),
            )
            .unwrap();
            let tau = rng.gen_range(-1.0..1.0);
            let w = rng.gen_range(-3.0..3.0);
            let (_, rc1) = surrogate_pair(SurrogateKind::Rc1, w, &z0(), &em, tau);
            let (_, rc2) = surrogate_pair(SurrogateKind::Rc2, w, &z0(), &em, tau);
            assert!(rc2 >= rc1 - 1e-13);
            if em.sigma_u2 == 0.0 {
                assert!((rc2 - rc1).abs() < 1e-13);
            }
        }
        let exact = ErrorModelParams::exact(1.0);
        let (_, a) = surrogate_pair(SurrogateKind::Rc1, 0.9, &z0(), &exact, 0.2);
        let (_, b) = surrogate_pair(SurrogateKind::Rc2, 0.9, &z0(), &exact, 0.2);
        assert_eq!(a, b);
    }

    #[test]
    fn conditional_parametrization_roundtrip() {
        let em = ErrorModelParams::from_conditional(1.181, 0.635, 58.169).unwrap();
        assert!((em.lambda() - 0.635).abs() < 1e-12);
        assert!((em.eta2() - 58.169).abs() < 1e-9);
        assert!(((1.0 - em.lambda()) * em.alpha0 - 1.181).abs() < 1e-12);
    }
}
