//! Scenario-driven data generation and Monte Carlo evaluation: cohorts,
//! reliability studies, the two-error-prone-covariates comparison setting,
//! and metric aggregation (bias, coverage, convergence).

use crate::domain::{Cohort, FitResult, Method, StepFn, Subject, ThetaVector};
use crate::error::Error;
use crate::errormodel::{estimate_nuisance, ErrorModelParams, ReliabilityStudy, SurrogateKind};
use crate::estimators::{
    self, BootstrapConfig, MppleConfig, RcVariant, SimexConfig, SurrogateRisk,
};
use crate::partial_lik::{self, ExpRisk, NewtonOptions};
use crate::stats::normal;
use crate::stats::quadrature::{gauss_hermite, integrate_gl};
use crate::stats::rng::stream;
use crate::variance::{self, NuisanceScore};
use crate::Result;
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::sync::Arc;

/// Distribution of the true covariate X (and, scaled, of the error U); all
/// variants are standardized to mean 0, variance 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum XDist {
    #[default]
    Normal,
    T6,
    T15,
    LogGamma11,
}

const EULER_MASCHERONI: f64 = 0.577_215_664_901_532_9;

impl XDist {
    fn t_scale(df: f64) -> f64 {
        ((df - 2.0) / df).sqrt()
    }

    /// log-Gamma(1,1) standardization: mean −γ_E, variance π²/6
    fn log_gamma_sd() -> f64 {
        std::f64::consts::PI / 6f64.sqrt()
    }

    pub fn sample(&self, rng: &mut impl Rng) -> f64 {
        match self {
            XDist::Normal => rng.sample(StandardNormal),
            XDist::T6 => Self::sample_t(6.0, rng) * Self::t_scale(6.0),
            XDist::T15 => Self::sample_t(15.0, rng) * Self::t_scale(15.0),
            XDist::LogGamma11 => {
                // Gamma(1,1) = Exp(1); standardize log of it
                let g: f64 = rng.sample::<f64, _>(rand_distr::Exp1);
                (g.ln() + EULER_MASCHERONI) / Self::log_gamma_sd()
            }
        }
    }

    fn sample_t(df: f64, rng: &mut impl Rng) -> f64 {
        let t = rand_distr::StudentT::new(df).expect("valid df");
        rng.sample(t)
    }

    /// Density of the standardized variable.
    pub fn density(&self, x: f64) -> f64 {
        match self {
            XDist::Normal => normal::pdf(x),
            XDist::T6 => t_density(x / Self::t_scale(6.0), 6.0) / Self::t_scale(6.0),
            XDist::T15 => t_density(x / Self::t_scale(15.0), 15.0) / Self::t_scale(15.0),
            XDist::LogGamma11 => {
                let s = Self::log_gamma_sd();
                let l = s * x - EULER_MASCHERONI;
                s * (l - l.exp()).exp()
            }
        }
    }

    /// Interval outside which the density mass is negligible for quadrature.
    pub fn support(&self) -> (f64, f64) {
        match self {
            XDist::Normal => (-9.0, 9.0),
            XDist::T6 => (-300.0, 300.0),
            XDist::T15 => (-80.0, 80.0),
            XDist::LogGamma11 => (-32.0, 5.0),
        }
    }
}

fn ln_gamma(x: f64) -> f64 {
    // Lanczos approximation, g = 7
    const COEF: [f64; 8] = [
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_1,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_572e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        let pi = std::f64::consts::PI;
        (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x)
    } else {
        let x = x - 1.0;
        let mut a = 0.999_999_999_999_809_93;
        for (i, &c) in COEF.iter().enumerate() {
            a += c / (x + (i + 1) as f64);
        }
        let t = x + 7.5;
        0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
    }
}

fn t_density(t: f64, df: f64) -> f64 {
    let lg = ln_gamma((df + 1.0) / 2.0) - ln_gamma(df / 2.0);
    let norm = (lg - 0.5 * (df * std::f64::consts::PI).ln()).exp();
    norm * (1.0 + t * t / df).powf(-(df + 1.0) / 2.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Nuisance {
    #[default]
    Known,
    Estimated,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DesignKind {
    #[default]
    Changepoint,
    TwoVariable,
}

fn default_t_star() -> f64 {
    10.0
}
fn default_beta0() -> f64 {
    1.5f64.ln()
}
fn default_omega0() -> f64 {
    2.0f64.ln()
}
fn default_reliability_m() -> usize {
    500
}
fn default_reliability_k() -> usize {
    2
}

/// Configuration of one simulation scenario.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScenarioSpec {
    #[serde(default)]
    pub id: String,
    pub n: usize,
    pub cum_incidence: f64,
    #[serde(default = "default_t_star")]
    pub t_star: f64,
    #[serde(default = "default_beta0")]
    pub beta0: f64,
    #[serde(default = "default_omega0")]
    pub omega0: f64,
    /// coefficients of additional error-free covariates Z ~ N(0, I)
    #[serde(default)]
    pub gamma0: Option<Vec<f64>>,
    pub tau_quantile: f64,
    pub rho_xw: f64,
    #[serde(default)]
    pub x_dist: XDist,
    #[serde(default = "default_reliability_m")]
    pub reliability_m: usize,
    #[serde(default = "default_reliability_k")]
    pub reliability_k: usize,
    pub reps: usize,
    pub methods: Vec<Method>,
    #[serde(default)]
    pub nuisance: Nuisance,
    pub seed: u64,
    #[serde(default)]
    pub design: DesignKind,
    /// RR2 bootstrap replicates
    #[serde(default)]
    pub bootstrap_b: Option<usize>,
    #[serde(default)]
    pub simex: Option<SimexConfig>,
    #[serde(default)]
    pub mpple: Option<MppleConfig>,
}

const TAU_QUANTILES: [f64; 5] = [0.1, 0.25, 0.5, 0.75, 0.9];
const RHO_GRID: [f64; 3] = [0.8, 0.6, 0.4];

impl ScenarioSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.into()));
        if self.n < 2 || self.reps < 1 || self.methods.is_empty() {
            return bad("need n >= 2, reps >= 1 and at least one method");
        }
        if !(self.cum_incidence > 0.0 && self.cum_incidence < 1.0) {
            return bad("cum_incidence must be in (0,1)");
        }
        if self.t_star != 10.0 {
            return bad("t_star is fixed at 10 in the simulation design");
        }
        if !TAU_QUANTILES.iter().any(|&q| (q - self.tau_quantile).abs() < 1e-12) {
            return bad("tau_quantile must be one of 0.1, 0.25, 0.5, 0.75, 0.9");
        }
        if !RHO_GRID.iter().any(|&r| (r - self.rho_xw).abs() < 1e-12) {
            return bad("rho_xw must be one of 0.8, 0.6, 0.4");
        }
        if self.reliability_m < 2 || self.reliability_k < 2 {
            return bad("reliability study needs m >= 2 and k >= 2");
        }
        if self.design == DesignKind::TwoVariable {
            if self.x_dist != XDist::Normal || self.gamma0.is_some() {
                return bad("the two-variable design uses normal X and no extra covariates");
            }
            if self
                .methods
                .iter()
                .any(|m| !matches!(m, Method::Naive | Method::Rc1))
            {
                return bad("the two-variable design supports the naive and RC methods only");
            }
        }
        Ok(())
    }

    pub fn tau(&self) -> f64 {
        normal::inv_cdf(self.tau_quantile)
    }

    pub fn p(&self) -> usize {
        self.gamma0.as_ref().map_or(0, Vec::len)
    }

    /// True parameter vector in flattened order (γ…, β, ω).
    pub fn truth(&self) -> Vec<f64> {
        let mut t = self.gamma0.clone().unwrap_or_default();
        t.push(self.beta0);
        t.push(self.omega0);
        t
    }

    pub fn error_model(&self) -> Result<ErrorModelParams> {
        ErrorModelParams::from_rho(self.rho_xw)
    }
}

/// Solves E[1 − exp(−t*·λ₀·e^{h(X,Z)})] = cum_incidence for λ₀ by bisection,
/// with the X-expectation by quadrature split at the changepoint and any
/// Z-covariates integrated by Gauss–Hermite.
pub fn calibrate_lambda0(sc: &ScenarioSpec) -> Result<f64> {
    sc.validate()?;
    if sc.design == DesignKind::TwoVariable {
        return Err(Error::InvalidConfig(
            "two-variable calibration happens in TwoVarModel".into(),
        ));
    }
    calibrate_lambda0_parts(
        sc.beta0,
        sc.omega0,
        sc.gamma0.as_deref().unwrap_or(&[]),
        sc.tau(),
        sc.x_dist,
        sc.cum_incidence,
        sc.t_star,
    )
}

pub fn calibrate_lambda0_parts(
    beta0: f64,
    omega0: f64,
    gamma0: &[f64],
    tau: f64,
    x_dist: XDist,
    cum_incidence: f64,
    t_star: f64,
) -> Result<f64> {
    // z-integration nodes (product Gauss–Hermite per coordinate)
    let (zu, zw) = gauss_hermite(24);
    let inv_sqrt_pi = 1.0 / std::f64::consts::PI.sqrt();
    let z_factors: Vec<(f64, f64)> = if gamma0.is_empty() {
        vec![(1.0, 1.0)]
    } else {
        // enumerate the tensor grid of e^{γᵀz} factors with joint weights
        let mut acc: Vec<(f64, f64)> = vec![(1.0, 1.0)];
        for &g in gamma0 {
            let mut next = Vec::with_capacity(acc.len() * zu.len());
            for &(w0, f0) in &acc {
                for (u, wq) in zu.iter().zip(&zw) {
                    let z = std::f64::consts::SQRT_2 * u;
                    next.push((w0 * wq * inv_sqrt_pi, f0 * (g * z).exp()));
                }
            }
            acc = next;
        }
        acc
    };

    let (lo_x, hi_x) = x_dist.support();
    let incidence = |lam0: f64| -> f64 {
        let g = |x: f64| -> f64 {
            let hx = (beta0 * x + omega0 * (x - tau).max(0.0)).exp();
            let mut v = 0.0;
            for &(wz, fz) in &z_factors {
                v += wz * (1.0 - (-t_star * lam0 * hx * fz).exp());
            }
            v * x_dist.density(x)
        };
        integrate_gl(lo_x, tau, 48, 32, g) + integrate_gl(tau, hi_x, 48, 32, g)
    };

    bisect_incidence(incidence, cum_incidence)
}

fn bisect_incidence(incidence: impl Fn(f64) -> f64, target: f64) -> Result<f64> {
    let mut lo = 0.0;
    let mut hi = 1e-6;
    let mut guard = 0;
    while incidence(hi) < target {
        hi *= 4.0;
        guard += 1;
        if guard > 80 {
            return Err(Error::Numeric("baseline-hazard bracket not found".into()));
        }
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if incidence(mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
        if (hi - lo) <= 1e-13 * hi {
            break;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// One simulated subject set under the changepoint design; the true covariate
/// path is retained on each subject.
pub fn generate_cohort(sc: &ScenarioSpec, lambda0: f64, rng: &mut impl Rng) -> Result<Cohort> {
    generate_cohort_explicit_tau(sc, lambda0, sc.tau(), rng)
}

/// As [`generate_cohort`] with the changepoint given directly (used by the
/// asymptotic-bias solver, whose τ need not sit on the quantile grid).
pub fn generate_cohort_explicit_tau(
    sc: &ScenarioSpec,
    lambda0: f64,
    tau: f64,
    rng: &mut impl Rng,
) -> Result<Cohort> {
    let em = sc.error_model()?;
    let sigma_u = em.sigma_u2.sqrt();
    let p = sc.p();
    let gamma = sc.gamma0.clone().unwrap_or_default();
    let subjects: Vec<Subject> = (0..sc.n)
        .map(|i| {
            let x = sc.x_dist.sample(rng);
            let u = sigma_u * sc.x_dist.sample(rng);
            let w = x + u;
            let z: Vec<f64> = (0..p).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
            let mut log_rate = sc.beta0 * x + sc.omega0 * (x - tau).max(0.0);
            for (g, zv) in gamma.iter().zip(&z) {
                log_rate += g * zv;
            }
            let rate = lambda0 * log_rate.exp();
            let t: f64 = rng.sample::<f64, _>(rand_distr::Exp1) / rate;
            let mut s = Subject::time_fixed(i.to_string(), t.min(sc.t_star), t <= sc.t_star, w, &z);
            s.x_path = Some(Arc::new(StepFn::constant(0.0, x)));
            s
        })
        .collect();
    Cohort::new(subjects, sc.t_star, p)
}

/// External reliability study: m subjects, k replicate surrogate readings.
pub fn generate_reliability(sc: &ScenarioSpec, rng: &mut impl Rng) -> Result<ReliabilityStudy> {
    let em = sc.error_model()?;
    let sigma_u = em.sigma_u2.sqrt();
    let rows: Vec<Vec<f64>> = (0..sc.reliability_m)
        .map(|_| {
            let x = sc.x_dist.sample(rng);
            (0..sc.reliability_k)
                .map(|_| x + sigma_u * sc.x_dist.sample(rng))
                .collect()
        })
        .collect();
    ReliabilityStudy::new(rows)
}

/// Moment structure of the two-error-prone-covariates comparison setting:
/// (X₁, X₂, W₁, W₂) multivariate normal with the mean and covariance of
/// (X, (X−τ)₊, W, (W−τ)₊) under the changepoint law.
pub struct TwoVarModel {
    pub mean: DVector<f64>,
    pub chol: DMatrix<f64>,
    pub lambda0: f64,
    /// affine regression calibration: E[(X₁,X₂)|(W₁,W₂)] = a + B·(w₁,w₂)
    pub calib_a: DVector<f64>,
    pub calib_b: DMatrix<f64>,
    pub warnings: Vec<String>,
}

const MOMENT_DRAWS: usize = 1_000_000;

impl TwoVarModel {
    pub fn new(sc: &ScenarioSpec) -> Result<Self> {
        sc.validate()?;
        let tau = sc.tau();
        let em = sc.error_model()?;
        let sigma_u = em.sigma_u2.sqrt();
        let mut rng = stream(sc.seed, &[0x4d4f4d]);
        let mut mean = DVector::<f64>::zeros(4);
        let mut cov = DMatrix::<f64>::zeros(4, 4);
        let mut h_sample = Vec::with_capacity(MOMENT_DRAWS);
        let mut rows = Vec::with_capacity(MOMENT_DRAWS);
        for _ in 0..MOMENT_DRAWS {
            let x: f64 = rng.sample(StandardNormal);
            let w = x + sigma_u * rng.sample::<f64, _>(StandardNormal);
            let v = DVector::from_column_slice(&[
                x,
                (x - tau).max(0.0),
                w,
                (w - tau).max(0.0),
            ]);
            mean += &v;
            h_sample.push((sc.beta0 * v[0] + sc.omega0 * v[1]).exp());
            rows.push(v);
        }
        mean /= MOMENT_DRAWS as f64;
        for v in &rows {
            let dev = v - &mean;
            cov.ger(1.0, &dev, &dev, 1.0);
        }
        cov /= (MOMENT_DRAWS - 1) as f64;

        let mut warnings = Vec::new();
        let chol = match cov.clone().cholesky() {
            Some(c) => c.l(),
            None => {
                warnings.push("two-variable moment matrix not positive definite; eigenvalues clipped".into());
                let eig = SymmetricEigen::new(cov.clone());
                let clipped = DVector::from_iterator(4, eig.eigenvalues.iter().map(|&e| e.max(1e-12)));
                let rebuilt = &eig.eigenvectors
                    * DMatrix::from_diagonal(&clipped)
                    * eig.eigenvectors.transpose();
                rebuilt
                    .cholesky()
                    .ok_or_else(|| Error::Numeric("PSD projection failed".into()))?
                    .l()
            }
        };

        // calibrate lambda0 on the retained hazard sample
        let t_star = sc.t_star;
        let target = sc.cum_incidence;
        let inc = |lam0: f64| -> f64 {
            h_sample
                .iter()
                .map(|h| 1.0 - (-t_star * lam0 * h).exp())
                .sum::<f64>()
                / h_sample.len() as f64
        };
        let lambda0 = bisect_incidence(inc, target)?;

        // regression-calibration blocks from the fitted moment matrix
        let sxw = cov.view((0, 2), (2, 2)).into_owned();
        let sww = cov.view((2, 2), (2, 2)).into_owned();
        let sww_inv = sww
            .try_inverse()
            .ok_or_else(|| Error::Numeric("singular W-covariance".into()))?;
        let calib_b = sxw * sww_inv;
        let calib_a = mean.rows(0, 2) - &calib_b * mean.rows(2, 2);

        Ok(TwoVarModel {
            mean,
            chol,
            lambda0,
            calib_a,
            calib_b,
            warnings,
        })
    }
}

/// Cohort under the two-variable setting: the hazard uses (X₁, X₂); the
/// analysis sees (W₁, W₂) stored as the surrogate path and the single
/// z-covariate slot.
pub fn generate_two_variable_cohort(
    sc: &ScenarioSpec,
    model: &TwoVarModel,
    rng: &mut impl Rng,
) -> Result<Cohort> {
    let subjects: Vec<Subject> = (0..sc.n)
        .map(|i| {
            let eps = DVector::from_iterator(4, (0..4).map(|_| rng.sample::<f64, _>(StandardNormal)));
            let v = &model.mean + &model.chol * eps;
            let rate = model.lambda0 * (sc.beta0 * v[0] + sc.omega0 * v[1]).exp();
            let t: f64 = rng.sample::<f64, _>(rand_distr::Exp1) / rate;
            let mut s = Subject::time_fixed(
                i.to_string(),
                t.min(sc.t_star),
                t <= sc.t_star,
                v[2],
                &[v[3]],
            );
            s.x_path = Some(Arc::new(StepFn::constant(0.0, v[0])));
            s
        })
        .collect();
    Cohort::new(subjects, sc.t_star, 1)
}

/// Naive fit in the two-variable setting: ordinary Cox on (W₁, W₂); the two
/// coefficients are reported in the (β, ω) slots.
pub fn fit_two_var_naive(cohort: &Cohort, tau: f64) -> Result<FitResult> {
    let rr = ExpRisk::new(2, false, |s: &Subject, t: f64, v: &mut [f64]| {
        v[0] = s.w_at(t)?;
        v[1] = s.z_at(t)?[0];
        Ok(())
    });
    let maxed = partial_lik::maximize(cohort, &rr, &ThetaVector::scalar(0.0, 0.0, tau), &NewtonOptions::default())?;
    estimators::assemble_fit(cohort, &rr, maxed, Method::Naive)
}

/// Bivariate regression-calibration fit in the two-variable setting.
pub fn fit_two_var_rc(
    cohort: &Cohort,
    model: &TwoVarModel,
    theta0: &ThetaVector,
) -> Result<FitResult> {
    let a = model.calib_a.clone();
    let b = model.calib_b.clone();
    let rr = ExpRisk::new(2, false, move |s: &Subject, t: f64, v: &mut [f64]| {
        let w1 = s.w_at(t)?;
        let w2 = s.z_at(t)?[0];
        v[0] = a[0] + b[(0, 0)] * w1 + b[(0, 1)] * w2;
        v[1] = a[1] + b[(1, 0)] * w1 + b[(1, 1)] * w2;
        Ok(())
    });
    let maxed = partial_lik::maximize(cohort, &rr, theta0, &NewtonOptions::default())?;
    estimators::assemble_fit(cohort, &rr, maxed, Method::Rc1)
}

/// Outcome of one method on one replicate.
#[derive(Debug, Clone)]
pub struct ReplicateRecord {
    pub replicate: usize,
    pub method: Method,
    pub converged: bool,
    pub within_bound: bool,
    pub estimate: Vec<f64>,
    pub se: Vec<f64>,
    pub covered: Vec<bool>,
}

/// Aggregated metrics per (method, component), over replicates passing the
/// convergence and |θ̂| ≤ 4.9 filters.
#[derive(Debug, Clone)]
pub struct SummaryRow {
    pub scenario: String,
    pub method: Method,
    pub component: String,
    pub n_used: usize,
    pub convergence_pct: f64,
    pub mean: f64,
    pub median: f64,
    pub rel_bias_mean: f64,
    pub rel_bias_median: f64,
    pub emp_sd: f64,
    pub mean_se: f64,
    pub coverage: f64,
    /// the boxplot convention: median ± IQR/2
    pub box_lo: f64,
    pub box_hi: f64,
}

#[derive(Debug)]
pub struct ScenarioOutput {
    pub spec: ScenarioSpec,
    pub truth: Vec<f64>,
    pub summary: Vec<SummaryRow>,
    pub replicates: Vec<ReplicateRecord>,
    pub warnings: Vec<String>,
}

/// Runs every replicate of a scenario, applies the divergence filter and
/// aggregates the summary table. Replicates run in parallel on independent
/// RNG streams; output is deterministic for a fixed seed.
pub fn run_scenario(sc: &ScenarioSpec) -> Result<ScenarioOutput> {
    sc.validate()?;
    match sc.design {
        DesignKind::Changepoint => run_changepoint(sc),
        DesignKind::TwoVariable => run_two_variable(sc),
    }
}

fn run_changepoint(sc: &ScenarioSpec) -> Result<ScenarioOutput> {
    let lambda0 = calibrate_lambda0(sc)?;
    let tau = sc.tau();
    let known_em = sc.error_model()?;

    let per_rep: Vec<Vec<ReplicateRecord>> = (0..sc.reps)
        .into_par_iter()
        .map(|rep| {
            let mut data_rng = stream(sc.seed, &[rep as u64, 0]);
            let cohort = match generate_cohort(sc, lambda0, &mut data_rng) {
                Ok(c) => c,
                Err(_) => return Vec::new(),
            };
            let (em, ns) = match sc.nuisance {
                Nuisance::Known => (known_em.clone(), None),
                Nuisance::Estimated => {
                    let mut rel_rng = stream(sc.seed, &[rep as u64, 1]);
                    match generate_reliability(sc, &mut rel_rng)
                        .and_then(|study| {
                            let ns = NuisanceScore::from_anova(&study)?;
                            let fit = estimate_nuisance(&study)?;
                            Ok((fit.params, ns))
                        }) {
                        Ok((params, ns)) => (params, Some(ns)),
                        Err(_) => return Vec::new(),
                    }
                }
            };
            run_methods(sc, &cohort, &em, ns.as_ref(), tau, rep)
        })
        .collect();

    let replicates: Vec<ReplicateRecord> = per_rep.into_iter().flatten().collect();
    let truth = sc.truth();
    let summary = summarize(sc, &truth, &replicates);
    Ok(ScenarioOutput {
        spec: sc.clone(),
        truth,
        summary,
        replicates,
        warnings: Vec::new(),
    })
}

fn run_two_variable(sc: &ScenarioSpec) -> Result<ScenarioOutput> {
    let model = TwoVarModel::new(sc)?;
    let tau = sc.tau();
    let per_rep: Vec<Vec<ReplicateRecord>> = (0..sc.reps)
        .into_par_iter()
        .map(|rep| {
            let mut rng = stream(sc.seed, &[rep as u64, 0]);
            let cohort = match generate_two_variable_cohort(sc, &model, &mut rng) {
                Ok(c) => c,
                Err(_) => return Vec::new(),
            };
            let mut out = Vec::new();
            let naive = fit_two_var_naive(&cohort, tau);
            let naive_theta = naive
                .as_ref()
                .map(|f| f.theta_hat.clone())
                .unwrap_or_else(|_| ThetaVector::scalar(0.0, 0.0, tau));
            for m in &sc.methods {
                let fit = match m {
                    Method::Naive => naive.as_ref().ok().cloned(),
                    Method::Rc1 => fit_two_var_rc(&cohort, &model, &naive_theta).ok(),
                    _ => None,
                };
                out.push(record(rep, *m, fit, &[sc.beta0, sc.omega0]));
            }
            out
        })
        .collect();
    let replicates: Vec<ReplicateRecord> = per_rep.into_iter().flatten().collect();
    let truth = vec![sc.beta0, sc.omega0];
    let summary = summarize(sc, &truth, &replicates);
    Ok(ScenarioOutput {
        spec: sc.clone(),
        truth,
        summary,
        replicates,
        warnings: model.warnings,
    })
}

/// Runs the requested methods on one replicate, chaining starting values
/// down the complexity hierarchy.
fn run_methods(
    sc: &ScenarioSpec,
    cohort: &Cohort,
    em: &ErrorModelParams,
    ns: Option<&NuisanceScore>,
    tau: f64,
    rep: usize,
) -> Vec<ReplicateRecord> {
    let truth = sc.truth();
    let wants = |m: Method| sc.methods.contains(&m);
    // lower rungs are fitted when needed as starting values
    let need_rr1 = wants(Method::Rr1) || wants(Method::Rr2) || wants(Method::Mpple);
    let need_rc2 = wants(Method::Rc2) || need_rr1;
    let need_rc1 = wants(Method::Rc1) || need_rc2;
    let mut out = Vec::new();

    let naive = estimators::fit_naive(cohort, tau);
    if wants(Method::Naive) {
        out.push(record(rep, Method::Naive, naive.as_ref().ok().cloned(), &truth));
    }
    let Ok(naive) = naive else {
        for &m in sc.methods.iter().filter(|&&m| m != Method::Naive) {
            out.push(record(rep, m, None, &truth));
        }
        return out;
    };

    let correct = |fit: Result<FitResult>, kind: SurrogateKind| -> Option<FitResult> {
        let fit = fit.ok()?;
        apply_nuisance_correction(cohort, em, ns, tau, fit, kind).ok()
    };

    let rc1 = if need_rc1 {
        Some(estimators::fit_rc_from(cohort, em, RcVariant::Rc1, tau, &naive.theta_hat))
    } else {
        None
    };
    if wants(Method::Rc1) {
        let fit = rc1.as_ref().and_then(|f| correct(clone_result(f), SurrogateKind::Rc1));
        out.push(record(rep, Method::Rc1, fit, &truth));
    }

    let rc1_theta = rc1
        .as_ref()
        .and_then(|f| f.as_ref().ok())
        .map(|f| f.theta_hat.clone())
        .unwrap_or_else(|| naive.theta_hat.clone());
    let rc2 = if need_rc2 {
        Some(estimators::fit_rc_from(cohort, em, RcVariant::Rc2, tau, &rc1_theta))
    } else {
        None
    };
    if wants(Method::Rc2) {
        let fit = rc2.as_ref().and_then(|f| correct(clone_result(f), SurrogateKind::Rc2));
        out.push(record(rep, Method::Rc2, fit, &truth));
    }

    let rc2_theta = rc2
        .as_ref()
        .and_then(|f| f.as_ref().ok())
        .map(|f| f.theta_hat.clone())
        .unwrap_or(rc1_theta);
    let rr1 = if need_rr1 {
        Some(estimators::fit_rr1_from(cohort, em, tau, &rc2_theta))
    } else {
        None
    };
    if wants(Method::Rr1) {
        let fit = rr1.as_ref().and_then(|f| {
            let f = f.as_ref().ok()?;
            apply_nuisance_correction_rr(cohort, em, ns, tau, f.clone()).ok()
        });
        out.push(record(rep, Method::Rr1, fit, &truth));
    }

    if wants(Method::Rr2) {
        let fit = rr1.as_ref().and_then(|r| r.as_ref().ok()).and_then(|rr1_fit| {
            // the corrected RR1 covariance is what RR2 reports
            let corrected = apply_nuisance_correction_rr(cohort, em, ns, tau, rr1_fit.clone()).ok()?;
            let bc = BootstrapConfig {
                b: sc.bootstrap_b.unwrap_or(50),
                truncation: 5.0,
                rng_seed: crate::stats::rng::derive_seed(sc.seed, &[rep as u64, 2]),
            };
            estimators::fit_rr2_from(cohort, em, tau, &corrected, &bc)
                .ok()
                .map(|r| r.result)
        });
        out.push(record(rep, Method::Rr2, fit, &truth));
    }

    if wants(Method::Mpple) {
        let start = rr1
            .as_ref()
            .and_then(|r| r.as_ref().ok())
            .map(|f| f.theta_hat.clone());
        let fit = start.and_then(|theta0| {
            let mut cfg = sc.mpple.clone().unwrap_or_default();
            cfg.rng_seed = crate::stats::rng::derive_seed(sc.seed, &[rep as u64, 3]);
            estimators::fit_mpple_from(cohort, em, tau, &theta0, &cfg).ok()
        });
        out.push(record(rep, Method::Mpple, fit, &truth));
    }

    if wants(Method::Simex) {
        let mut cfg = sc.simex.clone().unwrap_or_default();
        cfg.rng_seed = crate::stats::rng::derive_seed(sc.seed, &[rep as u64, 4]);
        let fit = estimators::fit_simex(cohort, em, tau, &cfg).ok();
        out.push(record(rep, Method::Simex, fit, &truth));
    }

    out
}

fn clone_result(r: &Result<FitResult>) -> Result<FitResult> {
    match r {
        Ok(f) => Ok(f.clone()),
        Err(_) => Err(Error::Numeric("chain fit failed".into())),
    }
}

/// Replaces the sandwich covariance by its nuisance-corrected version when
/// the error model was estimated from a reliability study.
fn apply_nuisance_correction(
    cohort: &Cohort,
    em: &ErrorModelParams,
    ns: Option<&NuisanceScore>,
    tau: f64,
    mut fit: FitResult,
    kind: SurrogateKind,
) -> Result<FitResult> {
    let Some(ns) = ns else { return Ok(fit) };
    if !fit.converged {
        return Ok(fit);
    }
    let em = em.clone();
    let cohort_p = cohort.p;
    let time_dep = !cohort.is_time_fixed();
    let builder = move |phi: [f64; 3]| -> Result<Box<dyn crate::partial_lik::RelRisk>> {
        let em_phi = em.with_phi(phi)?;
        Ok(Box::new(SurrogateRisk::with_dims(
            kind,
            Some(em_phi),
            tau,
            cohort_p,
            time_dep,
        )))
    };
    fit.covariance = variance::nuisance_corrected_cov(cohort, &fit.theta_hat, ns, &builder)?;
    fit.ci = variance::wald_ci_parts(&fit.theta_hat, &fit.covariance, fit.level);
    Ok(fit)
}

fn apply_nuisance_correction_rr(
    cohort: &Cohort,
    em: &ErrorModelParams,
    ns: Option<&NuisanceScore>,
    tau: f64,
    mut fit: FitResult,
) -> Result<FitResult> {
    let Some(ns) = ns else { return Ok(fit) };
    if !fit.converged {
        return Ok(fit);
    }
    let em = em.clone();
    let cohort_p = cohort.p;
    let time_dep = !cohort.is_time_fixed();
    let builder = move |phi: [f64; 3]| -> Result<Box<dyn crate::partial_lik::RelRisk>> {
        let em_phi = em.with_phi(phi)?;
        Ok(Box::new(crate::estimators::InducedRisk::with_dims(
            em_phi, tau, cohort_p, time_dep,
        )))
    };
    fit.covariance = variance::nuisance_corrected_cov(cohort, &fit.theta_hat, ns, &builder)?;
    fit.ci = variance::wald_ci_parts(&fit.theta_hat, &fit.covariance, fit.level);
    Ok(fit)
}

fn record(
    rep: usize,
    method: Method,
    fit: Option<FitResult>,
    truth: &[f64],
) -> ReplicateRecord {
    match fit {
        Some(f) => {
            let est = f.theta_hat.flatten();
            let covered = f
                .ci
                .iter()
                .zip(truth)
                .map(|((lo, hi), t)| lo <= t && t <= hi)
                .collect();
            ReplicateRecord {
                replicate: rep,
                method,
                converged: f.converged,
                within_bound: f.within_bound,
                estimate: est.iter().copied().collect(),
                se: f.se(),
                covered,
            }
        }
        None => ReplicateRecord {
            replicate: rep,
            method,
            converged: false,
            within_bound: false,
            estimate: vec![f64::NAN; truth.len()],
            se: vec![f64::NAN; truth.len()],
            covered: vec![false; truth.len()],
        },
    }
}

/// Type-7 quantile (linear interpolation) of a sorted sample.
fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = (n - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

fn summarize(sc: &ScenarioSpec, truth: &[f64], replicates: &[ReplicateRecord]) -> Vec<SummaryRow> {
    let p = truth.len() - 2;
    let component_name = |j: usize| -> String {
        if j < p {
            format!("gamma{}", j + 1)
        } else if j == p {
            "beta".into()
        } else {
            "omega".into()
        }
    };
    let mut rows = Vec::new();
    for &method in &sc.methods {
        let all: Vec<&ReplicateRecord> = replicates.iter().filter(|r| r.method == method).collect();
        let used: Vec<&&ReplicateRecord> = all
            .iter()
            .filter(|r| r.converged && r.within_bound)
            .collect();
        let conv_pct = if all.is_empty() {
            0.0
        } else {
            used.len() as f64 / all.len() as f64
        };
        for j in 0..truth.len() {
            let mut est: Vec<f64> = used.iter().map(|r| r.estimate[j]).collect();
            est.sort_by(f64::total_cmp);
            let n_used = est.len();
            let (mean, median, sd, mean_se, coverage, box_lo, box_hi) = if n_used == 0 {
                (f64::NAN, f64::NAN, f64::NAN, f64::NAN, f64::NAN, f64::NAN, f64::NAN)
            } else {
                let mean = est.iter().sum::<f64>() / n_used as f64;
                let median = quantile_sorted(&est, 0.5);
                let sd = if n_used > 1 {
                    (est.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / (n_used as f64 - 1.0))
                        .sqrt()
                } else {
                    f64::NAN
                };
                let mean_se =
                    used.iter().map(|r| r.se[j]).sum::<f64>() / n_used as f64;
                let coverage = used.iter().filter(|r| r.covered[j]).count() as f64 / n_used as f64;
                let iqr = quantile_sorted(&est, 0.75) - quantile_sorted(&est, 0.25);
                (mean, median, sd, mean_se, coverage, median - 0.5 * iqr, median + 0.5 * iqr)
            };
            rows.push(SummaryRow {
                scenario: sc.id.clone(),
                method,
                component: component_name(j),
                n_used,
                convergence_pct: conv_pct,
                mean,
                median,
                rel_bias_mean: (mean - truth[j]) / truth[j],
                rel_bias_median: (median - truth[j]) / truth[j],
                emp_sd: sd,
                mean_se,
                coverage,
                box_lo,
                box_hi,
            });
        }
    }
    rows
}
