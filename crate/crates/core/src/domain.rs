//! Core data model: survival subjects and cohorts with step-function
//! covariate paths, regression parameters, and fit results.

use crate::error::Error;
use crate::Result;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use std::sync::Arc;

/// A right-open step function on an explicit time grid: the value at `t` is
/// the value attached to the largest grid point strictly below `t`
/// (carry-forward of the most recent measurement).
#[derive(Debug, Clone, PartialEq)]
pub struct StepFn<T = f64> {
    times: Vec<f64>,
    values: Vec<T>,
}

impl<T: Clone> StepFn<T> {
    pub fn new(times: Vec<f64>, values: Vec<T>) -> Result<Self> {
        if times.is_empty() || times.len() != values.len() {
            return Err(Error::InvalidInput(
                "step function needs equal, non-empty time and value lists".into(),
            ));
        }
        if times.windows(2).any(|w| w[1] <= w[0]) || times.iter().any(|t| !t.is_finite()) {
            return Err(Error::InvalidInput(
                "step function grid must be finite and strictly increasing".into(),
            ));
        }
        Ok(StepFn { times, values })
    }

    /// Single-segment path: one value from time `start` on.
    pub fn constant(start: f64, value: T) -> Self {
        StepFn {
            times: vec![start],
            values: vec![value],
        }
    }

    /// Carry-forward lookup at the largest grid point strictly below `t`.
    pub fn value_at(&self, t: f64) -> Result<&T> {
        if t <= self.times[0] {
            return Err(Error::NoCovariateHistory {
                t,
                start: self.times[0],
            });
        }
        let idx = match self.times.partition_point(|&g| g < t) {
            0 => unreachable!(),
            k => k - 1,
        };
        Ok(&self.values[idx])
    }

    pub fn first_time(&self) -> f64 {
        self.times[0]
    }

    pub fn is_constant(&self) -> bool {
        self.times.len() == 1
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }
}

/// Carry-forward lookup on a scalar path (see [`StepFn::value_at`]).
pub fn step_lookup(path: &StepFn<f64>, t: f64) -> Result<f64> {
    path.value_at(t).copied()
}

/// One study subject: left-truncated, right-censored follow-up with
/// step-function covariate paths and a bootstrap weight.
#[derive(Debug, Clone)]
pub struct Subject {
    pub id: String,
    /// time at which the subject comes under observation
    pub entry_time: f64,
    /// end of follow-up
    pub exit_time: f64,
    /// 1 = event observed at exit, 0 = censored
    pub event: bool,
    pub stratum: u32,
    /// surrogate covariate path W(t)
    pub w_path: Arc<StepFn<f64>>,
    /// error-free covariate path Z(t) ∈ ℝᵖ
    pub z_path: Arc<StepFn<DVector<f64>>>,
    /// true covariate path X(t); retained by the simulator only
    pub x_path: Option<Arc<StepFn<f64>>>,
    /// weighted-bootstrap multiplier, 1 for the original sample
    pub weight: f64,
}

impl Subject {
    /// Time-fixed subject with covariates observed from time 0.
    pub fn time_fixed(id: impl Into<String>, exit_time: f64, event: bool, w: f64, z: &[f64]) -> Self {
        Subject {
            id: id.into(),
            entry_time: 0.0,
            exit_time,
            event,
            stratum: 0,
            w_path: Arc::new(StepFn::constant(0.0, w)),
            z_path: Arc::new(StepFn::constant(0.0, DVector::from_column_slice(z))),
            x_path: None,
            weight: 1.0,
        }
    }

    /// At-risk indicator Y(t) = 1{entry < t ≤ exit}.
    pub fn at_risk(&self, t: f64) -> bool {
        self.entry_time < t && t <= self.exit_time
    }

    pub fn w_at(&self, t: f64) -> Result<f64> {
        self.w_path.value_at(t).copied()
    }

    pub fn z_at(&self, t: f64) -> Result<&DVector<f64>> {
        self.z_path.value_at(t)
    }

    pub fn has_time_fixed_paths(&self) -> bool {
        self.w_path.is_constant() && self.z_path.is_constant()
    }
}

/// A study cohort sharing the administrative horizon `t_star` and the
/// error-free covariate dimension `p`.
#[derive(Debug, Clone)]
pub struct Cohort {
    pub subjects: Vec<Subject>,
    pub t_star: f64,
    pub p: usize,
}

impl Cohort {
    pub fn new(subjects: Vec<Subject>, t_star: f64, p: usize) -> Result<Self> {
        for (i, s) in subjects.iter().enumerate() {
            if !(s.entry_time < s.exit_time && s.exit_time <= t_star) {
                return Err(Error::InvalidInput(format!(
                    "subject {} (index {i}): need entry < exit <= t_star, got entry={} exit={} t_star={t_star}",
                    s.id, s.entry_time, s.exit_time
                )));
            }
            if !(s.weight > 0.0 && s.weight.is_finite()) {
                return Err(Error::InvalidInput(format!(
                    "subject {}: weight must be positive and finite",
                    s.id
                )));
            }
            if s.w_path.first_time() > s.entry_time || s.z_path.first_time() > s.entry_time {
                return Err(Error::InvalidInput(format!(
                    "subject {}: covariate paths must start no later than entry time",
                    s.id
                )));
            }
            if s.z_path.values().iter().any(|z| z.len() != p) {
                return Err(Error::InvalidInput(format!(
                    "subject {}: z path dimension differs from p = {p}",
                    s.id
                )));
            }
        }
        Ok(Cohort {
            subjects,
            t_star,
            p,
        })
    }

    pub fn n(&self) -> usize {
        self.subjects.len()
    }

    pub fn n_events(&self) -> usize {
        self.subjects.iter().filter(|s| s.event).count()
    }

    /// All covariate paths constant over time.
    pub fn is_time_fixed(&self) -> bool {
        self.subjects.iter().all(Subject::has_time_fixed_paths)
    }

    /// A re-weighted view of the same cohort; paths are shared, so this is a
    /// shallow copy. `weights` multiply the subjects' existing weights.
    pub fn reweighted(&self, weights: &[f64]) -> Cohort {
        assert_eq!(weights.len(), self.subjects.len());
        let subjects = self
            .subjects
            .iter()
            .zip(weights)
            .map(|(s, &w)| {
                let mut s = s.clone();
                s.weight *= w;
                s
            })
            .collect();
        Cohort {
            subjects,
            t_star: self.t_star,
            p: self.p,
        }
    }
}

/// Regression parameters (γ ∈ ℝᵖ, β, ω) with the known threshold τ carried
/// alongside. The flattened order for linear algebra is (γ₁…γ_p, β, ω).
#[derive(Debug, Clone, PartialEq)]
pub struct ThetaVector {
    pub gamma: DVector<f64>,
    pub beta: f64,
    pub omega: f64,
    pub tau: f64,
}

impl ThetaVector {
    pub fn new(gamma: DVector<f64>, beta: f64, omega: f64, tau: f64) -> Self {
        ThetaVector {
            gamma,
            beta,
            omega,
            tau,
        }
    }

    /// Parameters with γ ∈ ℝᵖ all zero.
    pub fn zeros(p: usize, tau: f64) -> Self {
        ThetaVector::new(DVector::zeros(p), 0.0, 0.0, tau)
    }

    /// No background covariates (p = 0).
    pub fn scalar(beta: f64, omega: f64, tau: f64) -> Self {
        ThetaVector::new(DVector::zeros(0), beta, omega, tau)
    }

    pub fn p(&self) -> usize {
        self.gamma.len()
    }

    /// Total parameter dimension p + 2.
    pub fn dim(&self) -> usize {
        self.gamma.len() + 2
    }

    /// (γ₁…γ_p, β, ω) as a dense vector.
    pub fn flatten(&self) -> DVector<f64> {
        let mut v = DVector::zeros(self.dim());
        v.rows_mut(0, self.p()).copy_from(&self.gamma);
        v[self.p()] = self.beta;
        v[self.p() + 1] = self.omega;
        v
    }

    pub fn from_flat(flat: &DVector<f64>, tau: f64) -> Self {
        let p = flat.len() - 2;
        ThetaVector {
            gamma: flat.rows(0, p).into_owned(),
            beta: flat[p],
            omega: flat[p + 1],
            tau,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.beta.is_finite()
            && self.omega.is_finite()
            && self.tau.is_finite()
            && self.gamma.iter().all(|g| g.is_finite())
    }
}

/// The relative-risk function r(x, z, θ) = exp(γᵀz + βx + ω(x−τ)₊).
pub fn relative_risk(theta: &ThetaVector, x: f64, z: &DVector<f64>) -> f64 {
    (theta.gamma.dot(z) + theta.beta * x + theta.omega * (x - theta.tau).max(0.0)).exp()
}

/// Estimation method tag.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Naive,
    Rc1,
    Rc2,
    Rr1,
    Rr2,
    Mpple,
    Simex,
}

impl Method {
    pub fn label(&self) -> &'static str {
        match self {
            Method::Naive => "naive",
            Method::Rc1 => "rc1",
            Method::Rc2 => "rc2",
            Method::Rr1 => "rr1",
            Method::Rr2 => "rr2",
            Method::Mpple => "mpple",
            Method::Simex => "simex",
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.label())
    }
}

/// Estimates outside this bound flag a replicate as divergent.
pub const DIVERGENCE_BOUND: f64 = 4.9;

/// Result of one model fit: estimate, covariance, Wald intervals and
/// convergence diagnostics.
#[derive(Debug, Clone)]
pub struct FitResult {
    pub method: Method,
    pub theta_hat: ThetaVector,
    /// covariance of the estimate, (p+2) × (p+2)
    pub covariance: DMatrix<f64>,
    /// per-component Wald interval at `level`
    pub ci: Vec<(f64, f64)>,
    pub level: f64,
    pub converged: bool,
    /// all |θ̂_j| ≤ 4.9 (the divergence filter)
    pub within_bound: bool,
    pub iterations: usize,
    /// Breslow baseline cumulative hazard, when the method produces one
    pub baseline: Option<CumHazard>,
}

impl FitResult {
    /// Standard errors: square roots of the covariance diagonal.
    pub fn se(&self) -> Vec<f64> {
        (0..self.theta_hat.dim())
            .map(|j| self.covariance[(j, j)].max(0.0).sqrt())
            .collect()
    }
}

/// A nondecreasing step function accumulating baseline-hazard increments at
/// event times; right-continuous, zero before the first event.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct CumHazard {
    pub times: Vec<f64>,
    pub increments: Vec<f64>,
    cumulative: Vec<f64>,
}

impl CumHazard {
    pub fn new(times: Vec<f64>, increments: Vec<f64>) -> Self {
        assert_eq!(times.len(), increments.len());
        let mut cumulative = Vec::with_capacity(times.len());
        let mut acc = 0.0;
        for &d in &increments {
            acc += d;
            cumulative.push(acc);
        }
        CumHazard {
            times,
            increments,
            cumulative,
        }
    }

    /// Λ(t): the sum of increments at times ≤ t.
    pub fn value(&self, t: f64) -> f64 {
        match self.times.partition_point(|&u| u <= t) {
            0 => 0.0,
            k => self.cumulative[k - 1],
        }
    }

    /// Left limit Λ(t−): the sum of increments at times < t.
    pub fn value_left(&self, t: f64) -> f64 {
        match self.times.partition_point(|&u| u < t) {
            0 => 0.0,
            k => self.cumulative[k - 1],
        }
    }

    pub fn total(&self) -> f64 {
        self.cumulative.last().copied().unwrap_or(0.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn path() -> StepFn<f64> {
        StepFn::new(vec![0.0, 5.0], vec![1.0, 2.0]).unwrap()
    }

    #[test]
    fn step_lookup_carry_forward() {
        let p = path();
        assert_eq!(step_lookup(&p, 3.0).unwrap(), 1.0);
        // strict inequality: at a grid point the previous value still applies
        assert_eq!(step_lookup(&p, 5.0).unwrap(), 1.0);
        assert_eq!(step_lookup(&p, 7.0).unwrap(), 2.0);
        assert!(matches!(
            step_lookup(&p, 0.0),
            Err(Error::NoCovariateHistory { .. })
        ));
        assert!(step_lookup(&p, -1.0).is_err());
    }

    #[test]
    fn step_lookup_idempotent_under_refinement() {
        // repeating the carried value at extra grid points changes nothing
        let p = path();
        let refined = StepFn::new(vec![0.0, 2.0, 5.0, 6.0], vec![1.0, 1.0, 2.0, 2.0]).unwrap();
        for i in 1..200 {
            let t = 0.05 * i as f64;
            assert_eq!(
                step_lookup(&p, t).unwrap(),
                step_lookup(&refined, t).unwrap()
            );
        }
    }

    #[test]
    fn relative_risk_examples() {
        let z0 = DVector::zeros(0);
        let null = ThetaVector::scalar(0.0, 0.0, 0.3);
        assert_eq!(relative_risk(&null, 1.7, &z0), 1.0);

        let theta = ThetaVector::scalar(1.5f64.ln(), 2.0f64.ln(), 0.0);
        assert!((relative_risk(&theta, 1.0, &z0) - 3.0).abs() < 1e-12);

        let theta = ThetaVector::scalar(0.405, 0.693, 0.0);
        assert!((relative_risk(&theta, -1.0, &z0) - (-0.405f64).exp()).abs() < 1e-12);
    }

    #[test]
    fn relative_risk_kink_but_no_jump() {
        let z0 = DVector::zeros(0);
        let theta = ThetaVector::scalar(0.3, 0.9, 0.4);
        let eps = 1e-9;
        let left = relative_risk(&theta, theta.tau - eps, &z0);
        let right = relative_risk(&theta, theta.tau + eps, &z0);
        assert!((left - right).abs() < 1e-8);
        // monotone when beta >= 0 and beta + omega >= 0
        let mut prev = 0.0;
        for i in 0..100 {
            let x = -3.0 + 0.06 * i as f64;
            let r = relative_risk(&theta, x, &z0);
            assert!(r >= prev);
            prev = r;
        }
    }

    #[test]
    fn theta_flatten_roundtrip() {
        let theta = ThetaVector::new(DVector::from_vec(vec![0.1, -0.2]), 0.4, 0.7, 1.0);
        let flat = theta.flatten();
        assert_eq!(flat.len(), 4);
        assert_eq!(flat[2], 0.4);
        assert_eq!(ThetaVector::from_flat(&flat, 1.0), theta);
    }

    #[test]
    fn cum_hazard_left_limits() {
        let h = CumHazard::new(vec![1.0, 2.0, 4.0], vec![0.1, 0.2, 0.3]);
        assert_eq!(h.value(0.5), 0.0);
        assert_eq!(h.value(1.0), 0.1);
        assert_eq!(h.value_left(1.0), 0.0);
        assert!((h.value_left(4.0) - 0.3).abs() < 1e-15);
        assert!((h.value(10.0) - 0.6).abs() < 1e-15);
    }
}
