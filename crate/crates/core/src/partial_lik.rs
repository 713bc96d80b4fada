//! Weighted, stratified Cox partial-likelihood engine over arbitrary
//! per-subject relative-risk functions.
//!
//! Risk sets honour left truncation through Y(t) = 1{entry < t ≤ exit}, ties
//! are handled by the Breslow convention, and subjects carry multiplicative
//! weights so a weighted-bootstrap replicate is just a re-weighted view of
//! the same cohort. Event-time traversal is by sorted unique event times per
//! stratum with incremental risk-set updates; time-dependent risk functions
//! fall back to re-evaluation per event time.

use crate::domain::{Cohort, CumHazard, Subject, ThetaVector, DIVERGENCE_BOUND};
use crate::error::Error;
use crate::Result;
use nalgebra::{DMatrix, DVector};

/// Value and θ-derivatives of a per-subject relative risk at one time point.
#[derive(Debug, Clone)]
pub struct RiskEval {
    pub value: f64,
    /// ∇_θ r, length dim
    pub grad: Vec<f64>,
    /// ∇²_θ r, row-major dim × dim
    pub hess: Vec<f64>,
}

impl RiskEval {
    pub fn zeros(dim: usize) -> Self {
        RiskEval {
            value: 0.0,
            grad: vec![0.0; dim],
            hess: vec![0.0; dim * dim],
        }
    }
}

/// A positive per-subject relative-risk function r(subject, t, θ) with its
/// first two θ-derivatives. Implementations cover the exponential form
/// exp(θᵀV), the induced relative risk, and the MPPLE induced hazard.
pub trait RelRisk: Sync {
    /// Parameter dimension p + 2.
    fn dim(&self) -> usize;
    /// Whether r varies with t for fixed θ.
    fn time_dependent(&self) -> bool;
    fn eval(&self, subject: &Subject, t: f64, theta: &ThetaVector, out: &mut RiskEval)
        -> Result<()>;
}

/// Exponential-form risk exp(θᵀ V(subject, t)) over a caller-supplied design.
pub struct ExpRisk<F>
where
    F: Fn(&Subject, f64, &mut [f64]) -> Result<()> + Sync,
{
    dim: usize,
    time_dependent: bool,
    design: F,
}

impl<F> ExpRisk<F>
where
    F: Fn(&Subject, f64, &mut [f64]) -> Result<()> + Sync,
{
    /// `design` fills the length-`dim` covariate vector V(subject, t).
    pub fn new(dim: usize, time_dependent: bool, design: F) -> Self {
        ExpRisk {
            dim,
            time_dependent,
            design,
        }
    }
}

impl<F> RelRisk for ExpRisk<F>
where
    F: Fn(&Subject, f64, &mut [f64]) -> Result<()> + Sync,
{
    fn dim(&self) -> usize {
        self.dim
    }

    fn time_dependent(&self) -> bool {
        self.time_dependent
    }

    fn eval(
        &self,
        subject: &Subject,
        t: f64,
        theta: &ThetaVector,
        out: &mut RiskEval,
    ) -> Result<()> {
        let d = self.dim;
        // reuse the gradient slot as the design buffer
        (self.design)(subject, t, &mut out.grad)?;
        let flat = theta.flatten();
        let mut lin = 0.0;
        for a in 0..d {
            lin += flat[a] * out.grad[a];
        }
        let r = lin.exp();
        out.value = r;
        for a in 0..d {
            for b in 0..d {
                out.hess[a * d + b] = out.grad[a] * out.grad[b] * r;
            }
        }
        for a in 0..d {
            out.grad[a] *= r;
        }
        Ok(())
    }
}

/// Risk-set sums S⁽⁰⁾, S⁽¹⁾, S⁽²⁾ over the at-risk set at one event time.
#[derive(Debug, Clone)]
pub struct RiskSetAccumulator {
    pub s0: f64,
    pub s1: Vec<f64>,
    pub s2: Vec<f64>,
    dim: usize,
}

impl RiskSetAccumulator {
    pub fn new(dim: usize) -> Self {
        RiskSetAccumulator {
            s0: 0.0,
            s1: vec![0.0; dim],
            s2: vec![0.0; dim * dim],
            dim,
        }
    }

    fn clear(&mut self) {
        self.s0 = 0.0;
        self.s1.iter_mut().for_each(|x| *x = 0.0);
        self.s2.iter_mut().for_each(|x| *x = 0.0);
    }

    fn add(&mut self, w: f64, ev: &RiskEval) {
        self.s0 += w * ev.value;
        for a in 0..self.dim {
            self.s1[a] += w * ev.grad[a];
        }
        for i in 0..self.dim * self.dim {
            self.s2[i] += w * ev.hess[i];
        }
    }

    fn sub(&mut self, w: f64, ev: &RiskEval) {
        self.add(-w, ev);
    }
}

struct Stratum {
    id: u32,
    /// unique event times, ascending
    event_times: Vec<f64>,
    /// weighted number of events at each event time
    death_weight: Vec<f64>,
    /// subject indices with an event at each event time
    events_at: Vec<Vec<usize>>,
    /// member subject indices sorted descending by exit time
    by_exit_desc: Vec<usize>,
    /// member subject indices sorted descending by entry time
    by_entry_desc: Vec<usize>,
}

/// Precomputed event-time layout for one cohort.
pub struct EventLayout {
    strata: Vec<Stratum>,
}

impl EventLayout {
    pub fn new(cohort: &Cohort) -> Result<Self> {
        let mut ids: Vec<u32> = cohort.subjects.iter().map(|s| s.stratum).collect();
        ids.sort_unstable();
        ids.dedup();
        let mut strata = Vec::with_capacity(ids.len());
        for sid in ids {
            let members: Vec<usize> = (0..cohort.n())
                .filter(|&i| cohort.subjects[i].stratum == sid)
                .collect();
            let mut times: Vec<f64> = members
                .iter()
                .filter(|&&i| cohort.subjects[i].event)
                .map(|&i| cohort.subjects[i].exit_time)
                .collect();
            times.sort_by(f64::total_cmp);
            times.dedup();
            let mut death_weight = vec![0.0; times.len()];
            let mut events_at = vec![Vec::new(); times.len()];
            for &i in &members {
                let s = &cohort.subjects[i];
                if s.event {
                    let k = times.partition_point(|&t| t < s.exit_time);
                    death_weight[k] += s.weight;
                    events_at[k].push(i);
                }
            }
            let mut by_exit_desc = members.clone();
            by_exit_desc
                .sort_by(|&a, &b| cohort.subjects[b].exit_time.total_cmp(&cohort.subjects[a].exit_time));
            let mut by_entry_desc = members;
            by_entry_desc.sort_by(|&a, &b| {
                cohort.subjects[b]
                    .entry_time
                    .total_cmp(&cohort.subjects[a].entry_time)
            });
            strata.push(Stratum {
                id: sid,
                event_times: times,
                death_weight,
                events_at,
                by_exit_desc,
                by_entry_desc,
            });
        }
        Ok(EventLayout { strata })
    }

    pub fn n_event_times(&self) -> usize {
        self.strata.iter().map(|s| s.event_times.len()).sum()
    }
}

/// What a full traversal of the event times produces.
struct Accumulated {
    logpl: f64,
    score: Vec<f64>,
    info: Vec<f64>,
    /// per event time, in stratum order then ascending time:
    /// (stratum position, time, d̄, S⁰, S¹/S⁰)
    event_stats: Option<Vec<EventStats>>,
}

/// Risk-set summary at one event time, used by the sandwich estimator and
/// the Breslow baseline.
#[derive(Debug, Clone)]
pub struct EventStats {
    pub stratum: u32,
    pub time: f64,
    /// weighted event count
    pub d_weight: f64,
    /// weighted risk-set sum Σ w Y r
    pub s0: f64,
    /// S⁽¹⁾/S⁽⁰⁾
    pub vbar: DVector<f64>,
}

fn traverse(
    cohort: &Cohort,
    layout: &EventLayout,
    rr: &dyn RelRisk,
    theta: &ThetaVector,
    want_stats: bool,
) -> Result<Accumulated> {
    let d = rr.dim();
    let mut acc = Accumulated {
        logpl: 0.0,
        score: vec![0.0; d],
        info: vec![0.0; d * d],
        event_stats: want_stats.then(Vec::new),
    };

    if rr.time_dependent() {
        traverse_time_dependent(cohort, layout, rr, theta, &mut acc)?;
    } else {
        traverse_time_fixed(cohort, layout, rr, theta, &mut acc)?;
    }
    Ok(acc)
}

fn finite_positive(v: f64, t: f64) -> Result<()> {
    if !(v.is_finite() && v > 0.0) {
        return Err(Error::Numeric(format!(
            "relative risk not finite-positive at t = {t} (value {v})"
        )));
    }
    Ok(())
}

/// One event time's contribution to log-PL, score and information.
#[allow(clippy::too_many_arguments)]
fn event_contribution(
    cohort: &Cohort,
    rr: &dyn RelRisk,
    theta: &ThetaVector,
    stratum: &Stratum,
    k: usize,
    sums: &RiskSetAccumulator,
    ev_buf: &mut RiskEval,
    acc: &mut Accumulated,
    stratum_id: u32,
) -> Result<()> {
    let d = rr.dim();
    let t = stratum.event_times[k];
    let dbar = stratum.death_weight[k];
    if !(sums.s0 > 0.0) || !sums.s0.is_finite() {
        return Err(Error::DegenerateRiskSet { time: t });
    }
    let ln_s0 = sums.s0.ln();
    let mut vbar = vec![0.0; d];
    for a in 0..d {
        vbar[a] = sums.s1[a] / sums.s0;
    }
    // risk-set part: -d̄·ln S⁰ in the log-PL; d̄[S²/S⁰ − v̄v̄ᵀ] in the information
    acc.logpl -= dbar * ln_s0;
    for a in 0..d {
        acc.score[a] -= dbar * vbar[a];
        for b in 0..d {
            acc.info[a * d + b] += dbar * (sums.s2[a * d + b] / sums.s0 - vbar[a] * vbar[b]);
        }
    }
    // per-event-subject part: w[ln r + ∇log r] and the within-subject
    // curvature correction w[h/r − (g/r)⊗²] (zero for exponential-form risks)
    for &i in &stratum.events_at[k] {
        let s = &cohort.subjects[i];
        rr.eval(s, t, theta, ev_buf)?;
        finite_positive(ev_buf.value, t)?;
        let w = s.weight;
        acc.logpl += w * ev_buf.value.ln();
        let r = ev_buf.value;
        for a in 0..d {
            acc.score[a] += w * ev_buf.grad[a] / r;
        }
        for a in 0..d {
            for b in 0..d {
                acc.info[a * d + b] -= w
                    * (ev_buf.hess[a * d + b] / r - (ev_buf.grad[a] / r) * (ev_buf.grad[b] / r));
            }
        }
    }
    if let Some(stats) = acc.event_stats.as_mut() {
        stats.push(EventStats {
            stratum: stratum_id,
            time: t,
            d_weight: dbar,
            s0: sums.s0,
            vbar: DVector::from_vec(vbar),
        });
    }
    Ok(())
}

fn traverse_time_fixed(
    cohort: &Cohort,
    layout: &EventLayout,
    rr: &dyn RelRisk,
    theta: &ThetaVector,
    acc: &mut Accumulated,
) -> Result<()> {
    let d = rr.dim();
    let mut ev_buf = RiskEval::zeros(d);
    // cache per-subject evaluations once per θ
    let n = cohort.n();
    let mut values = vec![0.0; n];
    let mut grads = vec![0.0; n * d];
    let mut hesses = vec![0.0; n * d * d];
    for (i, s) in cohort.subjects.iter().enumerate() {
        // for a time-fixed risk any in-observation time gives the same value
        rr.eval(s, s.exit_time, theta, &mut ev_buf)?;
        finite_positive(ev_buf.value, s.exit_time)?;
        values[i] = ev_buf.value;
        grads[i * d..(i + 1) * d].copy_from_slice(&ev_buf.grad);
        hesses[i * d * d..(i + 1) * d * d].copy_from_slice(&ev_buf.hess);
    }
    let cached = |i: usize, buf: &mut RiskEval| {
        buf.value = values[i];
        buf.grad.copy_from_slice(&grads[i * d..(i + 1) * d]);
        buf.hess.copy_from_slice(&hesses[i * d * d..(i + 1) * d * d]);
    };

    for stratum in layout.strata.iter() {
        let k_count = stratum.event_times.len();
        if k_count == 0 {
            continue;
        }
        let mut sums = RiskSetAccumulator::new(d);
        let mut add_ptr = 0; // over by_exit_desc
        let mut sub_ptr = 0; // over by_entry_desc
        let mut tmp = RiskEval::zeros(d);
        for k in (0..k_count).rev() {
            let t = stratum.event_times[k];
            while add_ptr < stratum.by_exit_desc.len() {
                let i = stratum.by_exit_desc[add_ptr];
                if cohort.subjects[i].exit_time >= t {
                    cached(i, &mut tmp);
                    sums.add(cohort.subjects[i].weight, &tmp);
                    add_ptr += 1;
                } else {
                    break;
                }
            }
            while sub_ptr < stratum.by_entry_desc.len() {
                let i = stratum.by_entry_desc[sub_ptr];
                if cohort.subjects[i].entry_time >= t {
                    cached(i, &mut tmp);
                    sums.sub(cohort.subjects[i].weight, &tmp);
                    sub_ptr += 1;
                } else {
                    break;
                }
            }
            event_contribution(
                cohort,
                rr,
                theta,
                stratum,
                k,
                &sums,
                &mut ev_buf,
                acc,
                stratum.id,
            )?;
        }
    }
    // event stats are appended in descending time order; restore ascending
    if let Some(stats) = acc.event_stats.as_mut() {
        stats.sort_by(|a, b| a.stratum.cmp(&b.stratum).then(a.time.total_cmp(&b.time)));
    }
    Ok(())
}

fn traverse_time_dependent(
    cohort: &Cohort,
    layout: &EventLayout,
    rr: &dyn RelRisk,
    theta: &ThetaVector,
    acc: &mut Accumulated,
) -> Result<()> {
    let d = rr.dim();
    let mut ev_buf = RiskEval::zeros(d);
    let mut tmp = RiskEval::zeros(d);
    for stratum in layout.strata.iter() {
        // active membership maintained descending over event times
        let mut active: Vec<usize> = Vec::with_capacity(stratum.by_exit_desc.len());
        let mut add_ptr = 0;
        let mut sums = RiskSetAccumulator::new(d);
        for k in (0..stratum.event_times.len()).rev() {
            let t = stratum.event_times[k];
            while add_ptr < stratum.by_exit_desc.len() {
                let i = stratum.by_exit_desc[add_ptr];
                if cohort.subjects[i].exit_time >= t {
                    active.push(i);
                    add_ptr += 1;
                } else {
                    break;
                }
            }
            sums.clear();
            for &i in &active {
                let s = &cohort.subjects[i];
                if s.at_risk(t) {
                    rr.eval(s, t, theta, &mut tmp)?;
                    finite_positive(tmp.value, t)?;
                    sums.add(s.weight, &tmp);
                }
            }
            event_contribution(
                cohort,
                rr,
                theta,
                stratum,
                k,
                &sums,
                &mut ev_buf,
                acc,
                stratum.id,
            )?;
        }
    }
    if let Some(stats) = acc.event_stats.as_mut() {
        stats.sort_by(|a, b| a.stratum.cmp(&b.stratum).then(a.time.total_cmp(&b.time)));
    }
    Ok(())
}

fn check_cohort(cohort: &Cohort) -> Result<()> {
    if cohort.subjects.is_empty() {
        return Err(Error::InvalidInput("empty cohort".into()));
    }
    if cohort.n_events() == 0 {
        return Err(Error::InvalidInput("cohort has no events".into()));
    }
    Ok(())
}

/// Weighted stratified Breslow log partial likelihood
/// Σᵢ wᵢδᵢ[log rᵢ(Tᵢ) − log Σⱼ wⱼYⱼ(Tᵢ)rⱼ(Tᵢ)].
pub fn log_partial_likelihood(cohort: &Cohort, rr: &dyn RelRisk, theta: &ThetaVector) -> Result<f64> {
    check_cohort(cohort)?;
    let layout = EventLayout::new(cohort)?;
    Ok(traverse(cohort, &layout, rr, theta, false)?.logpl)
}

/// Score vector U(θ) = Σᵢ ∫ [∇log rᵢ − S⁽¹⁾/S⁽⁰⁾] dNᵢ.
pub fn score(cohort: &Cohort, rr: &dyn RelRisk, theta: &ThetaVector) -> Result<DVector<f64>> {
    check_cohort(cohort)?;
    let layout = EventLayout::new(cohort)?;
    let acc = traverse(cohort, &layout, rr, theta, false)?;
    Ok(DVector::from_vec(acc.score))
}

/// Observed information (negative Jacobian of the score), including the
/// within-subject curvature correction for non-exponential risk functions.
pub fn information(cohort: &Cohort, rr: &dyn RelRisk, theta: &ThetaVector) -> Result<DMatrix<f64>> {
    check_cohort(cohort)?;
    let layout = EventLayout::new(cohort)?;
    let acc = traverse(cohort, &layout, rr, theta, false)?;
    let d = rr.dim();
    Ok(DMatrix::from_row_slice(d, d, &acc.info))
}

/// Per-event-time risk-set statistics (d̄, S⁰, S¹/S⁰) at θ, ascending in time
/// within stratum. Used by the sandwich covariance and the Breslow baseline.
pub fn event_stats(
    cohort: &Cohort,
    rr: &dyn RelRisk,
    theta: &ThetaVector,
) -> Result<Vec<EventStats>> {
    check_cohort(cohort)?;
    let layout = EventLayout::new(cohort)?;
    let acc = traverse(cohort, &layout, rr, theta, true)?;
    Ok(acc.event_stats.unwrap())
}

/// Breslow baseline cumulative hazard: ΔΛ̂₀(t) = d̄(t) / Σⱼ wⱼYⱼ(t)rⱼ(t).
///
/// With a single stratum this is the cohort baseline; with several strata the
/// increments are per-stratum and concatenated in time order.
pub fn breslow_baseline(
    cohort: &Cohort,
    rr: &dyn RelRisk,
    theta: &ThetaVector,
) -> Result<CumHazard> {
    let stats = event_stats(cohort, rr, theta)?;
    let times = stats.iter().map(|e| e.time).collect();
    let increments = stats.iter().map(|e| e.d_weight / e.s0).collect();
    Ok(CumHazard::new(times, increments))
}

/// Options for the box-constrained Newton maximizer.
#[derive(Debug, Clone)]
pub struct NewtonOptions {
    pub box_lo: f64,
    pub box_hi: f64,
    /// convergence on max |score component|
    pub tol_score: f64,
    /// convergence on max |Δθ|
    pub tol_step: f64,
    pub max_iter: usize,
}

impl Default for NewtonOptions {
    fn default() -> Self {
        NewtonOptions {
            box_lo: -5.0,
            box_hi: 5.0,
            tol_score: 1e-8,
            tol_step: 1e-10,
            max_iter: 100,
        }
    }
}

/// Outcome of the Newton maximizer.
#[derive(Debug, Clone)]
pub struct Maximized {
    pub theta: ThetaVector,
    pub converged: bool,
    /// |θ̂_j| ≤ 4.9 for every component (divergence filter)
    pub within_bound: bool,
    pub iterations: usize,
    pub log_likelihood: f64,
    /// observed information at the final θ
    pub information: DMatrix<f64>,
}

fn clamp_vec(v: &mut DVector<f64>, lo: f64, hi: f64) {
    for x in v.iter_mut() {
        *x = x.clamp(lo, hi);
    }
}

/// Damped-Newton solve of I δ = U, escalating a Levenberg ridge when the
/// information is not positive definite.
pub(crate) fn damped_solve(info: &DMatrix<f64>, score: &DVector<f64>) -> Result<DVector<f64>> {
    let d = info.nrows();
    let scale = (0..d).map(|j| info[(j, j)].abs()).fold(0.0, f64::max).max(1e-12);
    let mut ridge = 0.0;
    for _ in 0..40 {
        let mut damped = info.clone();
        for j in 0..d {
            damped[(j, j)] += ridge;
        }
        if let Some(chol) = damped.cholesky() {
            let step = chol.solve(score);
            if step.iter().all(|x| x.is_finite()) {
                return Ok(step);
            }
        }
        ridge = if ridge == 0.0 { 1e-8 * scale } else { ridge * 10.0 };
        if ridge > 1e12 * scale {
            break;
        }
    }
    Err(Error::SingularInformation)
}

/// Newton maximization of the log partial likelihood with step-halving line
/// search and projection onto the box.
pub fn maximize(
    cohort: &Cohort,
    rr: &dyn RelRisk,
    theta0: &ThetaVector,
    opts: &NewtonOptions,
) -> Result<Maximized> {
    check_cohort(cohort)?;
    let layout = EventLayout::new(cohort)?;
    let tau = theta0.tau;
    let d = rr.dim();

    let mut flat = theta0.flatten();
    clamp_vec(&mut flat, opts.box_lo, opts.box_hi);
    let mut theta = ThetaVector::from_flat(&flat, tau);
    let mut acc = traverse(cohort, &layout, rr, &theta, false)?;
    let mut converged = false;
    let mut iterations = 0;

    for iter in 1..=opts.max_iter {
        let score_max = acc.score.iter().fold(0.0f64, |m, &x| m.max(x.abs()));
        if score_max < opts.tol_score {
            converged = true;
            break;
        }
        iterations = iter;
        let info = DMatrix::from_row_slice(d, d, &acc.info);
        let score = DVector::from_column_slice(&acc.score);
        let step = damped_solve(&info, &score)?;

        let mut accepted = false;
        let mut frac = 1.0;
        let mut step_inf = 0.0;
        for _ in 0..40 {
            let mut cand = &flat + &step * frac;
            clamp_vec(&mut cand, opts.box_lo, opts.box_hi);
            step_inf = (&cand - &flat).amax();
            if step_inf == 0.0 {
                break;
            }
            let cand_theta = ThetaVector::from_flat(&cand, tau);
            match traverse(cohort, &layout, rr, &cand_theta, false) {
                Ok(next) if next.logpl.is_finite() && next.logpl >= acc.logpl => {
                    flat = cand;
                    theta = cand_theta;
                    acc = next;
                    accepted = true;
                    break;
                }
                _ => frac *= 0.5,
            }
        }
        if !accepted {
            // no uphill move available within the box: stationary or pinned
            let score_max = acc.score.iter().fold(0.0f64, |m, &x| m.max(x.abs()));
            converged = score_max < opts.tol_score;
            break;
        }
        if step_inf < opts.tol_step {
            converged = true;
            break;
        }
    }
    let score_max = acc.score.iter().fold(0.0f64, |m, &x| m.max(x.abs()));
    if score_max < opts.tol_score {
        converged = true;
    }

    let within_bound = flat.iter().all(|x| x.abs() <= DIVERGENCE_BOUND);
    Ok(Maximized {
        theta,
        converged,
        within_bound,
        iterations,
        log_likelihood: acc.logpl,
        information: DMatrix::from_row_slice(d, d, &acc.info),
    })
}
