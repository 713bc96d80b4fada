//! Command-line surface: fitting datasets from CSV files, running simulation
//! grids, computing asymptotic-bias limits, and reporting concordance.
//!
//! All commands are driven by JSON configuration files; outputs are
//! UTF-8 CSV with a header row, written atomically (temp file + rename).
//! Exit codes: 0 success, 2 configuration/schema error, 3 numeric failure.

use crate::asymptotics::{limiting_theta_on, LimitSample, LimitScenario};
use crate::concordance::{c_index, MarkerKind, MarkerSpec};
use crate::domain::{Cohort, FitResult, Method, StepFn, Subject, ThetaVector};
use crate::error::Error;
use crate::errormodel::{estimate_nuisance, ErrorModelParams, ReliabilityStudy};
use crate::estimators::{
    self, BootstrapConfig, MppleConfig, RcVariant, SimexConfig,
};
use crate::simulate::{run_scenario, ScenarioSpec};
use crate::variance;
use crate::Result;
use nalgebra::DVector;
use serde::Deserialize;
use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

fn default_level() -> f64 {
    0.95
}

/// Where the measurement-error nuisance parameters come from.
#[derive(Debug, Clone, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NuisanceSource {
    /// long-format CSV `subject_id, replicate, w`
    ReliabilityCsv(PathBuf),
    Explicit {
        alpha0: f64,
        #[serde(default)]
        alpha1: Vec<f64>,
        sigma_x2: f64,
        sigma_u2: f64,
    },
    /// E[X|W] = intercept + slope·W and Var(X|W) = cond_var
    Conditional {
        intercept: f64,
        slope: f64,
        cond_var: f64,
    },
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitConfig {
    pub subjects: PathBuf,
    #[serde(default)]
    pub paths: Option<PathBuf>,
    pub output: PathBuf,
    pub methods: Vec<Method>,
    pub tau: f64,
    #[serde(default = "default_level")]
    pub level: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub nuisance: Option<NuisanceSource>,
    #[serde(default)]
    pub bootstrap_b: Option<usize>,
    #[serde(default)]
    pub simex: Option<SimexConfig>,
    #[serde(default)]
    pub mpple: Option<MppleConfig>,
    #[serde(default)]
    pub c_index: bool,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
pub enum ScenarioFile {
    One(Box<ScenarioSpec>),
    Many(Vec<ScenarioSpec>),
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BiasLimitConfig {
    pub methods: Vec<Method>,
    pub rho_grid: Vec<f64>,
    pub tau_quantiles: Vec<f64>,
    pub cum_incidence: f64,
    #[serde(default = "default_mc_size")]
    pub mc_size: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_beta0")]
    pub beta0: f64,
    #[serde(default = "default_omega0")]
    pub omega0: f64,
    #[serde(default = "default_t_star")]
    pub t_star: f64,
    pub output: PathBuf,
}

fn default_mc_size() -> usize {
    200_000
}
fn default_beta0() -> f64 {
    1.5f64.ln()
}
fn default_omega0() -> f64 {
    2.0f64.ln()
}
fn default_t_star() -> f64 {
    10.0
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConcordanceConfig {
    pub subjects: PathBuf,
    #[serde(default)]
    pub paths: Option<PathBuf>,
    pub tau: f64,
    pub method: Method,
    #[serde(default)]
    pub nuisance: Option<NuisanceSource>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub output: Option<PathBuf>,
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::InvalidConfig(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text)
        .map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))
}

/// Atomic write: the target appears only once fully written.
fn write_atomic(path: &Path, contents: &str) -> Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(contents.as_bytes())?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

fn schema_err(line: usize, message: impl Into<String>) -> Error {
    Error::Schema {
        line,
        message: message.into(),
    }
}

/// Reads the subjects CSV (`id, entry_time, exit_time, event[, stratum][, w, z1..zp]`),
/// plus an optional long-format paths CSV (`id, time, w, z1..zp`) for
/// time-varying covariates.
pub fn read_cohort(subjects_path: &Path, paths_path: Option<&Path>) -> Result<Cohort> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(subjects_path)?;
    let headers: Vec<String> = rdr
        .headers()?
        .iter()
        .map(|h| h.to_ascii_lowercase())
        .collect();
    let col = |name: &str| headers.iter().position(|h| h == name);
    let id_col = col("id").ok_or_else(|| schema_err(1, "missing column 'id'"))?;
    let entry_col = col("entry_time").ok_or_else(|| schema_err(1, "missing column 'entry_time'"))?;
    let exit_col = col("exit_time").ok_or_else(|| schema_err(1, "missing column 'exit_time'"))?;
    let event_col = col("event").ok_or_else(|| schema_err(1, "missing column 'event'"))?;
    let stratum_col = col("stratum");
    let w_col = col("w");
    let mut z_cols: Vec<(usize, usize)> = headers
        .iter()
        .enumerate()
        .filter_map(|(i, h)| {
            h.strip_prefix('z')
                .and_then(|rest| rest.parse::<usize>().ok())
                .map(|k| (k, i))
        })
        .collect();
    z_cols.sort_unstable();
    let p = z_cols.len();

    struct Row {
        id: String,
        entry: f64,
        exit: f64,
        event: bool,
        stratum: u32,
        w: Option<f64>,
        z: Vec<f64>,
    }

    let mut rows: Vec<Row> = Vec::new();
    for (idx, record) in rdr.records().enumerate() {
        let line = idx + 2; // header occupies line 1
        let record = record?;
        let field = |c: usize| -> Result<&str> {
            record
                .get(c)
                .ok_or_else(|| schema_err(line, format!("missing field {c}")))
        };
        let num = |c: usize, name: &str| -> Result<f64> {
            field(c)?
                .parse::<f64>()
                .map_err(|_| schema_err(line, format!("{name} is not a number: '{}'", field(c).unwrap_or(""))))
        };
        let event_raw = field(event_col)?;
        let event = match event_raw {
            "0" => false,
            "1" => true,
            _ => return Err(schema_err(line, format!("event must be 0 or 1, got '{event_raw}'"))),
        };
        let stratum = match stratum_col {
            Some(c) => field(c)?
                .parse::<u32>()
                .map_err(|_| schema_err(line, "stratum must be a non-negative integer"))?,
            None => 0,
        };
        let w = match w_col {
            Some(c) => Some(num(c, "w")?),
            None => None,
        };
        let z = z_cols
            .iter()
            .map(|&(k, c)| num(c, &format!("z{k}")))
            .collect::<Result<Vec<f64>>>()?;
        rows.push(Row {
            id: field(id_col)?.to_string(),
            entry: num(entry_col, "entry_time")?,
            exit: num(exit_col, "exit_time")?,
            event,
            stratum,
            w,
            z,
        });
    }
    if rows.is_empty() {
        return Err(schema_err(2, "no subjects"));
    }

    // optional time-varying paths
    let mut path_map: BTreeMap<String, Vec<(f64, f64, Vec<f64>)>> = BTreeMap::new();
    if let Some(pp) = paths_path {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(pp)?;
        let headers: Vec<String> = rdr
            .headers()?
            .iter()
            .map(|h| h.to_ascii_lowercase())
            .collect();
        let col = |name: &str| headers.iter().position(|h| h == name);
        let id_c = col("id").ok_or_else(|| schema_err(1, "paths: missing column 'id'"))?;
        let t_c = col("time").ok_or_else(|| schema_err(1, "paths: missing column 'time'"))?;
        let w_c = col("w").ok_or_else(|| schema_err(1, "paths: missing column 'w'"))?;
        let mut zp: Vec<(usize, usize)> = headers
            .iter()
            .enumerate()
            .filter_map(|(i, h)| {
                h.strip_prefix('z')
                    .and_then(|rest| rest.parse::<usize>().ok())
                    .map(|k| (k, i))
            })
            .collect();
        zp.sort_unstable();
        if zp.len() != p {
            return Err(schema_err(
                1,
                format!("paths has {} z columns but subjects has {p}", zp.len()),
            ));
        }
        for (idx, record) in rdr.records().enumerate() {
            let line = idx + 2;
            let record = record?;
            let get = |c: usize| -> Result<f64> {
                record
                    .get(c)
                    .and_then(|s| s.parse::<f64>().ok())
                    .ok_or_else(|| schema_err(line, "paths: non-numeric field"))
            };
            let id = record
                .get(id_c)
                .ok_or_else(|| schema_err(line, "paths: missing id"))?
                .to_string();
            let z = zp.iter().map(|&(_, c)| get(c)).collect::<Result<Vec<f64>>>()?;
            path_map.entry(id).or_default().push((get(t_c)?, get(w_c)?, z));
        }
    }

    let subjects = rows
        .into_iter()
        .enumerate()
        .map(|(i, row)| {
            let line = i + 2;
            let (w_path, z_path) = if let Some(points) = path_map.get(&row.id) {
                let mut pts = points.clone();
                pts.sort_by(|a, b| a.0.total_cmp(&b.0));
                let times: Vec<f64> = pts.iter().map(|p| p.0).collect();
                let ws: Vec<f64> = pts.iter().map(|p| p.1).collect();
                let zs: Vec<DVector<f64>> = pts
                    .iter()
                    .map(|p| DVector::from_column_slice(&p.2))
                    .collect();
                (
                    StepFn::new(times.clone(), ws).map_err(|e| schema_err(line, e.to_string()))?,
                    StepFn::new(times, zs).map_err(|e| schema_err(line, e.to_string()))?,
                )
            } else if let Some(w) = row.w {
                (
                    StepFn::constant(row.entry, w),
                    StepFn::constant(row.entry, DVector::from_column_slice(&row.z)),
                )
            } else {
                return Err(schema_err(
                    line,
                    format!("subject {} has no 'w' column and no path rows", row.id),
                ));
            };
            Ok(Subject {
                id: row.id,
                entry_time: row.entry,
                exit_time: row.exit,
                event: row.event,
                stratum: row.stratum,
                w_path: Arc::new(w_path),
                z_path: Arc::new(z_path),
                x_path: None,
                weight: 1.0,
            })
        })
        .collect::<Result<Vec<Subject>>>()?;

    let t_star = subjects
        .iter()
        .map(|s| s.exit_time)
        .fold(f64::NEG_INFINITY, f64::max);
    Cohort::new(subjects, t_star, p).map_err(|e| schema_err(2, e.to_string()))
}

/// Reads a long-format reliability CSV: `subject_id, replicate, w`.
pub fn read_reliability(path: &Path) -> Result<ReliabilityStudy> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path)?;
    let headers: Vec<String> = rdr
        .headers()?
        .iter()
        .map(|h| h.to_ascii_lowercase())
        .collect();
    let col = |name: &str| headers.iter().position(|h| h == name);
    let id_c = col("subject_id").ok_or_else(|| schema_err(1, "missing column 'subject_id'"))?;
    let w_c = col("w").ok_or_else(|| schema_err(1, "missing column 'w'"))?;
    let mut by_subject: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for (idx, record) in rdr.records().enumerate() {
        let line = idx + 2;
        let record = record?;
        let id = record
            .get(id_c)
            .ok_or_else(|| schema_err(line, "missing subject_id"))?
            .to_string();
        let w: f64 = record
            .get(w_c)
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| schema_err(line, "w is not a number"))?;
        by_subject.entry(id).or_default().push(w);
    }
    let k = by_subject
        .values()
        .map(Vec::len)
        .min()
        .ok_or_else(|| schema_err(2, "empty reliability study"))?;
    if by_subject.values().any(|v| v.len() != k) {
        return Err(schema_err(2, "unequal replicate counts across subjects"));
    }
    ReliabilityStudy::new(by_subject.into_values().collect())
        .map_err(|e| schema_err(2, e.to_string()))
}

fn resolve_nuisance(source: &Option<NuisanceSource>) -> Result<Option<ErrorModelParams>> {
    match source {
        None => Ok(None),
        Some(NuisanceSource::ReliabilityCsv(path)) => {
            let study = read_reliability(path)?;
            let fit = estimate_nuisance(&study)?;
            if fit.floored {
                eprintln!("warning: non-positive variance-component estimate; sigma_x2 floored");
            }
            Ok(Some(fit.params))
        }
        Some(NuisanceSource::Explicit {
            alpha0,
            alpha1,
            sigma_x2,
            sigma_u2,
        }) => Ok(Some(ErrorModelParams::new(
            *alpha0,
            alpha1.clone(),
            *sigma_x2,
            *sigma_u2,
        )?)),
        Some(NuisanceSource::Conditional {
            intercept,
            slope,
            cond_var,
        }) => Ok(Some(ErrorModelParams::from_conditional(
            *intercept, *slope, *cond_var,
        )?)),
    }
}

fn format_float(x: f64) -> String {
    if x.is_nan() {
        "NA".into()
    } else {
        format!("{x}")
    }
}

fn component_names(p: usize) -> Vec<String> {
    let mut names: Vec<String> = (1..=p).map(|k| format!("gamma{k}")).collect();
    names.push("beta".into());
    names.push("omega".into());
    names
}

/// `fit` command: fits the requested methods and writes the per-method,
/// per-component report (estimate, SE, two-sided Wald p, CI bounds).
pub fn cmd_fit(config_path: &Path) -> Result<()> {
    let cfg: FitConfig = read_json(config_path)?;
    if !(cfg.level > 0.0 && cfg.level < 1.0) {
        return Err(Error::InvalidConfig("level must be in (0,1)".into()));
    }
    let cohort = read_cohort(&cfg.subjects, cfg.paths.as_deref())?;
    let em = resolve_nuisance(&cfg.nuisance)?;
    let needs_em = cfg
        .methods
        .iter()
        .any(|m| !matches!(m, Method::Naive));
    if needs_em && em.is_none() {
        return Err(Error::InvalidConfig(
            "the requested correction methods need a nuisance source".into(),
        ));
    }
    if cfg.methods.contains(&Method::Mpple) && !cohort.is_time_fixed() {
        return Err(Error::TimeVaryingNotSupported);
    }
    let event_fraction = cohort.n_events() as f64 / cohort.n() as f64;
    if event_fraction > 0.1
        && cfg
            .methods
            .iter()
            .any(|m| matches!(m, Method::Rr1 | Method::Rr2))
    {
        eprintln!(
            "warning: event fraction {event_fraction:.2} is not rare; the RR methods' rare-disease approximation may be poor"
        );
    }

    let fits = fit_requested(&cohort, em.as_ref(), &cfg)?;

    let names = component_names(cohort.p);
    let mut out = String::new();
    out.push_str("method,component,estimate,se,p_value,ci_lo,ci_hi,converged");
    if cfg.c_index {
        out.push_str(",c_index");
    }
    out.push('\n');
    for (method, fit) in &fits {
        let c = if cfg.c_index {
            Some(fit_c_index(&cohort, *method, fit, em.as_ref())?)
        } else {
            None
        };
        let est = fit.theta_hat.flatten();
        let se = fit.se();
        let ci = variance::wald_ci_parts(&fit.theta_hat, &fit.covariance, cfg.level);
        for (j, name) in names.iter().enumerate() {
            let p_value = variance::wald_p_value(est[j], se[j]);
            out.push_str(&format!(
                "{method},{name},{},{},{},{},{},{}",
                format_float(est[j]),
                format_float(se[j]),
                format_float(p_value),
                format_float(ci[j].0),
                format_float(ci[j].1),
                fit.converged
            ));
            if let Some(cv) = c {
                out.push_str(&format!(",{}", format_float(cv)));
            }
            out.push('\n');
        }
    }
    write_atomic(&cfg.output, &out)?;
    Ok(())
}

/// Fits the requested methods with hierarchy chaining; a non-convergent fit
/// is reported with its flag rather than aborting the run.
fn fit_requested(
    cohort: &Cohort,
    em: Option<&ErrorModelParams>,
    cfg: &FitConfig,
) -> Result<Vec<(Method, FitResult)>> {
    let tau = cfg.tau;
    let wants = |m: Method| cfg.methods.contains(&m);
    let need_rr1 = wants(Method::Rr1) || wants(Method::Rr2) || wants(Method::Mpple);
    let need_rc2 = wants(Method::Rc2) || need_rr1;
    let need_rc1 = wants(Method::Rc1) || need_rc2;

    let mut out = Vec::new();
    let naive = estimators::fit_naive(cohort, tau)?;
    if wants(Method::Naive) {
        out.push((Method::Naive, naive.clone()));
    }

    let em_for = |m: Method| -> Result<&ErrorModelParams> {
        em.ok_or_else(|| Error::InvalidConfig(format!("method {m} needs a nuisance source")))
    };

    let rc1 = if need_rc1 {
        Some(estimators::fit_rc_from(
            cohort,
            em_for(Method::Rc1)?,
            RcVariant::Rc1,
            tau,
            &naive.theta_hat,
        )?)
    } else {
        None
    };
    if let (true, Some(f)) = (wants(Method::Rc1), rc1.as_ref()) {
        out.push((Method::Rc1, f.clone()));
    }

    let rc2 = if need_rc2 {
        let start = rc1.as_ref().map(|f| f.theta_hat.clone()).unwrap();
        Some(estimators::fit_rc_from(
            cohort,
            em_for(Method::Rc2)?,
            RcVariant::Rc2,
            tau,
            &start,
        )?)
    } else {
        None
    };
    if let (true, Some(f)) = (wants(Method::Rc2), rc2.as_ref()) {
        out.push((Method::Rc2, f.clone()));
    }

    let rr1 = if need_rr1 {
        let start = rc2.as_ref().map(|f| f.theta_hat.clone()).unwrap();
        Some(estimators::fit_rr1_from(
            cohort,
            em_for(Method::Rr1)?,
            tau,
            &start,
        )?)
    } else {
        None
    };
    if let (true, Some(f)) = (wants(Method::Rr1), rr1.as_ref()) {
        out.push((Method::Rr1, f.clone()));
    }

    if wants(Method::Rr2) {
        let bc = BootstrapConfig {
            b: cfg.bootstrap_b.unwrap_or(50),
            truncation: 5.0,
            rng_seed: cfg.seed,
        };
        let rr2 = estimators::fit_rr2_from(
            cohort,
            em_for(Method::Rr2)?,
            tau,
            rr1.as_ref().unwrap(),
            &bc,
        )?;
        out.push((Method::Rr2, rr2.result));
    }

    if wants(Method::Mpple) {
        let mut mc = cfg.mpple.clone().unwrap_or_default();
        mc.rng_seed = cfg.seed;
        let start = rr1.as_ref().map(|f| f.theta_hat.clone()).unwrap();
        let f = estimators::fit_mpple_from(cohort, em_for(Method::Mpple)?, tau, &start, &mc)?;
        out.push((Method::Mpple, f));
    }

    if wants(Method::Simex) {
        let mut sx = cfg.simex.clone().unwrap_or_default();
        sx.rng_seed = cfg.seed;
        let f = estimators::fit_simex(cohort, em_for(Method::Simex)?, tau, &sx)?;
        out.push((Method::Simex, f));
    }

    // report in the order requested
    out.sort_by_key(|(m, _)| cfg.methods.iter().position(|x| x == m).unwrap_or(usize::MAX));
    Ok(out)
}

fn fit_c_index(
    cohort: &Cohort,
    method: Method,
    fit: &FitResult,
    em: Option<&ErrorModelParams>,
) -> Result<f64> {
    let kind = match method {
        Method::Naive | Method::Simex => MarkerKind::NaiveForm,
        Method::Rc1 | Method::Rc2 => MarkerKind::RcForm,
        Method::Rr1 | Method::Rr2 => MarkerKind::RrForm,
        Method::Mpple => MarkerKind::MppleForm,
    };
    let ms = MarkerSpec {
        kind,
        theta: fit.theta_hat.clone(),
        em: em.cloned(),
        baseline: fit.baseline.clone(),
    };
    c_index(cohort, &ms)
}

/// `simulate` command: runs every scenario in the file and writes
/// summary.csv, replicates.csv and boxplot_data.csv into the output
/// directory.
pub fn cmd_simulate(config_path: &Path, out_dir: &Path) -> Result<()> {
    let file: ScenarioFile = read_json(config_path)?;
    let mut scenarios = match file {
        ScenarioFile::One(s) => vec![*s],
        ScenarioFile::Many(v) => v,
    };
    if scenarios.is_empty() {
        return Err(Error::InvalidConfig("no scenarios in file".into()));
    }
    for (i, sc) in scenarios.iter_mut().enumerate() {
        if sc.id.is_empty() {
            sc.id = format!("s{i}");
        }
        sc.validate()?;
    }
    fs::create_dir_all(out_dir)?;

    let mut summary = String::from(
        "scenario,method,component,n_used,convergence_pct,mean,median,rel_bias_mean,rel_bias_median,emp_sd,mean_se,coverage\n",
    );
    let mut replicates =
        String::from("scenario,replicate,method,component,converged,within_bound,estimate,se,covered\n");
    let mut boxplot = String::from("scenario,method,component,median,box_lo,box_hi\n");

    for sc in &scenarios {
        let out = run_scenario(sc)?;
        for w in &out.warnings {
            eprintln!("warning [{}]: {w}", sc.id);
        }
        let names = component_names(out.truth.len() - 2);
        for row in &out.summary {
            summary.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{},{},{}\n",
                row.scenario,
                row.method,
                row.component,
                row.n_used,
                format_float(row.convergence_pct),
                format_float(row.mean),
                format_float(row.median),
                format_float(row.rel_bias_mean),
                format_float(row.rel_bias_median),
                format_float(row.emp_sd),
                format_float(row.mean_se),
                format_float(row.coverage),
            ));
            boxplot.push_str(&format!(
                "{},{},{},{},{},{}\n",
                row.scenario,
                row.method,
                row.component,
                format_float(row.median),
                format_float(row.box_lo),
                format_float(row.box_hi),
            ));
        }
        for r in &out.replicates {
            for (j, name) in names.iter().enumerate() {
                replicates.push_str(&format!(
                    "{},{},{},{},{},{},{},{},{}\n",
                    sc.id,
                    r.replicate,
                    r.method,
                    name,
                    r.converged,
                    r.within_bound,
                    format_float(r.estimate[j]),
                    format_float(r.se[j]),
                    r.covered[j],
                ));
            }
        }
    }
    write_atomic(&out_dir.join("summary.csv"), &summary)?;
    write_atomic(&out_dir.join("replicates.csv"), &replicates)?;
    write_atomic(&out_dir.join("boxplot_data.csv"), &boxplot)?;
    Ok(())
}

/// `bias-limit` command: limiting values and asymptotic bias over the grid.
pub fn cmd_bias_limit(config_path: &Path) -> Result<()> {
    let cfg: BiasLimitConfig = read_json(config_path)?;
    for m in &cfg.methods {
        if !matches!(m, Method::Naive | Method::Rc1 | Method::Rc2 | Method::Rr1) {
            return Err(Error::InvalidConfig(format!(
                "bias limits are defined for naive, rc1, rc2 and rr1 only (got {m})"
            )));
        }
    }
    let mut out = String::from(
        "method,rho_xw,tau_quantile,beta_limit,omega_limit,bias_beta,bias_omega,converged\n",
    );
    for &rho in &cfg.rho_grid {
        for &q in &cfg.tau_quantiles {
            let sc = LimitScenario {
                beta0: cfg.beta0,
                omega0: cfg.omega0,
                tau: crate::stats::normal::inv_cdf(q),
                rho_xw: rho,
                cum_incidence: cfg.cum_incidence,
                t_star: cfg.t_star,
                mc_size: cfg.mc_size,
            };
            let sample = LimitSample::generate(&sc, cfg.seed)?;
            for &method in &cfg.methods {
                match limiting_theta_on(&sample, method) {
                    Ok(theta) => {
                        out.push_str(&format!(
                            "{method},{rho},{q},{},{},{},{},true\n",
                            format_float(theta.beta),
                            format_float(theta.omega),
                            format_float(theta.beta - cfg.beta0),
                            format_float(theta.omega - cfg.omega0),
                        ));
                    }
                    Err(_) => {
                        out.push_str(&format!("{method},{rho},{q},NA,NA,NA,NA,false\n"));
                    }
                }
            }
        }
    }
    write_atomic(&cfg.output, &out)?;
    Ok(())
}

/// `concordance` command: fit the requested method, then report Harrell's C
/// with the induced-relative-risk marker.
pub fn cmd_concordance(config_path: &Path) -> Result<()> {
    let cfg: ConcordanceConfig = read_json(config_path)?;
    let cohort = read_cohort(&cfg.subjects, cfg.paths.as_deref())?;
    let em = resolve_nuisance(&cfg.nuisance)?;
    let fit_cfg = FitConfig {
        subjects: cfg.subjects.clone(),
        paths: cfg.paths.clone(),
        output: PathBuf::new(),
        methods: vec![cfg.method],
        tau: cfg.tau,
        level: 0.95,
        seed: cfg.seed,
        nuisance: cfg.nuisance.clone(),
        bootstrap_b: None,
        simex: None,
        mpple: None,
        c_index: false,
    };
    let fits = fit_requested(&cohort, em.as_ref(), &fit_cfg)?;
    let (method, fit) = fits
        .into_iter()
        .next()
        .ok_or_else(|| Error::Numeric("fit produced no result".into()))?;
    let c = fit_c_index(&cohort, method, &fit, em.as_ref())?;
    let text = format!("method,c_index\n{method},{}\n", format_float(c));
    match &cfg.output {
        Some(path) => write_atomic(path, &text)?,
        None => print!("{text}"),
    }
    Ok(())
}

/// Thread-count cap from the environment, for the worker pool.
pub fn thread_cap_from_env() -> Option<usize> {
    std::env::var("THRESHOLD_COX_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n >= 1)
}

impl ThetaVector {
    /// Convenience constructor from CLI-style parts.
    pub fn from_parts(gamma: &[f64], beta: f64, omega: f64, tau: f64) -> Self {
        ThetaVector::new(DVector::from_column_slice(gamma), beta, omega, tau)
    }
}
