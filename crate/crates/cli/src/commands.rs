/*
 * Command implementations behind the CLI entry points. Each returns plain
 * data so both main() and the test suites can drive them; main() maps
 * errors onto process exit codes.
 */

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use nalgebra::DVector;
use serde::Serialize;
use serde_json::json;
use spde_core::estimate::{
    estimate_alpha, estimate_sigma_point, estimate_sigma_pooled, log_linear_fit, validate_scheme,
    AlphaChoice, EstimationReport,
};
use spde_core::model::{self, FieldSample, MethodTag};
use spde_core::numerics::{design_matrix, ols_solve, summary};
use spde_core::simulate::{
    build_cache, simulate_replacement, simulate_truncation, CacheReport, ReplacementCache,
};
use spde_core::{Result, RngStream, SpdeError};

use crate::config::{resolve, EstimatorKind, FieldFormat, Overrides, ResolvedRun, RunConfig};
use crate::io::{read_field, write_field};

/// Map an error onto the documented process exit code: 2 configuration,
/// 3 budget refusal, 4 metadata mismatch, 5 data error, 1 anything else.
pub fn exit_code(err: &SpdeError) -> i32 {
    match err {
        SpdeError::InvalidParameter(_)
        | SpdeError::DomainError(_)
        | SpdeError::FullRankViolation(_)
        | SpdeError::Json(_) => 2,
        SpdeError::BudgetExceeded { .. } => 3,
        SpdeError::CacheMismatch(_) | SpdeError::MetadataMismatch(_) => 4,
        SpdeError::DataError(_) => 5,
        SpdeError::Io(_) => 1,
    }
}

fn csv_err(e: csv::Error) -> SpdeError {
    SpdeError::Io(std::io::Error::other(e))
}

fn ensure_output_dir(run: &ResolvedRun) -> Result<PathBuf> {
    let dir = PathBuf::from(&run.config.output_dir);
    std::fs::create_dir_all(&dir)?;
    Ok(dir)
}

fn default_cache_path(run: &ResolvedRun, dir: &Path) -> PathBuf {
    match &run.config.cache_path {
        Some(p) => PathBuf::from(p),
        None => dir.join("variance_cache.json"),
    }
}

// Build (or load) the replacement variance cache for this run, persisting
// it next to the outputs when no explicit path is configured.
fn replacement_cache(run: &ResolvedRun, dir: &Path) -> Result<(ReplacementCache, CacheReport)> {
    let settings = run.replacement_settings()?;
    let path = default_cache_path(run, dir);
    build_cache(&run.params, &settings, Some(&path))
}

/// Simulate one field sample and write it to the output directory.
pub struct SimulateOutcome {
    pub field_path: PathBuf,
    pub cache: Option<CacheReport>,
}

pub fn run_simulate(config: RunConfig, overrides: &Overrides) -> Result<SimulateOutcome> {
    let run = resolve(config, overrides)?;
    let dir = ensure_output_dir(&run)?;
    let stream = RngStream::new(run.config.seed, 0);
    let (sample, cache) = match run.method {
        MethodTag::Truncation { .. } => {
            let settings = run.truncation_settings()?;
            (simulate_truncation(&run.params, &run.scheme, &settings, &stream)?, None)
        }
        MethodTag::Replacement { .. } => {
            let settings = run.replacement_settings()?;
            let (cache, report) = replacement_cache(&run, &dir)?;
            (
                simulate_replacement(&run.params, &run.scheme, &settings, &cache, &stream)?,
                Some(report),
            )
        }
    };
    let field_path = dir.join(match run.config.field_format {
        FieldFormat::Csv => "field.csv",
        FieldFormat::Binary => "field.bin",
    });
    write_field(&field_path, run.config.field_format, &sample, &run.config)?;
    Ok(SimulateOutcome { field_path, cache })
}

/// Model constants and theoretical moments for the configured run.
pub fn run_constants(config: RunConfig, overrides: &Overrides) -> Result<serde_json::Value> {
    let run = resolve(config, overrides)?;
    let p = &run.params;
    let tol = run.config.series_tol;
    let upsilon = model::upsilon(p.alpha_prime(), tol)?;
    let lambda = model::lambda_const(p.alpha_prime(), tol)?;
    let delta_t = run.scheme.delta_t();
    let mut points = Vec::new();
    for y in run.scheme.spatial_points() {
        points.push(json!({
            "y": y,
            "mean_sq_increment": p.theoretical_mean_sq_increment(y, delta_t),
            "lag1_autocovariance": p.theoretical_autocovariance(y, delta_t, 1)?,
        }));
    }
    Ok(json!({
        "config": run.config,
        "alpha": p.alpha(),
        "kappa": p.kappa(),
        "sigma0_sq": p.sigma0_sq(),
        "rescaling_k": p.rescaling_constant(),
        "upsilon": upsilon,
        "lambda": lambda,
        "lag1_autocorrelation": p.theoretical_autocorrelation(1)?,
        "points": points,
    }))
}

// The estimates produced for one sample: which alpha' went in, plus one
// report per configured estimator.
struct EstimateRun {
    alpha_used: f64,
    alpha_plugged: bool,
    reports: Vec<EstimationReport>,
}

fn estimate_sample(sample: &FieldSample, run: &ResolvedRun) -> Result<EstimateRun> {
    if run.config.estimators.is_empty() {
        return Err(SpdeError::InvalidParameter(
            "the estimator list is empty; nothing to do".into(),
        ));
    }
    let margin = run.config.margin;
    let (alpha, alpha_report) = if run.config.pipeline_alpha {
        let report = estimate_alpha(sample, margin)?;
        let a = report.components[0].value;
        let choice = AlphaChoice::plug_in(a).map_err(|_| {
            SpdeError::DataError(format!(
                "pipeline damping estimate {a} leaves (0,1) and cannot be plugged in"
            ))
        })?;
        (choice, Some(report))
    } else {
        (AlphaChoice::known(sample.params.alpha_prime())?, None)
    };
    let mut reports = Vec::new();
    for kind in &run.config.estimators {
        let report = match kind {
            EstimatorKind::SigmaSqPooled => estimate_sigma_pooled(sample, &alpha, margin)?,
            EstimatorKind::SigmaSqPoint => {
                estimate_sigma_point(sample, run.config.point_index, &alpha, margin)?
            }
            EstimatorKind::LogLinear => log_linear_fit(sample, &alpha, margin)?,
            EstimatorKind::AlphaPrime => match &alpha_report {
                Some(r) => r.clone(),
                None => estimate_alpha(sample, margin)?,
            },
        };
        reports.push(report);
    }
    Ok(EstimateRun {
        alpha_used: alpha.value(),
        alpha_plugged: alpha.is_plug_in(),
        reports,
    })
}

/// Estimate parameters from a stored field sample; returns the report and
/// where it was written.
pub fn run_estimate(
    config: RunConfig,
    overrides: &Overrides,
    sample_path: &Path,
) -> Result<(serde_json::Value, PathBuf)> {
    let run = resolve(config, overrides)?;
    let (sample, _sample_config) = read_field(sample_path)?;
    if sample.params != run.params {
        return Err(SpdeError::MetadataMismatch(format!(
            "sample was generated under {:?}, config claims {:?}",
            sample.params, run.params
        )));
    }
    if sample.scheme != run.scheme {
        return Err(SpdeError::MetadataMismatch(
            "sample observation scheme differs from the configured scheme".into(),
        ));
    }
    if sample.method != run.method {
        return Err(SpdeError::MetadataMismatch(
            "sample simulation method differs from the configured method".into(),
        ));
    }
    let est = estimate_sample(&sample, &run)?;
    let tol = run.config.series_tol;
    let diagnostics = validate_scheme(&sample, est.alpha_used);
    let report = json!({
        "config": run.config,
        "sample_seed": sample.seed,
        "sample_stream_index": sample.stream_index,
        "alpha_used": est.alpha_used,
        "alpha_plug_in": est.alpha_plugged,
        "constants": {
            "rescaling_k": model::rescaling_constant(run.params.d(), run.params.eta(), est.alpha_used),
            "upsilon": model::upsilon(est.alpha_used, tol)?,
            "lambda": model::lambda_const(est.alpha_used, tol)?,
        },
        "scheme_diagnostics": diagnostics,
        "reports": est.reports,
    });
    let dir = ensure_output_dir(&run)?;
    let path = dir.join("report.json");
    std::fs::write(&path, serde_json::to_string_pretty(&report)?)?;
    Ok((report, path))
}

/// One CSV row per (replication, estimator, component).
#[derive(Clone, Debug, Serialize)]
pub struct McRow {
    pub run_id: usize,
    pub estimator: String,
    pub component: String,
    pub value: f64,
    pub se: Option<f64>,
    pub ci_lo: Option<f64>,
    pub ci_hi: Option<f64>,
    pub seed: u64,
}

#[derive(Clone, Debug, Serialize)]
pub struct ReplicationFailure {
    pub run_id: usize,
    pub error: String,
}

/// Per-component aggregate over the completed replications.
#[derive(Clone, Debug, Serialize)]
pub struct ComponentSummary {
    pub estimator: String,
    pub component: String,
    pub count: usize,
    pub mean: Option<f64>,
    /// Sample variance; null when fewer than two replications completed.
    pub variance: Option<f64>,
    /// True parameter value under the generating model, when it has one.
    pub true_value: Option<f64>,
    /// Asymptotic variance of the estimate predicted by the limit theorems
    /// at the true parameters.
    pub theoretical_variance: Option<f64>,
    /// (estimate - truth) / sqrt(theoretical variance), one per completed
    /// replication, when both references exist.
    pub normalized_errors: Vec<f64>,
    /// How many reported confidence intervals contain the true value.
    pub coverage_count: Option<usize>,
}

#[derive(Clone, Debug, Serialize)]
pub struct StudySummary {
    pub config: RunConfig,
    pub replications: usize,
    pub completed: usize,
    pub failures: Vec<ReplicationFailure>,
    pub components: Vec<ComponentSummary>,
}

pub struct McOutcome {
    pub csv_path: PathBuf,
    pub summary_path: PathBuf,
    pub summary: StudySummary,
}

// True parameter values by component name, for components that estimate a
// model quantity directly.
fn true_value(run: &ResolvedRun, component: &str) -> Option<f64> {
    let p = &run.params;
    let d = p.d();
    if component == "sigma_sq" {
        return Some(p.sigma() * p.sigma());
    }
    if component == "sigma0_sq" {
        return Some(p.sigma0_sq());
    }
    if component == "alpha_prime" {
        return Some(p.alpha_prime());
    }
    if let Some(l) = component.strip_prefix("kappa_") {
        let l: usize = l.parse().ok()?;
        return (1..=d).contains(&l).then(|| p.kappa()[l - 1]);
    }
    if let Some(i) = component.strip_prefix("psi_") {
        let i: usize = i.parse().ok()?;
        if i == 1 {
            return Some((p.sigma0_sq() * p.rescaling_constant()).ln());
        }
        return (2..=d + 1).contains(&i).then(|| -p.kappa()[i - 2]);
    }
    None
}

// CLT variance of each component's estimator at the true parameters.
fn theoretical_variance(
    run: &ResolvedRun,
    estimator: &str,
    component: &str,
) -> Result<Option<f64>> {
    let p = &run.params;
    let tol = run.config.series_tol;
    let a = p.alpha_prime();
    let n = run.scheme.n() as f64;
    let m = run.scheme.m() as f64;
    let sigma4 = p.sigma().powi(4);
    let ups = model::upsilon(a, tol)?;
    match (estimator, component) {
        ("sigma_sq_pooled", "sigma_sq") => Ok(Some(ups * sigma4 / (n * m))),
        ("sigma_sq_point", "sigma_sq") => Ok(Some(ups * sigma4 / n)),
        ("alpha_prime", "alpha_prime") => {
            let lam = model::lambda_const(a, tol)?;
            let num = 3.0 * ups - 2f64.powf(2.0 - a) * (ups + lam);
            Ok(Some(num / (2f64.ln().powi(2) * n * m)))
        }
        ("log_linear", c) => {
            let x = design_matrix(run.scheme.spatial_points());
            let fit = match ols_solve(&x, &DVector::zeros(run.scheme.m())) {
                Ok(f) => f,
                Err(_) => return Ok(None),
            };
            let idx = if c == "sigma0_sq" {
                Some(0)
            } else if let Some(l) = c.strip_prefix("kappa_") {
                l.parse::<usize>().ok()
            } else if let Some(i) = c.strip_prefix("psi_") {
                i.parse::<usize>().ok().map(|i| i - 1)
            } else {
                None
            };
            let Some(idx) = idx else { return Ok(None) };
            if idx >= fit.xtx_inv.nrows() {
                return Ok(None);
            }
            let base = ups * fit.xtx_inv[(idx, idx)] / n;
            if c == "sigma0_sq" {
                let s0 = p.sigma0_sq();
                Ok(Some(s0 * s0 * base))
            } else {
                Ok(Some(base))
            }
        }
        _ => Ok(None),
    }
}

/// Run the Monte Carlo study: R replications, replication r on RNG stream
/// (seed, r), results written as a CSV of rows plus a JSON summary. Rows
/// and summary depend only on the configuration and seed, not on the
/// worker count.
pub fn run_mc(config: RunConfig, overrides: &Overrides, workers: usize) -> Result<McOutcome> {
    let run = resolve(config, overrides)?;
    if run.config.estimators.is_empty() {
        return Err(SpdeError::InvalidParameter(
            "the estimator list is empty; nothing to do".into(),
        ));
    }
    if workers == 0 {
        return Err(SpdeError::InvalidParameter("workers must be at least 1".into()));
    }
    let dir = ensure_output_dir(&run)?;
    let reps = run.config.replications;
    let seed = run.config.seed;

    enum Sim {
        Trunc(spde_core::simulate::TruncationSettings),
        Repl(spde_core::simulate::ReplacementSettings, ReplacementCache),
    }
    let sim = match run.method {
        MethodTag::Truncation { .. } => Sim::Trunc(run.truncation_settings()?),
        MethodTag::Replacement { .. } => {
            let settings = run.replacement_settings()?;
            let (cache, _) = replacement_cache(&run, &dir)?;
            Sim::Repl(settings, cache)
        }
    };

    let one_rep = |r: usize| -> Result<Vec<McRow>> {
        let stream = RngStream::new(seed, r as u64);
        let sample = match &sim {
            Sim::Trunc(settings) => simulate_truncation(&run.params, &run.scheme, settings, &stream)?,
            Sim::Repl(settings, cache) => {
                simulate_replacement(&run.params, &run.scheme, settings, cache, &stream)?
            }
        };
        let est = estimate_sample(&sample, &run)?;
        let mut rows = Vec::new();
        for report in &est.reports {
            for c in &report.components {
                rows.push(McRow {
                    run_id: r,
                    estimator: report.estimator.clone(),
                    component: c.name.clone(),
                    value: c.value,
                    se: c.se,
                    ci_lo: c.ci_lo,
                    ci_hi: c.ci_hi,
                    seed,
                });
            }
        }
        Ok(rows)
    };

    // Parallel across replications; collect preserves replication order, so
    // every downstream artifact is schedule independent.
    let results: Vec<std::result::Result<Vec<McRow>, String>> = {
        use rayon::prelude::*;
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build()
            .map_err(|e| SpdeError::InvalidParameter(format!("cannot build worker pool: {e}")))?;
        pool.install(|| {
            (0..reps)
                .into_par_iter()
                .map(|r| one_rep(r).map_err(|e| e.to_string()))
                .collect()
        })
    };

    let csv_path = dir.join("mc_runs.csv");
    let mut writer = csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(&csv_path)
        .map_err(csv_err)?;
    // write the schema line explicitly so it is present even when every
    // replication fails
    writer
        .write_record([
            "run_id", "estimator", "component", "value", "se", "ci_lo", "ci_hi", "seed",
        ])
        .map_err(csv_err)?;
    let mut failures = Vec::new();
    for (r, res) in results.iter().enumerate() {
        match res {
            Ok(rows) => {
                for row in rows {
                    writer.serialize(row).map_err(csv_err)?;
                }
            }
            Err(e) => failures.push(ReplicationFailure {
                run_id: r,
                error: e.clone(),
            }),
        }
    }
    writer.flush()?;

    // component order: estimator-list order as emitted by the first
    // completed replication
    let mut order: Vec<(String, String)> = Vec::new();
    let mut by_key: BTreeMap<(String, String), Vec<(f64, Option<f64>, Option<f64>)>> =
        BTreeMap::new();
    for res in results.iter().flatten() {
        for row in res {
            let key = (row.estimator.clone(), row.component.clone());
            if !by_key.contains_key(&key) {
                order.push(key.clone());
            }
            by_key
                .entry(key)
                .or_default()
                .push((row.value, row.ci_lo, row.ci_hi));
        }
    }

    let mut components = Vec::new();
    for key in order {
        let rows = &by_key[&key];
        let values: Vec<f64> = rows.iter().map(|r| r.0).collect();
        let stats = summary(&values).ok();
        let truth = true_value(&run, &key.1);
        let theo = theoretical_variance(&run, &key.0, &key.1)?;
        let normalized_errors = match (truth, theo) {
            (Some(t), Some(v)) if v > 0.0 => {
                values.iter().map(|x| (x - t) / v.sqrt()).collect()
            }
            _ => Vec::new(),
        };
        let coverage_count = truth.map(|t| {
            rows.iter()
                .filter(|(_, lo, hi)| matches!((lo, hi), (Some(lo), Some(hi)) if *lo <= t && t <= *hi))
                .count()
        });
        components.push(ComponentSummary {
            estimator: key.0,
            component: key.1,
            count: values.len(),
            mean: stats.as_ref().map(|s| s.mean),
            variance: stats.as_ref().and_then(|s| s.variance),
            true_value: truth,
            theoretical_variance: theo,
            normalized_errors,
            coverage_count,
        });
    }

    let summary = StudySummary {
        config: run.config.clone(),
        replications: reps,
        completed: reps - failures.len(),
        failures,
        components,
    };
    let summary_path = dir.join("mc_summary.json");
    std::fs::write(&summary_path, serde_json::to_string_pretty(&summary)?)?;
    Ok(McOutcome {
        csv_path,
        summary_path,
        summary,
    })
}

/// Build (or refresh) the replacement variance cache for the configured
/// model and settings.
pub fn run_cache_build(config: RunConfig, overrides: &Overrides) -> Result<(PathBuf, CacheReport)> {
    let run = resolve(config, overrides)?;
    let dir = ensure_output_dir(&run)?;
    let path = default_cache_path(&run, &dir);
    let (_cache, report) = replacement_cache(&run, &dir)?;
    Ok((path, report))
}
