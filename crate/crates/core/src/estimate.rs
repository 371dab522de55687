/*
 * Estimators for the volatility, the natural parameters, and the damping
 * exponent from discrete space-time observations.
 *
 * All estimators are built on realized volatilities of temporal increments
 * at fixed spatial points. The volatility estimators need eta, kappa, and
 * alpha' as known inputs; the log-linear fit needs eta and alpha'; the
 * two-grid damping estimator needs nothing beyond the interior margin. A
 * previously estimated alpha' can be plugged into the others, which the
 * reports record explicitly.
 */

use nalgebra::DVector;
use serde::Serialize;

use crate::error::{Result, SpdeError};
use crate::model::{self, FieldSample, SamplingScheme};
use crate::numerics::{design_matrix, inv_norm_cdf, ols_solve};

/// Tolerance passed to the series constants when evaluating asymptotic
/// variances.
pub const DEFAULT_SERIES_TOL: f64 = 1e-10;

/// Default confidence level for reported intervals.
pub const DEFAULT_CI_LEVEL: f64 = 0.95;

/// The damping exponent supplied to an estimator: either known a priori or
/// plugged in from a previous estimate (which the reports flag, since the
/// plug-in costs a little asymptotic efficiency).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AlphaChoice {
    value: f64,
    plugged_in: bool,
}

impl AlphaChoice {
    pub fn known(value: f64) -> Result<Self> {
        AlphaChoice::build(value, false)
    }

    pub fn plug_in(value: f64) -> Result<Self> {
        AlphaChoice::build(value, true)
    }

    fn build(value: f64, plugged_in: bool) -> Result<Self> {
        if !(value > 0.0 && value < 1.0) {
            return Err(SpdeError::InvalidParameter(format!(
                "alpha_prime must lie in (0,1), got {value}"
            )));
        }
        Ok(AlphaChoice { value, plugged_in })
    }

    pub fn value(&self) -> f64 {
        self.value
    }

    pub fn is_plug_in(&self) -> bool {
        self.plugged_in
    }
}

/// One scalar of an estimation report with its uncertainty, when available.
#[derive(Clone, Debug, Serialize)]
pub struct ReportComponent {
    pub name: String,
    pub value: f64,
    /// Asymptotic variance of the estimate itself (already divided by the
    /// sample sizes), when the theory provides one.
    pub variance: Option<f64>,
    pub se: Option<f64>,
    pub ci_lo: Option<f64>,
    pub ci_hi: Option<f64>,
}

/// Outcome of one estimator run: point estimates with standard errors and
/// confidence intervals, plus the bookkeeping needed to audit the run.
#[derive(Clone, Debug, Serialize)]
pub struct EstimationReport {
    pub estimator: String,
    pub components: Vec<ReportComponent>,
    pub ci_level: f64,
    pub n: usize,
    pub m: usize,
    /// Parameters treated as known inputs.
    pub assumed_known: Vec<String>,
    /// True when alpha' came from a previous estimate instead of being known.
    pub plug_in_alpha: bool,
    pub diagnostics: Vec<String>,
}

fn component(name: &str, value: f64, variance: Option<f64>, z: f64) -> Result<ReportComponent> {
    let variance = match variance {
        Some(v) if v.is_finite() && v >= 0.0 => Some(v),
        Some(v) => {
            return Err(SpdeError::DataError(format!(
                "asymptotic variance of {name} is not a nonnegative number: {v}"
            )))
        }
        None => None,
    };
    let se = variance.map(f64::sqrt);
    Ok(ReportComponent {
        name: name.into(),
        value,
        variance,
        se,
        ci_lo: se.map(|s| value - z * s),
        ci_hi: se.map(|s| value + z * s),
    })
}

fn z_quantile(level: f64) -> Result<f64> {
    if !(level > 0.0 && level < 1.0) {
        return Err(SpdeError::InvalidParameter(format!(
            "confidence level must lie in (0,1), got {level}"
        )));
    }
    inv_norm_cdf(1.0 - (1.0 - level) / 2.0)
}

// Resolve the estimation margin: the scheme's own margin by default, or an
// explicit override that every spatial point must still satisfy.
fn resolve_margin(scheme: &SamplingScheme, delta: Option<f64>) -> Result<f64> {
    let delta = match delta {
        None => return Ok(scheme.delta()),
        Some(d) => d,
    };
    if !(delta > 0.0 && delta < 0.5) {
        return Err(SpdeError::InvalidParameter(format!(
            "interior margin delta must lie in (0, 1/2), got {delta}"
        )));
    }
    for y in scheme.spatial_points() {
        if y.iter().any(|v| !(*v >= delta && *v <= 1.0 - delta)) {
            return Err(SpdeError::InvalidParameter(format!(
                "point {y:?} leaves the interior margin [{delta}, {}]",
                1.0 - delta
            )));
        }
    }
    Ok(delta)
}

/// Realized volatility Sum_{i=1}^n (X_{t_i}(y_j) - X_{t_{i-1}}(y_j))^2 at
/// spatial point index `y_index`.
pub fn realized_volatility(sample: &FieldSample, y_index: usize) -> Result<f64> {
    let m = sample.scheme.m();
    if y_index >= m {
        return Err(SpdeError::DomainError(format!(
            "spatial index {y_index} out of range for {m} points"
        )));
    }
    let n = sample.scheme.n();
    let mut acc = 0.0;
    let mut prev = sample.value(0, y_index);
    for i in 1..=n {
        let cur = sample.value(i, y_index);
        let d = cur - prev;
        acc += d * d;
        prev = cur;
    }
    Ok(acc)
}

//

// Rescaled squared-increment sum at one point: RV(y) e^{kappa . y} /
// (n Delta^{a'} K). This is the per-point volatility estimate.
fn sigma_sq_at(sample: &FieldSample, y_index: usize, alpha_prime: f64) -> Result<f64> {
    let params = &sample.params;
    let scheme = &sample.scheme;
    let y = &scheme.spatial_points()[y_index];
    let rv = realized_volatility(sample, y_index)?;
    let k = model::rescaling_constant(params.d(), params.eta(), alpha_prime);
    Ok(rv * params.kappa_dot(y).exp() / (scheme.n() as f64 * scheme.delta_t().powf(alpha_prime) * k))
}

// Per-point quarticity: (3 n Delta^{2a'} K^2)^{-1} Sum_i (Delta_i X)^4
// e^{2 kappa . y}, a consistent estimator of sigma^4.
fn quarticity_at(sample: &FieldSample, y_index: usize, alpha_prime: f64) -> Result<f64> {
    let params = &sample.params;
    let scheme = &sample.scheme;
    let y = &scheme.spatial_points()[y_index];
    let n = scheme.n();
    let mut acc = 0.0;
    let mut prev = sample.value(0, y_index);
    for i in 1..=n {
        let cur = sample.value(i, y_index);
        let d = cur - prev;
        acc += d * d * d * d;
        prev = cur;
    }
    let k = model::rescaling_constant(params.d(), params.eta(), alpha_prime);
    let weight = (2.0 * params.kappa_dot(y)).exp();
    Ok(acc * weight / (3.0 * n as f64 * scheme.delta_t().powf(2.0 * alpha_prime) * k * k))
}

fn alpha_assumptions(alpha: &AlphaChoice, mut names: Vec<&str>) -> (Vec<String>, bool) {
    names.push("alpha_prime");
    (names.iter().map(|s| s.to_string()).collect(), alpha.is_plug_in())
}

/// Volatility estimate at a single spatial point, with the quarticity-based
/// asymptotic variance Upsilon_{a'} sigma^4 / n.
pub fn estimate_sigma_point(
    sample: &FieldSample,
    y_index: usize,
    alpha: &AlphaChoice,
    delta: Option<f64>,
) -> Result<EstimationReport> {
    resolve_margin(&sample.scheme, delta)?;
    if y_index >= sample.scheme.m() {
        return Err(SpdeError::DomainError(format!(
            "spatial index {y_index} out of range for {} points",
            sample.scheme.m()
        )));
    }
    let a = alpha.value();
    let value = sigma_sq_at(sample, y_index, a)?;
    let quart = quarticity_at(sample, y_index, a)?;
    let upsilon = model::upsilon(a, DEFAULT_SERIES_TOL)?;
    let n = sample.scheme.n();
    let z = z_quantile(DEFAULT_CI_LEVEL)?;
    let (assumed_known, plug_in_alpha) = alpha_assumptions(alpha, vec!["eta", "kappa"]);
    Ok(EstimationReport {
        estimator: "sigma_sq_point".into(),
        components: vec![component(
            "sigma_sq",
            value,
            Some(upsilon * quart / n as f64),
            z,
        )?],
        ci_level: DEFAULT_CI_LEVEL,
        n,
        m: 1,
        assumed_known,
        plug_in_alpha,
        diagnostics: Vec::new(),
    })
}

/// Pooled volatility estimate: the equal-weight mean of the per-point
/// estimates (identical to the double-sum definition), with asymptotic
/// variance Upsilon_{a'} sigma^4 / (n m) using the pooled quarticity.
pub fn estimate_sigma_pooled(
    sample: &FieldSample,
    alpha: &AlphaChoice,
    delta: Option<f64>,
) -> Result<EstimationReport> {
    resolve_margin(&sample.scheme, delta)?;
    let a = alpha.value();
    let scheme = &sample.scheme;
    let (n, m) = (scheme.n(), scheme.m());
    let mut acc = 0.0;
    for j in 0..m {
        acc += sigma_sq_at(sample, j, a)?;
    }
    let value = acc / m as f64;
    let quart = quarticity(sample, alpha, delta)?;
    let upsilon = model::upsilon(a, DEFAULT_SERIES_TOL)?;
    let z = z_quantile(DEFAULT_CI_LEVEL)?;
    let (assumed_known, plug_in_alpha) = alpha_assumptions(alpha, vec!["eta", "kappa"]);
    Ok(EstimationReport {
        estimator: "sigma_sq_pooled".into(),
        components: vec![component(
            "sigma_sq",
            value,
            Some(upsilon * quart / (n * m) as f64),
            z,
        )?],
        ci_level: DEFAULT_CI_LEVEL,
        n,
        m,
        assumed_known,
        plug_in_alpha,
        diagnostics: Vec::new(),
    })
}

/// Pooled quarticity, a consistent estimator of sigma^4 used for
/// studentizing the volatility estimates.
pub fn quarticity(sample: &FieldSample, alpha: &AlphaChoice, delta: Option<f64>) -> Result<f64> {
    resolve_margin(&sample.scheme, delta)?;
    let m = sample.scheme.m();
    let mut acc = 0.0;
    for j in 0..m {
        acc += quarticity_at(sample, j, alpha.value())?;
    }
    Ok(acc / m as f64)
}

/// Log-linear least-squares fit of log(RV/(n Delta^{a'})) on (1, y):
/// estimates Psi = (log(sigma0^2 K), -kappa) and maps it back to the natural
/// parameters (sigma0^2, kappa). Standard errors come from the finite-m
/// version of the asymptotic covariance, Upsilon_{a'} (X'X)^{-1} / n,
/// sandwiched with the Jacobian diag(sigma0^2, -1, ..., -1) for the natural
/// parameters.
pub fn log_linear_fit(
    sample: &FieldSample,
    alpha: &AlphaChoice,
    delta: Option<f64>,
) -> Result<EstimationReport> {
    resolve_margin(&sample.scheme, delta)?;
    let a = alpha.value();
    let params = &sample.params;
    let scheme = &sample.scheme;
    let (n, m, d) = (scheme.n(), scheme.m(), params.d());

    let mut y_vec = DVector::zeros(m);
    let norm = n as f64 * scheme.delta_t().powf(a);
    for j in 0..m {
        let rv = realized_volatility(sample, j)?;
        if !(rv > 0.0) {
            return Err(SpdeError::DataError(format!(
                "realized volatility at point {j} is {rv}; the log-linear link needs \
                 strictly positive realized volatilities"
            )));
        }
        y_vec[j] = (rv / norm).ln();
    }
    let x = design_matrix(scheme.spatial_points());
    let fit = ols_solve(&x, &y_vec)?;
    let k = model::rescaling_constant(d, params.eta(), a);
    let sigma0_sq = fit.beta[0].exp() / k;
    let upsilon = model::upsilon(a, DEFAULT_SERIES_TOL)?;
    let z = z_quantile(DEFAULT_CI_LEVEL)?;

    let mut components = Vec::new();
    for i in 0..=d {
        components.push(component(
            &format!("psi_{}", i + 1),
            fit.beta[i],
            Some(upsilon * fit.xtx_inv[(i, i)] / n as f64),
            z,
        )?);
    }
    components.push(component(
        "sigma0_sq",
        sigma0_sq,
        Some(sigma0_sq * sigma0_sq * upsilon * fit.xtx_inv[(0, 0)] / n as f64),
        z,
    )?);
    for l in 1..=d {
        components.push(component(
            &format!("kappa_{l}"),
            -fit.beta[l],
            Some(upsilon * fit.xtx_inv[(l, l)] / n as f64),
            z,
        )?);
    }

    let mut diagnostics = Vec::new();
    let min_n = ((d + 1) as f64).powf((d + 2) as f64 / (1.0 - a));
    if (n as f64) <= min_n {
        diagnostics.push(format!(
            "n = {n} is at or below the minimal temporal resolution {min_n:.0} implied by \
             the observation-scheme assumptions for m >= {} points; the asymptotic \
             standard errors may be optimistic",
            d + 1
        ));
    }
    let (assumed_known, plug_in_alpha) = alpha_assumptions(alpha, vec!["eta"]);
    Ok(EstimationReport {
        estimator: "log_linear".into(),
        components,
        ci_level: DEFAULT_CI_LEVEL,
        n,
        m,
        assumed_known,
        plug_in_alpha,
        diagnostics,
    })
}

/// Keep every second time point of a sample with an even number of steps,
/// doubling the step size. Metadata is preserved; only the time grid and
/// values change.
pub fn thin_time_grid(sample: &FieldSample) -> Result<FieldSample> {
    let n = sample.scheme.n();
    if n < 2 || n % 2 != 0 {
        return Err(SpdeError::DomainError(format!(
            "thinning needs an even number of time steps, got {n}"
        )));
    }
    let m = sample.scheme.m();
    let half = n / 2;
    let mut values = Vec::with_capacity((half + 1) * m);
    for i in 0..=half {
        values.extend_from_slice(sample.row(2 * i));
    }
    Ok(FieldSample {
        params: sample.params.clone(),
        scheme: SamplingScheme::new(
            half,
            sample.scheme.spatial_points().to_vec(),
            sample.scheme.delta(),
        )?,
        method: sample.method.clone(),
        seed: sample.seed,
        stream_index: sample.stream_index,
        values,
    })
}

// The damping-exponent estimator given per-point realized volatilities on
// the coarse (n steps) and fine (2n steps) grids.
fn alpha_from_rv_pairs(pairs: &[(f64, f64)]) -> f64 {
    let mut acc = 0.0;
    for (coarse, fine) in pairs {
        acc += (2.0 * coarse / fine).ln();
    }
    acc / (pairs.len() as f64 * 2f64.ln())
}

/// Estimate the damping exponent alpha' by comparing realized volatilities
/// on the full time grid (2n steps) and the thinned grid (n steps):
/// alpha' = (m log 2)^{-1} Sum_j log(2 RV_n(y_j) / RV_{2n}(y_j)). The
/// asymptotic variance (3 Upsilon - 2^{2-a'}(Upsilon + Lambda)) /
/// (log(2)^2 2n m) is evaluated at the estimate.
pub fn estimate_alpha(sample: &FieldSample, delta: Option<f64>) -> Result<EstimationReport> {
    resolve_margin(&sample.scheme, delta)?;
    let n2 = sample.scheme.n();
    let m = sample.scheme.m();
    let coarse = thin_time_grid(sample)?;
    let mut pairs = Vec::with_capacity(m);
    for j in 0..m {
        let rv_fine = realized_volatility(sample, j)?;
        let rv_coarse = realized_volatility(&coarse, j)?;
        if !(rv_fine > 0.0 && rv_coarse > 0.0) {
            return Err(SpdeError::DataError(format!(
                "realized volatility at point {j} is nonpositive on one of the grids; \
                 the damping estimator needs strictly positive realized volatilities"
            )));
        }
        pairs.push((rv_coarse, rv_fine));
    }
    let value = alpha_from_rv_pairs(&pairs);

    let mut diagnostics = Vec::new();
    let variance = if value > 0.0 && value < 1.0 {
        let upsilon = model::upsilon(value, DEFAULT_SERIES_TOL)?;
        let lambda = model::lambda_const(value, DEFAULT_SERIES_TOL)?;
        let num = 3.0 * upsilon - 2f64.powf(2.0 - value) * (upsilon + lambda);
        Some(num / (2f64.ln().powi(2) * n2 as f64 * m as f64))
    } else {
        diagnostics.push(format!(
            "estimate {value} falls outside (0,1); the asymptotic variance is undefined there"
        ));
        None
    };
    let z = z_quantile(DEFAULT_CI_LEVEL)?;
    Ok(EstimationReport {
        estimator: "alpha_prime".into(),
        components: vec![component("alpha_prime", value, variance, z)?],
        ci_level: DEFAULT_CI_LEVEL,
        n: n2,
        m,
        assumed_known: Vec::new(),
        plug_in_alpha: false,
        diagnostics,
    })
}

/// Observation-scheme diagnostics: how the spatial resolution compares to
/// the bound n^{(1-a')/(d+2)}, the scaled minimal coordinate separation,
/// and whether the log-linear design has full rank. Informational only.
#[derive(Clone, Debug, Serialize)]
pub struct SchemeDiagnostics {
    pub n: usize,
    pub m: usize,
    /// n^{(1-a')/(d+2)}, the growth bound the spatial resolution must stay
    /// below.
    pub spatial_bound: f64,
    pub m_within_bound: bool,
    /// m times the minimal pairwise separation, where a pair's separation is
    /// the smallest nonzero coordinate difference (0 if no coordinate
    /// differs).
    pub separation_statistic: f64,
    pub separation_positive: bool,
    pub design_full_rank: bool,
    pub warnings: Vec<String>,
}

// Smallest nonzero coordinate difference between two points; 0 when every
// coordinate coincides.
fn min_nonzero_coordinate_gap(a: &[f64], b: &[f64]) -> f64 {
    let mut best = f64::INFINITY;
    for (x, y) in a.iter().zip(b) {
        let gap = (x - y).abs();
        if gap > 0.0 && gap < best {
            best = gap;
        }
    }
    if best.is_finite() {
        best
    } else {
        0.0
    }
}

/// Check the sample's observation scheme against the assumptions behind the
/// central limit theorems. Never fails; everything lands in the record.
pub fn validate_scheme(sample: &FieldSample, alpha_prime: f64) -> SchemeDiagnostics {
    let scheme = &sample.scheme;
    let (n, m, d) = (scheme.n(), scheme.m(), sample.params.d());
    let points = scheme.spatial_points();
    let spatial_bound = (n as f64).powf((1.0 - alpha_prime) / (d + 2) as f64);
    let m_within_bound = (m as f64) < spatial_bound;

    let mut min_gap = f64::INFINITY;
    for i in 0..m {
        for j in (i + 1)..m {
            let gap = min_nonzero_coordinate_gap(&points[i], &points[j]);
            if gap < min_gap {
                min_gap = gap;
            }
        }
    }
    let separation_statistic = if m > 1 { m as f64 * min_gap } else { 0.0 };
    let separation_positive = m > 1 && min_gap > 0.0;

    let x = design_matrix(points);
    let design_full_rank = ols_solve(&x, &DVector::zeros(m)).is_ok();

    let mut warnings = Vec::new();
    if !m_within_bound {
        warnings.push(format!(
            "m = {m} does not stay below the spatial growth bound {spatial_bound:.3} at \
             alpha' = {alpha_prime}"
        ));
    }
    if m > 1 && !separation_positive {
        warnings.push("two spatial points coincide in every coordinate".into());
    }
    if !design_full_rank {
        warnings.push("the log-linear design matrix is rank deficient".into());
    }
    SchemeDiagnostics {
        n,
        m,
        spatial_bound,
        m_within_bound,
        separation_statistic,
        separation_positive,
        design_full_rank,
        warnings,
    }
}
