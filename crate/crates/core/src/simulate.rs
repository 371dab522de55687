/*
 * Spectral simulation of the field on [0,1]^d.
 *
 * Both simulators drive independent Ornstein-Uhlenbeck coordinate processes
 * exactly on the observation time grid and assemble field values at the
 * requested spatial points. The truncation simulator keeps every mode up to a
 * per-axis cutoff K_t. The replacement simulator targets dyadic grid points
 * j/M, where aliasing folds every mode onto one of the (M-1)^d grid cells: it
 * simulates all low modes exactly and replaces the high-frequency remainder of
 * each cell by an independent Gaussian with the aliased tail variance.
 */

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SpdeError};
use crate::model::{
    FieldSample, InitialCondition, MethodTag, ModelParams, MultiIndex, SamplingScheme,
};
use crate::numerics::RngStream;

/// Default ceiling on mode-steps (modes x time steps) per simulation call.
pub const DEFAULT_WORK_BUDGET: u128 = 100_000_000;

/// File format version for persisted replacement caches.
pub const CACHE_FORMAT_VERSION: u32 = 1;

// Modes are processed in fixed chunks so parallel partial sums can be folded
// in a deterministic order regardless of thread count.
const MODE_CHUNK: usize = 256;

// A coordinate y qualifies as grid-native when |y*M - round(y*M)| is below
// this tolerance.
const GRID_SNAP_TOL: f64 = 1e-9;

// ---------------------------------------------------------------------------
// Ornstein-Uhlenbeck primitives
// ---------------------------------------------------------------------------

/// Exact one-step transition coefficients of the coordinate process with
/// damping lambda over a step of length delta: returns (decay, noise_sd) with
/// decay = e^{-lambda delta} and noise_sd = sigma sqrt((1 - decay^2) /
/// (2 lambda^{1+alpha})).
pub fn ou_coefficients(lambda: f64, sigma: f64, alpha: f64, delta: f64) -> (f64, f64) {
    let decay = (-lambda * delta).exp();
    let noise_sd = sigma * ((1.0 - decay * decay) / (2.0 * lambda.powf(1.0 + alpha))).sqrt();
    (decay, noise_sd)
}

/// Advance a coordinate by one exact transition: x e^{-lambda delta} +
/// noise_sd z, where z is a standard normal draw.
pub fn ou_step(x: f64, lambda: f64, sigma: f64, alpha: f64, delta: f64, z: f64) -> f64 {
    let (decay, noise_sd) = ou_coefficients(lambda, sigma, alpha, delta);
    x * decay + noise_sd * z
}

/// Standard deviation of the stationary law, sigma / sqrt(2 lambda^{1+alpha}).
pub fn stationary_sd(lambda: f64, sigma: f64, alpha: f64) -> f64 {
    sigma / (2.0 * lambda.powf(1.0 + alpha)).sqrt()
}

// ---------------------------------------------------------------------------
// settings
// ---------------------------------------------------------------------------

/// Settings for the truncation simulator.
#[derive(Clone, Debug, PartialEq)]
pub struct TruncationSettings {
    k_t: usize,
    init: InitialCondition,
    budget: u128,
}

impl TruncationSettings {
    pub fn new(k_t: usize, init: InitialCondition) -> Result<Self> {
        if k_t == 0 {
            return Err(SpdeError::InvalidParameter(
                "spectral cutoff k_t must be at least 1".into(),
            ));
        }
        Ok(TruncationSettings {
            k_t,
            init,
            budget: DEFAULT_WORK_BUDGET,
        })
    }

    /// Replace the default work budget (mode-steps) with an explicit one.
    pub fn with_budget(mut self, budget: u128) -> Self {
        self.budget = budget;
        self
    }

    pub fn k_t(&self) -> usize {
        self.k_t
    }

    pub fn init(&self) -> InitialCondition {
        self.init
    }

    pub fn budget(&self) -> u128 {
        self.budget
    }
}

/// Settings for the replacement simulator: grid refinement M, low-frequency
/// factor L (low modes fill (0, LM)^d), and variance cutoff factor K_v for
/// the aliased tail sums. K_v = L is the degenerate case with zero
/// replacement variance (no tail shell); K_v well above L is the accurate
/// regime.
#[derive(Clone, Debug, PartialEq)]
pub struct ReplacementSettings {
    m_grid: usize,
    l_factor: usize,
    k_v: usize,
    budget: u128,
}

impl ReplacementSettings {
    pub fn new(m_grid: usize, l_factor: usize, k_v: usize) -> Result<Self> {
        if m_grid < 2 {
            return Err(SpdeError::InvalidParameter(format!(
                "grid refinement m_grid must be at least 2, got {m_grid}"
            )));
        }
        if l_factor == 0 {
            return Err(SpdeError::InvalidParameter(
                "low-frequency factor l_factor must be at least 1".into(),
            ));
        }
        if k_v < l_factor {
            return Err(SpdeError::InvalidParameter(format!(
                "variance cutoff k_v ({k_v}) must be at least l_factor ({l_factor})"
            )));
        }
        Ok(ReplacementSettings {
            m_grid,
            l_factor,
            k_v,
            budget: DEFAULT_WORK_BUDGET,
        })
    }

    /// Replace the default work budget (mode-steps) with an explicit one.
    pub fn with_budget(mut self, budget: u128) -> Self {
        self.budget = budget;
        self
    }

    pub fn m_grid(&self) -> usize {
        self.m_grid
    }

    pub fn l_factor(&self) -> usize {
        self.l_factor
    }

    pub fn k_v(&self) -> usize {
        self.k_v
    }

    pub fn budget(&self) -> u128 {
        self.budget
    }

    fn n_cells(&self, d: usize) -> usize {
        (self.m_grid - 1).pow(d as u32)
    }
}

// ---------------------------------------------------------------------------
// shared helpers
// ---------------------------------------------------------------------------

// Enumerate {lo..hi}^d in lexicographic order, calling f with each tuple.
fn for_each_lex(d: usize, lo: usize, hi: usize, mut f: impl FnMut(&[usize])) {
    if lo > hi {
        return;
    }
    let mut idx = vec![lo; d];
    loop {
        f(&idx);
        let mut axis = d;
        loop {
            if axis == 0 {
                return;
            }
            axis -= 1;
            if idx[axis] < hi {
                idx[axis] += 1;
                break;
            }
            idx[axis] = lo;
        }
    }
}

fn check_dims(params: &ModelParams, scheme: &SamplingScheme) -> Result<()> {
    if scheme.dim() != params.d() {
        return Err(SpdeError::InvalidParameter(format!(
            "scheme points have {} coordinates but the model has d = {}",
            scheme.dim(),
            params.d()
        )));
    }
    Ok(())
}

fn check_budget(work: Option<u128>, budget: u128, what: &str) -> Result<u128> {
    let work = work.unwrap_or(u128::MAX);
    if work > budget {
        return Err(SpdeError::BudgetExceeded {
            work,
            budget,
            hint: format!(
                "{what} needs {work} mode-steps but the budget is {budget}; runs of this \
                 size can take hours, raise the budget explicitly to proceed"
            ),
        });
    }
    Ok(work)
}

// Sum chunked partial accumulators in chunk order, so the result does not
// depend on how rayon scheduled the chunks.
fn fold_partials(partials: Vec<Vec<f64>>, len: usize) -> Vec<f64> {
    let mut out = vec![0.0; len];
    for part in partials {
        for (o, p) in out.iter_mut().zip(&part) {
            *o += p;
        }
    }
    out
}

// ---------------------------------------------------------------------------
// truncation simulator
// ---------------------------------------------------------------------------

/// Simulate the field by keeping every spectral mode k in {1..k_t}^d. Each
/// mode advances by its exact transition; mode k draws from the sub-stream
/// base.derive(r) where r is the lexicographic rank of k, so any sub-grid of
/// modes sees the same noise regardless of k_t or thread count. Modes whose
/// synthesis weight vanishes at every requested point are skipped without
/// consuming randomness.
pub fn simulate_truncation(
    params: &ModelParams,
    scheme: &SamplingScheme,
    settings: &TruncationSettings,
    base: &RngStream,
) -> Result<FieldSample> {
    check_dims(params, scheme)?;
    let d = params.d();
    let k_t = settings.k_t;
    let n = scheme.n();
    let m = scheme.m();
    let n_modes_u128 = (k_t as u128).checked_pow(d as u32);
    check_budget(
        n_modes_u128.and_then(|nm| nm.checked_mul(n as u128)),
        settings.budget,
        "truncation simulation",
    )?;
    let n_modes = usize::try_from(n_modes_u128.unwrap()).map_err(|_| {
        SpdeError::InvalidParameter(format!("k_t = {k_t} yields more modes than addressable"))
    })?;

    // flat lexicographic mode list, stride d
    let mut modes = Vec::with_capacity(n_modes * d);
    for_each_lex(d, 1, k_t, |k| modes.extend_from_slice(k));

    let alpha = params.alpha();
    let sigma = params.sigma();
    let delta = scheme.delta_t();
    let points = scheme.spatial_points();
    let row_len = m;
    let out_len = (n + 1) * m;

    let partials: Vec<Vec<f64>> = modes
        .par_chunks(MODE_CHUNK * d)
        .enumerate()
        .map(|(chunk_idx, chunk)| {
            let mut part = vec![0.0; out_len];
            let mut weights = vec![0.0; row_len];
            for (off, mode) in chunk.chunks_exact(d).enumerate() {
                let rank = (chunk_idx * MODE_CHUNK + off) as u64;
                let k = MultiIndex::new(mode.to_vec()).expect("mode components start at 1");
                let mut all_zero = true;
                for (w, y) in weights.iter_mut().zip(points) {
                    *w = params
                        .eigenfunction(&k, y)
                        .expect("scheme points lie inside the domain");
                    if *w != 0.0 {
                        all_zero = false;
                    }
                }
                if all_zero {
                    continue;
                }
                let lambda = params.eigenvalue(&k);
                let (decay, noise_sd) = ou_coefficients(lambda, sigma, alpha, delta);
                let mut stream = base.derive(rank);
                // a stationary start consumes exactly one draw, a zero start
                // consumes none, so the step noise is identical under both
                let mut x = match settings.init {
                    InitialCondition::Zero => 0.0,
                    InitialCondition::Stationary => {
                        stationary_sd(lambda, sigma, alpha) * stream.gauss()
                    }
                };
                if x != 0.0 {
                    for (p, w) in part[..row_len].iter_mut().zip(&weights) {
                        *p += x * w;
                    }
                }
                for i in 1..=n {
                    x = x * decay + noise_sd * stream.gauss();
                    let row = &mut part[i * row_len..(i + 1) * row_len];
                    for (p, w) in row.iter_mut().zip(&weights) {
                        *p += x * w;
                    }
                }
            }
            part
        })
        .collect();

    Ok(FieldSample {
        params: params.clone(),
        scheme: scheme.clone(),
        method: MethodTag::Truncation {
            k_t,
            init: settings.init,
        },
        seed: base.seed(),
        stream_index: base.index(),
        values: fold_partials(partials, out_len),
    })
}

// ---------------------------------------------------------------------------
// aliasing structure
// ---------------------------------------------------------------------------

/// Axis indices that alias onto grid frequency k on the refinement-M grid:
/// all j >= 1 with j = +-k (mod 2M), listed in increasing order, strictly
/// below `bound`. Requires 1 <= k <= M-1.
pub fn axis_index_set(k: usize, m_grid: usize, bound: usize) -> Result<Vec<usize>> {
    if k == 0 || k >= m_grid {
        return Err(SpdeError::DomainError(format!(
            "axis frequency k must satisfy 1 <= k <= {}, got {k}",
            m_grid.saturating_sub(1)
        )));
    }
    let period = 2 * m_grid;
    let mut out = Vec::new();
    let mut a = k;
    while a < bound {
        out.push(a);
        a += period;
    }
    let mut b = period - k;
    while b < bound {
        out.push(b);
        b += period;
    }
    out.sort_unstable();
    Ok(out)
}

// Fold a mode component onto its grid frequency in {1..M-1}.
fn fold_axis(l: usize, m_grid: usize) -> usize {
    let r = l % (2 * m_grid);
    debug_assert!(r % m_grid != 0, "folded mode must miss the grid zeros");
    if r < m_grid {
        r
    } else {
        2 * m_grid - r
    }
}

/// Aliased tail variance of one grid cell: the sum of sigma^2 /
/// (2 lambda_l^{1+alpha}) over all modes l in the product of the cell's axis
/// index sets truncated at K_v M, excluding the low block (0, LM)^d. This is
/// the variance of the Gaussian that stands in for the cell's unresolved
/// high-frequency content; it is 0 when k_v = l_factor.
pub fn replacement_variance(
    params: &ModelParams,
    settings: &ReplacementSettings,
    cell: &[usize],
) -> Result<f64> {
    let d = params.d();
    let m_grid = settings.m_grid;
    if cell.len() != d {
        return Err(SpdeError::DomainError(format!(
            "cell has {} components, expected {d}",
            cell.len()
        )));
    }
    if cell.iter().any(|&c| c == 0 || c >= m_grid) {
        return Err(SpdeError::DomainError(format!(
            "cell components must lie in 1..={}, got {cell:?}",
            m_grid - 1
        )));
    }
    let bound = settings.k_v * m_grid;
    let low = settings.l_factor * m_grid;
    let sets: Vec<Vec<usize>> = cell
        .iter()
        .map(|&c| axis_index_set(c, m_grid, bound))
        .collect::<Result<_>>()?;
    // per-axis eigenvalue contributions nu_l^2/(4 eta) + pi^2 j^2 eta
    let eta = params.eta();
    let contribs: Vec<Vec<f64>> = sets
        .iter()
        .zip(params.nu())
        .map(|(set, nl)| {
            set.iter()
                .map(|&j| {
                    let jf = j as f64;
                    nl * nl / (4.0 * eta) + std::f64::consts::PI.powi(2) * jf * jf * eta
                })
                .collect()
        })
        .collect();
    let sigma_sq = params.sigma() * params.sigma();
    let exponent = 1.0 + params.alpha();
    // depth-first over the product set, accumulating the partial eigenvalue
    // and whether every component so far lies in the low block
    fn walk(
        axis: usize,
        lam: f64,
        all_low: bool,
        sets: &[Vec<usize>],
        contribs: &[Vec<f64>],
        low: usize,
        sigma_sq: f64,
        exponent: f64,
        acc: &mut f64,
    ) {
        if axis + 1 == sets.len() {
            for (&j, &c) in sets[axis].iter().zip(&contribs[axis]) {
                if !(all_low && j < low) {
                    *acc += sigma_sq / (2.0 * (lam + c).powf(exponent));
                }
            }
        } else {
            for (&j, &c) in sets[axis].iter().zip(&contribs[axis]) {
                walk(
                    axis + 1,
                    lam + c,
                    all_low && j < low,
                    sets,
                    contribs,
                    low,
                    sigma_sq,
                    exponent,
                    acc,
                );
            }
        }
    }
    let mut acc = 0.0;
    walk(
        0,
        -params.theta0(),
        true,
        &sets,
        &contribs,
        low,
        sigma_sq,
        exponent,
        &mut acc,
    );
    Ok(acc)
}

// ---------------------------------------------------------------------------
// replacement cache
// ---------------------------------------------------------------------------

/// Everything a cache of per-cell replacement variances depends on.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CacheKey {
    pub m_grid: usize,
    pub l_factor: usize,
    pub k_v: usize,
    pub d: usize,
    pub theta0: f64,
    pub nu: Vec<f64>,
    pub eta: f64,
    pub sigma: f64,
    pub alpha_prime: f64,
}

impl CacheKey {
    fn new(params: &ModelParams, settings: &ReplacementSettings) -> Self {
        CacheKey {
            m_grid: settings.m_grid,
            l_factor: settings.l_factor,
            k_v: settings.k_v,
            d: params.d(),
            theta0: params.theta0(),
            nu: params.nu().to_vec(),
            eta: params.eta(),
            sigma: params.sigma(),
            alpha_prime: params.alpha_prime(),
        }
    }
}

/// Per-cell replacement variances for one (model, settings) pair, cells in
/// lexicographic order over {1..M-1}^d.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReplacementCache {
    format_version: u32,
    key: CacheKey,
    values: Vec<f64>,
}

impl ReplacementCache {
    pub fn key(&self) -> &CacheKey {
        &self.key
    }

    /// Per-cell variances in lexicographic cell order.
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Error unless this cache was built for exactly these parameters and
    /// settings.
    pub fn check(&self, params: &ModelParams, settings: &ReplacementSettings) -> Result<()> {
        if self.format_version != CACHE_FORMAT_VERSION {
            return Err(SpdeError::CacheMismatch(format!(
                "cache format version {} does not match current version {}",
                self.format_version, CACHE_FORMAT_VERSION
            )));
        }
        let expected = CacheKey::new(params, settings);
        if self.key != expected {
            return Err(SpdeError::CacheMismatch(format!(
                "cache key {:?} does not match requested configuration {:?}",
                self.key, expected
            )));
        }
        if self.values.len() != settings.n_cells(params.d()) {
            return Err(SpdeError::CacheMismatch(format!(
                "cache holds {} cells, expected {}",
                self.values.len(),
                settings.n_cells(params.d())
            )));
        }
        Ok(())
    }
}

/// How `build_cache` obtained its result.
#[derive(Clone, Debug, PartialEq)]
pub struct CacheReport {
    /// True when a valid cache file was read instead of recomputed.
    pub loaded: bool,
    /// True when the cache now exists at the requested path.
    pub persisted: bool,
    /// Set when something non-fatal went wrong (stale file replaced,
    /// unreadable file ignored, write failure).
    pub warning: Option<String>,
}

fn try_load_cache(
    path: &Path,
    params: &ModelParams,
    settings: &ReplacementSettings,
) -> std::result::Result<ReplacementCache, Option<String>> {
    let bytes = match std::fs::read(path) {
        Ok(b) => b,
        Err(_) => return Err(None), // no file yet: plain miss, no warning
    };
    let cache: ReplacementCache = serde_json::from_slice(&bytes).map_err(|e| {
        Some(format!(
            "cache file {} is unreadable ({e}); recomputing",
            path.display()
        ))
    })?;
    match cache.check(params, settings) {
        Ok(()) => {
            if cache.values.iter().all(|v| v.is_finite() && *v >= 0.0) {
                Ok(cache)
            } else {
                Err(Some(format!(
                    "cache file {} holds non-finite or negative variances; recomputing",
                    path.display()
                )))
            }
        }
        Err(e) => Err(Some(format!(
            "cache file {} was built for a different configuration ({e}); recomputing",
            path.display()
        ))),
    }
}

/// Compute (or load) the per-cell replacement variances for the given model
/// and settings. With a path, a valid existing cache is loaded as-is; a
/// missing, unreadable, or mismatched file is recomputed and rewritten.
/// Write failures degrade to an in-memory cache with a warning, never an
/// error. The computation parallelizes over cells.
pub fn build_cache(
    params: &ModelParams,
    settings: &ReplacementSettings,
    path: Option<&Path>,
) -> Result<(ReplacementCache, CacheReport)> {
    let mut warning = None;
    if let Some(p) = path {
        match try_load_cache(p, params, settings) {
            Ok(cache) => {
                return Ok((
                    cache,
                    CacheReport {
                        loaded: true,
                        persisted: true,
                        warning: None,
                    },
                ));
            }
            Err(w) => warning = w,
        }
    }

    let d = params.d();
    let mut cells = Vec::with_capacity(settings.n_cells(d) * d);
    for_each_lex(d, 1, settings.m_grid - 1, |c| cells.extend_from_slice(c));
    let values: Vec<f64> = cells
        .par_chunks(d)
        .map(|cell| replacement_variance(params, settings, cell))
        .collect::<Result<_>>()?;
    let cache = ReplacementCache {
        format_version: CACHE_FORMAT_VERSION,
        key: CacheKey::new(params, settings),
        values,
    };

    let mut persisted = false;
    if let Some(p) = path {
        match serde_json::to_vec(&cache) {
            Ok(bytes) => match std::fs::write(p, bytes) {
                Ok(()) => persisted = true,
                Err(e) => {
                    warning = Some(format!(
                        "could not persist cache to {} ({e}); continuing in memory",
                        p.display()
                    ));
                }
            },
            Err(e) => {
                warning = Some(format!(
                    "could not serialize cache ({e}); continuing in memory"
                ));
            }
        }
    }
    Ok((
        cache,
        CacheReport {
            loaded: false,
            persisted,
            warning,
        },
    ))
}

// ---------------------------------------------------------------------------
// replacement simulator
// ---------------------------------------------------------------------------

// Decompose a grid-native point into per-axis grid indices, or explain why
// it is not grid-native.
fn grid_indices(y: &[f64], m_grid: usize) -> Result<Vec<usize>> {
    let mf = m_grid as f64;
    y.iter()
        .map(|&coord| {
            let scaled = coord * mf;
            let idx = scaled.round();
            if (scaled - idx).abs() > GRID_SNAP_TOL || idx < 1.0 || idx > mf - 1.0 {
                return Err(SpdeError::DomainError(format!(
                    "point coordinate {coord} is not an interior grid node j/{m_grid}; \
                     the replacement method only covers grid-native points, use the \
                     truncation simulator for off-grid points"
                )));
            }
            Ok(idx as usize)
        })
        .collect()
}

/// Simulate the field at grid-native points j/M with the replacement method,
/// always from the zero initial condition. All modes in (0, LM)^d that do
/// not alias to zero on the grid evolve exactly, accumulated per grid cell;
/// each cell then adds an independent N(0, s_m) replacement draw per time
/// step (none at time zero, so row 0 is exactly zero). Mode ranks follow the
/// lexicographic order of the low block, and cell replacement streams sit at
/// ranks n_low, n_low+1, ... in lexicographic cell order.
pub fn simulate_replacement(
    params: &ModelParams,
    scheme: &SamplingScheme,
    settings: &ReplacementSettings,
    cache: &ReplacementCache,
    base: &RngStream,
) -> Result<FieldSample> {
    check_dims(params, scheme)?;
    cache.check(params, settings)?;
    let d = params.d();
    let m_grid = settings.m_grid;
    let n = scheme.n();
    let m = scheme.m();

    // snap the requested points onto the exact rational grid
    let grid_points: Vec<Vec<usize>> = scheme
        .spatial_points()
        .iter()
        .map(|y| grid_indices(y, m_grid))
        .collect::<Result<_>>()?;
    let snapped: Vec<Vec<f64>> = grid_points
        .iter()
        .map(|idx| idx.iter().map(|&j| j as f64 / m_grid as f64).collect())
        .collect();

    // low modes: (0, LM)^d minus anything aliasing to a grid zero
    let low = settings.l_factor * m_grid;
    let mut low_modes = Vec::new();
    for_each_lex(d, 1, low - 1, |l| {
        if l.iter().all(|&c| c % m_grid != 0) {
            low_modes.extend_from_slice(l);
        }
    });
    let n_low = low_modes.len() / d;
    let n_cells = settings.n_cells(d);
    check_budget(
        ((n_low + n_cells) as u128).checked_mul(n as u128),
        settings.budget,
        "replacement simulation",
    )?;

    let alpha = params.alpha();
    let sigma = params.sigma();
    let delta = scheme.delta_t();

    // cell rank of each low mode under folding
    let cell_stride: Vec<usize> = (0..d)
        .map(|axis| (m_grid - 1).pow((d - 1 - axis) as u32))
        .collect();
    let cell_rank_of = |mode: &[usize]| -> usize {
        mode.iter()
            .zip(&cell_stride)
            .map(|(&l, s)| (fold_axis(l, m_grid) - 1) * s)
            .sum()
    };

    // accumulate per-cell sums of the low-mode coordinates, rows 1..=n
    let u_len = n * n_cells;
    let partials: Vec<Vec<f64>> = low_modes
        .par_chunks(MODE_CHUNK * d)
        .enumerate()
        .map(|(chunk_idx, chunk)| {
            let mut part = vec![0.0; u_len];
            for (off, mode) in chunk.chunks_exact(d).enumerate() {
                let rank = (chunk_idx * MODE_CHUNK + off) as u64;
                let k = MultiIndex::new(mode.to_vec()).expect("mode components start at 1");
                let lambda = params.eigenvalue(&k);
                let (decay, noise_sd) = ou_coefficients(lambda, sigma, alpha, delta);
                let cell = cell_rank_of(mode);
                let mut stream = base.derive(rank);
                let mut x = 0.0;
                for i in 0..n {
                    x = x * decay + noise_sd * stream.gauss();
                    part[i * n_cells + cell] += x;
                }
            }
            part
        })
        .collect();
    let mut u = fold_partials(partials, u_len);

    // per-cell replacement draws, one fresh N(0, s_m) per step
    for cell_rank in 0..n_cells {
        let sd = cache.values[cell_rank].sqrt();
        let mut stream = base.derive((n_low + cell_rank) as u64);
        for i in 0..n {
            u[i * n_cells + cell_rank] += sd * stream.gauss();
        }
    }

    // synthesis weights: cell eigenfunctions at the snapped points
    let mut eps = vec![0.0; n_cells * m];
    {
        let mut cell_rank = 0;
        for_each_lex(d, 1, m_grid - 1, |cell| {
            let k = MultiIndex::new(cell.to_vec()).expect("cell components start at 1");
            for (j, y) in snapped.iter().enumerate() {
                eps[cell_rank * m + j] = params
                    .eigenfunction(&k, y)
                    .expect("snapped grid points lie inside the domain");
            }
            cell_rank += 1;
        });
    }

    let mut values = vec![0.0; (n + 1) * m];
    for i in 1..=n {
        let u_row = &u[(i - 1) * n_cells..i * n_cells];
        let out = &mut values[i * m..(i + 1) * m];
        for (cell_rank, &uv) in u_row.iter().enumerate() {
            if uv == 0.0 {
                continue;
            }
            let w = &eps[cell_rank * m..(cell_rank + 1) * m];
            for (o, &e) in out.iter_mut().zip(w) {
                *o += uv * e;
            }
        }
    }

    Ok(FieldSample {
        params: params.clone(),
        scheme: scheme.clone(),
        method: MethodTag::Replacement {
            m_grid,
            l_factor: settings.l_factor,
            k_v: settings.k_v,
        },
        seed: base.seed(),
        stream_index: base.index(),
        values,
    })
}

/// Exact expectation of the realized volatility Sum_i (Delta_i X)^2(y) under
/// the replacement simulator (zero start), per requested point. Each cell
/// contributes its low modes' transient OU increment sums, 2n v (1-E) -
/// v (1-E)^2 (1-E^{2n}) / (1-E^2) with E = e^{-lambda delta}, plus
/// (2n-1) s_m from the per-step replacement draws, weighted by the squared
/// cell eigenfunction. This is the exact finite-sample mean of the Monte
/// Carlo realized volatility and therefore the simulator's bias diagnostic.
pub fn replacement_rv_expectation(
    params: &ModelParams,
    settings: &ReplacementSettings,
    n: usize,
    points: &[Vec<f64>],
) -> Result<Vec<f64>> {
    if n == 0 {
        return Err(SpdeError::InvalidParameter(
            "temporal resolution n must be positive".into(),
        ));
    }
    let d = params.d();
    let m_grid = settings.m_grid;
    let delta = 1.0 / n as f64;
    let sigma_sq = params.sigma() * params.sigma();
    let exponent = 1.0 + params.alpha();
    let nf = n as f64;

    let snapped: Vec<Vec<f64>> = points
        .iter()
        .map(|y| {
            if y.len() != d {
                return Err(SpdeError::DomainError(format!(
                    "point has {} coordinates, expected {d}",
                    y.len()
                )));
            }
            let idx = grid_indices(y, m_grid)?;
            Ok(idx.iter().map(|&j| j as f64 / m_grid as f64).collect())
        })
        .collect::<Result<_>>()?;

    let low = settings.l_factor * m_grid;
    let mut totals = vec![0.0; points.len()];
    let mut cells = Vec::new();
    for_each_lex(d, 1, m_grid - 1, |c| cells.push(c.to_vec()));
    for cell in &cells {
        // transient OU increment sums over the cell's low modes
        let sets: Vec<Vec<usize>> = cell
            .iter()
            .map(|&c| axis_index_set(c, m_grid, low))
            .collect::<Result<_>>()?;
        let contribs: Vec<Vec<f64>> = sets
            .iter()
            .zip(params.nu())
            .map(|(set, nl)| {
                set.iter()
                    .map(|&j| {
                        let jf = j as f64;
                        nl * nl / (4.0 * params.eta())
                            + std::f64::consts::PI.powi(2) * jf * jf * params.eta()
                    })
                    .collect()
            })
            .collect();
        let mut ou_sum = 0.0;
        let mut stack = vec![(0usize, -params.theta0())];
        while let Some((axis, lam)) = stack.pop() {
            if axis + 1 == d {
                for &c in &contribs[axis] {
                    let l = lam + c;
                    let v = sigma_sq / (2.0 * l.powf(exponent));
                    let e = (-l * delta).exp();
                    ou_sum += 2.0 * nf * v * (1.0 - e)
                        - v * (1.0 - e) * (1.0 - e) * (1.0 - e.powi(2 * n as i32))
                            / (1.0 - e * e);
                }
            } else {
                for &c in &contribs[axis] {
                    stack.push((axis + 1, lam + c));
                }
            }
        }
        let s_tilde = replacement_variance(params, settings, cell)?;
        let cell_total = ou_sum + (2.0 * nf - 1.0) * s_tilde;
        let k = MultiIndex::new(cell.clone()).expect("cell components start at 1");
        for (tot, y) in totals.iter_mut().zip(&snapped) {
            let w = params
                .eigenfunction(&k, y)
                .expect("snapped grid points lie inside the domain");
            *tot += w * w * cell_total;
        }
    }
    Ok(totals)
}
