/*
 * Run configuration: a single JSON file describing the model, the
 * observation scheme, the simulator, and the study layout. Unknown keys are
 * rejected, command-line flags override file keys, and resolution turns the
 * spatial specification into an explicit point list so that every output
 * can embed the fully resolved configuration.
 */

use serde::{Deserialize, Serialize};
use spde_core::model::{InitialCondition, MethodTag, ModelParams, SamplingScheme};
use spde_core::simulate::{ReplacementSettings, TruncationSettings};
use spde_core::{Result, SpdeError};

/// The named three-point observation set used by the reference study.
pub const S3_POINTS: [[f64; 2]; 3] = [[0.1, 0.3], [0.4, 0.2], [0.7, 0.5]];

fn config_err(msg: impl Into<String>) -> SpdeError {
    SpdeError::InvalidParameter(msg.into())
}

/// How the spatial observation points are specified.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpatialKind {
    /// Explicit list of points.
    Points,
    /// All interior lattice nodes j/M, j in {1..M-1}^d, that respect the
    /// scheme's margin.
    Grid,
    /// A named reference set ("S3").
    Named,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpatialSpec {
    pub kind: SpatialKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub points: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub m_grid: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
}

impl SpatialSpec {
    pub fn points(points: Vec<Vec<f64>>) -> Self {
        SpatialSpec {
            kind: SpatialKind::Points,
            points: Some(points),
            m_grid: None,
            name: None,
        }
    }

    pub fn grid(m_grid: usize) -> Self {
        SpatialSpec {
            kind: SpatialKind::Grid,
            points: None,
            m_grid: Some(m_grid),
            name: None,
        }
    }

    pub fn named(name: &str) -> Self {
        SpatialSpec {
            kind: SpatialKind::Named,
            points: None,
            m_grid: None,
            name: Some(name.into()),
        }
    }

    fn forbid(&self, field: &str, present: bool) -> Result<()> {
        if present {
            return Err(config_err(format!(
                "spatial spec of kind {:?} does not take the {field} field",
                self.kind
            )));
        }
        Ok(())
    }

    /// Expand the specification into an explicit point list for dimension
    /// `d` with interior margin `delta`.
    pub fn resolve(&self, d: usize, delta: f64) -> Result<Vec<Vec<f64>>> {
        match self.kind {
            SpatialKind::Points => {
                self.forbid("m_grid", self.m_grid.is_some())?;
                self.forbid("name", self.name.is_some())?;
                self.points
                    .clone()
                    .ok_or_else(|| config_err("spatial kind points requires a points list"))
            }
            SpatialKind::Grid => {
                self.forbid("points", self.points.is_some())?;
                self.forbid("name", self.name.is_some())?;
                let m = self
                    .m_grid
                    .ok_or_else(|| config_err("spatial kind grid requires m_grid"))?;
                if m < 2 {
                    return Err(config_err(format!("grid resolution m_grid must be at least 2, got {m}")));
                }
                // per-axis admissible nodes j/M inside [delta, 1-delta]
                let axis: Vec<f64> = (1..m)
                    .map(|j| j as f64 / m as f64)
                    .filter(|v| *v >= delta && *v <= 1.0 - delta)
                    .collect();
                if axis.is_empty() {
                    return Err(config_err(format!(
                        "no grid node j/{m} lies inside the margin [{delta}, {}]",
                        1.0 - delta
                    )));
                }
                // lexicographic product, first axis slowest
                let mut pts = vec![Vec::with_capacity(d)];
                for _ in 0..d {
                    let mut next = Vec::with_capacity(pts.len() * axis.len());
                    for p in &pts {
                        for v in &axis {
                            let mut q = p.clone();
                            q.push(*v);
                            next.push(q);
                        }
                    }
                    pts = next;
                }
                Ok(pts)
            }
            SpatialKind::Named => {
                self.forbid("points", self.points.is_some())?;
                self.forbid("m_grid", self.m_grid.is_some())?;
                let name = self
                    .name
                    .as_deref()
                    .ok_or_else(|| config_err("spatial kind named requires a name"))?;
                match name {
                    "S3" => {
                        if d != 2 {
                            return Err(config_err(format!(
                                "the named set S3 is two-dimensional, model has d={d}"
                            )));
                        }
                        Ok(S3_POINTS.iter().map(|p| p.to_vec()).collect())
                    }
                    other => Err(config_err(format!("unknown named spatial set {other:?}"))),
                }
            }
        }
    }
}

/// Observation scheme: n time steps of size 1/n plus the spatial spec.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SchemeSpec {
    pub n: usize,
    pub delta: f64,
    pub spatial: SpatialSpec,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MethodKind {
    Truncation,
    Replacement,
}

/// Simulator choice with its settings; fields irrelevant to the chosen kind
/// are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MethodSpec {
    pub kind: MethodKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k_t: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub init: Option<InitialCondition>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub m_grid: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub l_factor: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k_v: Option<usize>,
}

impl MethodSpec {
    pub fn truncation(k_t: usize, init: InitialCondition) -> Self {
        MethodSpec {
            kind: MethodKind::Truncation,
            k_t: Some(k_t),
            init: Some(init),
            m_grid: None,
            l_factor: None,
            k_v: None,
        }
    }

    pub fn replacement(m_grid: usize, l_factor: usize, k_v: usize) -> Self {
        MethodSpec {
            kind: MethodKind::Replacement,
            k_t: None,
            init: None,
            m_grid: Some(m_grid),
            l_factor: Some(l_factor),
            k_v: Some(k_v),
        }
    }

    fn validate(&self) -> Result<MethodTag> {
        let forbid = |field: &str, present: bool| -> Result<()> {
            if present {
                Err(config_err(format!(
                    "method kind {:?} does not take the {field} field",
                    self.kind
                )))
            } else {
                Ok(())
            }
        };
        match self.kind {
            MethodKind::Truncation => {
                forbid("m_grid", self.m_grid.is_some())?;
                forbid("l_factor", self.l_factor.is_some())?;
                forbid("k_v", self.k_v.is_some())?;
                let k_t = self.k_t.ok_or_else(|| config_err("truncation method requires k_t"))?;
                let init = self
                    .init
                    .ok_or_else(|| config_err("truncation method requires init (zero or stationary)"))?;
                Ok(MethodTag::Truncation { k_t, init })
            }
            MethodKind::Replacement => {
                forbid("k_t", self.k_t.is_some())?;
                forbid("init", self.init.is_some())?;
                let m_grid = self
                    .m_grid
                    .ok_or_else(|| config_err("replacement method requires m_grid"))?;
                let l_factor = self
                    .l_factor
                    .ok_or_else(|| config_err("replacement method requires l_factor"))?;
                let k_v = self.k_v.ok_or_else(|| config_err("replacement method requires k_v"))?;
                Ok(MethodTag::Replacement { m_grid, l_factor, k_v })
            }
        }
    }
}

/// Estimators the `estimate` and `mc` commands run, in order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorKind {
    SigmaSqPooled,
    SigmaSqPoint,
    LogLinear,
    AlphaPrime,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum FieldFormat {
    #[default]
    Csv,
    Binary,
}

fn default_series_tol() -> f64 {
    spde_core::DEFAULT_SERIES_TOL
}

/// The complete run configuration. Every output file embeds the resolved
/// form of this structure.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelParams,
    pub scheme: SchemeSpec,
    pub method: MethodSpec,
    pub estimators: Vec<EstimatorKind>,
    pub replications: usize,
    pub seed: u64,
    pub output_dir: String,
    #[serde(default = "default_series_tol")]
    pub series_tol: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub budget: Option<u128>,
    #[serde(default)]
    pub field_format: FieldFormat,
    /// Chain the damping estimate into the volatility estimators instead of
    /// treating alpha' as known.
    #[serde(default)]
    pub pipeline_alpha: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cache_path: Option<String>,
    /// Spatial index used by the single-point volatility estimator.
    #[serde(default)]
    pub point_index: usize,
    /// Optional estimation margin override (must contain every point).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub margin: Option<f64>,
}

/// Command-line values that take precedence over file keys.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub n: Option<usize>,
    pub replications: Option<usize>,
    pub output_dir: Option<String>,
    pub field_format: Option<FieldFormat>,
    pub pipeline_alpha: Option<bool>,
    pub cache_path: Option<String>,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<RunConfig> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: &std::path::Path) -> Result<RunConfig> {
        RunConfig::from_json(&std::fs::read_to_string(path)?)
    }

    fn apply(&mut self, ov: &Overrides) {
        if let Some(seed) = ov.seed {
            self.seed = seed;
        }
        if let Some(n) = ov.n {
            self.scheme.n = n;
        }
        if let Some(r) = ov.replications {
            self.replications = r;
        }
        if let Some(dir) = &ov.output_dir {
            self.output_dir = dir.clone();
        }
        if let Some(f) = ov.field_format {
            self.field_format = f;
        }
        if let Some(p) = ov.pipeline_alpha {
            self.pipeline_alpha = p;
        }
        if let Some(c) = &ov.cache_path {
            self.cache_path = Some(c.clone());
        }
    }
}

/// A validated configuration with the spatial spec expanded, ready to run.
#[derive(Clone, Debug)]
pub struct ResolvedRun {
    /// The configuration after overrides, with spatial resolved to an
    /// explicit point list; this is what outputs embed.
    pub config: RunConfig,
    pub params: ModelParams,
    pub scheme: SamplingScheme,
    pub method: MethodTag,
}

impl ResolvedRun {
    pub fn truncation_settings(&self) -> Result<TruncationSettings> {
        match self.method {
            MethodTag::Truncation { k_t, init } => {
                let mut s = TruncationSettings::new(k_t, init)?;
                if let Some(b) = self.config.budget {
                    s = s.with_budget(b);
                }
                Ok(s)
            }
            _ => Err(config_err("configured method is not truncation")),
        }
    }

    pub fn replacement_settings(&self) -> Result<ReplacementSettings> {
        match self.method {
            MethodTag::Replacement { m_grid, l_factor, k_v } => {
                let mut s = ReplacementSettings::new(m_grid, l_factor, k_v)?;
                if let Some(b) = self.config.budget {
                    s = s.with_budget(b);
                }
                Ok(s)
            }
            _ => Err(config_err("configured method is not replacement")),
        }
    }
}

/// Validate a configuration and expand it into runnable pieces.
pub fn resolve(mut config: RunConfig, overrides: &Overrides) -> Result<ResolvedRun> {
    config.apply(overrides);
    if config.replications == 0 {
        return Err(config_err("replications must be at least 1"));
    }
    if !(config.series_tol > 0.0) {
        return Err(config_err(format!(
            "series_tol must be positive, got {}",
            config.series_tol
        )));
    }
    if let Some(margin) = config.margin {
        if !(margin > 0.0 && margin < 0.5) {
            return Err(config_err(format!(
                "margin must lie in (0, 1/2), got {margin}"
            )));
        }
    }
    let points = config.scheme.spatial.resolve(config.model.d(), config.scheme.delta)?;
    let scheme = SamplingScheme::new(config.scheme.n, points.clone(), config.scheme.delta)?;
    let method = config.method.validate()?;
    if config.point_index >= scheme.m() {
        return Err(config_err(format!(
            "point_index {} out of range for {} spatial points",
            config.point_index,
            scheme.m()
        )));
    }
    let params = config.model.clone();
    // embed the explicit form: spatial as points, method defaults pinned
    config.scheme.spatial = SpatialSpec::points(points);
    config.method = match method {
        MethodTag::Truncation { k_t, init } => MethodSpec::truncation(k_t, init),
        MethodTag::Replacement { m_grid, l_factor, k_v } => {
            MethodSpec::replacement(m_grid, l_factor, k_v)
        }
    };
    Ok(ResolvedRun {
        config,
        params,
        scheme,
        method,
    })
}
