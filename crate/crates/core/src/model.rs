//! SPDE parameterization, spectral objects, and closed-form theoretical
//! quantities: eigenpairs, the rescaling constant, the increment moment and
//! autocovariance formulas, and the series constants entering the CLTs.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use crate::error::{Result, SpdeError};
use crate::numerics::{design_matrix, gamma_fn, sin_pi};

/// Structural parameters of the operator A = eta*Laplace + sum nu_l d_l +
/// theta0 on (0,1)^d with Dirichlet boundary, driven by noise damped by
/// lambda_k^{-alpha} with alpha = d/2 - 1 + alpha_prime.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ModelParamsRaw")]
pub struct ModelParams {
    d: usize,
    theta0: f64,
    nu: Vec<f64>,
    eta: f64,
    sigma: f64,
    alpha_prime: f64,
}

#[derive(Deserialize)]
struct ModelParamsRaw {
    d: usize,
    theta0: f64,
    nu: Vec<f64>,
    eta: f64,
    sigma: f64,
    alpha_prime: f64,
}

impl TryFrom<ModelParamsRaw> for ModelParams {
    type Error = SpdeError;
    fn try_from(r: ModelParamsRaw) -> Result<Self> {
        ModelParams::new(r.d, r.theta0, r.nu, r.eta, r.sigma, r.alpha_prime)
    }
}

impl ModelParams {
    pub fn new(
        d: usize,
        theta0: f64,
        nu: Vec<f64>,
        eta: f64,
        sigma: f64,
        alpha_prime: f64,
    ) -> Result<Self> {
        if d < 2 {
            return Err(SpdeError::InvalidParameter(format!(
                "spatial dimension must be at least 2 (the damping band for alpha is empty in d={d})"
            )));
        }
        if nu.len() != d {
            return Err(SpdeError::InvalidParameter(format!(
                "nu has {} components, expected {d}",
                nu.len()
            )));
        }
        if !(eta > 0.0) || !eta.is_finite() {
            return Err(SpdeError::InvalidParameter(format!("eta must be positive, got {eta}")));
        }
        if !(sigma >= 0.0) || !sigma.is_finite() {
            return Err(SpdeError::InvalidParameter(format!(
                "sigma must be nonnegative, got {sigma}"
            )));
        }
        if !(alpha_prime > 0.0 && alpha_prime < 1.0) {
            return Err(SpdeError::InvalidParameter(format!(
                "alpha_prime must lie in (0,1), got {alpha_prime}"
            )));
        }
        if !theta0.is_finite() || nu.iter().any(|v| !v.is_finite()) {
            return Err(SpdeError::InvalidParameter(
                "theta0 and nu must be finite".into(),
            ));
        }
        let params = ModelParams {
            d,
            theta0,
            nu,
            eta,
            sigma,
            alpha_prime,
        };
        let ones = MultiIndex::new(vec![1; d])?;
        let lambda_min = params.eigenvalue(&ones);
        if !(lambda_min > 0.0) {
            return Err(SpdeError::InvalidParameter(format!(
                "smallest eigenvalue {lambda_min} is not positive; all moment formulas and \
                 simulators require a strictly dissipative operator"
            )));
        }
        Ok(params)
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn theta0(&self) -> f64 {
        self.theta0
    }

    pub fn nu(&self) -> &[f64] {
        &self.nu
    }

    pub fn eta(&self) -> f64 {
        self.eta
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn alpha_prime(&self) -> f64 {
        self.alpha_prime
    }

    /// Full damping exponent alpha = d/2 - 1 + alpha_prime.
    pub fn alpha(&self) -> f64 {
        self.d as f64 / 2.0 - 1.0 + self.alpha_prime
    }

    /// Curvature vector kappa_l = nu_l / eta.
    pub fn kappa(&self) -> Vec<f64> {
        self.nu.iter().map(|v| v / self.eta).collect()
    }

    /// Normalized volatility sigma0^2 = sigma^2 / eta^{d/2}.
    pub fn sigma0_sq(&self) -> f64 {
        self.sigma * self.sigma / self.eta.powf(self.d as f64 / 2.0)
    }

    /// Signed sum Sum_l kappa_l y_l (the rescaling exponent; not a norm).
    pub fn kappa_dot(&self, y: &[f64]) -> f64 {
        self.kappa().iter().zip(y).map(|(k, v)| k * v).sum()
    }

    /// lambda_k = -theta0 + Sum_l (nu_l^2/(4 eta) + pi^2 k_l^2 eta).
    pub fn eigenvalue(&self, k: &MultiIndex) -> f64 {
        let mut acc = -self.theta0;
        for (kl, nl) in k.as_slice().iter().zip(&self.nu) {
            let kf = *kl as f64;
            acc += nl * nl / (4.0 * self.eta) + PI * PI * kf * kf * self.eta;
        }
        acc
    }

    /// e_k(y) = 2^{d/2} Prod_l sin(pi k_l y_l) e^{-kappa_l y_l / 2}; exactly
    /// zero on the Dirichlet boundary.
    pub fn eigenfunction(&self, k: &MultiIndex, y: &[f64]) -> Result<f64> {
        if y.len() != self.d {
            return Err(SpdeError::DomainError(format!(
                "point has {} coordinates, expected {}",
                y.len(),
                self.d
            )));
        }
        if y.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(SpdeError::DomainError(format!(
                "point {y:?} lies outside [0,1]^{}",
                self.d
            )));
        }
        let mut acc = 2f64.powf(self.d as f64 / 2.0);
        for ((kl, yl), nl) in k.as_slice().iter().zip(y).zip(&self.nu) {
            let kappa_l = nl / self.eta;
            acc *= sin_pi(*kl as f64 * yl) * (-kappa_l * yl / 2.0).exp();
        }
        Ok(acc)
    }

    /// K = Gamma(1-alpha_prime) / (2^d (pi eta)^{d/2} alpha_prime Gamma(d/2)).
    pub fn rescaling_constant(&self) -> f64 {
        rescaling_constant(self.d, self.eta, self.alpha_prime)
    }

    /// Leading-order expected squared increment at an interior point:
    /// Delta^{alpha_prime} sigma^2 e^{-Sum kappa_l y_l} K.
    pub fn theoretical_mean_sq_increment(&self, y: &[f64], delta: f64) -> f64 {
        delta.powf(self.alpha_prime)
            * self.sigma
            * self.sigma
            * (-self.kappa_dot(y)).exp()
            * self.rescaling_constant()
    }

    /// Leading-order increment autocovariance at lag h >= 1:
    /// -sigma^2 e^{-Sum kappa_l y_l} Delta^{a'} G(1-a')/(2^{d+1}(pi eta)^{d/2} a' G(d/2))
    /// * (2h^{a'} - (h-1)^{a'} - (h+1)^{a'}).
    pub fn theoretical_autocovariance(&self, y: &[f64], delta: f64, lag: u64) -> Result<f64> {
        if lag < 1 {
            return Err(SpdeError::DomainError(
                "autocovariance lag must be at least 1".into(),
            ));
        }
        let a = self.alpha_prime;
        let h = lag as f64;
        let shape = 2.0 * h.powf(a) - (h - 1.0).powf(a) - (h + 1.0).powf(a);
        Ok(-self.sigma
            * self.sigma
            * (-self.kappa_dot(y)).exp()
            * delta.powf(a)
            * (self.rescaling_constant() / 2.0)
            * shape)
    }

    /// Increment autocorrelation rho(h) = -h^{a'} + ((h-1)^{a'} + (h+1)^{a'})/2.
    pub fn theoretical_autocorrelation(&self, lag: u64) -> Result<f64> {
        if lag < 1 {
            return Err(SpdeError::DomainError(
                "autocorrelation lag must be at least 1".into(),
            ));
        }
        let a = self.alpha_prime;
        let h = lag as f64;
        Ok(-h.powf(a) + ((h - 1.0).powf(a) + (h + 1.0).powf(a)) / 2.0)
    }
}

/// Free-function form of the rescaling constant K.
pub fn rescaling_constant(d: usize, eta: f64, alpha_prime: f64) -> f64 {
    gamma_fn(1.0 - alpha_prime)
        / (2f64.powi(d as i32)
            * (PI * eta).powf(d as f64 / 2.0)
            * alpha_prime
            * gamma_fn(d as f64 / 2.0))
}

/// Spectral multi-index; every component at least 1.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>")]
pub struct MultiIndex(Vec<usize>);

impl TryFrom<Vec<usize>> for MultiIndex {
    type Error = SpdeError;
    fn try_from(v: Vec<usize>) -> Result<Self> {
        MultiIndex::new(v)
    }
}

impl MultiIndex {
    pub fn new(k: Vec<usize>) -> Result<Self> {
        if k.is_empty() || k.iter().any(|&c| c == 0) {
            return Err(SpdeError::InvalidParameter(format!(
                "multi-index components must all be at least 1, got {k:?}"
            )));
        }
        Ok(MultiIndex(k))
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Discrete observation scheme: n time steps of size 1/n on [0,1] and m
/// pairwise-distinct spatial points inside [delta, 1-delta]^d.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "SamplingSchemeRaw")]
pub struct SamplingScheme {
    n: usize,
    spatial_points: Vec<Vec<f64>>,
    delta: f64,
}

#[derive(Deserialize)]
struct SamplingSchemeRaw {
    n: usize,
    spatial_points: Vec<Vec<f64>>,
    delta: f64,
}

impl TryFrom<SamplingSchemeRaw> for SamplingScheme {
    type Error = SpdeError;
    fn try_from(r: SamplingSchemeRaw) -> Result<Self> {
        SamplingScheme::new(r.n, r.spatial_points, r.delta)
    }
}

impl SamplingScheme {
    pub fn new(n: usize, spatial_points: Vec<Vec<f64>>, delta: f64) -> Result<Self> {
        if n == 0 {
            return Err(SpdeError::InvalidParameter(
                "temporal resolution n must be positive".into(),
            ));
        }
        if !(delta > 0.0 && delta < 0.5) {
            return Err(SpdeError::InvalidParameter(format!(
                "interior margin delta must lie in (0, 1/2), got {delta}"
            )));
        }
        if spatial_points.is_empty() {
            return Err(SpdeError::InvalidParameter(
                "at least one spatial point is required".into(),
            ));
        }
        let d = spatial_points[0].len();
        if d == 0 {
            return Err(SpdeError::InvalidParameter(
                "spatial points must have at least one coordinate".into(),
            ));
        }
        for y in &spatial_points {
            if y.len() != d {
                return Err(SpdeError::InvalidParameter(
                    "spatial points have inconsistent dimensions".into(),
                ));
            }
            if y.iter().any(|v| !(*v >= delta && *v <= 1.0 - delta)) {
                return Err(SpdeError::InvalidParameter(format!(
                    "point {y:?} leaves the interior margin [{delta}, {}]",
                    1.0 - delta
                )));
            }
        }
        for i in 0..spatial_points.len() {
            for j in (i + 1)..spatial_points.len() {
                if spatial_points[i] == spatial_points[j] {
                    return Err(SpdeError::InvalidParameter(format!(
                        "spatial points must be pairwise distinct; index {i} repeats index {j}"
                    )));
                }
            }
        }
        Ok(SamplingScheme {
            n,
            spatial_points,
            delta,
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    /// Temporal step Delta = 1/n.
    pub fn delta_t(&self) -> f64 {
        1.0 / self.n as f64
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    pub fn spatial_points(&self) -> &[Vec<f64>] {
        &self.spatial_points
    }

    pub fn m(&self) -> usize {
        self.spatial_points.len()
    }

    pub fn dim(&self) -> usize {
        self.spatial_points[0].len()
    }
}

/// Which simulator produced a sample, with its settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case")]
pub enum MethodTag {
    Truncation {
        k_t: usize,
        init: InitialCondition,
    },
    Replacement {
        m_grid: usize,
        l_factor: usize,
        k_v: usize,
    },
}

/// Initial condition of a simulation run.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitialCondition {
    /// xi = 0: every coordinate process starts at zero.
    Zero,
    /// Coordinates drawn from their stationary law.
    Stationary,
}

/// Simulated (or observed) field values X_{t_i}(y_j), row-major with row 0
/// holding the initial condition at the spatial points.
#[derive(Clone, Debug)]
pub struct FieldSample {
    pub params: ModelParams,
    pub scheme: SamplingScheme,
    pub method: MethodTag,
    pub seed: u64,
    pub stream_index: u64,
    /// (n+1) x m values, row-major.
    pub values: Vec<f64>,
}

impl FieldSample {
    #[inline]
    pub fn value(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.scheme.m() + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let m = self.scheme.m();
        &self.values[i * m..(i + 1) * m]
    }

    pub fn n_rows(&self) -> usize {
        self.scheme.n() + 1
    }
}

// ---------------------------------------------------------------------------
// series constants
// ---------------------------------------------------------------------------

fn second_diff(r: f64, a: f64) -> f64 {
    -(r.powf(a)) + 2.0 * (r + 1.0).powf(a) - (r + 2.0).powf(a)
}

// Analytic tail bound for the squared-second-difference series: term_r is
// bounded by a'^2 (1-a')^2 r^{2a'-4}, so the tail past R is below
// a'^2 (1-a')^2 R^{2a'-3} / (3-2a') by integral comparison.
fn tail_bound(r: f64, a: f64) -> f64 {
    let c = a * a * (1.0 - a) * (1.0 - a);
    c * r.powf(2.0 * a - 3.0) / (3.0 - 2.0 * a)
}

/// Upsilon = 2 + Sum_{r>=0} (-r^{a'} + 2(r+1)^{a'} - (r+2)^{a'})^2. Stops
/// once the current term is below tol/100 and the analytic tail bound is
/// below tol, so the returned value is within tol of the limit.
pub fn upsilon(alpha_prime: f64, tol: f64) -> Result<f64> {
    if !(alpha_prime > 0.0 && alpha_prime < 1.0) {
        return Err(SpdeError::DomainError(format!(
            "alpha_prime must lie in (0,1), got {alpha_prime}"
        )));
    }
    if !(tol > 0.0) {
        return Err(SpdeError::DomainError("tolerance must be positive".into()));
    }
    let a = alpha_prime;
    let mut acc = 2.0;
    let mut r = 0.0f64;
    loop {
        let g = second_diff(r, a);
        let term = g * g;
        acc += term;
        r += 1.0;
        if r >= 2.0 && term < tol * 1e-2 && tail_bound(r, a) < tol {
            return Ok(acc);
        }
        if r > 1e9 {
            return Err(SpdeError::DomainError(format!(
                "series for Upsilon failed to reach tolerance {tol} within 1e9 terms"
            )));
        }
    }
}

/// Lambda = 2(2^{a'} - 2) + Sum_{r>=0} g(r+1) g(r) with
/// g(r) = -r^{a'} + 2(r+1)^{a'} - (r+2)^{a'}; same stopping rule as Upsilon.
pub fn lambda_const(alpha_prime: f64, tol: f64) -> Result<f64> {
    if !(alpha_prime > 0.0 && alpha_prime < 1.0) {
        return Err(SpdeError::DomainError(format!(
            "alpha_prime must lie in (0,1), got {alpha_prime}"
        )));
    }
    if !(tol > 0.0) {
        return Err(SpdeError::DomainError("tolerance must be positive".into()));
    }
    let a = alpha_prime;
    let mut acc = 2.0 * (2f64.powf(a) - 2.0);
    let mut r = 0.0f64;
    let mut g_prev = second_diff(0.0, a);
    loop {
        let g_next = second_diff(r + 1.0, a);
        let term = g_next * g_prev;
        acc += term;
        g_prev = g_next;
        r += 1.0;
        if r >= 2.0 && term.abs() < tol * 1e-2 && tail_bound(r, a) < tol {
            return Ok(acc);
        }
        if r > 1e9 {
            return Err(SpdeError::DomainError(format!(
                "series for Lambda failed to reach tolerance {tol} within 1e9 terms"
            )));
        }
    }
}

/// Finite-m asymptotic design moment matrix (1-2 delta)/m * X^T X, whose
/// large-m limit over an equidistant interior grid is the Sigma matrix of
/// the least-squares CLT.
pub fn asymptotic_sigma_matrix(spatial_points: &[Vec<f64>], delta: f64) -> Result<DMatrix<f64>> {
    if spatial_points.is_empty() {
        return Err(SpdeError::InvalidParameter(
            "at least one spatial point is required".into(),
        ));
    }
    if !(delta > 0.0 && delta < 0.5) {
        return Err(SpdeError::InvalidParameter(format!(
            "interior margin delta must lie in (0, 1/2), got {delta}"
        )));
    }
    let x = design_matrix(spatial_points);
    let m = spatial_points.len() as f64;
    Ok(x.transpose() * &x * ((1.0 - 2.0 * delta) / m))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params(
        d: usize,
        theta0: f64,
        nu: Vec<f64>,
        eta: f64,
        sigma: f64,
        alpha_prime: f64,
    ) -> ModelParams {
        ModelParams::new(d, theta0, nu, eta, sigma, alpha_prime).unwrap()
    }

    fn mi(k: &[usize]) -> MultiIndex {
        MultiIndex::new(k.to_vec()).unwrap()
    }

    #[test]
    fn constructor_rejects_invalid_inputs() {
        assert!(ModelParams::new(1, 0.0, vec![0.0], 1.0, 1.0, 0.5).is_err());
        assert!(ModelParams::new(2, 0.0, vec![0.0], 1.0, 1.0, 0.5).is_err());
        assert!(ModelParams::new(2, 0.0, vec![0.0, 0.0], 0.0, 1.0, 0.5).is_err());
        assert!(ModelParams::new(2, 0.0, vec![0.0, 0.0], 1.0, -1.0, 0.5).is_err());
        // sigma = 0 is the degenerate deterministic field, allowed
        assert!(ModelParams::new(2, 0.0, vec![0.0, 0.0], 1.0, 0.0, 0.5).is_ok());
        assert!(ModelParams::new(2, 0.0, vec![0.0, 0.0], 1.0, 1.0, 0.0).is_err());
        assert!(ModelParams::new(2, 0.0, vec![0.0, 0.0], 1.0, 1.0, 1.0).is_err());
        // theta0 so large the smallest eigenvalue turns negative
        assert!(ModelParams::new(2, 50.0, vec![0.0, 0.0], 1.0, 1.0, 0.5).is_err());
        // and just inside the dissipative region
        assert!(ModelParams::new(2, 19.0, vec![0.0, 0.0], 1.0, 1.0, 0.5).is_ok());
    }

    #[test]
    fn multi_index_requires_positive_components() {
        assert!(MultiIndex::new(vec![1, 0]).is_err());
        assert!(MultiIndex::new(vec![]).is_err());
        assert!(MultiIndex::new(vec![3, 2, 1]).is_ok());
    }

    #[test]
    fn eigenvalue_examples() {
        let p = params(2, 0.0, vec![0.0, 0.0], 1.0, 1.0, 0.5);
        assert!((p.eigenvalue(&mi(&[1, 1])) - 2.0 * PI * PI).abs() < 1e-12);

        let p = params(2, 0.0, vec![6.0, 0.0], 1.0, 1.0, 0.5);
        assert!((p.eigenvalue(&mi(&[1, 1])) - (9.0 + 2.0 * PI * PI)).abs() < 1e-12);

        let p = params(2, 0.0, vec![5.0, 0.0], 1.0, 1.0, 0.4);
        let want = 25.0 / 4.0 + 13.0 * PI * PI;
        assert!((p.eigenvalue(&mi(&[3, 2])) - want).abs() < 1e-12);
    }

    #[test]
    fn eigenvalue_strictly_increasing_in_each_component() {
        let p = params(2, 3.0, vec![-2.0, 4.0], 0.7, 1.0, 0.3);
        for k1 in 1..6usize {
            for k2 in 1..6usize {
                let base = p.eigenvalue(&mi(&[k1, k2]));
                assert!(p.eigenvalue(&mi(&[k1 + 1, k2])) > base);
                assert!(p.eigenvalue(&mi(&[k1, k2 + 1])) > base);
            }
        }
    }

    #[test]
    fn eigenfunction_examples_and_boundary() {
        let p = params(2, 0.0, vec![0.0, 0.0], 1.0, 1.0, 0.5);
        let v = p.eigenfunction(&mi(&[1, 1]), &[0.5, 0.5]).unwrap();
        assert!((v - 2.0).abs() < 1e-14);

        let p = params(2, 0.0, vec![5.0, 0.0], 1.0, 1.0, 0.5);
        let v = p.eigenfunction(&mi(&[2, 1]), &[0.25, 0.5]).unwrap();
        assert!((v - 2.0 * (-0.625f64).exp()).abs() < 1e-14);

        // Dirichlet boundary is exact for any index, including large ones
        for k in [[1, 1], [7, 3], [40, 11]] {
            let k = mi(&k);
            assert_eq!(p.eigenfunction(&k, &[0.0, 0.3]).unwrap(), 0.0);
            assert_eq!(p.eigenfunction(&k, &[0.3, 1.0]).unwrap(), 0.0);
            assert_eq!(p.eigenfunction(&k, &[1.0, 0.0]).unwrap(), 0.0);
        }

        assert!(p.eigenfunction(&mi(&[1, 1]), &[1.2, 0.5]).is_err());
        assert!(p.eigenfunction(&mi(&[1, 1]), &[-0.1, 0.5]).is_err());
        assert!(p.eigenfunction(&mi(&[1, 1]), &[0.5]).is_err());
    }

    // composite Simpson on [0,1]
    fn simpson<F: Fn(f64) -> f64>(f: F, n: usize) -> f64 {
        let h = 1.0 / n as f64;
        let mut acc = f(0.0) + f(1.0);
        for i in 1..n {
            let w = if i % 2 == 1 { 4.0 } else { 2.0 };
            acc += w * f(i as f64 * h);
        }
        acc * h / 3.0
    }

    #[test]
    fn eigenfunctions_orthonormal_under_weighted_inner_product() {
        // d=2, kappa=(6,0): the quadrature includes both exponential factors
        // and the weight e^{Sum kappa_l y_l}; separability reduces the 2-d
        // integral to products of 1-d integrals per axis.
        let p = params(2, 0.0, vec![6.0, 0.0], 1.0, 1.0, 0.5);
        let kappa = p.kappa();
        let kmax = 20usize;
        let n_quad = 4000;
        let axis = |kap: f64| -> Vec<Vec<f64>> {
            (1..=kmax)
                .map(|k| {
                    (1..=kmax)
                        .map(|j| {
                            simpson(
                                |y| {
                                    let ek = sin_pi(k as f64 * y) * (-kap * y / 2.0).exp();
                                    let ej = sin_pi(j as f64 * y) * (-kap * y / 2.0).exp();
                                    2.0 * ek * ej * (kap * y).exp()
                                },
                                n_quad,
                            )
                        })
                        .collect()
                })
                .collect()
        };
        let i1 = axis(kappa[0]);
        let i2 = axis(kappa[1]);
        for k1 in 0..kmax {
            for k2 in 0..kmax {
                for j1 in 0..kmax {
                    for j2 in 0..kmax {
                        let got = i1[k1][j1] * i2[k2][j2];
                        let want = if k1 == j1 && k2 == j2 { 1.0 } else { 0.0 };
                        assert!(
                            (got - want).abs() < 1e-6,
                            "k=({},{}) j=({},{}): {got}",
                            k1 + 1,
                            k2 + 1,
                            j1 + 1,
                            j2 + 1
                        );
                    }
                }
            }
        }
    }

    // independent quadrature oracle for K: Gamma(1-a')/a' equals
    // int_0^infty (1-e^{-x}) x^{-1-a'} dx, evaluated by a Taylor series on
    // [0,1] plus 1/a' minus Simpson of x^{-1-a'} e^{-x} on [1,45].
    fn quadrature_k(d: usize, eta: f64, a: f64) -> f64 {
        let mut head = 0.0;
        let mut fact = 1.0;
        for j in 1..=30 {
            fact *= j as f64;
            let term = if j % 2 == 1 { 1.0 } else { -1.0 } / (fact * (j as f64 - a));
            head += term;
        }
        let n = 20_000usize;
        let lo = 1.0;
        let hi = 45.0;
        let h = (hi - lo) / n as f64;
        let g = |x: f64| x.powf(-1.0 - a) * (-x).exp();
        let mut simp = g(lo) + g(hi);
        for i in 1..n {
            let w = if i % 2 == 1 { 4.0 } else { 2.0 };
            simp += w * g(lo + i as f64 * h);
        }
        simp *= h / 3.0;
        let integral = head + 1.0 / a - simp;
        let gamma_half = if d == 2 { 1.0 } else { PI.sqrt() / 2.0 };
        integral / (2f64.powi(d as i32) * (PI * eta).powf(d as f64 / 2.0) * gamma_half)
    }

    #[test]
    fn rescaling_constant_matches_quadrature_oracle() {
        for d in [2usize, 3] {
            for a in [0.2, 0.4, 0.5, 0.6, 0.8] {
                let got = rescaling_constant(d, 1.0, a);
                let want = quadrature_k(d, 1.0, a);
                assert!(
                    ((got - want) / want).abs() < 1e-8,
                    "d={d} a'={a}: {got} vs {want}"
                );
            }
        }
        // closed form at a'=1/2, d=2: 1/(2 sqrt(pi))
        let got = rescaling_constant(2, 1.0, 0.5);
        assert!(((got - 1.0 / (2.0 * PI.sqrt())) / got).abs() < 1e-13);
    }

    #[test]
    fn rescaling_constant_frozen_values() {
        // reference values from an independent implementation
        let cases = [
            (2, 0.2, 0.463_232_284_584_611),
            (2, 0.4, 0.296_265_384_515_869),
            (2, 0.5, 0.282_094_791_773_878),
            (2, 0.6, 0.294_192_546_629_583),
            (2, 0.8, 0.456_659_668_579_347),
            (3, 0.4, 0.094_304_200_825_443),
            (3, 0.5, 0.089_793_561_062_583),
        ];
        for (d, a, want) in cases {
            let got = rescaling_constant(d, 1.0, a);
            assert!(((got - want) / want).abs() < 1e-12, "d={d} a'={a}");
        }
    }

    #[test]
    fn theoretical_mean_sq_increment_examples() {
        let p = params(2, 0.0, vec![5.0, 0.0], 1.0, 1.0, 0.4);
        let delta = 1e-4;
        let got = p.theoretical_mean_sq_increment(&[0.5, 0.5], delta);
        let want = delta.powf(0.4) * (-2.5f64).exp() * rescaling_constant(2, 1.0, 0.4);
        assert!(((got - want) / want).abs() < 1e-14);

        // doubling Delta multiplies by 2^{a'}
        let doubled = p.theoretical_mean_sq_increment(&[0.5, 0.5], 2.0 * delta);
        assert!(((doubled / got) - 2f64.powf(0.4)).abs() < 1e-12);

        // kappa = 0 drops the exponential factor
        let p0 = params(2, 0.0, vec![0.0, 0.0], 1.0, 1.0, 0.4);
        let got0 = p0.theoretical_mean_sq_increment(&[0.3, 0.9], delta);
        let want0 = delta.powf(0.4) * rescaling_constant(2, 1.0, 0.4);
        assert!(((got0 - want0) / want0).abs() < 1e-14);
    }

    #[test]
    fn autocorrelation_identities() {
        for a in [0.2, 0.4, 0.5, 0.6, 0.8] {
            let p = params(2, 0.0, vec![3.0, -1.0], 1.0, 1.5, a);
            // rho(h) from the covariance/variance ratio equals the closed form
            let y = [0.3, 0.6];
            let delta = 1e-3;
            let var = p.theoretical_mean_sq_increment(&y, delta);
            for h in 1..=40u64 {
                let cov = p.theoretical_autocovariance(&y, delta, h).unwrap();
                let rho = p.theoretical_autocorrelation(h).unwrap();
                assert!((cov / var - rho).abs() < 1e-13, "a'={a} h={h}");
            }
            // rho(1) = 2^{a'-1} - 1
            let rho1 = p.theoretical_autocorrelation(1).unwrap();
            assert!((rho1 - (2f64.powf(a - 1.0) - 1.0)).abs() < 1e-14);
            // monotone increase toward zero
            let mut prev = rho1;
            for h in 2..=60u64 {
                let r = p.theoretical_autocorrelation(h).unwrap();
                assert!(r > prev && r < 0.0, "a'={a} h={h}");
                prev = r;
            }
        }
        let p = params(2, 0.0, vec![0.0, 0.0], 1.0, 1.0, 0.5);
        // rho(1) at a'=1/2 is (sqrt(2)-2)/2
        let got = p.theoretical_autocorrelation(1).unwrap();
        assert!((got - (2f64.sqrt() - 2.0) / 2.0).abs() < 1e-15);
        assert!(p.theoretical_autocovariance(&[0.5, 0.5], 1e-3, 0).is_err());
    }

    #[test]
    fn series_constants_match_brute_force() {
        // frozen 1e7-term brute-force partial sums (tails < 3e-12)
        let upsilon_ref = [
            (0.2, 2.728_306_464_373),
            (0.4, 2.474_197_665_142),
            (0.5, 2.357_487_448_313),
            (0.6, 2.250_391_010_723),
            (0.8, 2.077_606_040_326),
        ];
        let lambda_ref = [
            (0.2, -1.656_829_580_641),
            (0.4, -1.295_496_971_828),
            (0.5, -1.106_733_632_996),
            (0.6, -0.911_208_569_934),
            (0.8, -0.491_392_781_680),
        ];
        for (a, want) in upsilon_ref {
            let got = upsilon(a, 1e-10).unwrap();
            assert!((got - want).abs() < 1e-8, "Upsilon({a}) = {got}, want {want}");
            assert!(got > 2.0);
        }
        for (a, want) in lambda_ref {
            let got = lambda_const(a, 1e-10).unwrap();
            assert!((got - want).abs() < 1e-8, "Lambda({a}) = {got}, want {want}");
        }
    }

    #[test]
    fn series_stopping_rule_is_stable() {
        for a in [0.1, 0.5, 0.9, 0.99] {
            for tol in [1e-6, 1e-9] {
                let u1 = upsilon(a, tol).unwrap();
                let u2 = upsilon(a, tol / 10.0).unwrap();
                assert!((u1 - u2).abs() < tol, "Upsilon a'={a} tol={tol}");
                let l1 = lambda_const(a, tol).unwrap();
                let l2 = lambda_const(a, tol / 10.0).unwrap();
                assert!((l1 - l2).abs() < tol, "Lambda a'={a} tol={tol}");
            }
        }
    }

    #[test]
    fn lambda_first_summand_matches_substitution() {
        // r=0 term of the series is (-1 + 2*2^{a'} - 3^{a'})(2 - 2^{a'})
        let a = 0.37f64;
        let first = second_diff(1.0, a) * second_diff(0.0, a);
        let expect = (-1.0 + 2.0 * 2f64.powf(a) - 3f64.powf(a)) * (2.0 - 2f64.powf(a));
        assert!((first - expect).abs() < 1e-14);
    }

    #[test]
    fn sampling_scheme_validation() {
        let ok = SamplingScheme::new(100, vec![vec![0.2, 0.3], vec![0.5, 0.5]], 0.05);
        assert!(ok.is_ok());
        assert!(SamplingScheme::new(0, vec![vec![0.5, 0.5]], 0.05).is_err());
        assert!(SamplingScheme::new(10, vec![vec![0.5, 0.5]], 0.0).is_err());
        assert!(SamplingScheme::new(10, vec![vec![0.5, 0.5]], 0.5).is_err());
        assert!(SamplingScheme::new(10, vec![vec![0.02, 0.5]], 0.05).is_err());
        assert!(SamplingScheme::new(10, vec![], 0.05).is_err());
        assert!(
            SamplingScheme::new(10, vec![vec![0.3, 0.4], vec![0.3, 0.4]], 0.05).is_err(),
            "duplicate points must be rejected"
        );
        let s = SamplingScheme::new(8, vec![vec![0.25, 0.75]], 0.1).unwrap();
        assert!((s.delta_t() - 0.125).abs() < 1e-15);
    }

    #[test]
    fn sigma_matrix_examples() {
        // entry (0,0) equals 1 - 2 delta for any point set
        let pts = vec![vec![0.1, 0.3], vec![0.4, 0.2], vec![0.7, 0.5]];
        let s = asymptotic_sigma_matrix(&pts, 0.05).unwrap();
        assert!((s[(0, 0)] - 0.9).abs() < 1e-14);

        // single point: (1-2d) * outer product of (1, y)
        let s1 = asymptotic_sigma_matrix(&[vec![0.3, 0.8]], 0.1).unwrap();
        let v = [1.0, 0.3, 0.8];
        for a in 0..3 {
            for b in 0..3 {
                assert!((s1[(a, b)] - 0.8 * v[a] * v[b]).abs() < 1e-14);
            }
        }

        // fine equidistant interior grid: off-diagonal first-row entries
        // approach (1-2 delta) * mean coordinate = (1-2 delta)/2
        let mm = 60usize;
        let delta = 0.05;
        let mut grid = Vec::new();
        for i in 0..mm {
            for j in 0..mm {
                let a = delta + (1.0 - 2.0 * delta) * i as f64 / (mm - 1) as f64;
                let b = delta + (1.0 - 2.0 * delta) * j as f64 / (mm - 1) as f64;
                grid.push(vec![a, b]);
            }
        }
        let s = asymptotic_sigma_matrix(&grid, delta).unwrap();
        assert!((s[(0, 1)] - 0.9 * 0.5).abs() < 1e-3);
        assert!((s[(0, 2)] - 0.9 * 0.5).abs() < 1e-3);
    }
}
