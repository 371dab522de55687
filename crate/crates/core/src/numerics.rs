//! Shared numerical kernels: special functions, RNG streams, dense least
//! squares, and summary statistics. Nothing here knows about the SPDE model.

use nalgebra::{DMatrix, DVector};
use rand::RngCore;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::f64::consts::PI;

use crate::error::{Result, SpdeError};

/// Relative singular-value threshold below which a design matrix is treated
/// as rank deficient.
pub const RANK_GATE_REL: f64 = 1e-10;

/// Identifier of the generator backing [`RngStream`].
pub const RNG_ALGORITHM: &str = "chacha8";

// ---------------------------------------------------------------------------
// special functions
// ---------------------------------------------------------------------------

// Lanczos g=7, n=9 coefficients (GSL set). Relative error is below 1e-13 for
// positive real arguments, comfortably inside the 1e-12 requirement.
const LANCZOS_P: [f64; 9] = [
    0.999_999_999_999_809_93,
    676.520_368_121_885_1,
    -1_259.139_216_722_402_8,
    771.323_428_777_653_13,
    -176.615_029_162_140_59,
    12.507_343_278_686_905,
    -0.138_571_095_265_720_12,
    9.984_369_578_019_571_6e-6,
    1.505_632_735_149_311_6e-7,
];

/// Gamma function for positive real arguments (Lanczos approximation with
/// reflection below 1/2). Only positive arguments occur in this crate.
pub fn gamma_fn(x: f64) -> f64 {
    if x < 0.5 {
        // reflection keeps the approximation on its accurate branch
        PI / (sin_pi(x) * gamma_fn(1.0 - x))
    } else {
        let z = x - 1.0;
        let mut acc = LANCZOS_P[0];
        for (i, p) in LANCZOS_P.iter().enumerate().skip(1) {
            acc += p / (z + i as f64);
        }
        let t = z + 7.5;
        (2.0 * PI).sqrt() * t.powf(z + 0.5) * (-t).exp() * acc
    }
}

/// sin(pi x) with exact zeros at integer x. Plain `(PI * x).sin()` returns
/// ~1.2e-16 at x = 1, which breaks the exact Dirichlet boundary contract of
/// the eigenfunctions; the mod-2 reduction below is exact in f64 and the
/// quadrant folds are exact by Sterbenz's lemma.
pub fn sin_pi(x: f64) -> f64 {
    let r = x.rem_euclid(2.0);
    if r == 0.0 || r == 1.0 {
        0.0
    } else if r < 0.5 {
        (PI * r).sin()
    } else if r < 1.0 {
        (PI * (1.0 - r)).sin()
    } else if r < 1.5 {
        -(PI * (r - 1.0)).sin()
    } else {
        -(PI * (2.0 - r)).sin()
    }
}

// AS 241 (PPND16) rational approximations for the inverse standard normal
// CDF; absolute error below 1e-15 on the central branch and well below the
// 1e-8 contract everywhere.
const PPND_A: [f64; 8] = [
    3.387_132_872_796_366_608,
    133.141_667_891_784_377_45,
    1_971.590_950_306_551_442_7,
    13_731.693_765_509_461_125,
    45_921.953_931_549_871_457,
    67_265.770_927_008_700_853,
    33_430.575_583_588_128_105,
    2_509.080_928_730_122_672_7,
];
const PPND_B: [f64; 8] = [
    1.0,
    42.313_330_701_600_911_252,
    687.187_007_492_057_908_3,
    5_394.196_021_424_751_107_7,
    21_213.794_301_586_595_867,
    39_307.895_800_092_710_61,
    28_729.085_735_721_942_674,
    5_226.495_278_852_854_561,
];
const PPND_C: [f64; 8] = [
    1.423_437_110_749_683_577_34,
    4.630_337_846_156_545_295_9,
    5.769_497_221_460_691_405_5,
    3.647_848_324_763_204_605_04,
    1.270_458_252_452_368_382_58,
    0.241_780_725_177_450_611_77,
    0.022_723_844_989_269_184_583_3,
    7.745_450_142_783_414_076_4e-4,
];
const PPND_D: [f64; 8] = [
    1.0,
    2.053_191_626_637_758_821_87,
    1.676_384_830_183_803_849_4,
    0.689_767_334_985_100_004_55,
    0.148_103_976_427_480_074_59,
    0.015_198_666_563_616_457_196_6,
    5.475_938_084_995_344_946e-4,
    1.050_750_071_644_416_843_24e-9,
];
const PPND_E: [f64; 8] = [
    6.657_904_643_501_103_777_2,
    5.463_784_911_164_114_369_9,
    1.784_826_539_917_291_335_8,
    0.296_560_571_828_504_891_23,
    0.026_532_189_526_576_123_093,
    0.001_242_660_947_388_078_438_6,
    2.711_555_568_743_487_578_15e-5,
    2.010_334_399_292_288_132_65e-7,
];
const PPND_F: [f64; 8] = [
    1.0,
    0.599_832_206_555_887_937_69,
    0.136_929_880_922_735_805_31,
    0.014_875_361_290_850_614_852_5,
    7.868_691_311_456_132_591e-4,
    1.846_318_317_510_054_681_8e-5,
    1.421_511_758_316_445_888_7e-7,
    2.044_263_103_389_939_785_64e-15,
];

fn poly7(c: &[f64; 8], x: f64) -> f64 {
    let mut acc = c[7];
    for i in (0..7).rev() {
        acc = acc * x + c[i];
    }
    acc
}

/// Inverse standard normal CDF (quantile function), AS 241 PPND16.
pub fn inv_norm_cdf(p: f64) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) {
        return Err(SpdeError::DomainError(format!(
            "normal quantile needs p in (0,1), got {p}"
        )));
    }
    let q = p - 0.5;
    if q.abs() <= 0.425 {
        let r = 0.180625 - q * q;
        return Ok(q * poly7(&PPND_A, r) / poly7(&PPND_B, r));
    }
    let r = if q < 0.0 { p } else { 1.0 - p };
    let mut r = (-r.ln()).sqrt();
    let x = if r <= 5.0 {
        r -= 1.6;
        poly7(&PPND_C, r) / poly7(&PPND_D, r)
    } else {
        r -= 5.0;
        poly7(&PPND_E, r) / poly7(&PPND_F, r)
    };
    Ok(if q < 0.0 { -x } else { x })
}

// ---------------------------------------------------------------------------
// RNG streams
// ---------------------------------------------------------------------------

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// A single-consumer random stream identified by (seed, index). Distinct
/// identities give independent ChaCha8 streams; the same identity reproduces
/// the same sequence bit for bit. `derive` spawns a child family keyed by
/// this stream's identity without consuming any state, which is how
/// simulators hand one sub-stream to every mode and Monte Carlo harnesses
/// hand one stream to every replication.
pub struct RngStream {
    seed: u64,
    index: u64,
    rng: ChaCha8Rng,
}

impl RngStream {
    pub fn new(seed: u64, index: u64) -> Self {
        let mut s = seed;
        let mut key = [0u8; 32];
        for chunk in key.chunks_exact_mut(8) {
            chunk.copy_from_slice(&splitmix64(&mut s).to_le_bytes());
        }
        let mut rng = ChaCha8Rng::from_seed(key);
        rng.set_stream(index);
        RngStream { seed, index, rng }
    }

    /// Child stream family: `derive(i)` is a pure function of
    /// (self.seed, self.index, i).
    pub fn derive(&self, child_index: u64) -> RngStream {
        let mut s = self
            .seed
            .wrapping_add(self.index.wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let child_seed = splitmix64(&mut s);
        RngStream::new(child_seed, child_index)
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn index(&self) -> u64 {
        self.index
    }

    pub fn algorithm(&self) -> &'static str {
        RNG_ALGORITHM
    }

    /// Uniform on the open interval (0,1), 53-bit resolution, never 0 or 1.
    pub fn uniform(&mut self) -> f64 {
        (((self.rng.next_u64() >> 11) as f64) + 0.5) * (1.0 / 9_007_199_254_740_992.0)
    }

    /// Standard normal by inversion of the uniform; one u64 per draw.
    pub fn gauss(&mut self) -> f64 {
        // the uniform is strictly inside (0,1) so the quantile cannot fail
        inv_norm_cdf(self.uniform()).expect("uniform draw strictly inside (0,1)")
    }
}

// ---------------------------------------------------------------------------
// least squares
// ---------------------------------------------------------------------------

/// Builds the regression design matrix with rows (1, y_1, ..., y_d).
pub fn design_matrix(spatial_points: &[Vec<f64>]) -> DMatrix<f64> {
    let m = spatial_points.len();
    let d = spatial_points.first().map_or(0, Vec::len);
    DMatrix::from_fn(m, d + 1, |i, j| {
        if j == 0 {
            1.0
        } else {
            spatial_points[i][j - 1]
        }
    })
}

/// Least-squares fit by singular value decomposition.
#[derive(Debug)]
pub struct OlsFit {
    pub beta: DVector<f64>,
    pub residuals: DVector<f64>,
    /// Singular values of the design matrix, descending.
    pub singular_values: Vec<f64>,
    /// (X^T X)^{-1}, for asymptotic covariance plug-ins.
    pub xtx_inv: DMatrix<f64>,
}

/// Solves min ||X b - y||_2 through an orthogonal factorization (SVD), never
/// the normal equations. Rejects m < p and any design whose smallest
/// singular value falls below `RANK_GATE_REL` times the largest.
pub fn ols_solve(x: &DMatrix<f64>, y: &DVector<f64>) -> Result<OlsFit> {
    let (m, p) = x.shape();
    if y.len() != m {
        return Err(SpdeError::InvalidParameter(format!(
            "response length {} does not match {} design rows",
            y.len(),
            m
        )));
    }
    if m < p {
        return Err(SpdeError::FullRankViolation(format!(
            "{m} observations cannot identify {p} coefficients"
        )));
    }
    let svd = x.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    if !(smin > RANK_GATE_REL * smax) {
        return Err(SpdeError::FullRankViolation(format!(
            "design matrix rank deficient: singular value ratio {:.3e} below {RANK_GATE_REL:.0e} \
             (the spatial points must form a full-rank affine design)",
            smin / smax
        )));
    }
    let beta = svd
        .solve(y, 0.0)
        .map_err(|e| SpdeError::FullRankViolation(e.to_string()))?;
    let residuals = y - x * &beta;
    let v_t = svd.v_t.as_ref().expect("svd computed with v_t");
    // (X^T X)^{-1} = V S^{-2} V^T
    let mut xtx_inv = DMatrix::zeros(p, p);
    for a in 0..p {
        for b in 0..p {
            let mut acc = 0.0;
            for k in 0..p {
                let s = svd.singular_values[k];
                acc += v_t[(k, a)] * v_t[(k, b)] / (s * s);
            }
            xtx_inv[(a, b)] = acc;
        }
    }
    let mut singular_values: Vec<f64> = svd.singular_values.iter().copied().collect();
    singular_values.sort_by(|a, b| b.partial_cmp(a).unwrap());
    Ok(OlsFit {
        beta,
        residuals,
        singular_values,
        xtx_inv,
    })
}

// ---------------------------------------------------------------------------
// summaries
// ---------------------------------------------------------------------------

/// Descriptive statistics of a sample. Variance uses the n-1 denominator and
/// is `None` for a single observation; quantiles interpolate linearly
/// between order statistics.
pub struct Summary {
    pub count: usize,
    pub mean: f64,
    pub variance: Option<f64>,
    sorted: Vec<f64>,
}

pub fn summary(samples: &[f64]) -> Result<Summary> {
    if samples.is_empty() {
        return Err(SpdeError::DomainError(
            "summary of an empty sample".into(),
        ));
    }
    let n = samples.len();
    let mean = samples.iter().sum::<f64>() / n as f64;
    let variance = if n > 1 {
        Some(samples.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1) as f64)
    } else {
        None
    };
    let mut sorted = samples.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    Ok(Summary {
        count: n,
        mean,
        variance,
        sorted,
    })
}

impl Summary {
    pub fn quantile(&self, p: f64) -> Result<f64> {
        if !(0.0..=1.0).contains(&p) {
            return Err(SpdeError::DomainError(format!(
                "quantile level {p} outside [0,1]"
            )));
        }
        let pos = p * (self.count - 1) as f64;
        let lo = pos.floor() as usize;
        let hi = pos.ceil() as usize;
        let w = pos - lo as f64;
        Ok(self.sorted[lo] * (1.0 - w) + self.sorted[hi] * w)
    }

    pub fn median(&self) -> f64 {
        self.quantile(0.5).expect("0.5 is a valid level")
    }

    pub fn min(&self) -> f64 {
        self.sorted[0]
    }

    pub fn max(&self) -> f64 {
        self.sorted[self.count - 1]
    }
}
