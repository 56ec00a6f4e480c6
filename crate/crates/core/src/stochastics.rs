//! Seeded random streams and the exact binomial / Gaussian kernels.
//!
//! Every stochastic procedure in the crate draws from a [`SeedSpec`]: a master
//! seed plus a 64-bit stream id. Streams are ChaCha8 keystreams, so a task can
//! derive its own stream from its indices and run on any worker without
//! changing the numbers it produces.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::function::beta::beta_reg;
use statrs::function::erf::erfc;

use crate::error::{Error, Result};

/// Master seed and stream identifier of a reproducible random stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SeedSpec {
    pub master_seed: u64,
    pub stream_id: u64,
}

/// splitmix64 finalizer.
#[inline]
pub(crate) fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl SeedSpec {
    pub fn new(master_seed: u64, stream_id: u64) -> Self {
        Self {
            master_seed,
            stream_id,
        }
    }

    /// A child stream keyed by `label`. Distinct labels give distinct streams;
    /// the derivation is a pure function of `(self, label)`.
    pub fn derive(&self, label: u64) -> SeedSpec {
        SeedSpec {
            master_seed: self.master_seed,
            stream_id: mix64(mix64(self.stream_id) ^ label.rotate_left(17) ^ 0xA5A5_5A5A_C3C3_3C3C),
        }
    }

    /// Derive along a path of labels.
    pub fn derive_path(&self, labels: &[u64]) -> SeedSpec {
        labels.iter().fold(*self, |s, &l| s.derive(l))
    }

    /// The ChaCha8 generator for this stream.
    pub fn rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.master_seed);
        rng.set_stream(self.stream_id);
        rng
    }
}

fn check_probability(p: f64, what: &str) -> Result<()> {
    if p.is_finite() && (0.0..=1.0).contains(&p) {
        Ok(())
    } else {
        Err(Error::domain(format!("{what} must lie in [0, 1], got {p}")))
    }
}

/// Binomial(n, p) sampler with its setup done once, for hot loops.
#[derive(Debug, Clone, Copy)]
pub struct BinomialSampler {
    dist: Binomial,
}

impl BinomialSampler {
    pub fn new(n: u64, p: f64) -> Result<Self> {
        check_probability(p, "binomial probability")?;
        let dist = Binomial::new(n, p).map_err(|e| Error::domain(e.to_string()))?;
        Ok(Self { dist })
    }

    #[inline]
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> u64 {
        self.dist.sample(rng)
    }
}

/// Gaussian sampler; zero variance yields the mean exactly.
#[derive(Debug, Clone, Copy)]
pub struct GaussianSampler {
    mean: f64,
    sd: f64,
}

impl GaussianSampler {
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn new(mean: f64, variance: f64) -> Result<Self> {
        if !mean.is_finite() {
            return Err(Error::domain(format!("gaussian mean must be finite, got {mean}")));
        }
        if !(variance >= 0.0) || !variance.is_finite() {
            return Err(Error::domain(format!(
                "gaussian variance must be finite and non-negative, got {variance}"
            )));
        }
        Ok(Self {
            mean,
            sd: variance.sqrt(),
        })
    }

    #[inline]
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        if self.sd == 0.0 {
            return self.mean;
        }
        let z: f64 = rng.sample(StandardNormal);
        self.mean + self.sd * z
    }
}

/// One Binomial(n, p) draw from the stream `seed`.
pub fn sample_binomial(n: u64, p: f64, seed: SeedSpec) -> Result<u64> {
    let sampler = BinomialSampler::new(n, p)?;
    Ok(sampler.sample(&mut seed.rng()))
}

/// One N(mean, variance) draw from the stream `seed`.
pub fn sample_gaussian(mean: f64, variance: f64, seed: SeedSpec) -> Result<f64> {
    let sampler = GaussianSampler::new(mean, variance)?;
    Ok(sampler.sample(&mut seed.rng()))
}

/// Two-sided exact binomial confidence interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExactBinomialCI {
    pub lower: f64,
    pub upper: f64,
    pub level: f64,
}

impl ExactBinomialCI {
    pub fn contains(&self, x: f64) -> bool {
        self.lower <= x && x <= self.upper
    }

    pub fn width(&self) -> f64 {
        self.upper - self.lower
    }
}

pub(crate) fn check_level(level: f64) -> Result<()> {
    if level.is_finite() && level > 0.0 && level < 1.0 {
        Ok(())
    } else {
        Err(Error::domain(format!("confidence level must lie in (0, 1), got {level}")))
    }
}

/// Root of the increasing function `g` on [0, 1] by bisection to machine
/// resolution.
fn bisect_unit(mut g: impl FnMut(f64) -> f64, target: f64) -> f64 {
    let (mut lo, mut hi) = (0.0_f64, 1.0_f64);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if g(mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Clopper–Pearson interval for `k` successes in `n` trials, equal tails of
/// `(1 - level) / 2`.
pub fn clopper_pearson(k: u64, n: u64, level: f64) -> Result<ExactBinomialCI> {
    if n == 0 {
        return Err(Error::domain("clopper_pearson needs at least one trial"));
    }
    if k > n {
        return Err(Error::domain(format!("successes {k} exceed trials {n}")));
    }
    check_level(level)?;
    let tail = 0.5 * (1.0 - level);
    let (kf, nf) = (k as f64, n as f64);
    // Lower bound: the x with P(X >= k | x) = tail, i.e. I_x(k, n-k+1) = tail.
    let lower = if k == 0 {
        0.0
    } else {
        bisect_unit(|x| beta_reg(kf, nf - kf + 1.0, x), tail)
    };
    // Upper bound: the x with P(X <= k | x) = tail, i.e. I_x(k+1, n-k) = 1 - tail.
    let upper = if k == n {
        1.0
    } else {
        bisect_unit(|x| beta_reg(kf + 1.0, nf - kf, x), 1.0 - tail)
    };
    Ok(ExactBinomialCI {
        lower,
        upper,
        level,
    })
}

/// Standard normal quantile (Wichura's AS 241, double precision).
pub fn gaussian_quantile(u: f64) -> Result<f64> {
    if !(u > 0.0 && u < 1.0) {
        return Err(Error::domain(format!("gaussian quantile needs u in (0, 1), got {u}")));
    }
    Ok(ppnd16(u))
}

fn poly(coeffs: &[f64], x: f64) -> f64 {
    coeffs.iter().rev().fold(0.0, |acc, &c| acc * x + c)
}

#[allow(clippy::excessive_precision)]
fn ppnd16(p: f64) -> f64 {
    const A: [f64; 8] = [
        3.387_132_872_796_366_608,
        133.141_667_891_784_377_45,
        1_971.590_950_306_551_442_7,
        13_731.693_765_509_461_125,
        45_921.953_931_549_871_457,
        67_265.770_927_008_700_853,
        33_430.575_583_588_128_105,
        2_509.080_928_730_122_672_7,
    ];
    const B: [f64; 8] = [
        1.0,
        42.313_330_701_600_911_252,
        687.187_007_492_057_908_3,
        5_394.196_021_424_751_107_7,
        21_213.794_301_586_595_867,
        39_307.895_800_092_710_61,
        28_729.085_735_721_942_674,
        5_226.495_278_852_854_561,
    ];
    const C: [f64; 8] = [
        1.423_437_110_749_683_577_34,
        4.630_337_846_156_545_295_9,
        5.769_497_221_460_691_405_5,
        3.647_848_324_763_204_605_04,
        1.270_458_252_452_368_382_58,
        0.241_780_725_177_450_611_77,
        0.022_723_844_989_269_184_583_3,
        7.745_450_142_783_414_076_4e-4,
    ];
    const D: [f64; 8] = [
        1.0,
        2.053_191_626_637_758_821_87,
        1.676_384_830_183_803_849_4,
        0.689_767_334_985_100_004_55,
        0.148_103_976_427_480_074_59,
        0.015_198_666_563_616_457_196_6,
        5.475_938_084_995_344_946e-4,
        1.050_750_071_644_416_843_24e-9,
    ];
    const E: [f64; 8] = [
        6.657_904_643_501_103_777_2,
        5.463_784_911_164_114_369_9,
        1.784_826_539_917_291_335_8,
        0.296_560_571_828_504_891_23,
        0.026_532_189_526_576_123_093,
        0.001_242_660_947_388_078_438_6,
        2.711_555_568_743_487_578_15e-5,
        2.010_334_399_292_288_132_65e-7,
    ];
    const F: [f64; 8] = [
        1.0,
        0.599_832_206_555_887_937_69,
        0.136_929_880_922_735_805_31,
        0.014_875_361_290_850_614_852_5,
        7.868_691_311_456_132_591e-4,
        1.846_318_317_510_054_681_8e-5,
        1.421_511_758_316_445_888_7e-7,
        2.044_263_103_389_939_785_64e-15,
    ];

    let q = p - 0.5;
    if q.abs() <= 0.425 {
        let r = 0.180_625 - q * q;
        return q * poly(&A, r) / poly(&B, r);
    }
    let tail = if q < 0.0 { p } else { 1.0 - p };
    let mut r = (-tail.ln()).sqrt();
    let value = if r <= 5.0 {
        r -= 1.6;
        poly(&C, r) / poly(&D, r)
    } else {
        r -= 5.0;
        poly(&E, r) / poly(&F, r)
    };
    if q < 0.0 {
        -value
    } else {
        value
    }
}

/// Two-sided tail probability P(|Z| > |t|) of a standard normal.
pub fn gaussian_two_sided_pvalue(t: f64) -> f64 {
    if t.is_nan() {
        return f64::NAN;
    }
    if t.is_infinite() {
        return 0.0;
    }
    erfc(t.abs() / std::f64::consts::SQRT_2).clamp(0.0, 1.0)
}
