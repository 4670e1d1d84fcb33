//! Shared numerical kernels: Gaussian special functions, truncated-normal
//! moments, the exponentially modified Gaussian density, a 2x2 solver and
//! seeded sampling.

use std::f64::consts::{FRAC_1_SQRT_2, PI};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Exp, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// ln(sqrt(2*pi))
pub const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;

/// Below this argument `exp(x^2) * erfc(x)` is evaluated directly; above it the
/// Laplace continued fraction is used. 8/sqrt(2) corresponds to a standardized
/// truncation point of 8.
const ERFCX_CF_THRESHOLD: f64 = 5.656_854_249_492_381;
const ERFCX_CF_TERMS: usize = 120;

/// Scaled complementary error function `exp(x^2) * erfc(x)`.
pub fn erfcx(x: f64) -> f64 {
    if x.is_nan() {
        return f64::NAN;
    }
    if x < 0.0 {
        // erfc(-x) = 2 - erfc(x)
        let e = (x * x).exp();
        if !e.is_finite() {
            return f64::INFINITY;
        }
        return 2.0 * e - erfcx(-x);
    }
    if x < ERFCX_CF_THRESHOLD {
        return (x * x).exp() * libm::erfc(x);
    }
    // erfcx(x) = 1/sqrt(pi) * 1/(x + (1/2)/(x + 1/(x + (3/2)/(x + ...))))
    let mut tail = x;
    for n in (1..=ERFCX_CF_TERMS).rev() {
        tail = x + (n as f64 * 0.5) / tail;
    }
    1.0 / (PI.sqrt() * tail)
}

/// Log density of `N(mean, sd^2)` at `x`.
pub fn normal_log_pdf(x: f64, mean: f64, sd: f64) -> f64 {
    let z = (x - mean) / sd;
    -0.5 * z * z - sd.ln() - LN_SQRT_2PI
}

/// Standard normal CDF.
pub fn normal_cdf(z: f64) -> f64 {
    0.5 * libm::erfc(-z * FRAC_1_SQRT_2)
}

/// `ln Phi(z)`, accurate deep into the lower tail.
pub fn normal_log_cdf(z: f64) -> f64 {
    if z < -1.0 {
        let t = -z * FRAC_1_SQRT_2;
        (0.5 * erfcx(t)).ln() - t * t
    } else {
        (-0.5 * libm::erfc(z * FRAC_1_SQRT_2)).ln_1p()
    }
}

/// Inverse Mills ratio `phi(a) / (1 - Phi(a))`, the hazard of the standard
/// normal at `a`.
pub fn normal_hazard(a: f64) -> f64 {
    (2.0 / PI).sqrt() / erfcx(a * FRAC_1_SQRT_2)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TruncatedNormalMoments {
    pub mean: f64,
    pub second_moment: f64,
}

/// First two raw moments of `N(m, sigma^2)` conditioned on `[0, inf)`.
pub fn truncated_normal_moments(m: f64, sigma: f64) -> Result<TruncatedNormalMoments> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "truncated normal sigma must be positive, got {sigma}"
        )));
    }
    if !m.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "truncated normal location must be finite, got {m}"
        )));
    }
    // Standardized lower truncation point.
    let a = -m / sigma;
    let lambda = normal_hazard(a);
    // mean = sigma * (lambda - a), E[X^2] = sigma^2 * (1 - a * (lambda - a))
    let excess = lambda - a;
    let mean = (sigma * excess).max(0.0);
    let second_moment = sigma * sigma * (1.0 - a * excess);
    Ok(TruncatedNormalMoments {
        mean,
        second_moment: second_moment.max(mean * mean),
    })
}

/// Log density at `x` of `S + G` with `S ~ Exponential(rate)` and
/// `G ~ N(mu, sigma^2)`.
pub fn emg_log_density(x: f64, mu: f64, sigma: f64, rate: f64) -> Result<f64> {
    if !(sigma > 0.0) || !(rate > 0.0) || !sigma.is_finite() || !rate.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "EMG requires sigma > 0 and rate > 0, got sigma={sigma}, rate={rate}"
        )));
    }
    Ok(emg_log_density_unchecked(x, mu, sigma, rate))
}

pub(crate) fn emg_log_density_unchecked(x: f64, mu: f64, sigma: f64, rate: f64) -> f64 {
    let w = (x - mu) / sigma;
    let z = w - rate * sigma;
    if z < 0.0 {
        // rate*(mu - x) + (rate*sigma)^2/2 - z^2/2 collapses to -w^2/2.
        let t = -z * FRAC_1_SQRT_2;
        rate.ln() - 0.5 * w * w + (0.5 * erfcx(t)).ln()
    } else {
        let rs = rate * sigma;
        rate.ln() + rs * (0.5 * rs - w) + normal_log_cdf(z)
    }
}

/// Solves `[[a11, a12], [a21, a22]] x = b` by Cramer's rule.
pub fn solve_2x2(a11: f64, a12: f64, a21: f64, a22: f64, b1: f64, b2: f64) -> Result<(f64, f64)> {
    let scale = a11.abs().max(a12.abs()).max(a21.abs()).max(a22.abs());
    let det = a11 * a22 - a12 * a21;
    if !det.is_finite() || scale == 0.0 || det.abs() <= 1e-12 * scale * scale {
        return Err(Error::SingularSystem { det });
    }
    Ok(((b1 * a22 - a12 * b2) / det, (a11 * b2 - a21 * b1) / det))
}

/// The distributions [`draw`] can sample from.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Sampler {
    StandardNormal,
    Exponential { mean: f64 },
    Bernoulli { p: f64 },
    /// Zero-mean Laplace with the given scale.
    Laplace { scale: f64 },
}

/// Seeded, counter-based random stream.
///
/// Each stream is a ChaCha20 keystream keyed by `seed` and positioned in its
/// own 64-bit stream domain, so sub-streams never share counter ranges with
/// their parent or siblings.
#[derive(Debug, Clone)]
pub struct RngStream {
    seed: u64,
    domain: u64,
    rng: ChaCha20Rng,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of the `index`-th independent job under `master`, e.g. one Monte
/// Carlo run.
pub fn derive_seed(master: u64, index: u64) -> u64 {
    splitmix64(master ^ splitmix64(index.wrapping_add(1)))
}

impl RngStream {
    pub fn new(seed: u64) -> Self {
        Self::with_domain(seed, 0)
    }

    fn with_domain(seed: u64, domain: u64) -> Self {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        rng.set_stream(domain);
        RngStream { seed, domain, rng }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Derives the `index`-th child stream. Depends only on this stream's
    /// identity, not on how much of it has been consumed.
    pub fn substream(&self, index: u64) -> RngStream {
        let domain = splitmix64(self.domain ^ splitmix64(index.wrapping_add(1)));
        Self::with_domain(self.seed, domain)
    }

    pub fn uniform(&mut self) -> f64 {
        self.rng.random::<f64>()
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    pub fn standard_normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.rng)
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        items.shuffle(&mut self.rng);
    }
}

/// `n` i.i.d. draws from `sampler`.
pub fn draw(stream: &mut RngStream, sampler: Sampler, n: usize) -> Result<Vec<f64>> {
    if n == 0 {
        return Err(Error::InvalidParameter("draw count must be at least 1".into()));
    }
    match sampler {
        Sampler::StandardNormal => Ok((0..n).map(|_| stream.standard_normal()).collect()),
        Sampler::Exponential { mean } => {
            if !(mean > 0.0) || !mean.is_finite() {
                return Err(Error::InvalidParameter(format!(
                    "exponential mean must be positive, got {mean}"
                )));
            }
            let exp = Exp::new(1.0 / mean)
                .map_err(|e| Error::InvalidParameter(format!("exponential: {e}")))?;
            Ok((0..n).map(|_| exp.sample(&mut stream.rng)).collect())
        }
        Sampler::Bernoulli { p } => {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::InvalidParameter(format!(
                    "bernoulli p must lie in [0, 1], got {p}"
                )));
            }
            Ok((0..n)
                .map(|_| if stream.uniform() < p { 1.0 } else { 0.0 })
                .collect())
        }
        Sampler::Laplace { scale } => {
            if !(scale > 0.0) || !scale.is_finite() {
                return Err(Error::InvalidParameter(format!(
                    "laplace scale must be positive, got {scale}"
                )));
            }
            // inverse CDF on u in (-1/2, 1/2)
            Ok((0..n)
                .map(|_| {
                    let u = stream.uniform() - 0.5;
                    -scale * u.signum() * (-2.0 * u.abs()).ln_1p()
                })
                .collect())
        }
    }
}
