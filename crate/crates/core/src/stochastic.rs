//! Noise paths, reproducible random streams, quadrature and `erf`.
//!
//! Brownian increments follow the collapse convention `dB² ~ λ dt`: the
//! diffusion rate sits inside the variance, so a path sampled with rate
//! `λ` has increments `√(λ dt)·z` with `z` standard normal.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{param, Result};

/// Address of one independent random sequence.
///
/// A stream is the pair `(master_seed, stream_index)`; the generator behind
/// it is a ChaCha8 block cipher keyed by the seed and positioned on the
/// stream, so sequences are identical on every platform and never overlap
/// between indices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct RngStream {
    pub master_seed: u64,
    pub stream_index: u64,
}

impl RngStream {
    pub fn new(master_seed: u64, stream_index: u64) -> Self {
        Self {
            master_seed,
            stream_index,
        }
    }

    /// Fresh generator positioned at the start of this stream.
    pub fn rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.master_seed);
        rng.set_stream(self.stream_index);
        rng
    }

    /// Stream for sub-task `index` under the same seed.
    pub fn child(&self, index: u64) -> Self {
        Self::new(self.master_seed, index)
    }
}

/// Discretised Brownian motion: increments `dB_k` over `[k dt, (k+1) dt)`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoisePath {
    pub dt: f64,
    pub lambda: f64,
    pub increments: Vec<f64>,
}

impl NoisePath {
    pub fn new(dt: f64, lambda: f64, increments: Vec<f64>) -> Result<Self> {
        if !(dt > 0.0) {
            return Err(param(format!("dt must be positive, got {dt}")));
        }
        if !(lambda >= 0.0) {
            return Err(param(format!("lambda must be non-negative, got {lambda}")));
        }
        Ok(Self {
            dt,
            lambda,
            increments,
        })
    }

    pub fn len(&self) -> usize {
        self.increments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.increments.is_empty()
    }

    /// `B(t_k)` for `k = 0..=n`, starting from `B(0) = 0`.
    pub fn cumulative(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.increments.len() + 1);
        let mut acc = 0.0;
        out.push(acc);
        for dw in &self.increments {
            acc += dw;
            out.push(acc);
        }
        out
    }

    /// White-noise reading `w(t_k) = dB_k / dt`.
    pub fn white_noise(&self) -> Vec<f64> {
        self.increments.iter().map(|dw| dw / self.dt).collect()
    }

    pub fn times(&self) -> Vec<f64> {
        (0..=self.increments.len())
            .map(|k| k as f64 * self.dt)
            .collect()
    }
}

/// Sample `n_steps` Brownian increments with variance `λ·dt` each.
pub fn sample_noise_path(dt: f64, n_steps: usize, lambda: f64, stream: RngStream) -> Result<NoisePath> {
    if !(dt > 0.0) {
        return Err(param(format!("dt must be positive, got {dt}")));
    }
    if !(lambda > 0.0) {
        return Err(param(format!("lambda must be positive, got {lambda}")));
    }
    if n_steps == 0 {
        return Err(param("n_steps must be at least 1"));
    }
    let scale = (lambda * dt).sqrt();
    let mut rng = stream.rng();
    let increments = (0..n_steps)
        .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
        .collect();
    NoisePath::new(dt, lambda, increments)
}

/// Composite Simpson estimate of `∫_{t0}^{t1} f`.
///
/// `n` is the number of sub-intervals; an odd `n` is rounded up to the next
/// even count.
pub fn integrate<F>(f: F, t0: f64, t1: f64, n: usize) -> Result<f64>
where
    F: Fn(f64) -> f64,
{
    if !(t1 >= t0) {
        return Err(param(format!("integration bounds reversed: [{t0}, {t1}]")));
    }
    if n < 2 {
        return Err(param("quadrature needs at least 2 sub-intervals"));
    }
    if t1 == t0 {
        return Ok(0.0);
    }
    let n = n + n % 2;
    let h = (t1 - t0) / n as f64;
    let mut odd = 0.0;
    let mut even = 0.0;
    for k in 1..n {
        let v = f(t0 + k as f64 * h);
        if k % 2 == 1 {
            odd += v;
        } else {
            even += v;
        }
    }
    Ok(h / 3.0 * (f(t0) + f(t1) + 4.0 * odd + 2.0 * even))
}

const FRAC_2_SQRT_PI: f64 = std::f64::consts::FRAC_2_SQRT_PI;

/// Error function, absolute error below `1e-15` on the real line.
///
/// Uses the positive-term series `erf x = (2/√π) e^{-x²} Σ 2ⁿ x^{2n+1}/(2n+1)!!`
/// for `|x| ≤ 3`, and a continued fraction for `erfc` beyond that.
pub fn erf(x: f64) -> f64 {
    if x.is_nan() {
        return f64::NAN;
    }
    let ax = x.abs();
    let v = if ax <= 3.0 {
        erf_series(ax)
    } else if ax < 27.0 {
        1.0 - erfc_continued_fraction(ax)
    } else {
        1.0
    };
    v.copysign(x)
}

/// Complementary error function for `x ≥ 0` (falls back to `1 - erf` below 3).
pub fn erfc(x: f64) -> f64 {
    if x < 3.0 {
        1.0 - erf(x)
    } else if x < 27.0 {
        erfc_continued_fraction(x)
    } else {
        0.0
    }
}

fn erf_series(x: f64) -> f64 {
    let x2 = x * x;
    let mut term = x;
    let mut sum = x;
    let mut k = 0.0;
    loop {
        k += 1.0;
        term *= 2.0 * x2 / (2.0 * k + 1.0);
        sum += term;
        if term <= sum * 1e-17 {
            break;
        }
    }
    FRAC_2_SQRT_PI * (-x2).exp() * sum
}

// Modified Lentz evaluation of erfc x = e^{-x²}/√π · 1/(x + (1/2)/(x + 1/(x + (3/2)/(x + ...)))).
fn erfc_continued_fraction(x: f64) -> f64 {
    const TINY: f64 = 1e-300;
    let mut f = x;
    let mut c = x;
    let mut d = 0.0;
    for k in 1..500 {
        let a = k as f64 / 2.0;
        d = x + a * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = x + a / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let delta = c * d;
        f *= delta;
        if (delta - 1.0).abs() < 1e-16 {
            break;
        }
    }
    (-x * x).exp() / (std::f64::consts::PI.sqrt() * f)
}

/// Mean and standard error of a sample, summed in index order.
pub fn mean_and_se(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Unbiased sample variance.
pub fn sample_variance(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
}
