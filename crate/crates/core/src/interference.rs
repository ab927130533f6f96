//! Interference of clump wave packets under collapse.
//!
//! Each packet point is assumed to move on a straight line (packets with a
//! well-defined local momentum), so the collapse factor between packets `n`
//! and `n'` observed at `X` is the scalar `exp(-λN² ∫ dt' [1 - e^{-s²/4a²}])`,
//! where `s(t')` is the distance between the points of the two packets that
//! later arrive at `X`.

use std::f64::consts::PI;
use std::sync::Arc;

use num_complex::Complex64;

use crate::clump_dynamics::ClumpParams;
use crate::error::{param, Error, Result};
use crate::stochastic::{erf, integrate};

/// Default number of Simpson intervals for time quadratures.
pub const DEFAULT_N_QUAD: usize = 10_000;
/// Largest relative change allowed when the quadrature resolution is doubled.
pub const RICHARDSON_TOLERANCE: f64 = 1e-8;

/// `φ(X, t)`, the packet profile at the screen.
pub type Profile = Arc<dyn Fn(f64, f64) -> Complex64 + Send + Sync>;
/// `(X, t, t') -> position at time t'` of the packet point found at `X` at time `t`.
pub type History = Arc<dyn Fn(f64, f64, f64) -> f64 + Send + Sync>;

/// One packet in a superposition.
#[derive(Clone)]
pub struct PacketSpec {
    pub amplitude: Complex64,
    pub profile: Profile,
    pub history: History,
}

impl std::fmt::Debug for PacketSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("PacketSpec").field("amplitude", &self.amplitude).finish_non_exhaustive()
    }
}

impl PacketSpec {
    pub fn new(amplitude: Complex64, profile: Profile, history: History) -> Self {
        Self {
            amplitude,
            profile,
            history,
        }
    }

    /// Points move with velocity `k(X)/m`: `X(t') = X - (k(X)/m)(t - t')`.
    pub fn straight_line<K>(amplitude: Complex64, profile: Profile, k_at: K, mass: f64) -> Self
    where
        K: Fn(f64) -> f64 + Send + Sync + 'static,
    {
        let history: History = Arc::new(move |x, t, tp| x - k_at(x) / mass * (t - tp));
        Self::new(amplitude, profile, history)
    }

    /// Points leave `source` at time 0 and reach `X` at time `t`.
    pub fn from_source(amplitude: Complex64, profile: Profile, source: f64) -> Self {
        let history: History = Arc::new(move |x, t, tp| {
            if t > 0.0 {
                source + (x - source) * tp / t
            } else {
                x
            }
        });
        Self::new(amplitude, profile, history)
    }

    /// Points sit a fixed distance `offset` from where they are observed,
    /// as for the arm of an interferometer.
    pub fn with_offset(amplitude: Complex64, profile: Profile, offset: f64) -> Self {
        let history: History = Arc::new(move |x, _, _| x + offset);
        Self::new(amplitude, profile, history)
    }
}

/// `|X₁(t') - X₂(t')|` for two straight-line points that meet at `X` at time `t`,
/// with `X_n(t') = X - (k_n/m)(t - t')`.
pub fn packet_separation(x: f64, k1: f64, k2: f64, mass: f64, t: f64, t_prime: f64) -> Result<f64> {
    if !(t_prime >= 0.0 && t_prime <= t) {
        return Err(param(format!("t' = {t_prime} must lie in [0, {t}]")));
    }
    let x1 = x - k1 / mass * (t - t_prime);
    let x2 = x - k2 / mass * (t - t_prime);
    Ok((x1 - x2).abs())
}

fn exponent_once<F>(sep: &F, t: f64, params: &ClumpParams, n_quad: usize) -> Result<f64>
where
    F: Fn(f64) -> f64,
{
    let four_a2 = 4.0 * params.a * params.a;
    let v = integrate(|tp| -(-sep(tp).powi(2) / four_a2).exp_m1(), 0.0, t, n_quad)?;
    if !v.is_finite() {
        return Err(Error::Numeric("collapse exponent quadrature is not finite".into()));
    }
    Ok(params.collapse_scale() * v)
}

/// `λN² ∫₀ᵗ dt' [1 - exp(-sep(t')²/4a²)]` by Simpson's rule.
///
/// The quadrature is repeated at twice the resolution; the finer value is
/// returned, and a relative change above [`RICHARDSON_TOLERANCE`] is a
/// resolution error.
pub fn pair_exponent<F>(sep_fn: F, t: f64, params: &ClumpParams, n_quad: usize) -> Result<f64>
where
    F: Fn(f64) -> f64,
{
    if !(t >= 0.0) {
        return Err(param(format!("t must be non-negative, got {t}")));
    }
    if n_quad < 2 {
        return Err(param("n_quad must be at least 2"));
    }
    if t == 0.0 || params.collapse_scale() == 0.0 {
        return Ok(0.0);
    }
    let coarse = exponent_once(&sep_fn, t, params, n_quad)?;
    let fine = exponent_once(&sep_fn, t, params, 2 * n_quad)?;
    let scale = fine.abs().max(f64::MIN_POSITIVE);
    if (fine - coarse).abs() > RICHARDSON_TOLERANCE * scale {
        return Err(Error::Resolution(format!(
            "collapse exponent changed by {:e} relative when n_quad doubled from {n_quad}",
            (fine - coarse).abs() / scale
        )));
    }
    Ok(fine)
}

/// Ensemble probability density at `X` and time `t` with the default quadrature.
pub fn screen_density(x: f64, t: f64, packets: &[PacketSpec], params: &ClumpParams) -> Result<f64> {
    screen_density_with(x, t, packets, params, DEFAULT_N_QUAD)
}

/// `Σ c_n c_n'* φ_n φ_n'* exp(-E_nn')` with `E_nn'` from [`pair_exponent`].
pub fn screen_density_with(
    x: f64,
    t: f64,
    packets: &[PacketSpec],
    params: &ClumpParams,
    n_quad: usize,
) -> Result<f64> {
    if packets.is_empty() {
        return Err(param("at least one packet is required"));
    }
    let psi: Vec<Complex64> = packets.iter().map(|p| p.amplitude * (p.profile)(x, t)).collect();
    let mut total = Complex64::new(0.0, 0.0);
    let mut magnitude = 0.0;
    for (n, pn) in packets.iter().enumerate() {
        total += psi[n] * psi[n].conj();
        magnitude += psi[n].norm_sqr();
        for (m, pm) in packets.iter().enumerate().skip(n + 1) {
            let cross = psi[n] * psi[m].conj();
            if cross == Complex64::new(0.0, 0.0) {
                continue;
            }
            let sep = |tp: f64| ((pn.history)(x, t, tp) - (pm.history)(x, t, tp)).abs();
            let damp = (-pair_exponent(sep, t, params, n_quad)?).exp();
            // the (m, n) term is the conjugate of (n, m)
            total += (cross + cross.conj()) * damp;
            magnitude += 2.0 * cross.norm() * damp;
        }
    }
    if total.im.abs() > 1e-10 * magnitude.max(1.0) {
        return Err(Error::Numeric(format!("screen density has imaginary part {}", total.im)));
    }
    Ok(total.re)
}

/// Upward-port probability `(1/2)[1 - e^{-λN²t}]` of a Mach-Zehnder
/// interferometer whose arms are much further apart than `a`.
pub fn mach_zehnder_prob(t: f64, params: &ClumpParams) -> f64 {
    -0.5 * (-params.collapse_scale() * t).exp_m1()
}

/// The two packets reaching the upward port: amplitudes `±1/2`, a common
/// profile, and arms held `separation` apart.
pub fn mach_zehnder_packets(profile: Profile, separation: f64) -> Vec<PacketSpec> {
    vec![
        PacketSpec::with_offset(Complex64::new(0.5, 0.0), profile.clone(), separation / 2.0),
        PacketSpec::with_offset(Complex64::new(-0.5, 0.0), profile, -separation / 2.0),
    ]
}

/// Two-slit experiment in the small-angle regime.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SlitConfig {
    /// Half the slit separation; slits sit at `±b`.
    pub b: f64,
    /// Wave number.
    pub k: f64,
    /// Slit-to-screen distance.
    pub screen_distance: f64,
    pub params: ClumpParams,
    /// Single-slit pattern amplitude.
    pub amplitude: f64,
}

impl SlitConfig {
    pub fn new(b: f64, k: f64, screen_distance: f64, params: ClumpParams, amplitude: f64) -> Result<Self> {
        if !(b > 0.0) || !(k > 0.0) {
            return Err(param("slit half-separation and wave number must be positive"));
        }
        if !(screen_distance >= 100.0 * b) {
            return Err(param(format!(
                "screen distance {screen_distance} must be at least 100 b = {}",
                100.0 * b
            )));
        }
        if !amplitude.is_finite() {
            return Err(param("amplitude must be finite"));
        }
        Ok(Self {
            b,
            k,
            screen_distance,
            params,
            amplitude,
        })
    }

    /// Angular fringe period `π/(kb)`.
    pub fn fringe_period(&self) -> f64 {
        PI / (self.k * self.b)
    }
}

/// `1 - (√π/2x) erf x`, with its Maclaurin series below `x = 0.5`.
fn slit_factor(x: f64) -> f64 {
    if x < 0.5 {
        // Σ_{n≥1} (-1)^{n+1} x^{2n} / (n! (2n+1))
        let x2 = x * x;
        let mut pow = 1.0;
        let mut fact = 1.0;
        let mut sum = 0.0;
        for n in 1..40 {
            pow *= x2;
            fact *= n as f64;
            let term = pow / (fact * (2 * n + 1) as f64);
            sum += if n % 2 == 1 { term } else { -term };
            if term < 1e-18 * sum.abs() {
                break;
            }
        }
        sum
    } else {
        1.0 - PI.sqrt() / (2.0 * x) * erf(x)
    }
}

/// Decay rate of the two-slit cross term, `λN²[1 - (√π a/2b) erf(b/a)]`.
pub fn two_slit_rate(cfg: &SlitConfig) -> f64 {
    cfg.params.collapse_scale() * slit_factor(cfg.b / cfg.params.a)
}

/// `2A² cos²(kbθ) e^{-Γt} + A²(1 - e^{-Γt})`.
pub fn two_slit_intensity(theta: f64, t: f64, cfg: &SlitConfig) -> f64 {
    let a2 = cfg.amplitude * cfg.amplitude;
    let survive = (-two_slit_rate(cfg) * t).exp();
    2.0 * a2 * (cfg.k * cfg.b * theta).cos().powi(2) * survive - a2 * (-two_slit_rate(cfg) * t).exp_m1()
}

/// Packets from the two slits as seen at screen angle `θ = X/L`:
/// amplitudes `1/√2`, profiles `A e^{±ikbθ}`, straight lines from `±b`.
pub fn two_slit_packets(cfg: &SlitConfig) -> Vec<PacketSpec> {
    let c = Complex64::new(std::f64::consts::FRAC_1_SQRT_2, 0.0);
    [1.0, -1.0]
        .into_iter()
        .map(|sign| {
            let (amp, kb, l) = (cfg.amplitude, cfg.k * cfg.b, cfg.screen_distance);
            let profile: Profile = Arc::new(move |x, _| Complex64::from_polar(amp, -sign * kb * x / l));
            PacketSpec::from_source(c, profile, sign * cfg.b)
        })
        .collect()
}

/// Two-slit intensity at angle `θ` from the packet sum with quadrature
/// collapse exponents.
pub fn two_slit_intensity_quadrature(theta: f64, t: f64, cfg: &SlitConfig, n_quad: usize) -> Result<f64> {
    let packets = two_slit_packets(cfg);
    screen_density_with(theta * cfg.screen_distance, t, &packets, &cfg.params, n_quad)
}

/// `(I_max - I_min)/(I_max + I_min)` over one fringe period sampled at 64
/// points, a grid that contains both the bright (`θ = 0`) and dark
/// (`θ = π/2kb`) angles.
pub fn fringe_visibility(t: f64, cfg: &SlitConfig) -> f64 {
    let period = cfg.fringe_period();
    let samples: Vec<f64> = (0..64)
        .map(|i| two_slit_intensity(i as f64 * period / 64.0, t, cfg))
        .collect();
    let hi = samples.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lo = samples.iter().copied().fold(f64::INFINITY, f64::min);
    (hi - lo) / (hi + lo)
}
