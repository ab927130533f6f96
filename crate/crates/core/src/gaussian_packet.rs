//! The exactly solvable small-packet problem.
//!
//! A clump much smaller than `a` whose centre-of-mass wave function is the
//! Gaussian `exp(-A X² + B X + C)`. The width parameter `A` obeys a
//! deterministic Riccati equation with a stable fixed point `A_eq`; the
//! linear parameter `B` is driven by the noise. Once `A = A_eq`, sampling the
//! post-collapse noise `v` as plain white noise gives trajectories with unit
//! Born weight, and `⟨X⟩`, `⟨P⟩` follow from `B̃(t) = ∫v` in closed form.

use num_complex::Complex64;
use rayon::prelude::*;

use crate::clump_dynamics::ClumpParams;
use crate::error::{input, param, Result};
use crate::stochastic::{sample_noise_path, NoisePath, RngStream};

/// Quantities derived from [`ClumpParams`] that the packet equations use.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DerivedParams {
    /// `λ̃ = λN/(√2 a)`.
    pub lambda_tilde: f64,
    /// `α = λ̃/√(mλ)`, the inverse relaxation time.
    pub alpha: f64,
    /// Equilibrium width parameter `mα(1-i)/2`.
    pub a_eq: Complex64,
}

pub fn derived_params(params: &ClumpParams) -> DerivedParams {
    let alpha = params.alpha();
    DerivedParams {
        lambda_tilde: params.lambda_tilde(),
        alpha,
        a_eq: Complex64::new(1.0, -1.0) * (params.total_mass() * alpha / 2.0),
    }
}

/// `1/√(2mα)`, the equilibrium position spread.
pub fn equilibrium_spread(params: &ClumpParams) -> f64 {
    (2.0 * params.total_mass() * params.alpha()).sqrt().recip()
}

/// Gaussian packet `exp(-A X² + B X + C)`; `C` is never needed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussianPacketState {
    pub a: Complex64,
    pub b: Complex64,
    pub params: ClumpParams,
}

impl GaussianPacketState {
    pub fn new(a: Complex64, b: Complex64, params: ClumpParams) -> Result<Self> {
        if !(a.re > 0.0) {
            return Err(input(format!("Re A must be positive, got {a}")));
        }
        Ok(Self { a, b, params })
    }

    /// Packet centred at the origin with the equilibrium width.
    pub fn equilibrium(params: ClumpParams) -> Self {
        Self {
            a: derived_params(&params).a_eq,
            b: Complex64::new(0.0, 0.0),
            params,
        }
    }

    /// `⟨X⟩ = (B + B*)/(2(A + A*))`.
    pub fn mean_x(&self) -> f64 {
        self.b.re / (2.0 * self.a.re)
    }

    /// `⟨X²⟩ - ⟨X⟩² = 1/(2(A + A*))`.
    pub fn var_x(&self) -> f64 {
        1.0 / (4.0 * self.a.re)
    }

    /// Right-hand side of the width equation, `-(2i/m)A² + λ̃²/λ`.
    pub fn width_rate(&self) -> Complex64 {
        width_rate(self.a, &self.params)
    }
}

/// `-(2i/m)A² + λ̃²/λ`, the right-hand side of the width equation.
pub fn width_rate(a: Complex64, params: &ClumpParams) -> Complex64 {
    let lt = params.lambda_tilde();
    Complex64::new(0.0, -2.0 / params.total_mass()) * a * a + lt * lt / params.lambda
}

/// Closed-form solution of the width equation starting from `A(0) = a0`.
pub fn riccati_a(t: f64, a0: Complex64, params: &ClumpParams) -> Result<Complex64> {
    let d = derived_params(params);
    if !(a0.re > 0.0) {
        return Err(input(format!("Re A0 must be positive, got {a0}")));
    }
    let denom = d.a_eq + a0;
    if denom.norm() <= 1e-14 * d.a_eq.norm() {
        return Err(input("A0 = -A_eq is a pole of the width solution"));
    }
    let k = (d.a_eq - a0) / denom;
    // Written with the decaying exponential only, so large t cannot overflow.
    let decay = (Complex64::new(-2.0 * d.alpha, -2.0 * d.alpha) * t).exp();
    let kd = k * decay;
    Ok(d.a_eq * (1.0 - kd) / (1.0 + kd))
}

fn check_pair(a: &NoisePath, b: &NoisePath) -> Result<()> {
    if a.dt != b.dt || a.len() != b.len() {
        return Err(input(format!(
            "noise paths differ: dt {} vs {}, length {} vs {}",
            a.dt,
            b.dt,
            a.len(),
            b.len()
        )));
    }
    Ok(())
}

/// Post-collapse noise from raw noise:
/// `v = w - 2α ∫ w(t') e^{-α(t-t')} cos α(t-t') dt'`.
///
/// Discretised on increments with a strictly left-endpoint sum, so the map
/// is unit lower-triangular.
pub fn v_from_w(w: &NoisePath, params: &ClumpParams) -> NoisePath {
    let alpha = params.alpha();
    let dt = w.dt;
    let rot = (Complex64::new(-alpha, -alpha) * dt).exp();
    let mut s = Complex64::new(0.0, 0.0);
    let increments = w
        .increments
        .iter()
        .map(|&dw| {
            let dv = dw - 2.0 * alpha * dt * s.re;
            s = rot * (s + dw);
            dv
        })
        .collect();
    NoisePath {
        dt,
        lambda: w.lambda,
        increments,
    }
}

/// Exact inverse of [`v_from_w`], by forward substitution through the
/// same triangular system.
pub fn w_from_v(v: &NoisePath, params: &ClumpParams) -> NoisePath {
    let alpha = params.alpha();
    let dt = v.dt;
    let rot = (Complex64::new(-alpha, -alpha) * dt).exp();
    let mut s = Complex64::new(0.0, 0.0);
    let increments = v
        .increments
        .iter()
        .map(|&dv| {
            let dw = dv + 2.0 * alpha * dt * s.re;
            s = rot * (s + dw);
            dw
        })
        .collect();
    NoisePath {
        dt,
        lambda: v.lambda,
        increments,
    }
}

/// Raw noise from the closed-form inverse kernel,
/// `w = v + 2α ∫ v(t₁)[1 + α(t - t₁)] dt₁`, as a left-endpoint sum.
///
/// Agrees with [`w_from_v`] up to `O(dt)`.
pub fn w_from_v_kernel(v: &NoisePath, params: &ClumpParams) -> NoisePath {
    let alpha = params.alpha();
    let dt = v.dt;
    let mut sum = 0.0;
    let mut moment = 0.0;
    let increments = v
        .increments
        .iter()
        .enumerate()
        .map(|(k, &dv)| {
            let t = k as f64 * dt;
            let dw = dv + 2.0 * alpha * dt * ((1.0 + alpha * t) * sum - alpha * moment);
            sum += dv;
            moment += dv * t;
            dw
        })
        .collect();
    NoisePath {
        dt,
        lambda: v.lambda,
        increments,
    }
}

/// `max_k |v_from_w(w)_k - v_k|`.
pub fn transform_residual(v: &NoisePath, w: &NoisePath, params: &ClumpParams) -> Result<f64> {
    check_pair(v, w)?;
    let back = v_from_w(w, params);
    Ok(back
        .increments
        .iter()
        .zip(&v.increments)
        .fold(0.0, |acc, (a, b)| acc.max((a - b).abs())))
}

/// One packet history on the lattice `t_k = k·dt`, `k = 0..=n`.
#[derive(Debug, Clone, PartialEq)]
pub struct PacketTrajectory {
    pub times: Vec<f64>,
    pub mean_x: Vec<f64>,
    pub mean_p: Vec<f64>,
    pub var_x: Vec<f64>,
    pub v_path: NoisePath,
    pub w_path: NoisePath,
    /// `B̃(t_k) = ∫₀^{t_k} v`.
    pub b_tilde: Vec<f64>,
}

/// Running trapezoid integral of samples on a uniform lattice, starting at 0.
fn cumulative_trapezoid(values: &[f64], dt: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(values.len());
    let mut acc = 0.0;
    out.push(acc);
    for pair in values.windows(2) {
        acc += 0.5 * dt * (pair[0] + pair[1]);
        out.push(acc);
    }
    out
}

/// Build the trajectory that a given post-collapse noise `v` produces for a
/// packet held at the equilibrium width.
pub fn packet_from_v(params: &ClumpParams, v: NoisePath) -> Result<PacketTrajectory> {
    if !(params.lambda > 0.0) {
        return Err(param("packet trajectories need lambda > 0"));
    }
    let d = derived_params(params);
    let b_tilde = v.cumulative();
    let integral = cumulative_trapezoid(&b_tilde, v.dt);
    let x_scale = (params.total_mass() * params.lambda).sqrt().recip();
    let p_scale = d.lambda_tilde / params.lambda;
    let mean_x = b_tilde
        .iter()
        .zip(&integral)
        .map(|(b, i)| x_scale * (b + d.alpha * i))
        .collect();
    let mean_p = b_tilde.iter().map(|b| p_scale * b).collect();
    let width = GaussianPacketState::equilibrium(*params).var_x();
    let w_path = w_from_v(&v, params);
    Ok(PacketTrajectory {
        times: v.times(),
        mean_x,
        mean_p,
        var_x: vec![width; b_tilde.len()],
        v_path: v,
        w_path,
        b_tilde,
    })
}

fn packet_steps(params: &ClumpParams, total: f64, dt: f64) -> Result<usize> {
    if !(total > 0.0) {
        return Err(param(format!("T must be positive, got {total}")));
    }
    if !(dt > 0.0) {
        return Err(param(format!("dt must be positive, got {dt}")));
    }
    if !(params.lambda > 0.0) {
        return Err(param("packet trajectories need lambda > 0"));
    }
    let limit = 0.01 / params.alpha();
    if dt > limit * (1.0 + 1e-12) {
        return Err(param(format!("dt = {dt} exceeds 0.01/alpha = {limit}")));
    }
    Ok(((total / dt) - 1e-9).ceil().max(1.0) as usize)
}

/// Sample `v` as white noise with increment variance `λ·dt` and build the
/// trajectory up to `total`. The step is shrunk so it divides `total`.
pub fn run_packet_trajectory(
    params: &ClumpParams,
    total: f64,
    dt: f64,
    stream: RngStream,
) -> Result<PacketTrajectory> {
    let n = packet_steps(params, total, dt)?;
    let v = sample_noise_path(total / n as f64, n, params.lambda, stream)?;
    packet_from_v(params, v)
}

/// Ensemble mean of `⟨X²⟩` at time `t`: `1/(2mα) + (1/m)[t + αt² + α²t³/3]`.
pub fn ensemble_msd(params: &ClumpParams, t: f64) -> f64 {
    let alpha = params.alpha();
    let m = params.total_mass();
    1.0 / (2.0 * m * alpha) + (t + alpha * t * t + alpha * alpha * t.powi(3) / 3.0) / m
}

/// Internal step for [`msd_monte_carlo`]: a thousand steps per `1/α`.
pub fn msd_step(params: &ClumpParams, t: f64) -> f64 {
    t / (1000.0 * params.alpha() * t).ceil()
}

/// Final `⟨X⟩(t)` of trajectories `0..n_traj` on `master_seed`, in index order.
pub fn final_mean_x_samples(params: &ClumpParams, t: f64, n_traj: usize, master_seed: u64) -> Result<Vec<f64>> {
    if n_traj == 0 {
        return Err(param("n_traj must be at least 1"));
    }
    let dt = msd_step(params, t);
    (0..n_traj as u64)
        .into_par_iter()
        .map(|i| {
            run_packet_trajectory(params, t, dt, RngStream::new(master_seed, i))
                .map(|tr| *tr.mean_x.last().expect("trajectory has at least one point"))
        })
        .collect()
}

/// Monte Carlo estimate of the ensemble `⟨X²⟩(t) = ⟨X⟩² + 1/(2(A + A*))`.
pub fn msd_monte_carlo(params: &ClumpParams, t: f64, n_traj: usize, master_seed: u64) -> Result<f64> {
    if !(t >= 0.0) {
        return Err(param(format!("t must be non-negative, got {t}")));
    }
    if n_traj == 0 {
        return Err(param("n_traj must be at least 1"));
    }
    let width = GaussianPacketState::equilibrium(*params).var_x();
    if t == 0.0 {
        return Ok(width);
    }
    let xs = final_mean_x_samples(params, t, n_traj, master_seed)?;
    let sq: f64 = xs.iter().map(|x| x * x).sum();
    Ok(sq / n_traj as f64 + width)
}

/// `⟨X⟩(t_k)` obtained by integrating the linear-parameter equation
/// `dB/dt = -α(1+i)B + (λ̃/λ)w` with `w = v + 2αB̃ + 2α²∫B̃`, reading `v` as
/// constant on each step, then `⟨X⟩ = Re B/(mα)`.
///
/// Uses `substeps` RK4 steps per lattice step. This is an independent route
/// to the closed-form `mean_x` of [`packet_from_v`].
pub fn mean_x_via_linear_parameter(params: &ClumpParams, v: &NoisePath, substeps: usize) -> Result<Vec<f64>> {
    if substeps == 0 {
        return Err(param("substeps must be at least 1"));
    }
    if !(params.lambda > 0.0) {
        return Err(param("packet trajectories need lambda > 0"));
    }
    let d = derived_params(params);
    let alpha = d.alpha;
    let gain = d.lambda_tilde / params.lambda;
    let rate = Complex64::new(-alpha, -alpha);
    let h = v.dt / substeps as f64;
    let scale = 1.0 / (params.total_mass() * alpha);

    let mut b = Complex64::new(0.0, 0.0);
    let mut bt = 0.0;
    let mut integral = 0.0;
    let mut out = Vec::with_capacity(v.len() + 1);
    out.push(0.0);
    for &dv in &v.increments {
        let vk = dv / v.dt;
        let (bt0, i0) = (bt, integral);
        let forcing = |s: f64| vk + 2.0 * alpha * (bt0 + vk * s) + 2.0 * alpha * alpha * (i0 + bt0 * s + 0.5 * vk * s * s);
        let f = |s: f64, y: Complex64| rate * y + gain * forcing(s);
        for j in 0..substeps {
            let s = j as f64 * h;
            let k1 = f(s, b);
            let k2 = f(s + 0.5 * h, b + k1 * (0.5 * h));
            let k3 = f(s + 0.5 * h, b + k2 * (0.5 * h));
            let k4 = f(s + h, b + k3 * h);
            b += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
        }
        integral += v.dt * (bt + 0.5 * dv);
        bt += dv;
        out.push(b.re * scale);
    }
    Ok(out)
}

/// `⟨X⟩` at the left end of each step from the noise pair,
/// `(w - v)/(2λ̃)` with white-noise readings of the increments.
pub fn mean_x_from_noise_pair(params: &ClumpParams, v: &NoisePath, w: &NoisePath) -> Result<Vec<f64>> {
    check_pair(v, w)?;
    let lt = params.lambda_tilde();
    Ok(w.white_noise()
        .iter()
        .zip(v.white_noise())
        .map(|(wk, vk)| (wk - vk) / (2.0 * lt))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stochastic::{mean_and_se, sample_variance};

    fn unit() -> ClumpParams {
        ClumpParams::dimensionless()
    }

    fn rel(a: f64, b: f64) -> f64 {
        (a - b).abs() / b.abs()
    }

    #[test]
    fn derived_dimensionless() {
        let d = derived_params(&unit());
        let r = std::f64::consts::FRAC_1_SQRT_2;
        assert!((d.lambda_tilde - r).abs() < 1e-15);
        assert!((d.alpha - r).abs() < 1e-15);
        let expect = Complex64::new(1.0, -1.0) / (2.0 * std::f64::consts::SQRT_2);
        assert!((d.a_eq - expect).norm() < 1e-15);
        // α computed both ways
        let p = ClumpParams::new(7, 2.5, 0.3, 1.7).unwrap();
        let direct = p.lambda_tilde() / (p.total_mass() * p.lambda).sqrt();
        assert!(rel(p.alpha(), direct) < 1e-14);
    }

    #[test]
    fn equilibrium_is_stationary() {
        for p in [unit(), ClumpParams::new(4, 3.0, 0.2, 0.5).unwrap(), ClumpParams::grw(1).unwrap()] {
            let s = GaussianPacketState::equilibrium(p);
            let lt = p.lambda_tilde();
            assert!(s.width_rate().norm() <= 1e-10 * lt * lt / p.lambda);
        }
    }

    #[test]
    fn grw_headline_scales() {
        let p = ClumpParams::grw(1).unwrap();
        let spread = equilibrium_spread(&p);
        assert!((spread / 4.0 - 1.0).abs() < 0.1, "spread {spread}");
        let tau = 1.0 / p.alpha();
        assert!((tau / 5e4 - 1.0).abs() < 0.2, "tau {tau}");
    }

    #[test]
    fn riccati_fixed_point_and_relaxation() {
        let p = unit();
        let d = derived_params(&p);
        for t in [0.0, 0.3, 5.0, 1e3] {
            assert!((riccati_a(t, d.a_eq, &p).unwrap() - d.a_eq).norm() < 1e-15);
        }
        for a0 in [Complex64::new(5.0, 0.0), Complex64::new(0.01, 3.0), Complex64::new(0.2, -0.9)] {
            assert!((riccati_a(0.0, a0, &p).unwrap() - a0).norm() < 1e-14 * a0.norm());
            let late = riccati_a(20.0 / d.alpha, a0, &p).unwrap();
            assert!((late - d.a_eq).norm() / d.a_eq.norm() < 1e-6);
        }
        assert!(riccati_a(1.0, -d.a_eq, &p).is_err());
        assert!(riccati_a(1.0, Complex64::new(-1.0, 0.0), &p).is_err());
    }

    #[test]
    fn riccati_satisfies_width_equation() {
        let p = ClumpParams::new(3, 1.5, 0.8, 1.2).unwrap();
        let alpha = p.alpha();
        let a0 = Complex64::new(4.0, 1.0);
        let t = 1.0 / alpha;
        let h = 1e-4 / alpha;
        let fd = (riccati_a(t + h, a0, &p).unwrap() - riccati_a(t - h, a0, &p).unwrap()) / (2.0 * h);
        let rhs = width_rate(riccati_a(t, a0, &p).unwrap(), &p);
        assert!((fd - rhs).norm() / rhs.norm() < 1e-6);
    }

    #[test]
    fn riccati_decay_rate_is_two_alpha() {
        let p = unit();
        let d = derived_params(&p);
        let a0 = Complex64::new(3.0, 0.5);
        let ts: Vec<f64> = (0..40).map(|i| (2.0 + 0.15 * i as f64) / d.alpha).collect();
        let ys: Vec<f64> = ts
            .iter()
            .map(|&t| (riccati_a(t, a0, &p).unwrap() - d.a_eq).norm().ln())
            .collect();
        let n = ts.len() as f64;
        let mt = ts.iter().sum::<f64>() / n;
        let my = ys.iter().sum::<f64>() / n;
        let slope = ts.iter().zip(&ys).map(|(t, y)| (t - mt) * (y - my)).sum::<f64>()
            / ts.iter().map(|t| (t - mt).powi(2)).sum::<f64>();
        assert!(rel(-slope, 2.0 * d.alpha) < 0.02, "slope {slope}");
        for w in ys.windows(2) {
            assert!(w[1] < w[0]);
        }
    }

    fn path(dt: f64, inc: Vec<f64>) -> NoisePath {
        NoisePath::new(dt, 1.0, inc).unwrap()
    }

    #[test]
    fn transform_trivial_cases() {
        let p = unit();
        let zero = path(0.01, vec![0.0; 50]);
        assert!(v_from_w(&zero, &p).increments.iter().all(|&x| x == 0.0));
        let free = ClumpParams::new(1, 1.0, 0.0, 1.0).unwrap();
        let w = sample_noise_path(0.01, 100, 1.0, RngStream::new(3, 0)).unwrap();
        assert_eq!(v_from_w(&w, &free), w);
        assert_eq!(w_from_v(&w, &free), w);
    }

    #[test]
    fn transform_round_trip() {
        let p = ClumpParams::new(2, 1.0, 1.0, 0.7).unwrap();
        let w = sample_noise_path(0.002, 5000, 1.0, RngStream::new(11, 4)).unwrap();
        let v = v_from_w(&w, &p);
        let back = w_from_v(&v, &p);
        let dev = back.increments.iter().zip(&w.increments).fold(0.0f64, |a, (x, y)| a.max((x - y).abs()));
        assert!(dev < 1e-10, "{dev}");
        assert!(transform_residual(&v, &w, &p).unwrap() < 1e-10);
        let other = path(0.001, vec![0.0; 5000]);
        assert!(transform_residual(&v, &other, &p).is_err());
    }

    #[test]
    fn transform_is_unit_lower_triangular() {
        let p = unit();
        let n = 12;
        for j in 0..n {
            let mut e = vec![0.0; n];
            e[j] = 1.0;
            let col = v_from_w(&path(0.05, e), &p).increments;
            for (i, &x) in col.iter().enumerate() {
                if i < j {
                    assert_eq!(x, 0.0);
                } else if i == j {
                    assert_eq!(x, 1.0);
                }
            }
            assert!(col[j + 1..].iter().any(|&x| x != 0.0) || j == n - 1);
        }
    }

    #[test]
    fn kernel_inverse_is_first_order() {
        let p = unit();
        let total = 2.0;
        let mut errs = Vec::new();
        for n in [500usize, 1000, 2000] {
            // smooth v, so the kernel sum is a plain quadrature
            let dt = total / n as f64;
            let v = path(dt, (0..n).map(|k| (k as f64 * dt).sin() * dt).collect());
            let exact = w_from_v(&v, &p);
            let kern = w_from_v_kernel(&v, &p);
            let err = exact
                .white_noise()
                .iter()
                .zip(kern.white_noise())
                .fold(0.0f64, |a, (x, y)| a.max((x - y).abs()));
            errs.push(err);
        }
        assert!(errs[0] / errs[1] > 1.8 && errs[1] / errs[2] > 1.8, "{errs:?}");
        assert!(errs[2] < 1e-2);
    }

    #[test]
    fn zero_noise_packet_stays_put() {
        let p = unit();
        let tr = packet_from_v(&p, path(0.005, vec![0.0; 400])).unwrap();
        assert!(tr.mean_x.iter().all(|&x| x == 0.0));
        assert!(tr.mean_p.iter().all(|&x| x == 0.0));
        assert_eq!(tr.times.len(), 401);
    }

    #[test]
    fn trajectory_invariants() {
        let p = ClumpParams::new(2, 1.0, 1.0, 1.0).unwrap();
        let width = 1.0 / (2.0 * p.total_mass() * p.alpha());
        let a = run_packet_trajectory(&p, 1.0, 1e-3, RngStream::new(1, 0)).unwrap();
        let b = run_packet_trajectory(&p, 1.0, 1e-3, RngStream::new(1, 1)).unwrap();
        assert_eq!(a.var_x, b.var_x);
        assert!(rel(a.var_x[0], width) < 1e-14);
        let lt = p.lambda_tilde();
        for (pk, bk) in a.mean_p.iter().zip(&a.b_tilde) {
            assert!((pk - lt / p.lambda * bk).abs() < 1e-12);
        }
        assert!(run_packet_trajectory(&p, 1.0, 0.1, RngStream::new(1, 0)).is_err());
        let frozen = ClumpParams::new(1, 1.0, 0.0, 1.0).unwrap();
        assert!(run_packet_trajectory(&frozen, 1.0, 1e-3, RngStream::new(1, 0)).is_err());
    }

    #[test]
    fn momentum_is_brownian() {
        let p = unit();
        let total = 1.0;
        let ps: Vec<f64> = (0..10_000u64)
            .into_par_iter()
            .map(|i| *run_packet_trajectory(&p, total, 5e-3, RngStream::new(77, i)).unwrap().mean_p.last().unwrap())
            .collect();
        let (mean, se) = mean_and_se(&ps);
        assert!(mean.abs() < 5.0 * se);
        let lt = p.lambda_tilde();
        assert!(rel(sample_variance(&ps), lt * lt / p.lambda * total) < 0.05);
    }

    #[test]
    fn two_routes_to_mean_position_agree() {
        let p = ClumpParams::new(3, 1.0, 1.0, 0.8).unwrap();
        let tr = run_packet_trajectory(&p, 2.0 / p.alpha(), 1e-3 / p.alpha(), RngStream::new(5, 2)).unwrap();
        let alt = mean_x_via_linear_parameter(&p, &tr.v_path, 4).unwrap();
        let scale = tr.mean_x.iter().fold(0.0f64, |a, x| a.max(x.abs()));
        for (x, y) in tr.mean_x.iter().zip(&alt) {
            assert!((x - y).abs() <= 1e-6 * scale, "{x} vs {y}");
        }
    }

    #[test]
    fn noise_pair_reading_is_first_order() {
        let p = unit();
        let total = 1.0;
        let mut errs = Vec::new();
        for n in [1000usize, 4000] {
            let dt = total / n as f64;
            // same Brownian path sampled at two resolutions
            let fine = sample_noise_path(total / 4000.0, 4000, 1.0, RngStream::new(9, 0)).unwrap();
            let inc: Vec<f64> = fine.increments.chunks(4000 / n).map(|c| c.iter().sum()).collect();
            let v = path(dt, inc);
            let tr = packet_from_v(&p, v).unwrap();
            let pair = mean_x_from_noise_pair(&p, &tr.v_path, &tr.w_path).unwrap();
            let err = pair.iter().zip(&tr.mean_x).fold(0.0f64, |a, (x, y)| a.max((x - y).abs()));
            errs.push((err, dt));
        }
        for (err, dt) in &errs {
            assert!(*err < 10.0 * dt.sqrt(), "{err} at dt {dt}");
        }
        assert!(errs[1].0 < errs[0].0);
    }

    #[test]
    fn msd_closed_form() {
        let p = unit();
        assert!((ensemble_msd(&p, 1.0) - 2.58088).abs() < 1e-5);
        assert!(rel(ensemble_msd(&p, 0.0), 1.0 / (2.0 * p.alpha())) < 1e-15);
        // msd / (α²t³/3m) = 1 + 3/(αt) + 3/(αt)² on top of the width term
        let a = p.alpha();
        for at in [100.0, 400.0] {
            let t = at / a;
            let cubic = a * a * t.powi(3) / (3.0 * p.total_mass());
            let width = 1.0 / (2.0 * p.total_mass() * a);
            let expect = 1.0 + 3.0 / at + 3.0 / (at * at) + width / cubic;
            assert!(rel(ensemble_msd(&p, t) / cubic, expect) < 1e-12);
        }
        assert!(rel(ensemble_msd(&p, 400.0 / a), a * a * (400.0 / a).powi(3) / 3.0) < 0.01);
    }

    #[test]
    fn msd_monte_carlo_matches_closed_form() {
        let p = unit();
        let a = p.alpha();
        assert_eq!(msd_monte_carlo(&p, 0.0, 10, 1).unwrap(), 1.0 / (2.0 * p.total_mass() * a));
        for t in [1.0 / a, 3.0 / a] {
            let mc = msd_monte_carlo(&p, t, 10_000, 2024).unwrap();
            assert!(rel(mc, ensemble_msd(&p, t)) < 0.05, "t = {t}: {mc}");
        }
    }
}
