//! Expansion of the position-indexed noise field in harmonic-oscillator
//! functions, and the operator family `Z_n(X)` it induces.
//!
//! With `u_n` the oscillator functions of length `a`, projecting a noise
//! field `w(x, t)` onto them gives independent white noises `v_n(t)`, and
//! the smeared mass density projects onto
//! `Z_n(X) = e^{-X²/4a²} (X/√2a)ⁿ/√(n!)`. Because `Σ_n Z_n(X)Z_n(X') =
//! e^{-(X-X')²/4a²}`, the collapse generator can be written as a sum of
//! double commutators with the `Z_n`; truncating at `n = 1` gives the
//! familiar `[X, [X, ρ]]` form.

use num_complex::Complex64;
use rand::Rng;
use rand_distr::StandardNormal;
use rustfft::FftPlanner;

use crate::clump_dynamics::{ClumpParams, GridDensityMatrix};
use crate::error::{param, Error, Result};
use crate::linalg::CMatrix;
use crate::stochastic::RngStream;

/// Default truncation order; the completeness tail is below `1e-10` for `|X| ≤ 2a`.
pub const DEFAULT_N_MAX: usize = 60;

/// Oscillator functions `u_0..=u_{n_max}` with length scale `a`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HermiteBasis {
    pub a: f64,
    pub n_max: usize,
}

impl HermiteBasis {
    pub fn new(a: f64, n_max: usize) -> Result<Self> {
        if !(a > 0.0) {
            return Err(param(format!("length scale must be positive, got {a}")));
        }
        Ok(Self { a, n_max })
    }

    /// `[u_0(x), ..., u_{n_max}(x)]`.
    pub fn values(&self, x: f64) -> Vec<f64> {
        oscillator_functions(self.n_max, x, self.a)
    }

    /// Gram matrix `Σ_j u_n(x_j) u_m(x_j) dx` on the uniform grid `x_j`.
    pub fn gram_matrix(&self, x0: f64, dx: f64, nx: usize) -> Vec<Vec<f64>> {
        let n = self.n_max + 1;
        let mut g = vec![vec![0.0; n]; n];
        for j in 0..nx {
            let u = self.values(x0 + j as f64 * dx);
            for p in 0..n {
                for q in p..n {
                    g[p][q] += u[p] * u[q] * dx;
                }
            }
        }
        for p in 0..n {
            for q in 0..p {
                g[p][q] = g[q][p];
            }
        }
        g
    }

    /// Shortest local wavelength of `u_{n_max}`, `2πa/√(2 n_max + 1)`.
    pub fn shortest_wavelength(&self) -> f64 {
        2.0 * std::f64::consts::PI * self.a / ((2 * self.n_max + 1) as f64).sqrt()
    }

    /// Classical turning point of `u_{n_max}`, `a√(2 n_max + 1)`.
    pub fn turning_point(&self) -> f64 {
        self.a * ((2 * self.n_max + 1) as f64).sqrt()
    }
}

/// Normalised recurrence `ψ_{n+1} = √(2/(n+1)) ξ ψ_n - √(n/(n+1)) ψ_{n-1}`,
/// scaled by `a^{-1/2}`.
fn oscillator_functions(n_max: usize, x: f64, a: f64) -> Vec<f64> {
    let xi = x / a;
    let mut out = Vec::with_capacity(n_max + 1);
    let p0 = std::f64::consts::PI.powf(-0.25) * (-0.5 * xi * xi).exp();
    out.push(p0);
    if n_max >= 1 {
        out.push(std::f64::consts::SQRT_2 * xi * p0);
    }
    for n in 1..n_max {
        let nf = n as f64;
        let next = (2.0 / (nf + 1.0)).sqrt() * xi * out[n] - (nf / (nf + 1.0)).sqrt() * out[n - 1];
        out.push(next);
    }
    let s = a.sqrt().recip();
    out.iter_mut().for_each(|v| *v *= s);
    out
}

/// `u_n(x) = C_n H_n(x/a) e^{-x²/2a²}`, `C_n = (π^{1/2} 2ⁿ n! a)^{-1/2}`.
pub fn hermite_u(n: usize, x: f64, a: f64) -> f64 {
    oscillator_functions(n, x, a)[n]
}

/// `ln n!` by direct summation.
fn ln_factorial(n: usize) -> f64 {
    (2..=n).map(|k| (k as f64).ln()).sum()
}

/// `Z_n(X) = e^{-X²/4a²} (X/√2a)ⁿ/√(n!)`, evaluated through logarithms.
pub fn z_n(n: usize, x: f64, a: f64) -> f64 {
    let gauss = -x * x / (4.0 * a * a);
    if n == 0 {
        return gauss.exp();
    }
    if x == 0.0 {
        return 0.0;
    }
    let s = x / (std::f64::consts::SQRT_2 * a);
    let log_mag = gauss + n as f64 * s.abs().ln() - 0.5 * ln_factorial(n);
    let sign = if s < 0.0 && n % 2 == 1 { -1.0 } else { 1.0 };
    sign * log_mag.exp()
}

/// `Z_0(X), ..., Z_{n_max}(X)`.
pub fn z_family(n_max: usize, x: f64, a: f64) -> Vec<f64> {
    (0..=n_max).map(|n| z_n(n, x, a)).collect()
}

/// `Σ_{n ≤ n_max} Z_n(X) Z_n(X')`; tends to `e^{-(X-X')²/4a²}`.
pub fn kernel_reconstruction(x: f64, x_prime: f64, n_max: usize, a: f64) -> f64 {
    z_family(n_max, x, a)
        .iter()
        .zip(z_family(n_max, x_prime, a))
        .map(|(p, q)| p * q)
        .sum()
}

/// Smeared mass-density profile `(πa²)^{-1/4} e^{-(x-X)²/2a²}` of a point at `X`.
pub fn smeared_density(x: f64, centre: f64, a: f64) -> f64 {
    (std::f64::consts::PI * a * a).powf(-0.25) * (-(x - centre).powi(2) / (2.0 * a * a)).exp()
}

/// `dρ/dt` with the collapse part truncated to orders `n ≤ n_max`:
/// `-(λN²/2) Σ_n [Z_n(X) - Z_n(X')]² ρ(X, X')`, plus `-i[P²/2m, ρ]` when
/// `include_kinetic` is set (spectral second derivatives on both indices).
pub fn truncated_generator(
    rho: &GridDensityMatrix,
    n_max: usize,
    params: &ClumpParams,
    include_kinetic: bool,
) -> CMatrix {
    let grid = *rho.grid();
    let zs: Vec<Vec<f64>> = grid.points().iter().map(|&x| z_family(n_max, x, params.a)).collect();
    let half = 0.5 * params.collapse_scale();
    let entries = rho.entries();
    let mut rate = CMatrix::from_fn(grid.n, grid.n, |i, j| {
        let s: f64 = zs[i].iter().zip(&zs[j]).map(|(p, q)| (p - q).powi(2)).sum();
        entries[(i, j)] * (-half * s)
    });
    if include_kinetic {
        rate += kinetic_rate(entries, &grid.wave_numbers(), params.total_mass());
    }
    rate
}

/// Collapse-only rate of the full kernel, `-λN²[1 - e^{-(X-X')²/4a²}] ρ(X, X')`.
pub fn exact_collapse_rate(rho: &GridDensityMatrix, params: &ClumpParams) -> CMatrix {
    let grid = *rho.grid();
    CMatrix::from_fn(grid.n, grid.n, |i, j| {
        let d = grid.x(i) - grid.x(j);
        rho.entries()[(i, j)] * (params.collapse_scale() * (-d * d / (4.0 * params.a * params.a)).exp_m1())
    })
}

/// Leading-order rate `-(λN²/4a²)(X - X')² ρ(X, X')`.
pub fn quadratic_collapse_rate(rho: &GridDensityMatrix, params: &ClumpParams) -> CMatrix {
    let grid = *rho.grid();
    let c = params.collapse_scale() / (4.0 * params.a * params.a);
    CMatrix::from_fn(grid.n, grid.n, |i, j| rho.entries()[(i, j)] * (-c * (grid.x(i) - grid.x(j)).powi(2)))
}

/// Collapse-only flow of the truncated generator for time `t`; the generator
/// is entrywise, so the flow is the entrywise exponential.
pub fn evolve_truncated(rho: &GridDensityMatrix, n_max: usize, params: &ClumpParams, t: f64) -> Result<GridDensityMatrix> {
    if !(t >= 0.0) {
        return Err(param(format!("t must be non-negative, got {t}")));
    }
    let grid = *rho.grid();
    let zs: Vec<Vec<f64>> = grid.points().iter().map(|&x| z_family(n_max, x, params.a)).collect();
    let half = 0.5 * params.collapse_scale();
    let entries = CMatrix::from_fn(grid.n, grid.n, |i, j| {
        let s: f64 = zs[i].iter().zip(&zs[j]).map(|(p, q)| (p - q).powi(2)).sum();
        rho.entries()[(i, j)] * (-half * s * t).exp()
    });
    GridDensityMatrix::new(grid, entries)
}

// (i/2m)(∂²_X - ∂²_X') ρ
fn kinetic_rate(entries: &CMatrix, k: &[f64], mass: f64) -> CMatrix {
    let n = entries.nrows();
    let mut planner = FftPlanner::new();
    let fwd = planner.plan_fft_forward(n);
    let inv = planner.plan_fft_inverse(n);
    let second = |m: &CMatrix| {
        let mut out = m.clone();
        for col in out.as_mut_slice().chunks_exact_mut(n) {
            fwd.process(col);
            for (z, kk) in col.iter_mut().zip(k) {
                *z *= -kk * kk / n as f64;
            }
            inv.process(col);
        }
        out
    };
    let dxx = second(entries);
    let dyy = second(&entries.transpose()).transpose();
    (dxx - dyy) * Complex64::new(0.0, 0.5 / mass)
}

/// Real field `w(x_j, t_k)` on a uniform space-time lattice, stored by time slice.
#[derive(Debug, Clone, PartialEq)]
pub struct SampledField {
    pub x0: f64,
    pub dx: f64,
    pub nx: usize,
    pub dt: f64,
    /// `values[k * nx + j] = w(x0 + j dx, k dt)`.
    pub values: Vec<f64>,
}

impl SampledField {
    pub fn new(x0: f64, dx: f64, nx: usize, dt: f64, values: Vec<f64>) -> Result<Self> {
        if !(dx > 0.0) || !(dt > 0.0) || nx == 0 {
            return Err(param("field lattice needs positive spacings and at least one point"));
        }
        if values.len() % nx != 0 {
            return Err(param("field values do not fill whole time slices"));
        }
        Ok(Self {
            x0,
            dx,
            nx,
            dt,
            values,
        })
    }

    /// Evaluate `f(x, t)` on the lattice.
    pub fn from_fn<F: Fn(f64, f64) -> f64>(x0: f64, dx: f64, nx: usize, dt: f64, nt: usize, f: F) -> Result<Self> {
        let values = (0..nt)
            .flat_map(|k| (0..nx).map(move |j| (k, j)))
            .map(|(k, j)| f(x0 + j as f64 * dx, k as f64 * dt))
            .collect();
        Self::new(x0, dx, nx, dt, values)
    }

    /// Lattice white noise with variance `λ/(dx·dt)` per cell.
    pub fn white(x0: f64, dx: f64, nx: usize, dt: f64, nt: usize, lambda: f64, stream: RngStream) -> Result<Self> {
        let sd = (lambda / (dx * dt)).sqrt();
        let mut rng = stream.rng();
        let values = (0..nt * nx).map(|_| sd * rng.sample::<f64, _>(StandardNormal)).collect();
        Self::new(x0, dx, nx, dt, values)
    }

    pub fn n_times(&self) -> usize {
        self.values.len() / self.nx
    }

    pub fn x(&self, j: usize) -> f64 {
        self.x0 + j as f64 * self.dx
    }
}

/// `v_n(t_k) = Σ_j w(x_j, t_k) u_n(x_j) dx` for `n ≤ n_max`, indexed `[n][k]`.
///
/// The lattice must resolve `u_{n_max}`: at least 8 points per shortest
/// local wavelength, and coverage of `±(turning point + 3a)`.
pub fn project_noise(field: &SampledField, basis: &HermiteBasis) -> Result<Vec<Vec<f64>>> {
    let per_wave = basis.shortest_wavelength() / field.dx;
    if per_wave < 8.0 {
        return Err(Error::Resolution(format!(
            "{per_wave:.2} points per oscillation of u_{}, need at least 8",
            basis.n_max
        )));
    }
    let reach = basis.turning_point() + 3.0 * basis.a;
    let (lo, hi) = (field.x(0), field.x(field.nx - 1));
    if lo > -reach || hi < reach {
        return Err(Error::Resolution(format!(
            "lattice [{lo}, {hi}] does not cover ±{reach} needed by u_{}",
            basis.n_max
        )));
    }
    let table: Vec<Vec<f64>> = (0..field.nx).map(|j| basis.values(field.x(j))).collect();
    let nt = field.n_times();
    let mut out = vec![vec![0.0; nt]; basis.n_max + 1];
    for (k, slice) in field.values.chunks_exact(field.nx).enumerate() {
        for (w, u) in slice.iter().zip(&table) {
            for (n, un) in u.iter().enumerate() {
                out[n][k] += w * un * field.dx;
            }
        }
    }
    Ok(out)
}
