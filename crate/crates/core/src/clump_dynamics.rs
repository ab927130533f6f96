//! Centre-of-mass dynamics of a small rigid clump of `N` nucleons.
//!
//! For a clump smaller than the smearing length `a`, the collapse part of
//! the master equation acts on the position density matrix as the entrywise
//! damping rate `λN²[1 - exp(-(X-X')²/4a²)]`. The kinetic part is the free
//! Hamiltonian `P²/2m` with `m = N·M`.

use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::error::{input, param, Result};
use crate::linalg::{hermiticity_defect, CMatrix};

/// Nucleon mass divided by ħ, in s/cm².
pub const NUCLEON_MASS_OVER_HBAR: f64 = 1.59e3;
/// Ghirardi-Rimini-Weber collapse rate, 1/s.
pub const GRW_LAMBDA: f64 = 1e-16;
/// Ghirardi-Rimini-Weber smearing length, cm.
pub const GRW_A: f64 = 1e-5;
/// Adler's larger collapse rate, 1/s.
pub const ADLER_LAMBDA: f64 = 1e-11;

/// Physical parameters of a clump.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClumpParams {
    /// Nucleon count `N`.
    pub n_nucleons: u64,
    /// Nucleon mass `M` (time/length², ħ = 1).
    pub nucleon_mass: f64,
    /// Collapse rate `λ`.
    pub lambda: f64,
    /// Smearing length `a`.
    pub a: f64,
}

impl ClumpParams {
    pub fn new(n_nucleons: u64, nucleon_mass: f64, lambda: f64, a: f64) -> Result<Self> {
        if n_nucleons == 0 {
            return Err(param("N must be at least 1"));
        }
        if !(nucleon_mass > 0.0) || !nucleon_mass.is_finite() {
            return Err(param(format!("nucleon mass must be positive, got {nucleon_mass}")));
        }
        // λ = 0 is admitted so collapse-free reference runs share the same code path.
        if !(lambda >= 0.0) || !lambda.is_finite() {
            return Err(param(format!("lambda must be non-negative, got {lambda}")));
        }
        if !(a > 0.0) || !a.is_finite() {
            return Err(param(format!("smearing length must be positive, got {a}")));
        }
        Ok(Self {
            n_nucleons,
            nucleon_mass,
            lambda,
            a,
        })
    }

    /// `λ = a = M = 1`, single nucleon.
    pub fn dimensionless() -> Self {
        Self {
            n_nucleons: 1,
            nucleon_mass: 1.0,
            lambda: 1.0,
            a: 1.0,
        }
    }

    /// GRW values in seconds and centimetres.
    pub fn grw(n_nucleons: u64) -> Result<Self> {
        Self::new(n_nucleons, NUCLEON_MASS_OVER_HBAR, GRW_LAMBDA, GRW_A)
    }

    /// Adler's rate with the GRW smearing length.
    pub fn adler(n_nucleons: u64) -> Result<Self> {
        Self::new(n_nucleons, NUCLEON_MASS_OVER_HBAR, ADLER_LAMBDA, GRW_A)
    }

    pub fn n(&self) -> f64 {
        self.n_nucleons as f64
    }

    /// `m = N·M`.
    pub fn total_mass(&self) -> f64 {
        self.n() * self.nucleon_mass
    }

    /// `λN²`, the saturated collapse rate.
    pub fn collapse_scale(&self) -> f64 {
        let n = self.n();
        self.lambda * (n * n)
    }

    /// `λ̃ = λN/(√2 a)`.
    pub fn lambda_tilde(&self) -> f64 {
        self.lambda * self.n() / (std::f64::consts::SQRT_2 * self.a)
    }

    /// `α = λ̃/√(mλ)`, evaluated as `√(λN/M)/(√2 a)` so that it stays finite at `λ = 0`.
    pub fn alpha(&self) -> f64 {
        (self.lambda * self.n() / self.nucleon_mass).sqrt() / (std::f64::consts::SQRT_2 * self.a)
    }
}

/// Pairwise double sum for two `N`-particle configurations (1-D):
/// `Σ_ij [e^{-(x_i-x_j)²/4a²} + e^{-(x'_i-x'_j)²/4a²} - 2 e^{-(x_i-x'_j)²/4a²}]`.
///
/// Multiplying by `λ/2` gives the damping rate of `⟨x|ρ|x'⟩`.
pub fn pair_decay_kernel(x: &[f64], x_prime: &[f64], a: f64) -> Result<f64> {
    if x.len() != x_prime.len() {
        return Err(input(format!(
            "configurations have {} and {} particles",
            x.len(),
            x_prime.len()
        )));
    }
    let k = |u: f64, v: f64| (-(u - v).powi(2) / (4.0 * a * a)).exp();
    let mut sum = 0.0;
    for i in 0..x.len() {
        for j in 0..x.len() {
            sum += k(x[i], x[j]) + k(x_prime[i], x_prime[j]) - 2.0 * k(x[i], x_prime[j]);
        }
    }
    Ok(sum)
}

fn saturating_rate(distance: f64, params: &ClumpParams) -> f64 {
    let s = distance / (2.0 * params.a);
    // 1 - e^{-s²} without cancellation for small s
    params.collapse_scale() * -(-s * s).exp_m1()
}

/// Decay rate `λN²[1 - e^{-D²/4a²}]` of the off-diagonal element between
/// two clump positions a distance `D` apart.
pub fn cm_offdiag_rate(distance: f64, params: &ClumpParams) -> f64 {
    saturating_rate(distance, params)
}

/// Decay rate of the ensemble average of `cos(P·L)`; the same function as
/// [`cm_offdiag_rate`] evaluated at the translation length `L`.
pub fn modular_overlap_rate(length: f64, params: &ClumpParams) -> f64 {
    saturating_rate(length, params)
}

/// `1/(λN²)`.
pub fn characteristic_time(params: &ClumpParams) -> f64 {
    1.0 / params.collapse_scale()
}

/// Uniform 1-D position grid `X_i = x0 + i·dx`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Grid {
    pub x0: f64,
    pub dx: f64,
    pub n: usize,
}

impl Grid {
    pub fn new(x0: f64, dx: f64, n: usize) -> Result<Self> {
        if !(dx > 0.0) {
            return Err(param(format!("grid spacing must be positive, got {dx}")));
        }
        if n < 8 {
            return Err(param(format!("grid needs at least 8 points, got {n}")));
        }
        Ok(Self { x0, dx, n })
    }

    /// `n` points with spacing `extent/n`, centred on zero.
    pub fn centered(extent: f64, n: usize) -> Result<Self> {
        let dx = extent / n as f64;
        Self::new(-(n as f64) / 2.0 * dx, dx, n)
    }

    pub fn x(&self, i: usize) -> f64 {
        self.x0 + i as f64 * self.dx
    }

    pub fn points(&self) -> Vec<f64> {
        (0..self.n).map(|i| self.x(i)).collect()
    }

    /// Angular wave numbers in FFT order.
    pub fn wave_numbers(&self) -> Vec<f64> {
        let n = self.n as i64;
        let scale = 2.0 * std::f64::consts::PI / (self.n as f64 * self.dx);
        (0..n)
            .map(|j| if j < (n + 1) / 2 { j } else { j - n } as f64 * scale)
            .collect()
    }
}

/// Position-space density matrix `ρ(X_i, X_j)` with trace `dx·Σ ρ(X_i,X_i) = 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct GridDensityMatrix {
    grid: Grid,
    entries: CMatrix,
}

impl GridDensityMatrix {
    pub fn new(grid: Grid, entries: CMatrix) -> Result<Self> {
        if entries.nrows() != grid.n || entries.ncols() != grid.n {
            return Err(input("matrix shape does not match grid"));
        }
        let h = hermiticity_defect(&entries);
        if h > 1e-10 {
            return Err(input(format!("grid density matrix not Hermitian (defect {h:e})")));
        }
        let rho = Self { grid, entries };
        let tr = rho.trace();
        if (tr - 1.0).abs() > 1e-8 {
            return Err(input(format!("grid density matrix trace {tr}, expected 1")));
        }
        if (0..grid.n).any(|i| rho.entries[(i, i)].re < -1e-10) {
            return Err(input("negative diagonal entry"));
        }
        Ok(rho)
    }

    /// Pure state `ψ(X)ψ*(X')`, normalised so that `dx·Σ|ψ|² = 1`.
    pub fn from_wavefunction(grid: Grid, psi: &[Complex64]) -> Result<Self> {
        if psi.len() != grid.n {
            return Err(input("wave function length does not match grid"));
        }
        let norm: f64 = psi.iter().map(|z| z.norm_sqr()).sum::<f64>() * grid.dx;
        if !(norm > 0.0) {
            return Err(input("wave function has zero norm"));
        }
        let s = 1.0 / norm.sqrt();
        let entries = CMatrix::from_fn(grid.n, grid.n, |i, j| psi[i] * psi[j].conj() * s * s);
        Self::new(grid, entries)
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn entries(&self) -> &CMatrix {
        &self.entries
    }

    pub fn trace(&self) -> f64 {
        (0..self.grid.n).map(|i| self.entries[(i, i)].re).sum::<f64>() * self.grid.dx
    }

    /// Position probability density `ρ(X_i, X_i)`.
    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.grid.n).map(|i| self.entries[(i, i)].re).collect()
    }

    /// Probability mass in the outer `n/32` points on each side.
    pub fn boundary_mass(&self) -> f64 {
        let edge = (self.grid.n / 32).max(1);
        let d = self.diagonal();
        (d[..edge].iter().sum::<f64>() + d[self.grid.n - edge..].iter().sum::<f64>()) * self.grid.dx
    }

    /// `(⟨X⟩, ⟨X²⟩ - ⟨X⟩²)` of the position distribution.
    pub fn position_moments(&self) -> (f64, f64) {
        let d = self.diagonal();
        let dx = self.grid.dx;
        let mean: f64 = d.iter().enumerate().map(|(i, p)| p * self.grid.x(i)).sum::<f64>() * dx;
        let second: f64 = d
            .iter()
            .enumerate()
            .map(|(i, p)| p * (self.grid.x(i) - mean).powi(2))
            .sum::<f64>()
            * dx;
        (mean, second)
    }
}

const BOUNDARY_LIMIT: f64 = 1e-6;

/// Evolve the centre-of-mass density matrix for time `t`.
///
/// The collapse generator is diagonal in `(X, X')`, so its flow is the exact
/// entrywise factor `exp(-τ λN²[1 - e^{-(X-X')²/4a²}])`. With the kinetic
/// term on, steps are Strang-split: half collapse, free propagation
/// `U ρ U†` with `U = exp(-i P² dt / 2m)` applied by FFT on both indices,
/// half collapse.
pub fn grid_evolve_cm(
    rho: &GridDensityMatrix,
    params: &ClumpParams,
    t: f64,
    dt: f64,
    include_kinetic: bool,
) -> Result<GridDensityMatrix> {
    if !(dt > 0.0) {
        return Err(param(format!("dt must be positive, got {dt}")));
    }
    if !(t >= 0.0) {
        return Err(param(format!("t must be non-negative, got {t}")));
    }
    if dt * params.collapse_scale() >= 0.1 {
        return Err(param(format!(
            "dt·λN² = {} must be below 0.1",
            dt * params.collapse_scale()
        )));
    }
    check_boundary(rho)?;
    let grid = rho.grid;
    let n = grid.n;

    if !include_kinetic {
        let factor = collapse_factor(&grid, params, t);
        let entries = CMatrix::from_fn(n, n, |i, j| rho.entries[(i, j)] * factor[i.abs_diff(j)]);
        return Ok(GridDensityMatrix { grid, entries });
    }

    let steps = (t / dt - 1e-9).ceil().max(0.0) as usize;
    if steps == 0 {
        return Ok(rho.clone());
    }
    let h = t / steps as f64;
    let half = collapse_factor(&grid, params, h / 2.0);
    let m = params.total_mass();
    let phase: Vec<Complex64> = grid
        .wave_numbers()
        .iter()
        .map(|k| Complex64::from_polar(1.0, -k * k * h / (2.0 * m)))
        .collect();
    let phase_conj: Vec<Complex64> = phase.iter().map(|p| p.conj()).collect();
    let mut planner = FftPlanner::new();
    let fwd = planner.plan_fft_forward(n);
    let inv = planner.plan_fft_inverse(n);

    let mut entries = rho.entries.clone();
    for _ in 0..steps {
        apply_collapse(&mut entries, &half);
        propagate_columns(&mut entries, &fwd, &inv, &phase);
        entries.transpose_mut();
        propagate_columns(&mut entries, &fwd, &inv, &phase_conj);
        entries.transpose_mut();
        apply_collapse(&mut entries, &half);
    }
    let out = GridDensityMatrix { grid, entries };
    check_boundary(&out)?;
    Ok(out)
}

fn check_boundary(rho: &GridDensityMatrix) -> Result<()> {
    let b = rho.boundary_mass();
    if b > BOUNDARY_LIMIT {
        return Err(param(format!(
            "grid too small: boundary probability mass {b:e} exceeds {BOUNDARY_LIMIT:e}"
        )));
    }
    Ok(())
}

/// Collapse factor indexed by `|i - j|`.
fn collapse_factor(grid: &Grid, params: &ClumpParams, tau: f64) -> Vec<f64> {
    (0..grid.n)
        .map(|d| (-tau * saturating_rate(d as f64 * grid.dx, params)).exp())
        .collect()
}

fn apply_collapse(entries: &mut CMatrix, factor: &[f64]) {
    let n = entries.nrows();
    for j in 0..n {
        for i in 0..n {
            entries[(i, j)] *= factor[i.abs_diff(j)];
        }
    }
}

// Free propagation of the row index: FFT each column, multiply by phase, inverse FFT.
fn propagate_columns(entries: &mut CMatrix, fwd: &Arc<dyn Fft<f64>>, inv: &Arc<dyn Fft<f64>>, phase: &[Complex64]) {
    let n = entries.nrows();
    let scale = 1.0 / n as f64;
    for col in entries.as_mut_slice().chunks_exact_mut(n) {
        fwd.process(col);
        for (z, p) in col.iter_mut().zip(phase) {
            *z *= p * scale;
        }
        inv.process(col);
    }
}

/// `Tr(ρ cos(P L))`, i.e. `Re Σ_i ρ(X_i, X_i + L)·dx`.
pub fn modular_overlap(rho: &GridDensityMatrix, length: f64) -> Result<f64> {
    let s = length.abs() / rho.grid.dx;
    let shift = s.round();
    if (s - shift).abs() > 1e-9 * s.max(1.0) {
        return Err(param(format!(
            "L = {length} is not a multiple of the grid spacing {}",
            rho.grid.dx
        )));
    }
    let shift = shift as usize;
    let n = rho.grid.n;
    if shift >= n {
        return Ok(0.0);
    }
    Ok((0..n - shift).map(|i| rho.entries[(i, i + shift)].re).sum::<f64>() * rho.grid.dx)
}

/// Sampled Gaussian `ψ(X) = exp(-(X-c)²/4σ² + i k X)`, unnormalised.
pub fn gaussian_wavefunction(grid: &Grid, centre: f64, sigma: f64, k: f64) -> Vec<Complex64> {
    grid.points()
        .into_iter()
        .map(|x| Complex64::from_polar((-(x - centre).powi(2) / (4.0 * sigma * sigma)).exp(), k * x))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit(lambda: f64, n: u64) -> ClumpParams {
        ClumpParams::new(n, 1.0, lambda, 1.0).unwrap()
    }

    #[test]
    fn kernel_examples() {
        let x = [0.3, -1.2, 4.0];
        assert_eq!(pair_decay_kernel(&x, &x, 1.0).unwrap(), 0.0);

        let d: f64 = 1.7;
        let one = pair_decay_kernel(&[0.0], &[d], 1.0).unwrap();
        assert!((one - 2.0 * (1.0 - (-d * d / 4.0).exp())).abs() < 1e-15);

        // rigid pair with spacing 0.01a translated by D = 30a
        let pair = [0.0, 0.01];
        let moved = [30.0, 30.01];
        let k = pair_decay_kernel(&pair, &moved, 1.0).unwrap();
        let expect = 2.0 * 4.0 * (1.0 - (-900.0f64 / 4.0).exp());
        assert!((k / expect - 1.0).abs() < 0.02);

        assert!(pair_decay_kernel(&[0.0], &[0.0, 1.0], 1.0).is_err());
    }

    #[test]
    fn small_clump_matches_scaled_single_particle() {
        let a = 1.0;
        let clump: Vec<f64> = (0..5).map(|i| i as f64 * 0.02).collect();
        for d in [0.3, 1.0, 2.5, 10.0] {
            let moved: Vec<f64> = clump.iter().map(|x| x + d).collect();
            let k = pair_decay_kernel(&clump, &moved, a).unwrap();
            let single = pair_decay_kernel(&[0.0], &[d], a).unwrap();
            assert!((k / (25.0 * single) - 1.0).abs() < 0.02, "d = {d}");
        }
    }

    #[test]
    fn rate_examples() {
        let p = unit(1.0, 3);
        assert_eq!(cm_offdiag_rate(0.0, &p), 0.0);
        assert_eq!(modular_overlap_rate(0.0, &p), 0.0);
        assert!((modular_overlap_rate(1e3, &p) - 9.0).abs() < 1e-12);
        let c = modular_overlap_rate(1.0, &p) / p.collapse_scale();
        assert!((c - (1.0 - (-0.25f64).exp())).abs() < 1e-15);
        assert!((c - 0.2212).abs() < 5e-5);
        let ratio = cm_offdiag_rate(1e-3, &p) / (p.collapse_scale() * 1e-6 / 4.0);
        assert!((ratio - 1.0).abs() < 1e-4);
    }

    #[test]
    fn rates_monotone_and_identical() {
        let p = unit(0.7, 2);
        let mut prev = -1.0;
        for i in 0..400 {
            let d = i as f64 * 0.05;
            let r = cm_offdiag_rate(d, &p);
            assert_eq!(r, modular_overlap_rate(d, &p));
            assert!(r > prev || (i > 150 && r == prev));
            assert!(r <= p.collapse_scale());
            prev = r;
        }
    }

    #[test]
    fn grw_headline_times() {
        let gold = ClumpParams::grw(100_000_000).unwrap();
        assert_eq!(1.0 / cm_offdiag_rate(1.0, &gold), 1.0);
        assert_eq!(characteristic_time(&gold), 1.0);
        let single = ClumpParams::grw(1).unwrap();
        assert_eq!(characteristic_time(&single), 1e16);
    }

    fn cat_state(grid: Grid, sep: f64, sigma: f64) -> GridDensityMatrix {
        let l = gaussian_wavefunction(&grid, -sep / 2.0, sigma, 0.0);
        let r = gaussian_wavefunction(&grid, sep / 2.0, sigma, 0.0);
        let psi: Vec<Complex64> = l.iter().zip(&r).map(|(a, b)| a + b).collect();
        GridDensityMatrix::from_wavefunction(grid, &psi).unwrap()
    }

    #[test]
    fn collapse_only_keeps_diagonal_and_damps_lobes() {
        let grid = Grid::centered(40.0, 256).unwrap();
        let rho = cat_state(grid, 8.0, 0.5);
        let p = unit(1.0, 1);
        let t = 2.0;
        let out = grid_evolve_cm(&rho, &p, t, 0.01, false).unwrap();
        assert_eq!(out.diagonal(), rho.diagonal());
        let i = grid.n / 2 - (4.0 / grid.dx) as usize;
        let j = grid.n / 2 + (4.0 / grid.dx) as usize;
        let ratio = out.entries()[(i, j)].re / rho.entries()[(i, j)].re;
        let expect = (-cm_offdiag_rate(8.0, &p) * t).exp();
        assert!((ratio / expect - 1.0).abs() < 1e-6);
        assert!((out.trace() - 1.0).abs() < 1e-8);
    }

    #[test]
    fn free_spreading_matches_analytic_width() {
        let grid = Grid::centered(64.0, 512).unwrap();
        let sigma0 = 1.0;
        let psi = gaussian_wavefunction(&grid, 0.0, sigma0, 0.0);
        let rho = GridDensityMatrix::from_wavefunction(grid, &psi).unwrap();
        let p = unit(0.0, 1);
        let t = 2.0 * p.total_mass() * sigma0 * sigma0;
        let out = grid_evolve_cm(&rho, &p, t, 0.01, true).unwrap();
        let (_, var) = out.position_moments();
        let expect = sigma0 * sigma0 * (1.0 + (t / (2.0 * p.total_mass() * sigma0 * sigma0)).powi(2));
        assert!((var.sqrt() / expect.sqrt() - 1.0).abs() < 1e-4, "{} vs {}", var.sqrt(), expect.sqrt());
        assert!((out.trace() - 1.0).abs() < 1e-8);
        assert!(hermiticity_defect(out.entries()) < 1e-10);
    }

    #[test]
    fn kinetic_with_collapse_preserves_trace() {
        let grid = Grid::centered(48.0, 256).unwrap();
        let rho = cat_state(grid, 6.0, 0.8);
        let p = unit(0.5, 2);
        let out = grid_evolve_cm(&rho, &p, 1.0, 0.01, true).unwrap();
        assert!((out.trace() - 1.0).abs() < 1e-8);
        assert!(hermiticity_defect(out.entries()) < 1e-10);
        // off-diagonal coherence must have dropped
        assert!(modular_overlap(&out, 6.0).unwrap() < modular_overlap(&rho, 6.0).unwrap());
    }

    #[test]
    fn evolve_rejects_bad_input() {
        let grid = Grid::centered(10.0, 64).unwrap();
        let wide = gaussian_wavefunction(&grid, 0.0, 3.0, 0.0);
        let rho = GridDensityMatrix::from_wavefunction(grid, &wide).unwrap();
        let p = unit(1.0, 1);
        assert!(grid_evolve_cm(&rho, &p, 1.0, 0.01, false).is_err());
        let narrow = gaussian_wavefunction(&grid, 0.0, 0.5, 0.0);
        let rho = GridDensityMatrix::from_wavefunction(grid, &narrow).unwrap();
        assert!(grid_evolve_cm(&rho, &p, 1.0, 0.0, false).is_err());
        assert!(grid_evolve_cm(&rho, &p, 1.0, 0.5, false).is_err());
    }

    #[test]
    fn modular_overlap_examples() {
        let grid = Grid::centered(200.0, 1000).unwrap();
        let d = 10.0;
        let psi = gaussian_wavefunction(&grid, 0.0, d, 0.0);
        let rho = GridDensityMatrix::from_wavefunction(grid, &psi).unwrap();
        assert!((modular_overlap(&rho, 0.0).unwrap() - 1.0).abs() < 1e-8);
        for l in [1.0, 4.0, 10.0] {
            let o = modular_overlap(&rho, l).unwrap();
            assert!((o - (-l * l / (8.0 * d * d)).exp()).abs() < 1e-6, "L = {l}");
        }
        assert!(modular_overlap(&rho, 0.13).is_err());
    }
}
