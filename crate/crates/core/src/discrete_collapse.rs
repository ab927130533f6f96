//! Collapse in the finite eigenbasis of one collapse-generating operator `A`.
//!
//! The unnormalized state evolves as `|φ,t⟩ = exp(A B(t) - A² λ t)|φ,0⟩`
//! while the noise `B` is drawn with probability proportional to the squared
//! norm of `|φ,t⟩`. The squared amplitudes `x_n = |⟨a_n|ψ⟩|²` then play a
//! continuous gambler's-ruin game: each is a martingale absorbed at 0 or 1,
//! which is where the Born rule comes from.

use nalgebra::DMatrix;
use num_complex::Complex64;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{input, param, Error, Result};
use crate::linalg::{
    commutator, hermitian_eigenvalues, hermitian_norm, hermiticity_defect, hermitize, max_abs,
    real_to_complex, CMatrix,
};
use crate::stochastic::RngStream;

const NORM_TOL: f64 = 1e-12;
const HERMITIAN_TOL: f64 = 1e-10;
const TRACE_TOL: f64 = 1e-10;
const EIGEN_TOL: f64 = 1e-8;
const COMMUTE_TOL: f64 = 1e-10;

/// Initial state `Σ c_n |a_n⟩` together with the eigenvalues `a_n` of the
/// collapse operator and the collapse rate `λ`.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteSuperposition {
    eigenvalues: Vec<f64>,
    amplitudes: Vec<Complex64>,
    lambda: f64,
}

impl DiscreteSuperposition {
    pub fn new(eigenvalues: Vec<f64>, amplitudes: Vec<Complex64>, lambda: f64) -> Result<Self> {
        if eigenvalues.is_empty() {
            return Err(input("superposition needs at least one component"));
        }
        if eigenvalues.len() != amplitudes.len() {
            return Err(input(format!(
                "{} eigenvalues but {} amplitudes",
                eigenvalues.len(),
                amplitudes.len()
            )));
        }
        if !(lambda > 0.0) || !lambda.is_finite() {
            return Err(param(format!("lambda must be positive, got {lambda}")));
        }
        if eigenvalues.iter().any(|a| !a.is_finite()) {
            return Err(input("eigenvalues must be finite"));
        }
        let norm: f64 = amplitudes.iter().map(|c| c.norm_sqr()).sum();
        if (norm - 1.0).abs() > NORM_TOL {
            return Err(input(format!("Σ|c_n|² = {norm}, expected 1")));
        }
        Ok(Self {
            eigenvalues,
            amplitudes,
            lambda,
        })
    }

    /// Real non-negative amplitudes `c_n = √p_n`.
    pub fn from_probabilities(eigenvalues: Vec<f64>, probabilities: &[f64], lambda: f64) -> Result<Self> {
        if probabilities.iter().any(|p| !(*p >= 0.0)) {
            return Err(input("probabilities must be non-negative"));
        }
        let total: f64 = probabilities.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(input(format!("probabilities sum to {total}, expected 1")));
        }
        let amplitudes = probabilities
            .iter()
            .map(|p| Complex64::new((p / total).sqrt(), 0.0))
            .collect();
        Self::new(eigenvalues, amplitudes, lambda)
    }

    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    pub fn amplitudes(&self) -> &[Complex64] {
        &self.amplitudes
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn dim(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn probabilities(&self) -> Vec<f64> {
        self.amplitudes.iter().map(|c| c.norm_sqr()).collect()
    }

    /// The collapse operator as a diagonal matrix in its own eigenbasis.
    pub fn operator(&self) -> CMatrix {
        CMatrix::from_diagonal(&nalgebra::DVector::from_iterator(
            self.dim(),
            self.eigenvalues.iter().map(|&a| Complex64::new(a, 0.0)),
        ))
    }
}

/// Outcome of one collapse trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryResult {
    /// Accumulated noise `B(T)`.
    pub b_final: f64,
    /// Normalized squared amplitudes at `T`.
    pub x_final: Vec<f64>,
    /// Index of the largest `x_n` (lowest index on ties).
    pub outcome: usize,
    /// `ln ⟨φ,T|φ,T⟩` of the unnormalized state.
    pub weight_log: f64,
}

impl TrajectoryResult {
    /// Normalized state at `T`; phases are those of the initial amplitudes
    /// because the collapse factors are real and positive.
    pub fn normalized_state(&self, sup: &DiscreteSuperposition) -> Vec<Complex64> {
        sup.amplitudes
            .iter()
            .zip(&self.x_final)
            .map(|(c, x)| {
                let r = c.norm();
                if r == 0.0 {
                    Complex64::new(0.0, 0.0)
                } else {
                    c / r * x.sqrt()
                }
            })
            .collect()
    }
}

/// Hermitian, unit-trace, positive semidefinite matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityMatrixFinite {
    entries: CMatrix,
}

impl DensityMatrixFinite {
    pub fn new(entries: CMatrix) -> Result<Self> {
        if !entries.is_square() || entries.nrows() == 0 {
            return Err(input("density matrix must be square and non-empty"));
        }
        let h = hermiticity_defect(&entries);
        if h > HERMITIAN_TOL {
            return Err(input(format!("density matrix not Hermitian (defect {h:e})")));
        }
        let tr = entries.trace();
        if (tr.re - 1.0).abs() > TRACE_TOL || tr.im.abs() > TRACE_TOL {
            return Err(input(format!("density matrix trace {tr}, expected 1")));
        }
        let min_ev = hermitian_eigenvalues(&entries)[0];
        if min_ev < -EIGEN_TOL {
            return Err(input(format!("density matrix has eigenvalue {min_ev:e}")));
        }
        Ok(Self { entries })
    }

    pub(crate) fn new_unchecked(entries: CMatrix) -> Self {
        Self { entries }
    }

    /// Projector `|ψ⟩⟨ψ|` of a normalized state.
    pub fn pure(state: &[Complex64]) -> Result<Self> {
        let v = nalgebra::DVector::from_column_slice(state);
        Self::new(&v * v.adjoint())
    }

    pub fn entries(&self) -> &CMatrix {
        &self.entries
    }

    pub fn into_entries(self) -> CMatrix {
        self.entries
    }

    pub fn dim(&self) -> usize {
        self.entries.nrows()
    }

    pub fn trace(&self) -> Complex64 {
        self.entries.trace()
    }

    pub fn eigenvalues(&self) -> Vec<f64> {
        hermitian_eigenvalues(&self.entries)
    }

    /// `Tr(O ρ)`.
    pub fn expectation(&self, op: &CMatrix) -> Complex64 {
        (op * &self.entries).trace()
    }
}

/// Unnormalized amplitudes `c_n exp(-[B - 2λt a_n]²/(4λt))`.
pub fn evolve_closed_form(sup: &DiscreteSuperposition, b: f64, t: f64) -> Result<Vec<Complex64>> {
    if !(t > 0.0) {
        return Err(param(format!("t must be positive, got {t}")));
    }
    let lt = sup.lambda * t;
    Ok(sup
        .amplitudes
        .iter()
        .zip(&sup.eigenvalues)
        .map(|(c, a)| c * (-(b - 2.0 * lt * a).powi(2) / (4.0 * lt)).exp())
        .collect())
}

/// Probability density of the final noise value `B(t)`: a mixture of
/// Gaussians centred at `2λt a_n` with weights `|c_n|²` and variance `λt`.
pub fn final_b_density(sup: &DiscreteSuperposition, t: f64, b: f64) -> Result<f64> {
    if !(t > 0.0) {
        return Err(param(format!("t must be positive, got {t}")));
    }
    let lt = sup.lambda * t;
    let norm = 1.0 / (2.0 * std::f64::consts::PI * lt).sqrt();
    Ok(norm
        * sup
            .amplitudes
            .iter()
            .zip(&sup.eigenvalues)
            .map(|(c, a)| c.norm_sqr() * (-(b - 2.0 * lt * a).powi(2) / (2.0 * lt)).exp())
            .sum::<f64>())
}

/// Cumulative distribution of `B(t)`, used for goodness-of-fit checks.
pub fn final_b_cdf(sup: &DiscreteSuperposition, t: f64, b: f64) -> Result<f64> {
    if !(t > 0.0) {
        return Err(param(format!("t must be positive, got {t}")));
    }
    let lt = sup.lambda * t;
    let s = (2.0 * lt).sqrt();
    Ok(sup
        .amplitudes
        .iter()
        .zip(&sup.eigenvalues)
        .map(|(c, a)| c.norm_sqr() * 0.5 * (1.0 + crate::stochastic::erf((b - 2.0 * lt * a) / s)))
        .sum())
}

fn step_count(total: f64, dt: f64) -> Result<(usize, f64)> {
    if !(dt > 0.0) {
        return Err(param(format!("dt must be positive, got {dt}")));
    }
    if !(dt < total) {
        return Err(param(format!("dt = {dt} must be smaller than T = {total}")));
    }
    let n = (total / dt).round().max(1.0) as usize;
    Ok((n, total / n as f64))
}

/// Sample one collapse history up to time `total`.
///
/// Each step draws `dB` from the `x_n`-weighted Gaussian mixture with means
/// `2λ dt a_n` and variance `λ dt`, then multiplies component `n` by
/// `exp(a_n dB - a_n² λ dt)`. Amplitudes are kept as log-weights so large
/// `λT` cannot underflow.
pub fn run_trajectory(
    sup: &DiscreteSuperposition,
    total: f64,
    dt: f64,
    stream: RngStream,
) -> Result<TrajectoryResult> {
    let (n_steps, h) = step_count(total, dt)?;
    let lambda = sup.lambda;
    let sigma = (lambda * h).sqrt();
    let mut rng = stream.rng();

    // log |φ_n|², shifted so that the largest entry is 0; `offset` holds the shift.
    let mut log_w: Vec<f64> = sup.amplitudes.iter().map(|c| c.norm_sqr().ln()).collect();
    let mut offset = 0.0;
    let mut weights = vec![0.0; sup.dim()];
    let mut b_total = 0.0;

    for _ in 0..n_steps {
        let total_w = normalize_weights(&log_w, &mut weights);
        let u: f64 = rng.random::<f64>() * total_w;
        let k = pick(&weights, u);
        let z: f64 = rng.sample(StandardNormal);
        let db = 2.0 * lambda * h * sup.eigenvalues[k] + sigma * z;
        b_total += db;
        for (lw, a) in log_w.iter_mut().zip(&sup.eigenvalues) {
            *lw += 2.0 * a * db - 2.0 * a * a * lambda * h;
        }
        let shift = log_w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        for lw in log_w.iter_mut() {
            *lw -= shift;
        }
        offset += shift;
    }

    let total_w = normalize_weights(&log_w, &mut weights);
    let x_final: Vec<f64> = weights.iter().map(|w| w / total_w).collect();
    let outcome = argmax(&x_final);
    Ok(TrajectoryResult {
        b_final: b_total,
        x_final,
        outcome,
        weight_log: offset + total_w.ln(),
    })
}

fn normalize_weights(log_w: &[f64], out: &mut [f64]) -> f64 {
    let mut total = 0.0;
    for (o, lw) in out.iter_mut().zip(log_w) {
        *o = lw.exp();
        total += *o;
    }
    total
}

fn pick(weights: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    let mut last = 0;
    for (i, w) in weights.iter().enumerate() {
        if *w > 0.0 {
            last = i;
            acc += w;
            if u < acc {
                return i;
            }
        }
    }
    last
}

fn argmax(x: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in x.iter().enumerate() {
        if *v > x[best] {
            best = i;
        }
    }
    best
}

/// Run `n_traj` trajectories on streams `(master_seed, 0..n_traj)`.
///
/// Work is spread over the current rayon pool; results come back in
/// trajectory-index order, so every reduction over them is independent of
/// the thread count.
pub fn run_ensemble(
    sup: &DiscreteSuperposition,
    total: f64,
    dt: f64,
    n_traj: usize,
    master_seed: u64,
) -> Result<Vec<TrajectoryResult>> {
    if n_traj == 0 {
        return Err(param("n_traj must be at least 1"));
    }
    step_count(total, dt)?;
    (0..n_traj as u64)
        .into_par_iter()
        .map(|i| run_trajectory(sup, total, dt, RngStream::new(master_seed, i)))
        .collect()
}

/// Fraction of trajectories collapsing onto each eigenvector.
pub fn born_statistics(
    sup: &DiscreteSuperposition,
    total: f64,
    dt: f64,
    n_traj: usize,
    master_seed: u64,
) -> Result<Vec<f64>> {
    let results = run_ensemble(sup, total, dt, n_traj, master_seed)?;
    Ok(outcome_frequencies(sup.dim(), &results))
}

pub fn outcome_frequencies(dim: usize, results: &[TrajectoryResult]) -> Vec<f64> {
    let mut counts = vec![0usize; dim];
    for r in results {
        counts[r.outcome] += 1;
    }
    counts
        .into_iter()
        .map(|c| c as f64 / results.len() as f64)
        .collect()
}

/// Average of the normalized projectors `|ψ⟩⟨ψ|` over an ensemble.
pub fn ensemble_density_matrix(sup: &DiscreteSuperposition, results: &[TrajectoryResult]) -> CMatrix {
    let n = sup.dim();
    let mut acc = CMatrix::zeros(n, n);
    for r in results {
        let psi = nalgebra::DVector::from_vec(r.normalized_state(sup));
        acc += &psi * psi.adjoint();
    }
    acc / Complex64::new(results.len() as f64, 0.0)
}

/// `ρ_nm(t) = c_n c_m* exp(-(λt/2)(a_n - a_m)²)`.
pub fn analytic_rho(sup: &DiscreteSuperposition, t: f64) -> Result<DensityMatrixFinite> {
    if !(t >= 0.0) {
        return Err(param(format!("t must be non-negative, got {t}")));
    }
    let n = sup.dim();
    let lt = sup.lambda * t;
    let entries = CMatrix::from_fn(n, n, |i, j| {
        let d = sup.eigenvalues[i] - sup.eigenvalues[j];
        sup.amplitudes[i] * sup.amplitudes[j].conj() * (-0.5 * lt * d * d).exp()
    });
    Ok(DensityMatrixFinite::new_unchecked(entries))
}

fn validate_generator(h: &CMatrix, a_ops: &[CMatrix], dim: usize) -> Result<()> {
    if h.nrows() != dim || h.ncols() != dim {
        return Err(input("Hamiltonian dimension does not match ρ"));
    }
    let dh = hermiticity_defect(h);
    if dh > HERMITIAN_TOL {
        return Err(input(format!("Hamiltonian not Hermitian (defect {dh:e})")));
    }
    for (i, a) in a_ops.iter().enumerate() {
        if a.nrows() != dim || a.ncols() != dim {
            return Err(input(format!("collapse operator {i} has wrong dimension")));
        }
        let da = hermiticity_defect(a);
        if da > HERMITIAN_TOL {
            return Err(input(format!("collapse operator {i} not Hermitian (defect {da:e})")));
        }
    }
    for i in 0..a_ops.len() {
        for j in (i + 1)..a_ops.len() {
            let c = max_abs(&commutator(&a_ops[i], &a_ops[j]));
            if c > COMMUTE_TOL {
                return Err(Error::Contract(format!(
                    "collapse operators {i} and {j} do not commute (|[A,B]| = {c:e})"
                )));
            }
        }
    }
    Ok(())
}

fn lindblad_rhs(rho: &CMatrix, h: &CMatrix, a_ops: &[CMatrix], lambda: f64) -> CMatrix {
    let mut out = commutator(h, rho) * Complex64::new(0.0, -1.0);
    for a in a_ops {
        let inner = commutator(a, rho);
        out -= commutator(a, &inner) * Complex64::new(0.5 * lambda, 0.0);
    }
    out
}

/// Integrate `dρ/dt = -i[H,ρ] - (λ/2) Σ_α [A_α,[A_α,ρ]]` to time `t` with
/// classical RK4 at fixed step (the step is shrunk so that it divides `t`),
/// re-Hermitizing after every step.
pub fn lindblad_evolve(
    rho0: &DensityMatrixFinite,
    h: &CMatrix,
    a_ops: &[CMatrix],
    lambda: f64,
    t: f64,
    dt: f64,
) -> Result<DensityMatrixFinite> {
    validate_generator(h, a_ops, rho0.dim())?;
    if !(lambda >= 0.0) {
        return Err(param(format!("lambda must be non-negative, got {lambda}")));
    }
    if !(t >= 0.0) {
        return Err(param(format!("t must be non-negative, got {t}")));
    }
    if !(dt > 0.0) {
        return Err(param(format!("dt must be positive, got {dt}")));
    }
    let scale = hermitian_norm(h) + lambda * a_ops.iter().map(|a| hermitian_norm(a).powi(2)).sum::<f64>();
    if dt * scale >= 0.1 {
        return Err(param(format!(
            "dt·(‖H‖ + λΣ‖A‖²) = {} must be below 0.1",
            dt * scale
        )));
    }
    if t == 0.0 {
        return Ok(rho0.clone());
    }
    let n = (t / dt - 1e-9).ceil().max(1.0) as usize;
    let step = t / n as f64;
    let half = Complex64::new(step / 2.0, 0.0);
    let full = Complex64::new(step, 0.0);
    let sixth = Complex64::new(step / 6.0, 0.0);
    let two = Complex64::new(2.0, 0.0);

    let mut rho = rho0.entries.clone();
    for _ in 0..n {
        let k1 = lindblad_rhs(&rho, h, a_ops, lambda);
        let k2 = lindblad_rhs(&(&rho + &k1 * half), h, a_ops, lambda);
        let k3 = lindblad_rhs(&(&rho + &k2 * half), h, a_ops, lambda);
        let k4 = lindblad_rhs(&(&rho + &k3 * full), h, a_ops, lambda);
        rho += (k1 + k2 * two + k3 * two + k4) * sixth;
        hermitize(&mut rho);
    }
    Ok(DensityMatrixFinite::new_unchecked(rho))
}

/// `d Tr(Oρ)/dt = -i Tr([O,H]ρ) - (λ/2) Σ_α Tr([A_α,[A_α,O]]ρ)`.
pub fn ensemble_rate(
    op: &CMatrix,
    rho: &DensityMatrixFinite,
    h: &CMatrix,
    a_ops: &[CMatrix],
    lambda: f64,
) -> Result<f64> {
    validate_generator(h, a_ops, rho.dim())?;
    if op.nrows() != rho.dim() || op.ncols() != rho.dim() {
        return Err(input("observable dimension does not match ρ"));
    }
    let dop = hermiticity_defect(op);
    if dop > HERMITIAN_TOL {
        return Err(input(format!("observable not Hermitian (defect {dop:e})")));
    }
    let mut rate = (commutator(op, h) * &rho.entries).trace() * Complex64::new(0.0, -1.0);
    for a in a_ops {
        let dd = commutator(a, &commutator(a, op));
        rate -= (dd * &rho.entries).trace() * Complex64::new(0.5 * lambda, 0.0);
    }
    Ok(rate.re)
}

/// Result of one gambler's-ruin game.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RuinOutcome {
    /// 1 if the first gambler ends with all the money, otherwise 2.
    pub winner: u8,
    pub tosses: u64,
}

/// Fair ±1 dollar coin-toss game played until one gambler is ruined.
pub fn gamblers_ruin(x1_start: u64, total: u64, stream: RngStream) -> Result<RuinOutcome> {
    if x1_start == 0 || x1_start >= total {
        return Err(param(format!(
            "stake {x1_start} must lie strictly between 0 and {total}"
        )));
    }
    let mut rng = stream.rng();
    let mut x = x1_start;
    let mut tosses = 0u64;
    while x > 0 && x < total {
        if rng.random::<bool>() {
            x += 1;
        } else {
            x -= 1;
        }
        tosses += 1;
    }
    Ok(RuinOutcome {
        winner: if x == total { 1 } else { 2 },
        tosses,
    })
}

/// Fraction of `n_games` won by gambler 1; game `i` uses stream `(seed, i)`.
pub fn gamblers_ruin_win_fraction(x1_start: u64, total: u64, n_games: usize, master_seed: u64) -> Result<f64> {
    if n_games == 0 {
        return Err(param("n_games must be at least 1"));
    }
    let outcomes: Vec<RuinOutcome> = (0..n_games as u64)
        .into_par_iter()
        .map(|i| gamblers_ruin(x1_start, total, RngStream::new(master_seed, i)))
        .collect::<Result<_>>()?;
    let wins = outcomes.iter().filter(|o| o.winner == 1).count();
    Ok(wins as f64 / n_games as f64)
}

fn symmetry_defect(m: &DMatrix<f64>) -> f64 {
    let n = m.nrows();
    let mut worst: f64 = 0.0;
    for i in 0..n {
        for j in (i + 1)..n {
            worst = worst.max((m[(i, j)] - m[(j, i)]).abs());
        }
    }
    worst
}

/// Random full-rank density matrix `GG†/Tr(GG†)` with complex Gaussian `G`.
pub fn random_density_matrix(dim: usize, stream: RngStream) -> Result<DensityMatrixFinite> {
    if dim == 0 {
        return Err(param("dimension must be at least 1"));
    }
    let mut rng = stream.rng();
    let g = CMatrix::from_fn(dim, dim, |_, _| {
        Complex64::new(rng.sample(StandardNormal), rng.sample(StandardNormal))
    });
    let m = &g * g.adjoint();
    let tr = m.trace();
    DensityMatrixFinite::new(m / tr)
}

/// Drift of the diagonal `dρ_nn` left over by a general real symmetric
/// Itô pair `d|φ⟩ = [R dB + V dt]|φ⟩`:
///
/// `{V,ρ}_nn - 2ρ_nn Tr(Vρ) + λ[(RρR)_nn - ρ_nn Tr(R²ρ) - 2Tr(Rρ)({R,ρ}_nn - 2ρ_nn Tr(Rρ))]`.
///
/// A fair game requires this to vanish for every ρ; it does only when `R`
/// and `V` are diagonal with the pairing of [`diagonal_fair_game_pair`].
pub fn fair_game_defect(
    r: &DMatrix<f64>,
    v: &DMatrix<f64>,
    rho: &DensityMatrixFinite,
    lambda: f64,
) -> Result<Vec<f64>> {
    let n = rho.dim();
    for (name, m) in [("R", r), ("V", v)] {
        if m.nrows() != n || m.ncols() != n {
            return Err(input(format!("{name} has wrong dimension")));
        }
        let d = symmetry_defect(m);
        if d > HERMITIAN_TOL {
            return Err(input(format!("{name} not symmetric (defect {d:e})")));
        }
    }
    let r = real_to_complex(r);
    let v = real_to_complex(v);
    let rho = rho.entries();
    let tr = |m: &CMatrix| (m * rho).trace().re;
    let mean_r = tr(&r);
    let mean_v = tr(&v);
    let mean_r2 = tr(&(&r * &r));
    let anti_v = &v * rho + rho * &v;
    let anti_r = &r * rho + rho * &r;
    let rrr = &r * rho * &r;
    Ok((0..n)
        .map(|k| {
            let p = rho[(k, k)].re;
            let drift = anti_v[(k, k)].re - 2.0 * p * mean_v;
            let ito = rrr[(k, k)].re - p * mean_r2 - 2.0 * mean_r * (anti_r[(k, k)].re - 2.0 * p * mean_r);
            drift + lambda * ito
        })
        .collect())
}

/// The diagonal `(R, V)` pair obtained from `f = 2λ α·x + c`,
/// `β_n = -c α_n - λ α_n²` and the Stratonovich→Itô shift
/// `V = S + R f + (λ/2) R²`, with `x_n = ρ_nn`.
///
/// `c` cancels out of `V`; it is accepted so callers can confirm that.
pub fn diagonal_fair_game_pair(
    alpha: &[f64],
    rho: &DensityMatrixFinite,
    lambda: f64,
    c: f64,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let n = rho.dim();
    if alpha.len() != n {
        return Err(input("α has wrong length"));
    }
    let mean_alpha: f64 = alpha
        .iter()
        .enumerate()
        .map(|(k, a)| a * rho.entries()[(k, k)].re)
        .sum();
    let f = 2.0 * lambda * mean_alpha + c;
    let r = DMatrix::from_fn(n, n, |i, j| if i == j { alpha[i] } else { 0.0 });
    let v = DMatrix::from_fn(n, n, |i, j| {
        if i == j {
            let a = alpha[i];
            let beta = -c * a - lambda * a * a;
            beta + a * f + 0.5 * lambda * a * a
        } else {
            0.0
        }
    });
    Ok((r, v))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn c(re: f64) -> Complex64 {
        Complex64::new(re, 0.0)
    }

    fn two_level(p1: f64) -> DiscreteSuperposition {
        DiscreteSuperposition::from_probabilities(vec![0.0, 1.0], &[p1, 1.0 - p1], 1.0).unwrap()
    }

    fn random_rho(dim: usize, rng: &mut rand_chacha::ChaCha8Rng) -> DensityMatrixFinite {
        let g = CMatrix::from_fn(dim, dim, |_, _| {
            Complex64::new(rng.sample(StandardNormal), rng.sample(StandardNormal))
        });
        let m = &g * g.adjoint();
        let tr = m.trace();
        DensityMatrixFinite::new(m / tr).unwrap()
    }

    #[test]
    fn superposition_validation() {
        assert!(DiscreteSuperposition::new(vec![], vec![], 1.0).is_err());
        assert!(DiscreteSuperposition::new(vec![0.0], vec![c(0.5)], 1.0).is_err());
        assert!(DiscreteSuperposition::new(vec![0.0, 1.0], vec![c(1.0)], 1.0).is_err());
        assert!(DiscreteSuperposition::new(vec![0.0], vec![c(1.0)], 0.0).is_err());
    }

    #[test]
    fn closed_form_examples() {
        let s = 0.5f64.sqrt();
        let sup = two_level(0.5);
        let amps = evolve_closed_form(&sup, 2.0, 1.0).unwrap();
        assert!((amps[1].re - s).abs() < 1e-15);
        assert!((amps[0].re - s * (-1.0f64).exp()).abs() < 1e-15);

        // midway B gives equal magnitudes
        let amps = evolve_closed_form(&sup, 1.0, 1.0).unwrap();
        assert!((amps[0].norm() - amps[1].norm()).abs() < 1e-15);

        let single = DiscreteSuperposition::new(vec![0.3], vec![c(1.0)], 2.0).unwrap();
        for b in [-3.0, 0.0, 5.0] {
            let amps = evolve_closed_form(&single, b, 0.7).unwrap();
            assert_eq!(amps[0] / amps[0], c(1.0));
        }
        assert!(evolve_closed_form(&sup, 0.0, 0.0).is_err());
    }

    #[test]
    fn final_b_density_normalized_and_separated() {
        let sup = two_level(0.3);
        let t = 25.0;
        let sd = (sup.lambda * t).sqrt();
        let lo = -20.0 * sd;
        let hi = 20.0 * sd + 2.0 * t;
        let total = crate::stochastic::integrate(|b| final_b_density(&sup, t, b).unwrap(), lo, hi, 20_000).unwrap();
        assert!((total - 1.0).abs() < 1e-6);

        let centre = 2.0 * t;
        let mass = crate::stochastic::integrate(
            |b| final_b_density(&sup, t, b).unwrap(),
            centre - 5.0 * sd,
            centre + 5.0 * sd,
            20_000,
        )
        .unwrap();
        assert!((mass - 0.7).abs() < 1e-4, "mass {mass}");

        let pure = two_level(1.0);
        let peak = final_b_density(&pure, 1.0, 0.0).unwrap();
        assert!((peak - 1.0 / (2.0 * std::f64::consts::PI).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn trajectory_invariants() {
        let sup = DiscreteSuperposition::from_probabilities(vec![-1.0, 0.5, 2.0], &[0.2, 0.5, 0.3], 1.0).unwrap();
        for i in 0..20 {
            let r = run_trajectory(&sup, 3.0, 0.01, RngStream::new(3, i)).unwrap();
            let s: f64 = r.x_final.iter().sum();
            assert!((s - 1.0).abs() < 1e-10);
            assert!(r.x_final.iter().all(|x| (0.0..=1.0).contains(x)));
            assert_eq!(r.outcome, argmax(&r.x_final));
            // x_final agrees with the closed form evaluated at B(T)
            let amps = evolve_closed_form(&sup, r.b_final, 3.0).unwrap();
            let norm: f64 = amps.iter().map(|a| a.norm_sqr()).sum();
            for (x, a) in r.x_final.iter().zip(&amps) {
                assert!((x - a.norm_sqr() / norm).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn single_component_never_moves() {
        let sup = DiscreteSuperposition::new(vec![1.7], vec![Complex64::new(0.0, 1.0)], 1.0).unwrap();
        let r = run_trajectory(&sup, 1.0, 0.1, RngStream::new(1, 1)).unwrap();
        assert_eq!(r.x_final, vec![1.0]);
        assert_eq!(r.outcome, 0);
    }

    #[test]
    fn trajectory_rejects_bad_steps() {
        let sup = two_level(0.5);
        let s = RngStream::new(0, 0);
        assert!(run_trajectory(&sup, 1.0, 0.0, s).is_err());
        assert!(run_trajectory(&sup, 1.0, 1.0, s).is_err());
        assert!(run_trajectory(&sup, 1.0, 2.0, s).is_err());
    }

    #[test]
    fn near_complete_collapse() {
        let sup = two_level(0.5);
        let results = run_ensemble(&sup, 25.0, 1e-2, 1000, 11).unwrap();
        let done = results
            .iter()
            .filter(|r| r.x_final.iter().cloned().fold(0.0, f64::max) > 0.999)
            .count();
        assert!(done >= 990, "{done}");
    }

    #[test]
    fn born_statistics_trivial_cases() {
        let pure = two_level(1.0);
        assert_eq!(born_statistics(&pure, 2.0, 0.1, 200, 4).unwrap(), vec![1.0, 0.0]);
        let even = two_level(0.5);
        let f = born_statistics(&even, 25.0, 0.05, 10_000, 8).unwrap();
        assert!((f[0] - 0.5).abs() < 0.02);
    }

    #[test]
    fn analytic_rho_examples() {
        let sup = two_level(0.3);
        let r0 = analytic_rho(&sup, 0.0).unwrap();
        let psi = nalgebra::DVector::from_column_slice(sup.amplitudes());
        assert!(max_abs(&(r0.entries() - &psi * psi.adjoint())) < 1e-15);
        for t in [0.1, 1.0, 10.0] {
            let r = analytic_rho(&sup, t).unwrap();
            assert!((r.entries()[(0, 0)].re - 0.3).abs() < 1e-15);
            assert!((r.entries()[(1, 1)].re - 0.7).abs() < 1e-15);
        }
        let r1 = analytic_rho(&sup, 1.0).unwrap();
        let damping = r1.entries()[(0, 1)].norm() / r0.entries()[(0, 1)].norm();
        assert!((damping - 0.606531).abs() < 1e-6);
    }

    #[test]
    fn lindblad_matches_closed_form() {
        let sup = DiscreteSuperposition::from_probabilities(vec![0.0, 1.0, 2.5], &[0.2, 0.3, 0.5], 1.0).unwrap();
        let rho0 = analytic_rho(&sup, 0.0).unwrap();
        let h = CMatrix::zeros(3, 3);
        let rho = lindblad_evolve(&rho0, &h, &[sup.operator()], 1.0, 1.0, 1e-3).unwrap();
        let expect = analytic_rho(&sup, 1.0).unwrap();
        assert!(max_abs(&(rho.entries() - expect.entries())) < 1e-8);
        assert!((rho.trace().re - 1.0).abs() < 1e-9);
    }

    #[test]
    fn lindblad_decay_exponent_fit() {
        let sup = two_level(0.5);
        let rho0 = analytic_rho(&sup, 0.0).unwrap();
        let h = CMatrix::zeros(2, 2);
        let ts: Vec<f64> = (1..=10).map(|k| k as f64 / 10.0).collect();
        let ys: Vec<f64> = ts
            .iter()
            .map(|&t| {
                lindblad_evolve(&rho0, &h, &[sup.operator()], 1.0, t, 1e-3)
                    .unwrap()
                    .entries()[(0, 1)]
                    .norm()
                    .ln()
            })
            .collect();
        let n = ts.len() as f64;
        let mt = ts.iter().sum::<f64>() / n;
        let my = ys.iter().sum::<f64>() / n;
        let slope = ts.iter().zip(&ys).map(|(t, y)| (t - mt) * (y - my)).sum::<f64>()
            / ts.iter().map(|t| (t - mt).powi(2)).sum::<f64>();
        assert!(((-slope) / 0.5 - 1.0).abs() < 1e-6, "slope {slope}");
    }

    #[test]
    fn unitary_flow_is_isospectral() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(12);
        let rho0 = random_rho(4, &mut rng);
        let g = CMatrix::from_fn(4, 4, |_, _| Complex64::new(rng.sample(StandardNormal), rng.sample(StandardNormal)));
        let h = (&g + g.adjoint()) * Complex64::new(0.5, 0.0);
        let a = CMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![c(0.0), c(1.0), c(2.0), c(3.0)]));
        let dt = 0.01 / hermitian_norm(&h);
        let rho = lindblad_evolve(&rho0, &h, &[a], 0.0, 1.0, dt).unwrap();
        for (x, y) in rho0.eigenvalues().iter().zip(rho.eigenvalues()) {
            assert!((x - y).abs() < 1e-8);
        }
    }

    #[test]
    fn jointly_diagonal_state_is_stationary() {
        let rho0 = DensityMatrixFinite::new(CMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![
            c(0.1),
            c(0.6),
            c(0.3),
        ])))
        .unwrap();
        let a1 = CMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![c(1.0), c(-1.0), c(0.5)]));
        let a2 = CMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![c(0.2), c(0.0), c(2.0)]));
        let rho = lindblad_evolve(&rho0, &CMatrix::zeros(3, 3), &[a1, a2], 0.7, 2.0, 0.01).unwrap();
        assert_eq!(rho.entries(), rho0.entries());
    }

    #[test]
    fn lindblad_rejects_bad_generators() {
        let rho0 = DensityMatrixFinite::pure(&[c(1.0), c(0.0)]).unwrap();
        let z = CMatrix::zeros(2, 2);
        let sx = CMatrix::from_row_slice(2, 2, &[c(0.0), c(1.0), c(1.0), c(0.0)]);
        let sz = CMatrix::from_row_slice(2, 2, &[c(1.0), c(0.0), c(0.0), c(-1.0)]);
        let err = lindblad_evolve(&rho0, &z, &[sx.clone(), sz.clone()], 1.0, 1.0, 0.01).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
        let bad_h = CMatrix::from_row_slice(2, 2, &[c(0.0), c(1.0), c(0.0), c(0.0)]);
        let err = lindblad_evolve(&rho0, &bad_h, &[sz.clone()], 1.0, 1.0, 0.01).unwrap_err();
        assert!(matches!(err, Error::Input(_)));
        assert!(lindblad_evolve(&rho0, &z, &[sz], 1.0, 1.0, 0.5).is_err());
    }

    #[test]
    fn ensemble_rate_examples() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let rho = random_rho(3, &mut rng);
        let a = CMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![c(0.0), c(1.0), c(3.0)]));
        let g = CMatrix::from_fn(3, 3, |_, _| Complex64::new(rng.sample(StandardNormal), rng.sample(StandardNormal)));
        let h = (&g + g.adjoint()) * Complex64::new(0.5, 0.0);
        let id = CMatrix::identity(3, 3);
        assert_eq!(ensemble_rate(&id, &rho, &h, &[a.clone()], 1.3).unwrap(), 0.0);
        let o_diag = CMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![c(2.0), c(-1.0), c(0.5)]));
        assert_eq!(ensemble_rate(&o_diag, &rho, &CMatrix::zeros(3, 3), &[a.clone()], 1.3).unwrap(), 0.0);

        // finite difference of Tr(O ρ(t))
        let o = (&g.transpose() + g.conjugate()) * Complex64::new(0.5, 0.0);
        let rate = ensemble_rate(&o, &rho, &h, &[a.clone()], 1.3).unwrap();
        let step = 1e-4;
        let dt = 0.01 / (hermitian_norm(&h) + 1.3 * 9.0);
        let fwd = lindblad_evolve(&rho, &h, &[a.clone()], 1.3, step, dt.min(step)).unwrap();
        let fd = (fwd.expectation(&o).re - rho.expectation(&o).re) / step;
        let scale = rate.abs().max(1.0);
        assert!((fd - rate).abs() < 1e-2 * scale, "fd {fd} vs {rate}");
    }

    #[test]
    fn gamblers_ruin_fractions() {
        let f = gamblers_ruin_win_fraction(50, 100, 10_000, 1).unwrap();
        assert!((f - 0.5).abs() < 0.02);
        let f = gamblers_ruin_win_fraction(1, 2, 10_000, 2).unwrap();
        assert!((f - 0.5).abs() < 0.02);
        let one = gamblers_ruin(1, 2, RngStream::new(0, 0)).unwrap();
        assert_eq!(one.tosses, 1);
        assert!(gamblers_ruin(0, 100, RngStream::new(0, 0)).is_err());
        assert!(gamblers_ruin(100, 100, RngStream::new(0, 0)).is_err());
    }

    #[test]
    fn defect_examples() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(21);
        let rho = random_rho(3, &mut rng);
        let z = DMatrix::zeros(3, 3);
        assert_eq!(fair_game_defect(&z, &z, &rho, 1.0).unwrap(), vec![0.0; 3]);

        // single off-diagonal probe
        let r_val = 0.37;
        let lambda = 1.9;
        let mut r = DMatrix::zeros(3, 3);
        r[(0, 2)] = r_val;
        r[(2, 0)] = r_val;
        let probe = DensityMatrixFinite::pure(&[c(0.0), c(0.0), c(1.0)]).unwrap();
        let d = fair_game_defect(&r, &z, &probe, lambda).unwrap();
        assert!((d[0] - lambda * r_val * r_val).abs() < 1e-12);

        let mut asym = DMatrix::zeros(3, 3);
        asym[(0, 1)] = 1.0;
        assert!(fair_game_defect(&asym, &z, &rho, 1.0).is_err());
    }

    #[test]
    fn diagonal_family_is_fair_for_any_c() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(33);
        for dim in 2..=5 {
            let alpha: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
            let rho = random_rho(dim, &mut rng);
            for c_shift in [0.0, 0.8, -2.5] {
                let (r, v) = diagonal_fair_game_pair(&alpha, &rho, 1.4, c_shift).unwrap();
                let d = fair_game_defect(&r, &v, &rho, 1.4).unwrap();
                assert!(d.iter().all(|x| x.abs() < 1e-10), "{d:?}");
            }
        }
    }
}
