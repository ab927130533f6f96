//! Continuous Spontaneous Localization (CSL) collapse dynamics.
//!
//! The crate is organised by physical setting:
//!
//! * [`stochastic`]: noise paths, reproducible RNG streams, quadrature, `erf`.
//! * [`discrete_collapse`]: collapse onto the eigenbasis of one operator,
//!   Born statistics, finite density matrices and the Lindblad equation.
//! * [`clump_dynamics`]: centre-of-mass density matrix of a small rigid clump
//!   on a position grid.
//! * [`gaussian_packet`]: the exactly solvable equilibrium Gaussian packet.
//! * [`interference`]: collapse-damped Mach-Zehnder and two-slit patterns.
//! * [`hermite_noise`]: Hermite-function decomposition of the noise field.
//! * [`cli`]: the reproducible experiment driver behind the `csl` binary.
//!
//! Units: `ħ = 1`. Masses therefore carry units of time/length².

pub mod cli;
pub mod clump_dynamics;
pub mod discrete_collapse;
pub mod error;
pub mod gaussian_packet;
pub mod hermite_noise;
pub mod interference;
mod linalg;
pub mod stochastic;

pub use error::{Error, Result};
pub use linalg::CMatrix;
