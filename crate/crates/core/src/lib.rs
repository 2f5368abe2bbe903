//! Variable-step BDF2 time integration of the periodic Cahn–Hilliard equation.
//!
//! The crate is organised bottom-up:
//!
//! * [`grid`]: periodic square grids, pseudo-spectral operators, discrete norms.
//! * [`kernels`]: BDF2 and DOC convolution kernels, step-ratio bound functions
//!   and eigenvalue/quadratic-form certification.
//! * [`schemes`]: the BDF2 step with its fixed-point solver, starting schemes,
//!   and the Crank–Nicolson type comparison schemes.
//! * [`meshing`]: uniform, random and adaptive time meshes.
//! * [`diagnostics`]: energies, volumes, convergence orders, scaling fits.
//! * [`driver`]: the time loop tying schemes and step selection together.
//! * [`experiments`]: reproducible end-to-end experiment runners.

pub mod diagnostics;
pub mod driver;
pub mod error;
pub mod experiments;
pub mod grid;
pub mod kernels;
pub mod meshing;
pub mod schemes;
pub mod tridiag;

pub use error::{Error, Result};
pub use grid::{Field, Grid, SpectralField};
pub use kernels::{KernelTable, StabilityConstants, TimeMesh};
pub use schemes::{FixedPointConfig, ModelParams, Problem};

