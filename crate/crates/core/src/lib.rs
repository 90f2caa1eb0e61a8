//! Momentum-based bilevel optimization for problems whose lower level is
//! nonconvex but satisfies the Polyak-Łojasiewicz (PL) condition.
//!
//! The crate is organised bottom-up:
//!
//! - [`spectral`]: eigenvalue clamping, spectral-norm and ball projections,
//!   and application of a clamped inverse without forming it.
//! - [`problems`]: the [`BilevelOracle`] interface plus three problem
//!   families (bilevel PL game, matrix-sensing hyper-representation, and a
//!   strongly convex quadratic with closed-form hyper-gradients).
//! - [`hypergrad`]: the clipped hyper-gradient estimator, gradient mapping,
//!   proximal step and a finite-difference reference.
//! - [`solvers`]: MGBiO, MSGBiO and VR-MSGBiO iterations and the run loop.
//! - [`diagnostics`]: constants calculator, Lyapunov functions, PL residual
//!   and convergence-rate fitting.
//! - [`trace_io`]: configuration, seeded substreams and file formats.
//! - [`experiment`] and [`suites`]: drivers shared by the CLI and tests.
//!
//! Every numerical type is generic over [`Real`]; `f64` aliases are exported
//! for the common case.

pub mod diagnostics;
pub mod error;
pub mod finite_diff;
pub mod experiment;
pub mod hypergrad;
pub mod problems;
pub mod scalar;
pub mod solvers;
pub mod spectral;
pub mod suites;
pub mod trace_io;

pub use error::{Error, Result};
pub use problems::{Batch, BilevelOracle};
pub use scalar::Real;

pub type SymEig64 = spectral::SymEig<f64>;
pub type ClipSpec64 = spectral::ClipSpec<f64>;
pub type HyperGradParts64 = hypergrad::HyperGradParts<f64>;
pub type FeasibleSet64 = hypergrad::FeasibleSet<f64>;
pub type PlGame64 = problems::PlGameInstance<f64>;
pub type MatrixSensing64 = problems::MatrixSensingInstance<f64>;
pub type QuadOracle64 = problems::QuadOracleInstance<f64>;
pub type IterateState64 = solvers::IterateState<f64>;
pub type SolverConfig64 = solvers::SolverConfig<f64>;
pub type StepSchedule64 = solvers::StepSchedule<f64>;

pub type SymEig32 = spectral::SymEig<f32>;
pub type ClipSpec32 = spectral::ClipSpec<f32>;
pub type QuadOracle32 = problems::QuadOracleInstance<f32>;
pub type IterateState32 = solvers::IterateState<f32>;
