//! A desk-scale laboratory for natural-gradient optimization.
//!
//! The crate builds every curvature matrix that shows up in second-order
//! stochastic optimization of predictive models — the Fisher information
//! matrix, its Monte-Carlo and "empirical" variants, the generalized
//! Gauss-Newton matrix, and the Hessian — and pairs them with the exact
//! convergence theory available for quadratic objectives: closed-form mean
//! and variance recursions, Lyapunov-equation trace identities, convergence
//! bounds for constant and annealed learning rates, iterate averaging, and
//! reparameterization-invariance checks.
//!
//! Everything is dense and exact by design. Problems stay small (a few
//! hundred parameters at most) so that each closed-form prediction can be
//! validated against an independent recursion or a Monte-Carlo simulation.
//!
//! Module map:
//!
//! * [`model`] — tiny feed-forward predictors, exponential-family output
//!   distributions, and the JVP/VJP primitives curvature is built from.
//! * [`curvature`] — dense curvature matrices, damping, diagonal
//!   accumulators, and the quadratic-model machinery.
//! * [`optim`] — the stochastic update engine: preconditioned steps,
//!   learning-rate schedules, iterate averaging, damping adaptation.
//! * [`theory`] — exact convergence theory on quadratics.
//! * [`invariance`] — reparameterization machinery and invariance checks.
//! * [`harness`] — config-driven experiment runner (simulation, theory
//!   curves, the 1-d counterexample, training demos).
//! * [`verify`] — the acceptance checks, runnable as named suites.

pub mod curvature;
pub mod error;
pub mod harness;
pub mod invariance;
pub mod linalg;
pub mod model;
pub mod optim;
pub mod theory;
pub mod verify;

pub use error::{Error, Result};
pub use model::{Activation, Dataset, IdentityModel, MlpModel, Model, PredictiveFamily, Target};

pub use curvature::{CurvatureKind, CurvatureOperator, DiagAccumulator, DiagMode};
pub use optim::{AveragingMode, LrSchedule, OptimizerState};
pub use theory::{IterationSpec, QuadraticProblem, TheoryCurve};
