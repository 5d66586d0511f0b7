//! Linear (Koopman) embeddings of nonlinear controlled dynamics.
//!
//! The crate covers the full identification-to-control loop:
//!
//! * [`dynamics`] — benchmark controlled systems and RK4 time discretization,
//! * [`sampling`] — input signals and trajectory data collection,
//! * [`observables`] — learned neural features and fixed dictionaries for lifting,
//! * [`edmd`] — least-squares operator estimation for a fixed lifting,
//! * [`training`] — joint feature/operator learning and spectral-norm-constrained
//!   refinement with closed-loop data,
//! * [`control`] — LQR synthesis in the lifted space and closed-loop simulation,
//! * [`analysis`] — modeling-error fields, accumulation decompositions, L2 and
//!   analytic error bounds, and observable-rescaling studies.

pub mod analysis;
pub mod control;
pub mod dynamics;
pub mod edmd;
pub mod error;
pub mod observables;
pub mod sampling;
pub mod training;

mod util;

pub use error::{Error, Result};
