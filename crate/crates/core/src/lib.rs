//! Solvers and Monte Carlo verifiers for risk-sensitive linear-quadratic-Gaussian
//! control and major-minor mean-field games.
//!
//! The crate is `no_std` compatible (it needs `alloc`). The default `std` feature
//! enables parallel path simulation through rayon; results are identical either way.
#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

mod error;
pub mod linalg;
mod math;
pub mod mfg;
pub mod model;
pub mod montecarlo;
pub mod numerics;
mod parallel;
pub mod population;
pub mod presets;
pub mod riccati;

pub use error::{Error, Result};
pub use model::{LqgProblem, MajorMinorSpec, MajorParams, MinorTypeParams};
pub use numerics::{Coefficient, Direction, MatrixTrajectory, TimeGrid};
pub use riccati::{FeedbackLaw, RiccatiSolution};

pub use nalgebra::{DMatrix, DVector};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
