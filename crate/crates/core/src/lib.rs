//! Measure-valued martingales on finite supports: measures and cylinder
//! calculus, partition discretisation, path simulation, and dynamic
//! programming on the simplex.

pub mod acceptance;
pub mod applications;
pub mod calculus;
pub mod discretize;
pub mod error;
pub mod hjb;
pub mod measure;
pub mod par;
pub mod rng;
pub mod sde;

pub use error::{MvmError, Result};
pub use measure::{AtomicMeasure, ControlVector, ScalarField, Support};
