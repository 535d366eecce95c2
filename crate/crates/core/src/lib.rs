pub mod collision;
pub mod config;
pub mod diagnostics;
pub mod error;
pub mod harness;
pub mod kinetic_solver;
pub mod linearized;
pub mod nsf_solver;
pub mod report;
pub mod spectral;
pub mod velocity_space;

pub use error::{Error, Result};
