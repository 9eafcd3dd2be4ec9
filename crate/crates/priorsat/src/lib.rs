//! Geometric tools for planar single-input problems with a prior-saturating
//! singular arc: Lie-bracket geometry, Hamiltonian lifts, multiple shooting
//! for the bridge extremal, switching-curve continuation with certificates,
//! and time-optimal synthesis for the two bundled models.

pub mod config;
pub mod error;
pub mod linalg;
pub mod ode;
pub mod planar_system;

pub mod hamiltonian;
pub mod models;
pub mod output;
pub mod shooting;
pub mod switching_geometry;
pub mod synthesis;

pub use error::{Error, Result};
