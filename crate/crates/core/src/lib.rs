//! Shock formation and lifespan asymptotics for `∂²ₜu - Δu = uₜ uₜₜ` in two space dimensions.
//!
//! The pipeline runs from compactly supported data to the first radiation profile,
//! its Burgers evolution along characteristics, the cusp construction of the blowup
//! point, and a direct finite-difference solver used to measure lifespans.

pub mod blowup_geometry;
pub mod burgers;
pub mod cli;
pub mod config;
pub mod error;
pub mod initial_data;
pub mod lifespan_study;
pub mod profile;
pub mod quadrature;
pub mod radial;
pub mod wave2d;

pub use error::{Error, Result};
