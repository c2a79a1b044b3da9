//! Completely positive Markovian hybrid quantum-classical dynamics.

pub mod diffusive_hme;
pub mod diffusive_unravel;
pub mod discrete_hme;
pub mod error;
pub mod field;
pub mod integrate;
pub mod json;
pub mod jump;
pub mod linalg;
pub mod model;
pub mod model_file;
pub mod models;
pub mod noise;
pub mod rng;
pub mod state;

pub use error::{Error, Result};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
