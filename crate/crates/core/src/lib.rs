pub mod baselines;
pub mod config;
pub mod error;
pub mod grid;
pub mod io;
pub mod losses;
pub mod model;
pub mod nn;
pub mod plot;
pub mod quadrature;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
