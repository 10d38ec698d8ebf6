pub mod ablation;
pub mod config;
pub mod container;
pub mod error;
pub mod eval;
pub mod gmm;
pub mod gradcheck;
pub mod loss;
pub mod math;
pub mod model;
pub mod select;
pub mod synth;
pub mod target;
pub mod trainer;
pub mod types;

pub use error::{Error, Result};
