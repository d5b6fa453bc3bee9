pub mod autodiff;
pub mod cli;
pub mod comgan;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod exec;
pub mod localizer;
pub mod nn;
pub mod refine;
pub mod rng;
pub mod scene;
pub mod tensor;

pub use error::{Error, Result};
