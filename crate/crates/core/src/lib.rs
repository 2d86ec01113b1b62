pub mod cli;
pub mod complexity;
pub mod data_synth;
pub mod error;
pub mod evaluation;
pub mod imageproc;
pub mod model;
pub mod poc_attention;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
