pub mod augment;
pub mod blob;
pub mod checkpoint;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod expr;
pub mod nn;
pub mod objectives;
pub mod omics;
pub mod synth;
pub mod train;
pub mod vision;

pub use error::{Result, SealError};
