//! Reverse-mode differentiation over dense `f64` matrices, plus the
//! parameter store and optimizer used by the training code.

pub mod gradcheck;
pub mod graph;
pub mod optim;
pub mod params;

pub use graph::{sigmoid, softplus, BatchStats, Gradients, Graph, Mat, Var};
pub use optim::{clip_grad_norm, AdamW, StepGroup};
pub use params::{to_storage_precision, Param, ParamId, ParamKind, ParamStore};
