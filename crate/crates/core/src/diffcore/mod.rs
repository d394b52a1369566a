//! Dense tensors, reverse-mode differentiation and the Adam optimizer.

pub mod checkpoint;
mod gradcheck;
mod graph;
mod optim;
mod params;
mod tensor;

pub use gradcheck::{grad_check, relative_error, GradCheckConfig, GradCheckReport, ParamCheck, RELATIVE_ERROR_FLOOR};
pub use graph::{CustomVjp, ElementwiseKind, Graph, NodeId, BCE_EPSILON};
pub use optim::{Adam, AdamConfig};
pub use params::{Param, ParamId, ParamStore};
pub use tensor::Tensor;
