//! Numeric substrate: tensors, reverse-mode differentiation, parameters,
//! the AdamW optimizer and checkpoint I/O.

pub mod checkpoint;
pub mod graph;
pub mod optim;
pub mod params;
pub mod tensor;

pub use graph::{Graph, KeyIndex, Var};
pub use optim::{lr_schedule, AdamW};
pub use params::{Init, Param, ParamId, ParamStore};
pub use tensor::{matmul, Tensor};
