//! Numeric substrate: tensors, layer kernels, the reverse-mode tape, named
//! parameters, and the SGD optimizer.

pub mod init;
pub mod kernels;
pub mod params;
pub mod sgd;
pub mod tape;
pub mod tensor;

pub use params::{ParamSet, Parameter};
pub use sgd::{sgd_step, sgd_step_filtered, SgdConfig};
pub use tape::{BnBatchStats, NodeId, Tape};
pub use tensor::{Elem, Shape, Tensor, Tensor4};
