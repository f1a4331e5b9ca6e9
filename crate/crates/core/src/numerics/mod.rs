//! Dense tensors, reverse-mode autodiff and gradient verification.

pub mod gradcheck;
pub mod graph;
pub mod kernels;
pub mod param;
pub mod rng;
mod scalar;
mod tensor;

pub use gradcheck::{backprop_check, GradCheckOptions, GradCheckReport};
pub use graph::{GradMode, Graph, NodeId, RopeAngles};
pub use param::{Fnv64, Gradients, ParamId, ParamStore, Parameter};
pub use scalar::{gemm, Precision, Scalar, Strided};
pub use tensor::Tensor;
