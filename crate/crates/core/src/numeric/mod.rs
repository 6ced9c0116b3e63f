//! Dense tensors, reverse-mode gradients, Adam, and gradient checking.

pub mod adam;
pub mod gradcheck;
pub mod ops;
pub mod params;
pub mod sparse;
pub mod tape;
pub mod tensor;

pub use adam::{adam_step, Adam, AdamState};
pub use gradcheck::grad_check;
pub use ops::{l2_normalize, log_softmax, relu, sigmoid, softmax, softplus};
pub use params::{Bound, ParamSet};
pub use sparse::CsrMatrix;
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
