//! Small convolutional classifier with a tape-based backward pass and Adam.

pub mod adam;
pub mod kernels;
pub mod loss;
pub mod model;
pub mod tape;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use loss::{argmax_rows, cross_entropy};
pub use model::{backbone_forward, head_forward, Architecture, NamedTensor, NetworkParams};
pub use tape::{NodeId, ParamGrads, TapeCache};
