//! Differentiable layers and the graph executor.

mod graph;
pub mod head;
pub mod init;
mod layer;
pub mod loss;

pub use graph::{ForwardTrace, GradientSet, Gradients, Mode, NetworkGraph};
pub use head::{build_head, HeadConfig, HEAD_PREFIX};
pub use init::init_fan_in_uniform;
pub use layer::{Activation, Layer, LayerKind, Param, Source};
pub use loss::{cross_entropy, one_hot, softmax};
