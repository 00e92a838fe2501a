//! Small deterministic neural-network engine: tensors, layers with exact
//! backward passes, cross-entropy and Adam.

pub mod adam;
pub mod layer;
pub mod loss;
pub mod network;
pub mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use layer::{backward, forward, Cache, LayerSpec, Mode, RunningStats};
pub use loss::{clamped_ln, cross_entropy, PROB_FLOOR};
pub use network::{Layer, Network};
pub use tensor::Tensor;
