//! Network description, forward pass, loss heads, regularizers and Adam.

pub mod adam;
pub mod checkpoint;
pub mod forward;
pub mod loss;
pub mod regularize;
pub mod spec;

pub use adam::{AdamConfig, AdamState};
pub use checkpoint::Checkpoint;
pub use forward::{activations, forward, predict, Activations, BranchMask};
pub use loss::{sigmoid_cross_entropy, softmax_cross_entropy};
pub use regularize::{dropout, l2_penalty};
pub use spec::{Block, Head, Layer, NetworkSpec};
