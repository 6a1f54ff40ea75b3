//! Minimal neural-network engine: tensors, a fixed layer library, momentum
//! SGD with frozen-layer support, finite-difference gradient checking, and
//! a portable weight-archive format.
//!
//! Networks run in f32; an f64 mode exists solely to give gradient checks
//! numerical headroom. Everything is deterministic under a seed: weight
//! initialization, minibatch shuffling, and dropout masks all derive from
//! ChaCha streams.

pub mod archive;
pub mod gradcheck;
pub mod layer;
pub mod network;
pub mod tensor;
pub mod train;

pub use archive::{
    load_network, load_weights, pack_network, save_network, unpack_network, ParamSlot,
    WeightArchive,
};
pub use gradcheck::{check_gradients, GradCheckReport};
pub use layer::{Cache, Gradients, Layer, LayerKind, LayerSpec};
pub use network::Network;
pub use tensor::{gemm, image_to_tensor, stack, Scalar, Tensor};
pub use train::{
    batch_accuracy, evaluate, loss_and_grad, train, EpochStats, Loss, LrDecay, TrainConfig,
    TrainData, TrainingCurve,
};
