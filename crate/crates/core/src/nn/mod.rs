//! From-scratch network engine: layers with exact backprop, SUM-reduced
//! losses, momentum SGD, cut-layer splitting and gradient verification.

pub mod gradcheck;
pub mod layer;
pub mod loss;
pub mod optim;
pub mod serialize;
pub mod stack;

pub use gradcheck::{grad_check, grad_check_with, GradCheckReport};
pub use layer::{Layer, LayerKind, Mode, NormMode};
pub use loss::{loss, loss_chunked, ChunkedLoss, LossKind};
pub use optim::{sgd_step, OptimState};
pub use serialize::{deserialize_weights, serialize_weights};
pub use stack::{CutSpec, LayerSpec, LayerStack, SubNetworks, Tape, Task};

/// Loss matching a task: cross-entropy for classification, L1 for regression.
pub fn loss_for(task: Task) -> LossKind {
    match task {
        Task::Classification { .. } => LossKind::CrossEntropy,
        Task::Regression => LossKind::L1,
    }
}
