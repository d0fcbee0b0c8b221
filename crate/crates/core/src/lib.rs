//! Margin-based adversarial attacks and adversarial training on small
//! classifiers, built on a minimal reverse-mode autodiff tape.

pub mod attacks;
pub mod data;
pub mod models;
pub mod objectives;
pub mod optim;
pub mod tensor;
pub mod training;

pub use attacks::{AttackConfig, AttackError, AttackKind, AttackResult, Norm, TargetSelection, TieBreak};
pub use data::Dataset;
pub use models::{argmax, Checkpoint, CheckpointMeta, Model, ModelError, ModelSpec};
pub use tensor::{Tape, Tensor, TensorError};
pub use training::{Algorithm, EpochMetrics, TrainConfig, TrainError};
