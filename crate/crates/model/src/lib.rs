//! Transformer classifier over action tokens.

pub mod adam;
pub mod checkpoint;
pub mod gradcheck;
pub mod real;
pub mod train;
pub mod transformer;
pub mod variant;

pub use real::Real;
pub use train::{predict, train, TrainConfig, TrainError, TrainOutcome};
pub use transformer::{InputKind, Model, ModelConfig, ModelError, Pooling, Sequence};
pub use variant::Variant;
