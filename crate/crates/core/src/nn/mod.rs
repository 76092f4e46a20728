//! Minimal CPU neural-network engine: conv/linear layers, backprop, Adam.

pub mod arch;
pub mod loss;
pub mod model;
pub mod network;
pub mod optim;
pub mod real;
pub mod train;

pub use arch::{ArchKind, ArchSpec, LayerSpec, Shape, DEFAULT_FEATURE_DIM, DEFAULT_LATENT_DIM, EVAL_FEATURE_DIM};
pub use loss::{argmax, softmax, softmax_cross_entropy};
pub use model::{build_model, extract_features, FeatureSet, TrainedModel};
pub use network::{Activations, Network};
pub use optim::{Adam, OptimizerConfig};
pub use real::Real;
pub use train::{
    train_classifier, train_classifier_with_hook, train_decoder, DecoderConfig, EpochStats, LrSchedule, TrainConfig,
    TrainRecord, TrainStep,
};
