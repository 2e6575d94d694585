//! Momentum self-distillation contrastive pre-training over a small dual
//! encoder, with a hand-written reverse-mode tape for gradients.

pub mod checkpoint;
pub mod encoder;
pub mod objective;
pub mod optim;
pub mod params;
pub mod queue;
pub mod retrieval;
pub mod synthetic;
pub mod tape;
pub mod tokenizer;
pub mod trainer;

pub use checkpoint::{Checkpoint, CheckpointError};
pub use encoder::{DualEncoder, EncoderConfig, EncoderError};
pub use objective::{
    contrastive_loss, distillation_loss, pseudo_targets, similarity_distributions, total_loss, DistributionPair,
    Embeddings, ObjectiveError, QueueView,
};
pub use params::{ema_update, ParamSet, StateError};
pub use queue::FeatureQueue;
pub use tokenizer::Tokenizer;
pub use trainer::{train, LossBreakdown, PairedCorpus, StepRecord, TrainConfig, TrainError, TrainState};
