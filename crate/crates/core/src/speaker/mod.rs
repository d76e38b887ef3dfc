//! Speaker verifier: residual CNN encoder, statistics pooling, classifier head.

mod model;
mod train;

pub use model::{
    statistics_pool, FeatureMap, FreqCollapse, SpeakerEmbedding, VerifierArch, VerifierModel, VERIFIER_KIND,
};
pub use train::{
    accuracy, sample_batch, train_verifier, train_verifier_step, verifier_batch_gradients,
    LabelledMel, VerifierBatch, VerifierTrainConfig, VerifierTrainReport,
};
