//! Top-K sparse autoencoders over text embeddings, feature explanation and
//! judging, and logistic classifiers regularised against unintended features.

pub mod classifier;
mod codec;
pub mod embedding;
pub mod error;
pub mod interpret;
pub mod judge;
pub mod optim;
pub mod real;
pub mod rng;
pub mod sae;
pub mod samplesize;
pub mod synth;

pub use classifier::{
    clf_loss, evaluate, purify, train_classifier, ClfTrainConfig, EvalReport, LogisticClassifier, Purifier,
};
pub use embedding::{read_embeddings, write_embeddings, EmbeddingDataset, SpanMeta};
pub use error::{Error, FormatError, Result};
pub use interpret::{explain_all, top_spans, ExplainedSpan, FeatureExplanation};
pub use judge::{identify_unintended, JudgeVerdict, RelevanceLevel, UnintendedSet};
pub use optim::{AdamWConfig, PlateauSchedule};
pub use real::Real;
pub use sae::{finetune, pretrain, SaeTrainConfig, TopKSae};
pub use samplesize::SampleSizeQuery;
