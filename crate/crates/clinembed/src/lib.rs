//! Self-supervised clinical feature embeddings.
//!
//! The library covers the full pipeline: a dense-tensor reverse-mode autodiff
//! engine, a per-feature tokenizer for mixed numerical/categorical clinical
//! variables, CBOW and MLM pretraining objectives, transformer encoders over
//! the feature and time axes, downstream fine-tuning on per-step and
//! stay-level tasks, ranking metrics for imbalanced classification, and an
//! embedding probe with exact t-SNE for unsupervised analysis.

pub mod checkpoint;
pub mod checks;
pub mod data;
pub mod downstream;
pub mod encoder;
pub mod error;
pub mod metrics;
pub mod optim;
pub mod params;
pub mod pretrain;
pub mod probe;
pub mod tensor;
pub mod tokenizer;
pub mod tsne;

pub use error::{Error, Result};
