//! Query-adaptive region detection and retrieval.
//!
//! A text phrase is mean-pooled into an embedding, mapped by a trainable
//! generator to a linear region classifier and a box regressor, and the
//! classifier is served against an IVFADC index of precomputed region
//! features. Training supports negative phrase augmentation driven by a
//! periodically rebuilt confusion table of hard negative categories.

pub mod detector;
pub mod embedding;
pub mod error;
pub mod eval;
pub mod fixtures;
pub mod ivfadc;
pub mod npa;
pub mod retrieval;
pub mod store;
pub mod training;

pub use detector::{BBox, Deltas, Detector, GeneratorParams, RegionFeature};
pub use embedding::{Phrase, PhraseEmbedding, WordVectorTable};
pub use error::{Error, Result};
pub use ivfadc::IvfadcIndex;
pub use npa::{ConfusionTable, CooccurrenceStats, Taxonomy};
pub use training::{AnnotatedImage, Label, LabelMatrix, TrainConfig};
