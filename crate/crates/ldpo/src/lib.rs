//! Unsupervised joint mining of features and labels.
//!
//! The pipeline alternates between encoding items into feature vectors,
//! clustering the vectors, and retraining a supervised encoder on the
//! cluster labels, until two adjacent clusterings agree. The converged
//! classifier then drives a confusion-based category tree, and per-cluster
//! keyword reports summarize any attached documents.
//!
//! All numeric code is generic over the [`Float`] scalar; concrete aliases
//! for `f32` and `f64` are exported below.

pub mod clustering;
pub mod driver;
pub mod encoding;
pub mod error;
pub mod float;
pub mod hierarchy;
pub mod io;
mod linalg;
pub mod metrics;
pub mod patchmine;
pub mod pseudotask;
pub mod split;
pub mod textmine;
pub mod types;

pub use driver::{run_ldpo, LdpoConfig};
pub use split::make_split;

pub use error::{Error, Result};
pub use float::Float;

pub use types::{
    FeatureMatrix, ImagePatches, IterationRecord, LabelVector, LoopTrace, Patch,
    PatchActivationSet, SplitAssignment, SplitTag,
};

/// Concrete single-precision aliases.
pub type FeatureMatrix32 = FeatureMatrix<f32>;
pub type PatchActivationSet32 = PatchActivationSet<f32>;
pub type PcaModel32 = encoding::PcaModel<f32>;
pub type Codebook32 = encoding::Codebook<f32>;
pub type GmmModel32 = encoding::GmmModel<f32>;
pub type RimModel32 = clustering::RimModel<f32>;
pub type EncoderModel32 = pseudotask::EncoderModel<f32>;
pub type ElementVocabulary32 = patchmine::ElementVocabulary<f32>;
pub type CategoryTree32 = hierarchy::CategoryTree<f32>;

/// Concrete double-precision aliases.
pub type FeatureMatrix64 = FeatureMatrix<f64>;
pub type PatchActivationSet64 = PatchActivationSet<f64>;
pub type PcaModel64 = encoding::PcaModel<f64>;
pub type Codebook64 = encoding::Codebook<f64>;
pub type GmmModel64 = encoding::GmmModel<f64>;
pub type RimModel64 = clustering::RimModel<f64>;
pub type EncoderModel64 = pseudotask::EncoderModel<f64>;
pub type ElementVocabulary64 = patchmine::ElementVocabulary<f64>;
pub type CategoryTree64 = hierarchy::CategoryTree<f64>;
