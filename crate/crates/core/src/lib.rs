//! Habitat classification from ground-level imagery.
//!
//! The crate covers the full desk-scale pipeline: a habitat [`taxonomy`] with
//! coarse-group aggregation, [`dataset`] manifests and stratified splits, a
//! small attention-based reference encoder in [`model`], supervised and
//! supervised-contrastive [`training`], the evaluation suite in [`metrics`],
//! embedding-space cluster indices in [`embedding`], GradCAM saliency in
//! [`explain`], and the annotator benchmark in [`expert`].

pub mod dataset;
pub mod embedding;
pub mod error;
pub mod expert;
pub mod explain;
pub mod metrics;
pub mod model;
pub mod taxonomy;
pub mod training;

pub use error::{Error, Result};
