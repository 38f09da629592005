//! Doubly right object recognition toolkit.
//!
//! * [`dataset`] builds (category, rationale) image manifests from pluggable
//!   language-model and image-search sources.
//! * [`encoder`] holds the frozen dual encoder and the backend traits.
//! * [`prompt`] defines the learnable why prompts and their injection.
//! * [`trainer`] learns prompts with an image-to-text contrastive loss.
//! * [`evaluator`] scores right/wrong category × right/wrong rationale.
//! * [`report`] renders results as CSV or markdown.

pub mod dataset;
pub mod encoder;
pub mod error;
pub mod evaluator;
pub mod hash;
pub mod par;
pub mod prompt;
pub mod report;
pub mod synthetic;
pub mod trainer;

pub use error::{Error, Result};
