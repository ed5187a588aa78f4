//! Unsupervised multi-object motion segmentation with contextually separated
//! attention slots.
//!
//! The model binds an optical-flow rendering to a set of exchangeable latent
//! slots, decodes each slot back to flow conditioned on the RGB image, and is
//! trained min-max against an adversarial decoder that tries to reconstruct
//! the whole flow from single slots. See the guide under `book/` for a
//! walkthrough; the chapters double as doc-tests.

pub mod error;
pub mod model;
pub mod tensor;

pub use error::{DivaError, Result};
