//! Two-stage three-modality consensus classifier on pre-extracted feature
//! sequences: unimodal pretraining with gradient-norm pseudo-label refinement,
//! then multimodal finetuning through parameter-free temperature fusion and a
//! learned consensus router.

pub mod consensus;
pub mod data;
pub mod diffcore;
pub mod encoders;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod modality;
pub mod pipeline;
pub mod plgm;
pub mod rng;
pub mod scalar;

pub use modality::Modality;

pub use error::{CmcError, Result};
pub use scalar::Scalar;
