//! cytoscreen-core: PAP-smear image analysis pipeline.
//!
//! The pipeline has three stages, each usable on its own:
//!
//! 1. **Detection** - locate nuclei in multi-cell slide images with a
//!    classical chain (V channel, median filter, CLAHE, global threshold,
//!    connected components, padded bounding boxes).
//! 2. **Segmentation** - per-pixel nucleus masks for single-cell images via
//!    a patch CNN over three classes (nucleus / edge / background), with
//!    GLCM-homogeneity routing that decides which images get contrast
//!    enhancement before patch extraction.
//! 3. **Classification** - frozen-feature transfer learning: a fixed
//!    convolutional bank (loaded from a weight archive or a seeded random
//!    fallback) feeding a small trainable head. Flat 7-class, binary,
//!    decision-tree cascade, and masked-background variants.
//!
//! Supporting modules: a minimal CNN engine with gradient-checked layers
//! ([`nnet`]), dataset ingestion / splitting / augmentation / synthesis
//! ([`dataset`]), evaluation metrics ([`metrics`]), and run orchestration
//! with manifests ([`pipeline`]).

pub mod classification;
pub mod dataset;
pub mod error;
pub mod imgproc;
pub mod metrics;
pub mod nnet;
pub mod pipeline;
pub mod segmentation;
pub mod texture;

pub use error::{Error, Result};
