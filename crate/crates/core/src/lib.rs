//! ForenViT: a desk-scale toolkit for studying transfer learning on
//! deepfake image detection with compact vision transformers.
//!
//! The crate covers the full loop: synthetic corpus generation, masked or
//! supervised pretraining, two detector styles (frozen-backbone feature
//! fusion, and partial fine-tuning of the final transformer blocks),
//! conventional probes over frozen features, EER/HTER evaluation with
//! threshold calibration, and CLS-attention heatmap rendering.
//!
//! Dense kernels run data-parallel under rayon by default; building with
//! `--no-default-features` selects the bit-identical sequential fallback.

pub mod backbone;
pub mod checkpoint;
pub mod error;
pub mod kvtext;
pub mod numerics;

pub use error::{Error, ErrorClass, Result};
