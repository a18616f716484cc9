//! Core library for learned video anonymization.
//!
//! The toolkit trains an encoder-decoder anonymizer against two branches:
//! an action-recognition branch whose loss is minimized and a self-supervised
//! contrastive branch whose loss is maximized, alternating updates in a
//! minimax loop. The trained anonymizer is then scored by training fresh
//! target classifiers on anonymized data and comparing against non-learned
//! baselines (downsampling, box obfuscation).
//!
//! Module map:
//! - [`tensor`]: reverse-mode autodiff substrate (tape, ops, Adam, checks)
//! - [`data`]: clips, manifests, synthetic factor dataset, probes
//! - [`anonymizer`]: encoder-decoder model and L1 identity pretraining
//! - [`ssl`]: frame sampler, augmentations, contrastive objectives
//! - [`utility`]: spatio-temporal action classifier and video-level inference
//! - [`minimax`]: gradient reversal and the two-step alternating optimizer
//! - [`baselines`]: downsampling and box-driven obfuscation
//! - [`metrics`]: average precision, cMAP, F1, trade-off reports
//! - [`protocols`]: target-model training and the evaluation protocols
//! - [`checkpoint`]: role-tagged parameter serialization

pub mod anonymizer;
pub mod baselines;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod metrics;
pub mod minimax;
pub mod protocols;
pub mod ssl;
pub mod tensor;
pub mod utility;

pub use error::{Error, Result};
