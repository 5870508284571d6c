//! From-scratch convolutional network and surrounding pipeline for 48x48
//! grayscale facial expression recognition.
//!
//! - [`tensor`], [`nn`], [`optim`]: dense tensors and hand-differentiated layers.
//! - [`model`], [`checkpoint`]: the four-block CNN and its binary checkpoint format.
//! - [`dataset`], [`augment`]: FER2013 CSV ingestion, splitting, augmentation.
//! - [`imgproc`], [`pgm`]: frame denoising, resizing, normalization, PGM I/O.
//! - [`gate`]: SAD scene-change detection that bypasses the model on static frames.
//! - [`metrics`], [`trainer`]: confusion matrices and the two-stage training loop.

pub mod augment;
pub mod checkpoint;
pub mod dataset;
pub mod error;
pub mod gate;
pub mod gradcheck;
pub mod imgproc;
pub mod label;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod pgm;
pub mod rng;
pub mod synth;
pub mod tensor;
pub mod trainer;

pub use error::{CheckpointError, FerError, Result};
pub use label::{EmotionLabel, NUM_CLASSES};
pub use model::{FerConfig, FerModel};
pub use rng::RngState;
pub use tensor::{Scalar, Tensor};
