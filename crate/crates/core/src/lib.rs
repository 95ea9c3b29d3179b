//! End-to-end adaptive part generation for localized attribute recognition.
//!
//! Keypoints are regressed from convolutional features, turned into part
//! boxes, adjusted by learned offsets, converted into axis-aligned affine
//! transforms and used to bilinearly sample part feature maps that feed the
//! per-part attribute classifiers. Everything is differentiable and trained
//! jointly.

pub mod autodiff;
pub mod error;
pub mod experiment;
pub mod geometry;
pub mod gradsuite;
pub mod metrics;
pub mod model;
pub mod plot;
pub mod sampler;
pub mod schema;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Precision, Scalar, Tensor};
