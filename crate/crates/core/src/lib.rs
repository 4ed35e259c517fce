//! Post-training int8 quantization for small convolutional classifiers.
//!
//! The crate bundles an FP32 inference engine with a JSON + raw blob model
//! format, uniform 8-bit fake quantization (default and accuracy-aware flows),
//! calibration-data providers (image directories, IFS fractals, CIFAR-10
//! batches), and evaluation metrics (top-1 accuracy, accuracy drop,
//! Inception Score).

pub mod accuracy_aware;
pub mod data;
pub mod engine;
pub mod error;
pub mod experiment;
pub mod metrics;
pub mod quant;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
