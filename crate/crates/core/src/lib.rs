//! Thin-smear cell image classification: corpus handling, preprocessing,
//! an RBF-SVM baseline, two hand-built CNNs, transfer learning over three
//! ImageNet backbones, evaluation metrics and browser-loadable export.

pub mod cnn_models;
pub mod dataset;
pub mod export;
pub mod error;
pub mod metrics;
pub mod pipeline;
pub mod preprocess;
pub mod runs;
pub mod svm;
pub mod synthetic;
pub mod train;
pub mod transfer;

pub use dataset::{Corpus, DatasetSplit, Label, LabeledImage, Scheme, CLASS_NAMES};
pub use error::{CoreError, Result};
pub use preprocess::{AugmentConfig, PreprocessProfile};
