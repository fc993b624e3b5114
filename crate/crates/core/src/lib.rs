//! Out-of-distribution detection for trained classifiers.
//!
//! A one-class SVM is fitted on the in-distribution activations of a single
//! probe layer of the classifier. The layer is chosen by searching every
//! probe point for the lowest detection error against a probe OOD set. The
//! crate also carries the comparison detectors (max-softmax, ODIN,
//! Mahalanobis, entropy, margin) and the evaluation metrics used to compare
//! them.

pub mod baselines;
pub mod detector;
pub mod error;
pub mod features;
pub mod metrics;
pub mod ocsvm;
pub mod pipeline;
pub mod refnet;
pub mod synthetic;
pub mod tensor_io;

pub use error::{Error, Result};
pub use features::FeatureMatrix;
pub use tensor_io::{Dataset, DatasetManifest, FeatureTensor, Role};
