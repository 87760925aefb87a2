//! Merging the parameters of classifiers that share an initialization,
//! either by plain weighted averaging or by weighting every coordinate with
//! its diagonal Fisher information.
//!
//! The crate also contains everything needed to run merging experiments at
//! desk scale: small trainable classifiers, a synthetic related-task suite,
//! a coefficient search harness, an ensembling comparison and FLOPs
//! accounting.

// `!(x >= 0.0)` is used on purpose so that NaN fails the check.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod checkpoint;
pub mod cost;
pub mod data;
pub mod ensemble;
pub mod error;
pub mod experiment;
pub mod fisher;
pub mod merge;
pub mod model;
pub mod search;
pub mod suite;
pub mod tensor;
pub mod train;

pub use checkpoint::{check_merge_compatibility, load_checkpoint, save_checkpoint, Partition};
pub use data::{bucketize_regression, BucketSpec, LabeledDataset};
pub use error::{Error, ErrorKind, Result};
pub use fisher::{FisherConfig, FisherDiagonal, FisherMode};
pub use merge::{
    merge_fisher, merge_isotropic, merge_objective, Fallback, MergeInput, MergeMode, MergeReport, MergeSpec,
};
pub use model::{Activation, Classifier, ModelSpec, PredictiveDistribution};
pub use tensor::{ParameterSet, Role, Tensor, TensorMap};
pub use train::{Optimizer, TrainConfig};
