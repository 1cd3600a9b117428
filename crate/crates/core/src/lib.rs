//! Toolkit for evaluating image/metadata feature fusion with transfer-learned
//! image features.
//!
//! The pieces compose into a paired experiment (see [`pipeline::run_experiment`]):
//! encode tabular metadata into numeric vectors, concatenate them with image
//! feature vectors, train softmax heads on image-only and fused features, and
//! compare the two with per-class metrics and weight reports. ECG signals are
//! turned into scalogram images by a continuous wavelet transform before
//! feature extraction.
//!
//! Numeric code is generic over [`Scalar`] (`f32` or `f64`); the aliases below
//! fix the precision used by the command-line tools.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod augment;
pub mod features;
pub mod interpret;
pub mod metadata;
pub mod metrics;
pub mod pipeline;
pub mod scalar;
pub mod scalogram;
pub mod softmax;
pub mod splits;
pub mod synthetic;

pub use augment::{augment, AugmentSpec};
pub use features::{fuse, read_fmx, write_fmx, FeatureMatrix, FusedMatrix, ProviderConfig};
pub use interpret::{magnitude_ratio, split_weights, WeightReport};
pub use metadata::{encode_record, encode_table, MetadataSchema, SchemaDeclaration};
pub use metrics::{improvement, ImprovementReport, MetricReport};
pub use pipeline::{run_experiment, ExperimentConfig, RunManifest, Stage, StageError};
pub use scalar::Scalar;
pub use scalogram::{cwt, montage, WaveletSpec};
pub use softmax::{train, TrainConfig};
pub use splits::{stratified_split, DatasetIndex, Subset};

pub type SoftmaxModel64 = softmax::SoftmaxModel<f64>;
pub type SoftmaxModel32 = softmax::SoftmaxModel<f32>;
pub type Scalogram64 = scalogram::Scalogram<f64>;
pub type Scalogram32 = scalogram::Scalogram<f32>;
pub type EcgSignal64 = scalogram::EcgSignal<f64>;
pub type ClassMetrics64 = metrics::ClassMetrics<f64>;

/// Any error raised by the toolkit.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Metadata(#[from] metadata::MetadataError),
    #[error(transparent)]
    Features(#[from] features::FeatureError),
    #[error(transparent)]
    Softmax(#[from] softmax::SoftmaxError),
    #[error(transparent)]
    Metrics(#[from] metrics::MetricsError),
    #[error(transparent)]
    Splits(#[from] splits::SplitError),
    #[error(transparent)]
    Scalogram(#[from] scalogram::ScalogramError),
    #[error(transparent)]
    Augment(#[from] augment::AugmentError),
    #[error(transparent)]
    Interpret(#[from] interpret::InterpretError),
    #[error(transparent)]
    Stage(#[from] pipeline::StageError),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
