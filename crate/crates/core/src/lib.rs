//! Source-free domain adaptation: train a classifier on a labeled source
//! domain, then adapt its encoder to an unlabeled target domain without
//! touching source data, and optionally refine the target labels with a
//! semi-supervised second stage.

pub mod config;
pub mod data;
pub mod error;
pub mod hypothesis_transfer;
pub mod io;
pub mod labeling_transfer;
pub mod losses;
pub mod matrix;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod pipeline;
pub mod pseudo_label;
pub mod scenarios;
pub mod source_training;
pub mod train;

pub use config::AdaptationConfig;
pub use error::{Error, Result};
pub use matrix::{FeatureMatrix, Matrix, ProbabilityMatrix};
pub use model::ModelBundle;
