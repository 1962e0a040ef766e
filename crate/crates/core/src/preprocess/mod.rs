//! Dataset construction and conditioning.

use thiserror::Error;

mod clean;
mod extxyz;
mod histogram;
mod realign;
mod split;
mod synthetic;

pub use clean::{filter_by_force_norm, spectral_norm, DEFAULT_FORCE_THRESHOLD};
pub use extxyz::{ingest_extxyz, parse_extxyz, write_extxyz};
pub use histogram::{compute_histograms, element_occurrence, HistField, Histogram, HistogramSpec};
pub use realign::{
    fit_per_source, fit_reference_energies, realign_energies, realign_per_source, ReferenceEnergyTable,
    TIKHONOV_DAMPING,
};
pub use split::{split_dataset, SplitAssignment, DEFAULT_RATIOS};
pub use synthetic::{generate_synthetic, SyntheticConfig, ToyPotential};

#[derive(Debug, Error)]
pub enum PreprocessError {
    #[error("element distribution has zero total weight")]
    ZeroWeight,
    #[error("invalid generator setting: {0}")]
    InvalidSetting(String),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("frame {frame}: {message}")]
    Schema { frame: usize, message: String },
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("split ratios must be positive and sum to 1, got {0:?}")]
    BadRatios([f64; 3]),
    #[error("histogram bin edges must be strictly increasing with at least two edges")]
    BadBins,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
