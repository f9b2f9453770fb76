//! Environmental index channels, outlier screening, gap filling and input
//! normalization.

mod filter;
mod indices;
mod norm;
mod pipeline;

pub use filter::{aggregate_time, idw_fill, screen_outliers, IdwFillParams, ScreenParams};
pub use indices::{compute_lswi, compute_ndwi, compute_tvdi, fit_tvdi_edges, EdgeFit, DEFAULT_TVDI_BINS};
pub use norm::{fit_norm_stats, ChannelStats, NormStats};
pub use pipeline::{assemble_ancillary, clean_bands, PipelineOptions, RAW_BAND_NAMES};

use thiserror::Error;

use crate::grid::GridError;

#[derive(Debug, Error)]
pub enum PreprocessError {
    #[error("TVDI edge fit needs at least 2 non-empty EVI bins, found {0}")]
    TooFewBins(usize),
    #[error("degenerate edge fit: {0}")]
    DegenerateFit(String),
    #[error("dry edge does not lie above the wet edge at EVI {evi}")]
    EdgesCross { evi: f64 },
    #[error("dry and wet edges closer than 1e-6 at pixel ({row}, {col})")]
    DegenerateEdge { row: usize, col: usize },
    #[error("grid has no valid pixels")]
    AllNodata,
    #[error("empty input")]
    Empty,
    #[error("channel {channel} has zero variance")]
    ZeroVariance { channel: usize },
    #[error("need at least {needed} patches, got {got}")]
    TooFewPatches { needed: usize, got: usize },
    #[error("channel count {found} does not match statistics for {expected}")]
    ChannelMismatch { expected: usize, found: usize },
    #[error(transparent)]
    Grid(#[from] GridError),
}

pub type Result<T> = std::result::Result<T, PreprocessError>;
