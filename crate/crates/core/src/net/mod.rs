//! The attention-guided multi-factor downscaling network.
//!
//! The forward pass upsamples the coarse precipitation bilinearly, embeds it
//! and the nine ancillary factors, recalibrates them with global and
//! per-factor cross-attention, refines the fused features with a stack of
//! residual dense and residual attention blocks, and adds the reconstructed
//! residual back onto the upsampled field.

mod blocks;
mod io;
mod model;

pub use blocks::{croa_block, gca_forward, mfca_forward, rab_forward, rdam_forward, rdb_forward};
pub use io::{decode_model, encode_model, load_model, save_model};
pub use model::{amcn_forward, init_params, param_layout, AmcnModel, Forward, ParamSpec};

use thiserror::Error;

use crate::grid::GridError;
use crate::nn::NnError;
use crate::preprocess::PreprocessError;

#[derive(Debug, Error)]
pub enum NetError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("input mismatch: {0}")]
    Input(String),
    #[error("model file: {0}")]
    Format(String),
    #[error("unsupported model version {0}")]
    Version(u32),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Preprocess(#[from] PreprocessError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, NetError>;

/// Architecture hyperparameters and ablation switches.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AmcnConfig {
    pub base_channels: usize,
    pub n_ancillary: usize,
    pub scale: usize,
    pub rdb_layers: usize,
    pub rdb_growth: usize,
    pub n_levels: usize,
    pub kernel: usize,
    pub use_gca: bool,
    pub use_mfca: bool,
    pub use_degradation_loss: bool,
}

impl AmcnConfig {
    /// Full-size network: 32 channels, growth 16, factor 10.
    pub fn canonical() -> Self {
        Self {
            base_channels: 32,
            n_ancillary: 9,
            scale: 10,
            rdb_layers: 6,
            rdb_growth: 16,
            n_levels: 3,
            kernel: 3,
            use_gca: true,
            use_mfca: true,
            use_degradation_loss: true,
        }
    }

    /// Single-core desk scale: 16 channels, factor 4.
    pub fn desk() -> Self {
        Self {
            base_channels: 16,
            scale: 4,
            rdb_growth: 8,
            ..Self::canonical()
        }
    }

    /// Smallest configuration that still has every block, for gradient checks.
    pub fn tiny() -> Self {
        Self {
            base_channels: 8,
            scale: 4,
            rdb_layers: 2,
            rdb_growth: 4,
            n_levels: 2,
            ..Self::canonical()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(NetError::Config(m.to_string()));
        if self.base_channels == 0 || self.rdb_growth == 0 {
            return bad("base_channels and rdb_growth must be >= 1");
        }
        if self.rdb_layers == 0 || self.n_levels == 0 {
            return bad("rdb_layers and n_levels must be >= 1");
        }
        if self.scale < 2 {
            return bad("scale must be >= 2");
        }
        if self.n_ancillary == 0 {
            return bad("n_ancillary must be >= 1");
        }
        if self.kernel % 2 == 0 {
            return bad("kernel must be odd");
        }
        Ok(())
    }

    /// Channel count entering the cascade projection.
    pub fn cascade_channels(&self) -> usize {
        let c = self.base_channels;
        match (self.use_gca, self.use_mfca) {
            (true, true) => 2 * c,
            (true, false) | (false, true) => c,
            // no attention: the raw precipitation and joint ancillary embeddings
            (false, false) => 2 * c,
        }
    }
}

impl Default for AmcnConfig {
    fn default() -> Self {
        Self::desk()
    }
}
