use crate::grid::{GeoGrid, GridStack, PatchPair};

use super::{PreprocessError, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChannelStats {
    pub mean: f64,
    pub std: f64,
}

/// Per-channel z-score statistics, in the channel order of the stacks they
/// were fitted on.
#[derive(Debug, Clone, PartialEq)]
pub struct NormStats {
    pub channels: Vec<ChannelStats>,
}

impl NormStats {
    pub fn new(channels: Vec<ChannelStats>) -> Result<Self> {
        for (channel, s) in channels.iter().enumerate() {
            if !(s.std > 0.0 && s.std.is_finite() && s.mean.is_finite()) {
                return Err(PreprocessError::ZeroVariance { channel });
            }
        }
        Ok(Self { channels })
    }

    pub fn len(&self) -> usize {
        self.channels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.channels.is_empty()
    }

    pub fn get(&self, channel: usize) -> ChannelStats {
        self.channels[channel]
    }

    fn check(&self, found: usize) -> Result<()> {
        if found != self.len() {
            return Err(PreprocessError::ChannelMismatch {
                expected: self.len(),
                found,
            });
        }
        Ok(())
    }

    pub fn apply(&self, stack: &GridStack) -> Result<GridStack> {
        self.check(stack.len())?;
        let channels = stack
            .channels()
            .iter()
            .enumerate()
            .map(|(i, g)| self.apply_channel(g, i))
            .collect::<Result<Vec<_>>>()?;
        Ok(GridStack::new(channels, stack.names().to_vec())?)
    }

    pub fn invert(&self, stack: &GridStack) -> Result<GridStack> {
        self.check(stack.len())?;
        let channels = stack
            .channels()
            .iter()
            .enumerate()
            .map(|(i, g)| self.invert_channel(g, i))
            .collect::<Result<Vec<_>>>()?;
        Ok(GridStack::new(channels, stack.names().to_vec())?)
    }

    pub fn apply_channel(&self, grid: &GeoGrid, channel: usize) -> Result<GeoGrid> {
        let s = self.get(channel);
        map_valid(grid, |v| (v - s.mean) / s.std)
    }

    pub fn invert_channel(&self, grid: &GeoGrid, channel: usize) -> Result<GeoGrid> {
        let s = self.get(channel);
        map_valid(grid, |v| v * s.std + s.mean)
    }
}

fn map_valid(grid: &GeoGrid, f: impl Fn(f64) -> f64) -> Result<GeoGrid> {
    let out = grid
        .values()
        .iter()
        .map(|&v| {
            if grid.is_nodata(v) {
                v
            } else {
                f(v as f64) as f32
            }
        })
        .collect();
    Ok(grid.with_values(out)?)
}

/// Mean and population standard deviation of every input channel over all
/// valid pixels of all patches (two passes, fixed order).
pub fn fit_norm_stats(patches: &[PatchPair]) -> Result<NormStats> {
    if patches.len() < 2 {
        return Err(PreprocessError::TooFewPatches {
            needed: 2,
            got: patches.len(),
        });
    }
    let nch = patches[0].input.len();
    if let Some(p) = patches.iter().find(|p| p.input.len() != nch) {
        return Err(PreprocessError::ChannelMismatch {
            expected: nch,
            found: p.input.len(),
        });
    }
    let mut stats = Vec::with_capacity(nch);
    for ch in 0..nch {
        let values = || patches.iter().flat_map(move |p| p.input.channel(ch).valid_values());
        let n = values().count();
        if n == 0 {
            return Err(PreprocessError::AllNodata);
        }
        let mean = values().sum::<f64>() / n as f64;
        let var = values().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
        let std = var.sqrt();
        if !(std > 1e-12 * (1.0 + mean.abs())) {
            return Err(PreprocessError::ZeroVariance { channel: ch });
        }
        stats.push(ChannelStats { mean, std });
    }
    NormStats::new(stats)
}
