use super::{GeoGrid, GridError, GridStack, Result};

/// A training sample: the HR input stack, the HR label and the coarse
/// precipitation over the same footprint.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchPair {
    pub input: GridStack,
    pub label: GeoGrid,
    pub lr_precip: GeoGrid,
    pub valid: bool,
}

impl PatchPair {
    pub fn size(&self) -> usize {
        self.label.nrows()
    }
}

/// Number of windows `extract_patches` visits along both axes.
pub fn patch_count(nrows: usize, ncols: usize, p: usize, stride: usize) -> usize {
    if p > nrows || p > ncols || stride == 0 {
        return 0;
    }
    ((nrows - p) / stride + 1) * ((ncols - p) / stride + 1)
}

/// Tiles the scene into `p x p` windows with the given stride, dropping any
/// window that holds nodata in the input, the label or the coarse field.
///
/// `lr` must be the factor-`r` coarser grid over the same extent, and both
/// `p` and `stride` must be multiples of `r` so each window aligns with
/// whole coarse pixels.
pub fn extract_patches(
    input: &GridStack,
    label: &GeoGrid,
    lr: &GeoGrid,
    p: usize,
    stride: usize,
) -> Result<Vec<PatchPair>> {
    let hr = input.template();
    hr.ensure_same_grid(label)?;
    let ratio = lr.cell_size() / hr.cell_size();
    let r = ratio.round() as usize;
    if r == 0 || (ratio - r as f64).abs() > 1e-9 * ratio {
        return Err(GridError::Misaligned(format!(
            "coarse/fine cell ratio {ratio} is not an integer"
        )));
    }
    let (t_hr, t_lr) = (hr.transform(), lr.transform());
    let tol = 1e-9 * hr.cell_size();
    if lr.nrows() * r != hr.nrows()
        || lr.ncols() * r != hr.ncols()
        || (t_hr.x_min - t_lr.x_min).abs() > tol
        || (t_hr.y_min - t_lr.y_min).abs() > tol
    {
        return Err(GridError::Misaligned(format!(
            "coarse grid {}x{} at ({}, {}) does not cover fine grid {}x{} at ({}, {})",
            lr.nrows(),
            lr.ncols(),
            t_lr.x_min,
            t_lr.y_min,
            hr.nrows(),
            hr.ncols(),
            t_hr.x_min,
            t_hr.y_min
        )));
    }
    if p == 0 || stride == 0 || p % r != 0 || stride % r != 0 {
        return Err(GridError::Misaligned(format!(
            "patch {p} and stride {stride} must be positive multiples of the scale factor {r}"
        )));
    }
    if p > hr.nrows() || p > hr.ncols() {
        return Err(GridError::Dimension(format!(
            "patch {p} larger than scene {}x{}",
            hr.nrows(),
            hr.ncols()
        )));
    }

    let mut out = Vec::new();
    let q = p / r;
    for row0 in (0..=hr.nrows() - p).step_by(stride) {
        for col0 in (0..=hr.ncols() - p).step_by(stride) {
            let input = input.window(row0, col0, p, p)?;
            let label = label.window(row0, col0, p, p)?;
            let lr_precip = lr.window(row0 / r, col0 / r, q, q)?;
            let valid = !(label.has_nodata()
                || lr_precip.has_nodata()
                || input.channels().iter().any(GeoGrid::has_nodata));
            if valid {
                out.push(PatchPair {
                    input,
                    label,
                    lr_precip,
                    valid,
                });
            }
        }
    }
    Ok(out)
}
