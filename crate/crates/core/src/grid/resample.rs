//! Pixel-center-aligned bilinear resampling.
//!
//! Output pixel `o` along an axis maps to source coordinate
//! `(o + 0.5) * n_in / n_out - 0.5`, clamped to `[0, n_in - 1]`. Interpolation
//! is written in lerp form `a + t * (b - a)` so constant fields survive
//! exactly in any precision. The same kernel backs the differentiable resize
//! in [`crate::nn`].

use std::fmt;

use num_traits::Float;

use super::{GeoGrid, GeoTransform, GridError, Result};

/// Rational scale change `num / den` applied to both axes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Ratio {
    pub num: u32,
    pub den: u32,
}

impl Ratio {
    pub fn new(num: u32, den: u32) -> Result<Self> {
        if num == 0 || den == 0 {
            return Err(GridError::NonDivisible(format!("{num}/{den}")));
        }
        Ok(Self { num, den })
    }

    pub fn up(r: u32) -> Self {
        Self { num: r.max(1), den: 1 }
    }

    pub fn down(r: u32) -> Self {
        Self { num: 1, den: r.max(1) }
    }

    /// Output length for an axis of `n` pixels.
    pub fn apply(self, n: usize) -> Result<usize> {
        let scaled = n * self.num as usize;
        if scaled % self.den as usize != 0 || scaled == 0 {
            return Err(GridError::NonDivisible(format!(
                "{self} on an axis of {n} pixels"
            )));
        }
        Ok(scaled / self.den as usize)
    }
}

impl fmt::Display for Ratio {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.num, self.den)
    }
}

/// One output sample along an axis: `lerp(src[lo], src[hi], t)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Tap {
    pub lo: usize,
    pub hi: usize,
    pub t: f64,
}

impl Tap {
    /// Source indices with nonzero weight.
    pub fn touches(&self) -> impl Iterator<Item = usize> {
        let hi = (self.t > 0.0 && self.hi != self.lo).then_some(self.hi);
        std::iter::once(self.lo).chain(hi)
    }
}

/// Interpolation taps for one axis.
#[derive(Debug, Clone, PartialEq)]
pub struct AxisMap {
    pub n_in: usize,
    pub taps: Vec<Tap>,
}

impl AxisMap {
    pub fn new(n_in: usize, n_out: usize) -> Self {
        let taps = (0..n_out)
            .map(|o| {
                // ((2o + 1) * n_in - n_out) / (2 n_out), rounded once.
                let pos = ((2 * o + 1) as f64 * n_in as f64 - n_out as f64) / (2 * n_out) as f64;
                let pos = pos.clamp(0.0, (n_in - 1) as f64);
                let lo = pos.floor() as usize;
                let hi = (lo + 1).min(n_in - 1);
                Tap {
                    lo,
                    hi,
                    t: pos - lo as f64,
                }
            })
            .collect();
        Self { n_in, taps }
    }

    pub fn n_out(&self) -> usize {
        self.taps.len()
    }
}

#[inline]
fn lerp<T: Float>(a: T, b: T, t: T) -> T {
    a + t * (b - a)
}

/// Resamples one row-major `h x w` plane with precomputed axis maps.
pub fn resample_plane<T: Float>(src: &[T], rows: &AxisMap, cols: &AxisMap) -> Vec<T> {
    let w = cols.n_in;
    debug_assert_eq!(src.len(), rows.n_in * w);
    let tx: Vec<T> = cols.taps.iter().map(|c| T::from(c.t).unwrap()).collect();
    let mut out = Vec::with_capacity(rows.n_out() * cols.n_out());
    for ry in &rows.taps {
        let ty = T::from(ry.t).unwrap();
        let top = &src[ry.lo * w..(ry.lo + 1) * w];
        let bot = &src[ry.hi * w..(ry.hi + 1) * w];
        for (cx, &tx) in cols.taps.iter().zip(&tx) {
            let a = lerp(top[cx.lo], top[cx.hi], tx);
            let b = lerp(bot[cx.lo], bot[cx.hi], tx);
            out.push(lerp(a, b, ty));
        }
    }
    out
}

/// Bilinear resampling of a grid by `factor`, on nested grids sharing the origin.
///
/// Any output pixel whose stencil touches a nodata pixel becomes nodata.
pub fn bilinear_resample(grid: &GeoGrid, factor: Ratio) -> Result<GeoGrid> {
    let n_rows = factor.apply(grid.nrows())?;
    let n_cols = factor.apply(grid.ncols())?;
    let rows = AxisMap::new(grid.nrows(), n_rows);
    let cols = AxisMap::new(grid.ncols(), n_cols);

    let src: Vec<f64> = grid.values().iter().map(|&v| v as f64).collect();
    let mut out: Vec<f32> = resample_plane(&src, &rows, &cols)
        .into_iter()
        .map(|v| v as f32)
        .collect();

    if grid.has_nodata() {
        let w = grid.ncols();
        for (oy, ry) in rows.taps.iter().enumerate() {
            for (ox, cx) in cols.taps.iter().enumerate() {
                let touched = ry
                    .touches()
                    .any(|y| cx.touches().any(|x| !grid.is_valid_index(y * w + x)));
                if touched {
                    out[oy * n_cols + ox] = grid.nodata();
                }
            }
        }
    }

    let t = grid.transform();
    let cell = t.cell_size * factor.den as f64 / factor.num as f64;
    let transform = GeoTransform::new(t.x_min, t.y_min, cell)?;
    GeoGrid::new(n_rows, n_cols, transform, out, grid.nodata())
}
