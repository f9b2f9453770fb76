//! Georeferenced rasters on a regular WGS84 lat/lon grid.
//!
//! A [`GeoGrid`] is north-up: row 0 is the northernmost row, and the center
//! of pixel `(r, c)` sits at
//! `(x_min + (c + 0.5) * cell_size, y_min + (nrows - r - 0.5) * cell_size)`.
//! Values are stored as `f32`; statistics accumulate in `f64`.

mod io;
mod patch;
mod resample;
mod station;

pub use io::{read_grid, read_stack, read_stations, write_grid, write_stack, write_stations};
pub use patch::{extract_patches, patch_count, PatchPair};
pub use resample::{bilinear_resample, resample_plane, AxisMap, Ratio};
pub use station::{sample_at_stations, Station, StationSet};

use thiserror::Error;

/// Sentinel used for missing pixels unless a file says otherwise.
pub const DEFAULT_NODATA: f32 = -9999.0;

/// The ten input channels in the order the network consumes them.
pub const CANONICAL_CHANNELS: [&str; 10] = [
    "precip_up",
    "lon",
    "lat",
    "dem",
    "lstd",
    "lstn",
    "evi",
    "tvdi",
    "ndwi",
    "lswi",
];

/// The nine ancillary channels (canonical order without the precipitation).
pub fn ancillary_channel_names() -> &'static [&'static str] {
    &CANONICAL_CHANNELS[1..]
}

#[derive(Debug, Error)]
pub enum GridError {
    #[error("invalid dimensions: {0}")]
    Dimension(String),
    #[error("invalid geotransform: {0}")]
    Geotransform(String),
    #[error("non-finite value {value} at pixel ({row}, {col})")]
    NonFinite { row: usize, col: usize, value: f32 },
    #[error("grids are not co-registered: {0}")]
    Misaligned(String),
    #[error("resample factor {0} does not divide the grid dimensions")]
    NonDivisible(String),
    #[error("station {id} at ({lon}, {lat}) lies outside the grid extent")]
    OutsideExtent { id: String, lon: f64, lat: f64 },
    #[error("bad magic bytes {0:?}, expected \"AGRD\"")]
    BadMagic([u8; 4]),
    #[error("unsupported AGRID version {0}")]
    UnsupportedVersion(u32),
    #[error("malformed header: {0}")]
    MalformedHeader(String),
    #[error("truncated payload: {0}")]
    Truncated(String),
    #[error("channel count mismatch: expected {expected}, found {found}")]
    ChannelCount { expected: usize, found: usize },
    #[error("channel order mismatch at index {index}: expected {expected:?}, found {found:?}")]
    ChannelOrder {
        index: usize,
        expected: String,
        found: String,
    },
    #[error("station file: {0}")]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, GridError>;

/// Geotransform of a north-up grid: west edge, south edge and square cell size.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GeoTransform {
    pub x_min: f64,
    pub y_min: f64,
    pub cell_size: f64,
}

impl GeoTransform {
    pub fn new(x_min: f64, y_min: f64, cell_size: f64) -> Result<Self> {
        if !(cell_size > 0.0 && cell_size.is_finite()) {
            return Err(GridError::Geotransform(format!(
                "cell_size must be positive and finite, got {cell_size}"
            )));
        }
        if !x_min.is_finite() || !y_min.is_finite() {
            return Err(GridError::Geotransform("non-finite origin".into()));
        }
        Ok(Self {
            x_min,
            y_min,
            cell_size,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeoGrid {
    nrows: usize,
    ncols: usize,
    transform: GeoTransform,
    values: Vec<f32>,
    nodata: f32,
}

impl GeoGrid {
    pub fn new(
        nrows: usize,
        ncols: usize,
        transform: GeoTransform,
        values: Vec<f32>,
        nodata: f32,
    ) -> Result<Self> {
        if nrows == 0 || ncols == 0 {
            return Err(GridError::Dimension(format!(
                "grid must be at least 1x1, got {nrows}x{ncols}"
            )));
        }
        let n = nrows
            .checked_mul(ncols)
            .ok_or_else(|| GridError::Dimension(format!("{nrows}x{ncols} overflows")))?;
        if values.len() != n {
            return Err(GridError::Dimension(format!(
                "{nrows}x{ncols} grid needs {n} values, got {}",
                values.len()
            )));
        }
        let grid = Self {
            nrows,
            ncols,
            transform,
            values,
            nodata,
        };
        for (i, &v) in grid.values.iter().enumerate() {
            if !grid.is_nodata(v) && !v.is_finite() {
                return Err(GridError::NonFinite {
                    row: i / ncols,
                    col: i % ncols,
                    value: v,
                });
            }
        }
        Ok(grid)
    }

    pub fn filled(nrows: usize, ncols: usize, transform: GeoTransform, value: f32) -> Result<Self> {
        let n = nrows.saturating_mul(ncols);
        Self::new(nrows, ncols, transform, vec![value; n], DEFAULT_NODATA)
    }

    /// Builds a grid by evaluating `f(row, col)` at every pixel.
    pub fn from_fn(
        nrows: usize,
        ncols: usize,
        transform: GeoTransform,
        mut f: impl FnMut(usize, usize) -> f32,
    ) -> Result<Self> {
        let mut values = Vec::with_capacity(nrows.saturating_mul(ncols));
        for r in 0..nrows {
            for c in 0..ncols {
                values.push(f(r, c));
            }
        }
        Self::new(nrows, ncols, transform, values, DEFAULT_NODATA)
    }

    /// A grid on the same georeference with new values.
    pub fn with_values(&self, values: Vec<f32>) -> Result<Self> {
        Self::new(self.nrows, self.ncols, self.transform, values, self.nodata)
    }

    pub fn nrows(&self) -> usize {
        self.nrows
    }

    pub fn ncols(&self) -> usize {
        self.ncols
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn transform(&self) -> GeoTransform {
        self.transform
    }

    pub fn cell_size(&self) -> f64 {
        self.transform.cell_size
    }

    pub fn nodata(&self) -> f32 {
        self.nodata
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f32> {
        self.values
    }

    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.values[row * self.ncols + col]
    }

    /// `None` for nodata pixels.
    pub fn value_at(&self, row: usize, col: usize) -> Option<f32> {
        let v = self.get(row, col);
        (!self.is_nodata(v)).then_some(v)
    }

    pub fn is_nodata(&self, v: f32) -> bool {
        if self.nodata.is_nan() {
            v.is_nan()
        } else {
            v == self.nodata
        }
    }

    pub fn is_valid_index(&self, idx: usize) -> bool {
        !self.is_nodata(self.values[idx])
    }

    pub fn valid_count(&self) -> usize {
        self.values.iter().filter(|&&v| !self.is_nodata(v)).count()
    }

    pub fn has_nodata(&self) -> bool {
        self.values.iter().any(|&v| self.is_nodata(v))
    }

    /// Center of pixel `(row, col)` as `(lon, lat)`.
    pub fn pixel_center(&self, row: usize, col: usize) -> (f64, f64) {
        let t = &self.transform;
        (
            t.x_min + (col as f64 + 0.5) * t.cell_size,
            t.y_min + (self.nrows as f64 - row as f64 - 0.5) * t.cell_size,
        )
    }

    pub fn x_max(&self) -> f64 {
        self.transform.x_min + self.ncols as f64 * self.transform.cell_size
    }

    pub fn y_max(&self) -> f64 {
        self.transform.y_min + self.nrows as f64 * self.transform.cell_size
    }

    /// True when both grids share dimensions and geotransform.
    pub fn same_grid(&self, other: &GeoGrid) -> bool {
        self.nrows == other.nrows && self.ncols == other.ncols && self.transform == other.transform
    }

    pub fn ensure_same_grid(&self, other: &GeoGrid) -> Result<()> {
        if self.same_grid(other) {
            Ok(())
        } else {
            Err(GridError::Misaligned(format!(
                "{}x{} {:?} vs {}x{} {:?}",
                self.nrows, self.ncols, self.transform, other.nrows, other.ncols, other.transform
            )))
        }
    }

    /// Copies the window starting at `(row0, col0)` with the given size.
    pub fn window(&self, row0: usize, col0: usize, nrows: usize, ncols: usize) -> Result<GeoGrid> {
        if row0 + nrows > self.nrows || col0 + ncols > self.ncols {
            return Err(GridError::Dimension(format!(
                "window {nrows}x{ncols} at ({row0}, {col0}) exceeds {}x{}",
                self.nrows, self.ncols
            )));
        }
        let mut values = Vec::with_capacity(nrows * ncols);
        for r in row0..row0 + nrows {
            let start = r * self.ncols + col0;
            values.extend_from_slice(&self.values[start..start + ncols]);
        }
        let cs = self.transform.cell_size;
        let transform = GeoTransform {
            x_min: self.transform.x_min + col0 as f64 * cs,
            y_min: self.transform.y_min + (self.nrows - row0 - nrows) as f64 * cs,
            cell_size: cs,
        };
        GeoGrid::new(nrows, ncols, transform, values, self.nodata)
    }

    /// Valid values widened to f64.
    pub fn valid_values(&self) -> impl Iterator<Item = f64> + '_ {
        self.values
            .iter()
            .filter(|&&v| !self.is_nodata(v))
            .map(|&v| v as f64)
    }
}

/// Co-registered channels sharing one georeference.
#[derive(Debug, Clone, PartialEq)]
pub struct GridStack {
    channels: Vec<GeoGrid>,
    names: Vec<String>,
}

impl GridStack {
    pub fn new(channels: Vec<GeoGrid>, names: Vec<String>) -> Result<Self> {
        if channels.is_empty() {
            return Err(GridError::Dimension("stack needs at least one channel".into()));
        }
        if channels.len() != names.len() {
            return Err(GridError::ChannelCount {
                expected: channels.len(),
                found: names.len(),
            });
        }
        for ch in &channels[1..] {
            channels[0].ensure_same_grid(ch)?;
            if ch.nodata().to_bits() != channels[0].nodata().to_bits() {
                return Err(GridError::Misaligned("channels disagree on nodata".into()));
            }
        }
        Ok(Self { channels, names })
    }

    pub fn from_named<S: Into<String>>(pairs: Vec<(S, GeoGrid)>) -> Result<Self> {
        let (names, channels): (Vec<String>, Vec<GeoGrid>) =
            pairs.into_iter().map(|(n, g)| (n.into(), g)).unzip();
        Self::new(channels, names)
    }

    pub fn channels(&self) -> &[GeoGrid] {
        &self.channels
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn len(&self) -> usize {
        self.channels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.channels.is_empty()
    }

    pub fn channel(&self, i: usize) -> &GeoGrid {
        &self.channels[i]
    }

    pub fn by_name(&self, name: &str) -> Option<&GeoGrid> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| &self.channels[i])
    }

    pub fn nrows(&self) -> usize {
        self.channels[0].nrows()
    }

    pub fn ncols(&self) -> usize {
        self.channels[0].ncols()
    }

    pub fn template(&self) -> &GeoGrid {
        &self.channels[0]
    }

    pub fn into_parts(self) -> (Vec<GeoGrid>, Vec<String>) {
        (self.channels, self.names)
    }

    /// Errors unless the channel names equal `expected` exactly and in order.
    pub fn ensure_order(&self, expected: &[&str]) -> Result<()> {
        if self.len() != expected.len() {
            return Err(GridError::ChannelCount {
                expected: expected.len(),
                found: self.len(),
            });
        }
        for (index, (have, want)) in self.names.iter().zip(expected).enumerate() {
            if have != want {
                return Err(GridError::ChannelOrder {
                    index,
                    expected: want.to_string(),
                    found: have.clone(),
                });
            }
        }
        Ok(())
    }

    pub fn window(&self, row0: usize, col0: usize, nrows: usize, ncols: usize) -> Result<GridStack> {
        let channels = self
            .channels
            .iter()
            .map(|g| g.window(row0, col0, nrows, ncols))
            .collect::<Result<Vec<_>>>()?;
        GridStack::new(channels, self.names.clone())
    }
}

/// Longitude and latitude channels holding each pixel's center coordinate.
pub fn make_coordinate_channels(template: &GeoGrid) -> (GeoGrid, GeoGrid) {
    let t = template.transform();
    let (nr, nc) = (template.nrows(), template.ncols());
    let lon = GeoGrid::from_fn(nr, nc, t, |r, c| template.pixel_center(r, c).0 as f32)
        .expect("template dimensions are valid");
    let lat = GeoGrid::from_fn(nr, nc, t, |r, c| template.pixel_center(r, c).1 as f32)
        .expect("template dimensions are valid");
    (lon, lat)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gt() -> GeoTransform {
        GeoTransform::new(100.0, 30.0, 1.0).unwrap()
    }

    #[test]
    fn coordinate_channels_center_formula() {
        let g = GeoGrid::filled(1, 1, gt(), 0.0).unwrap();
        let (lon, lat) = make_coordinate_channels(&g);
        assert_eq!(lon.get(0, 0), 100.5);
        assert_eq!(lat.get(0, 0), 30.5);
    }

    #[test]
    fn lon_varies_by_column_lat_decreases_by_row() {
        let g = GeoGrid::filled(5, 7, GeoTransform::new(100.0, 20.0, 0.1).unwrap(), 0.0).unwrap();
        let (lon, lat) = make_coordinate_channels(&g);
        for r in 0..5 {
            for c in 0..7 {
                assert_eq!(lon.get(r, c), lon.get(0, c));
                assert_eq!(lat.get(r, c), lat.get(r, 0));
            }
        }
        for r in 1..5 {
            assert!(lat.get(r, 0) < lat.get(r - 1, 0));
        }
        for c in 1..7 {
            assert!(lon.get(0, c) > lon.get(0, c - 1));
        }
    }

    #[test]
    fn rejects_zero_dims_and_bad_cells() {
        assert!(matches!(
            GeoGrid::new(0, 3, gt(), vec![], DEFAULT_NODATA),
            Err(GridError::Dimension(_))
        ));
        assert!(GeoTransform::new(0.0, 0.0, 0.0).is_err());
        assert!(matches!(
            GeoGrid::new(1, 1, gt(), vec![f32::INFINITY], DEFAULT_NODATA),
            Err(GridError::NonFinite { .. })
        ));
    }

    #[test]
    fn window_keeps_georeference() {
        let g = GeoGrid::from_fn(4, 4, gt(), |r, c| (r * 4 + c) as f32).unwrap();
        let w = g.window(1, 2, 2, 2).unwrap();
        assert_eq!(w.values(), &[6.0, 7.0, 10.0, 11.0]);
        assert_eq!(w.pixel_center(0, 0), g.pixel_center(1, 2));
        assert_eq!(w.pixel_center(1, 1), g.pixel_center(2, 3));
    }

    #[test]
    fn stack_order_contract() {
        let g = GeoGrid::filled(2, 2, gt(), 1.0).unwrap();
        let s = GridStack::from_named(vec![("a", g.clone()), ("b", g)]).unwrap();
        assert!(s.ensure_order(&["a", "b"]).is_ok());
        assert!(matches!(
            s.ensure_order(&["b", "a"]),
            Err(GridError::ChannelOrder { index: 0, .. })
        ));
        assert!(matches!(
            s.ensure_order(&["a"]),
            Err(GridError::ChannelCount { .. })
        ));
    }
}
