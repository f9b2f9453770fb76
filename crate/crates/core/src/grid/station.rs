use super::{GeoGrid, GridError, Result};

/// An in-situ gauge. `value` is `None` when the record is missing.
#[derive(Debug, Clone, PartialEq)]
pub struct Station {
    pub id: String,
    pub lon: f64,
    pub lat: f64,
    pub value: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct StationSet {
    records: Vec<Station>,
}

impl StationSet {
    pub fn new(records: Vec<Station>) -> Self {
        Self { records }
    }

    pub fn records(&self) -> &[Station] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Station> {
        self.records.iter()
    }

    pub fn push(&mut self, s: Station) {
        self.records.push(s);
    }
}

impl FromIterator<Station> for StationSet {
    fn from_iter<I: IntoIterator<Item = Station>>(iter: I) -> Self {
        Self::new(iter.into_iter().collect())
    }
}

impl GeoGrid {
    /// Pixel containing `(lon, lat)`.
    ///
    /// Cells are half-open and include their west and south edges; the
    /// grid's own east and north boundaries belong to the last column/row.
    pub fn locate(&self, lon: f64, lat: f64) -> Option<(usize, usize)> {
        let t = self.transform();
        if !(lon >= t.x_min && lon <= self.x_max() && lat >= t.y_min && lat <= self.y_max()) {
            return None;
        }
        let col = (((lon - t.x_min) / t.cell_size).floor() as usize).min(self.ncols() - 1);
        let from_south = (((lat - t.y_min) / t.cell_size).floor() as usize).min(self.nrows() - 1);
        Some((self.nrows() - 1 - from_south, col))
    }
}

/// Grid value at each station's pixel; `None` over nodata.
pub fn sample_at_stations(
    grid: &GeoGrid,
    stations: &StationSet,
) -> Result<Vec<(String, Option<f32>)>> {
    stations
        .iter()
        .map(|s| {
            let (r, c) = grid.locate(s.lon, s.lat).ok_or_else(|| GridError::OutsideExtent {
                id: s.id.clone(),
                lon: s.lon,
                lat: s.lat,
            })?;
            Ok((s.id.clone(), grid.value_at(r, c)))
        })
        .collect()
}
