//! Residual correction of a downscaled raster against station readings.
//!
//! Differences between stations and the raster are spread over the grid by
//! inverse-distance weighting and added back.

use std::path::Path;

use serde::Serialize;
use thiserror::Error;

use crate::grid::{sample_at_stations, GeoGrid, GridError, StationSet};

pub const DEFAULT_POWER: f64 = 2.0;
pub const DEFAULT_MAX_NEIGHBORS: usize = 12;

/// Distance in degrees below which a pixel center counts as the station itself.
const EXACT_HIT: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum GdaError {
    #[error("no station has a reading over a valid pixel")]
    NoUsableStations,
    #[error("invalid parameter: {0}")]
    Param(String),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error("residual table: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, GdaError>;

/// Station reading minus the raster at the station's pixel.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Residual {
    #[serde(rename = "station_id")]
    pub id: String,
    pub lon: f64,
    pub lat: f64,
    pub observed: f64,
    pub predicted: f64,
    pub delta: f64,
}

/// Residuals at usable stations and the number skipped for lacking a
/// reading or sitting over nodata.
#[derive(Debug, Clone, PartialEq)]
pub struct Residuals {
    pub records: Vec<Residual>,
    pub skipped: usize,
}

pub fn station_residuals(downscaled: &GeoGrid, stations: &StationSet) -> Result<Residuals> {
    let sampled = sample_at_stations(downscaled, stations)?;
    let mut records = Vec::with_capacity(stations.len());
    let mut skipped = 0;
    for (s, (_, p)) in stations.iter().zip(sampled) {
        match (s.value, p) {
            (Some(obs), Some(pred)) if obs.is_finite() => records.push(Residual {
                id: s.id.clone(),
                lon: s.lon,
                lat: s.lat,
                observed: obs,
                predicted: pred as f64,
                delta: obs - pred as f64,
            }),
            _ => skipped += 1,
        }
    }
    if skipped > 0 {
        log::warn!("{skipped} of {} stations skipped", stations.len());
    }
    if records.is_empty() {
        return Err(GdaError::NoUsableStations);
    }
    Ok(Residuals { records, skipped })
}

fn check_params(power: f64, max_neighbors: usize) -> Result<()> {
    if !(power > 0.0 && power.is_finite()) || max_neighbors == 0 {
        return Err(GdaError::Param(format!(
            "power {power} and max_neighbors {max_neighbors} must be positive"
        )));
    }
    Ok(())
}

fn idw_values(residuals: &[Residual], template: &GeoGrid, power: f64, max_neighbors: usize) -> Vec<f64> {
    let k = max_neighbors.min(residuals.len());
    let mut dist: Vec<(f64, usize)> = Vec::with_capacity(residuals.len());
    let mut out = Vec::with_capacity(template.len());
    for row in 0..template.nrows() {
        for col in 0..template.ncols() {
            let (x, y) = template.pixel_center(row, col);
            dist.clear();
            dist.extend(
                residuals
                    .iter()
                    .enumerate()
                    .map(|(i, r)| ((r.lon - x).hypot(r.lat - y), i)),
            );
            dist.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            let near = &dist[..k];
            let v = if near[0].0 < EXACT_HIT {
                residuals[near[0].1].delta
            } else {
                let (mut num, mut den) = (0.0, 0.0);
                for &(d, i) in near {
                    let w = d.powf(-power);
                    num += w * residuals[i].delta;
                    den += w;
                }
                num / den
            };
            out.push(v);
        }
    }
    out
}

/// Inverse-distance-weighted residual surface on `template`'s grid, using the
/// `max_neighbors` nearest stations by planar distance in degrees. Ties in
/// distance are broken by station order.
pub fn idw_surface(residuals: &[Residual], template: &GeoGrid, power: f64, max_neighbors: usize) -> Result<GeoGrid> {
    check_params(power, max_neighbors)?;
    if residuals.is_empty() {
        return Err(GdaError::NoUsableStations);
    }
    let v = idw_values(residuals, template, power, max_neighbors);
    Ok(template.with_values(v.into_iter().map(|x| x as f32).collect())?)
}

/// Calibrated raster and the residuals it was built from.
#[derive(Debug, Clone, PartialEq)]
pub struct Calibration {
    pub calibrated: GeoGrid,
    pub residuals: Residuals,
}

/// Adds the interpolated station residuals to `downscaled`, clamping at zero
/// and keeping nodata pixels.
pub fn apply_gda(downscaled: &GeoGrid, stations: &StationSet, power: f64, max_neighbors: usize) -> Result<Calibration> {
    check_params(power, max_neighbors)?;
    let residuals = station_residuals(downscaled, stations)?;
    let surface = idw_values(&residuals.records, downscaled, power, max_neighbors);
    let values = downscaled
        .values()
        .iter()
        .zip(surface)
        .map(|(&v, d)| {
            if downscaled.is_nodata(v) {
                v
            } else {
                (v as f64 + d).max(0.0) as f32
            }
        })
        .collect();
    Ok(Calibration {
        calibrated: downscaled.with_values(values)?,
        residuals,
    })
}

pub fn write_residuals(residuals: &[Residual], path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in residuals {
        w.serialize(r)?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{GeoTransform, Station, DEFAULT_NODATA};

    fn grid(v: Vec<f32>, nc: usize) -> GeoGrid {
        GeoGrid::new(v.len() / nc, nc, GeoTransform::new(0.0, 0.0, 1.0).unwrap(), v, DEFAULT_NODATA).unwrap()
    }

    fn st(id: &str, lon: f64, lat: f64, v: f64) -> Station {
        Station {
            id: id.into(),
            lon,
            lat,
            value: Some(v),
        }
    }

    fn res(lon: f64, lat: f64, delta: f64) -> Residual {
        Residual {
            id: String::new(),
            lon,
            lat,
            observed: 0.0,
            predicted: 0.0,
            delta,
        }
    }

    #[test]
    fn residual_examples() {
        let g = grid(vec![120.0, 50.0, DEFAULT_NODATA, 7.0], 2);
        let s = StationSet::new(vec![
            st("a", 0.5, 1.5, 100.0),
            st("b", 1.5, 1.5, 50.0),
            st("c", 0.5, 0.5, 10.0),
        ]);
        let r = station_residuals(&g, &s).unwrap();
        assert_eq!(r.skipped, 1);
        assert_eq!(r.records.iter().map(|r| r.delta).collect::<Vec<_>>(), vec![-20.0, 0.0]);
        let none = StationSet::new(vec![st("c", 0.5, 0.5, 10.0)]);
        assert!(matches!(station_residuals(&g, &none), Err(GdaError::NoUsableStations)));
    }

    #[test]
    fn surface_examples() {
        let t = grid(vec![0.0; 12], 4);
        let one = idw_surface(&[res(0.3, 0.7, 4.5)], &t, 2.0, 12).unwrap();
        assert!(one.values().iter().all(|&v| v == 4.5));

        let two = idw_surface(&[res(0.5, 1.5, -2.0), res(2.5, 1.5, 2.0)], &t, 2.0, 12).unwrap();
        assert_eq!(two.get(1, 1), 0.0);
        assert_eq!(two.get(1, 0), -2.0);
        assert_eq!(two.get(1, 2), 2.0);
    }

    #[test]
    fn nearest_neighbors_only() {
        let t = grid(vec![0.0; 10], 10);
        let far = idw_surface(&[res(0.5, 0.5, 1.0), res(9.5, 0.5, 100.0)], &t, 2.0, 1).unwrap();
        assert_eq!(far.get(0, 3), 1.0);
        assert_eq!(far.get(0, 7), 100.0);
        assert!(matches!(idw_surface(&[], &t, 2.0, 1), Err(GdaError::NoUsableStations)));
        assert!(matches!(idw_surface(&[res(0.5, 0.5, 1.0)], &t, 2.0, 0), Err(GdaError::Param(_))));
    }

    #[test]
    fn calibration_examples() {
        let g = grid(vec![10.0, 20.0, 3.0, DEFAULT_NODATA], 2);
        let s = StationSet::new(vec![st("a", 0.5, 1.5, 5.0), st("b", 1.5, 1.5, 15.0)]);
        let c = apply_gda(&g, &s, 2.0, 12).unwrap().calibrated;
        assert_eq!(c.values(), &[5.0, 15.0, 0.0, DEFAULT_NODATA]);
    }
}
