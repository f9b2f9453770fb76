use crate::grid::GeoGrid;

use super::{PreprocessError, Result};

pub const DEFAULT_TVDI_BINS: usize = 20;

/// Wet and dry edges of the LST/EVI feature space, `lst = intercept + slope * evi`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EdgeFit {
    pub wet_intercept: f64,
    pub wet_slope: f64,
    pub dry_intercept: f64,
    pub dry_slope: f64,
    pub n_bins: usize,
}

impl EdgeFit {
    pub fn wet(&self, evi: f64) -> f64 {
        self.wet_intercept + self.wet_slope * evi
    }

    pub fn dry(&self, evi: f64) -> f64 {
        self.dry_intercept + self.dry_slope * evi
    }
}

fn least_squares(points: &[(f64, f64)]) -> Result<(f64, f64)> {
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = points.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    if sxx <= 1e-12 * (1.0 + mx * mx) {
        return Err(PreprocessError::DegenerateFit(
            "edge points share one EVI value".into(),
        ));
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    if !slope.is_finite() || !intercept.is_finite() {
        return Err(PreprocessError::DegenerateFit("non-finite edge".into()));
    }
    Ok((intercept, slope))
}

/// Fits the dry and wet edges from per-bin LST extrema.
///
/// Valid pixels are split into `n_bins` equal-width EVI bins. In each
/// non-empty bin the pixel with the highest LST contributes a dry-edge point
/// and the one with the lowest LST a wet-edge point; each edge is the
/// least-squares line through its points.
pub fn fit_tvdi_edges(lst: &GeoGrid, evi: &GeoGrid, n_bins: usize) -> Result<EdgeFit> {
    lst.ensure_same_grid(evi)?;
    let pairs: Vec<(f64, f64)> = lst
        .values()
        .iter()
        .zip(evi.values())
        .filter(|(&t, &e)| !lst.is_nodata(t) && !evi.is_nodata(e))
        .map(|(&t, &e)| (e as f64, t as f64))
        .collect();
    if pairs.is_empty() || n_bins < 2 {
        return Err(PreprocessError::TooFewBins(0));
    }
    let lo = pairs.iter().map(|p| p.0).fold(f64::INFINITY, f64::min);
    let hi = pairs.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max);
    if hi <= lo {
        return Err(PreprocessError::TooFewBins(1));
    }

    // (dry point, wet point) per bin
    let mut bins: Vec<Option<((f64, f64), (f64, f64))>> = vec![None; n_bins];
    for &(e, t) in &pairs {
        let b = (((e - lo) / (hi - lo)) * n_bins as f64).floor() as usize;
        let slot = &mut bins[b.min(n_bins - 1)];
        match slot {
            None => *slot = Some(((e, t), (e, t))),
            Some((dry, wet)) => {
                if t > dry.1 {
                    *dry = (e, t);
                }
                if t < wet.1 {
                    *wet = (e, t);
                }
            }
        }
    }
    let filled: Vec<_> = bins.into_iter().flatten().collect();
    if filled.len() < 2 {
        return Err(PreprocessError::TooFewBins(filled.len()));
    }
    let dry: Vec<_> = filled.iter().map(|b| b.0).collect();
    let wet: Vec<_> = filled.iter().map(|b| b.1).collect();
    let (dry_intercept, dry_slope) = least_squares(&dry)?;
    let (wet_intercept, wet_slope) = least_squares(&wet)?;
    let fit = EdgeFit {
        wet_intercept,
        wet_slope,
        dry_intercept,
        dry_slope,
        n_bins,
    };
    // Both edges are lines, so checking the range ends covers the interior.
    for e in [lo, hi] {
        if fit.dry(e) <= fit.wet(e) {
            return Err(PreprocessError::EdgesCross { evi: e });
        }
    }
    Ok(fit)
}

/// `(T_s - T_wet) / (T_dry - T_wet)` with both edges evaluated at the pixel's
/// EVI, clamped to `[0, 1]`.
pub fn compute_tvdi(lst: &GeoGrid, evi: &GeoGrid, edges: &EdgeFit) -> Result<GeoGrid> {
    lst.ensure_same_grid(evi)?;
    let nodata = lst.nodata();
    let mut out = Vec::with_capacity(lst.len());
    for (i, (&t, &e)) in lst.values().iter().zip(evi.values()).enumerate() {
        if lst.is_nodata(t) || evi.is_nodata(e) {
            out.push(nodata);
            continue;
        }
        let (wet, dry) = (edges.wet(e as f64), edges.dry(e as f64));
        let span = dry - wet;
        if span < 1e-6 {
            return Err(PreprocessError::DegenerateEdge {
                row: i / lst.ncols(),
                col: i % lst.ncols(),
            });
        }
        out.push(((t as f64 - wet) / span).clamp(0.0, 1.0) as f32);
    }
    Ok(GeoGrid::new(lst.nrows(), lst.ncols(), lst.transform(), out, nodata)?)
}

fn normalized_difference(a: &GeoGrid, b: &GeoGrid) -> Result<GeoGrid> {
    a.ensure_same_grid(b)?;
    let nodata = a.nodata();
    let out = a
        .values()
        .iter()
        .zip(b.values())
        .map(|(&x, &y)| {
            if a.is_nodata(x) || b.is_nodata(y) {
                return nodata;
            }
            let (x, y) = (x as f64, y as f64);
            let sum = x + y;
            if sum <= 1e-9 {
                nodata
            } else {
                ((x - y) / sum) as f32
            }
        })
        .collect();
    Ok(GeoGrid::new(a.nrows(), a.ncols(), a.transform(), out, nodata)?)
}

/// `(nir - mir) / (nir + mir)`; pixels with `nir + mir <= 1e-9` become nodata.
pub fn compute_ndwi(nir: &GeoGrid, mir: &GeoGrid) -> Result<GeoGrid> {
    normalized_difference(nir, mir)
}

/// `(nir - swir2) / (nir + swir2)`, guarded like [`compute_ndwi`].
pub fn compute_lswi(nir: &GeoGrid, swir2: &GeoGrid) -> Result<GeoGrid> {
    normalized_difference(nir, swir2)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::GeoTransform;
    use proptest::prelude::*;

    fn gt() -> GeoTransform {
        GeoTransform::new(100.0, 30.0, 0.1).unwrap()
    }

    fn grid1(v: f32) -> GeoGrid {
        GeoGrid::filled(1, 1, gt(), v).unwrap()
    }

    /// Columns sweep EVI; rows sweep LST from the wet to the dry edge.
    fn triangle_scene() -> (GeoGrid, GeoGrid) {
        let (nr, nc) = (11, 60);
        let evi_at = |c: usize| 0.05 + 0.85 * c as f64 / (nc - 1) as f64;
        let evi = GeoGrid::from_fn(nr, nc, gt(), |_, c| evi_at(c) as f32).unwrap();
        let lst = GeoGrid::from_fn(nr, nc, gt(), |r, c| {
            let e = evi_at(c);
            let wet = 280.0 - 20.0 * e;
            let dry = 300.0 - 20.0 * e;
            (wet + (dry - wet) * r as f64 / (nr - 1) as f64) as f32
        })
        .unwrap();
        (lst, evi)
    }

    #[test]
    fn recovers_generating_edges() {
        let (lst, evi) = triangle_scene();
        let fit = fit_tvdi_edges(&lst, &evi, DEFAULT_TVDI_BINS).unwrap();
        assert!((fit.dry_slope + 20.0).abs() < 1e-3, "{fit:?}");
        assert!((fit.wet_slope + 20.0).abs() < 1e-3, "{fit:?}");
        assert!((fit.dry_intercept - 300.0).abs() < 1e-3, "{fit:?}");
        assert!((fit.wet_intercept - 280.0).abs() < 1e-3, "{fit:?}");
    }

    #[test]
    fn single_evi_value_is_too_few_bins() {
        let evi = GeoGrid::filled(3, 3, gt(), 0.4).unwrap();
        let lst = GeoGrid::from_fn(3, 3, gt(), |r, c| (290 + r + c) as f32).unwrap();
        assert!(matches!(
            fit_tvdi_edges(&lst, &evi, 20),
            Err(PreprocessError::TooFewBins(_))
        ));
    }

    #[test]
    fn inverted_edges_are_rejected() {
        let evi = GeoGrid::from_fn(1, 4, gt(), |_, c| [0.1, 0.2, 0.8, 0.9][c]).unwrap();
        let lst = GeoGrid::from_fn(1, 4, gt(), |_, c| [300.0, 280.0, 300.0, 280.0][c]).unwrap();
        // bins {0.1, 0.2} and {0.8, 0.9}: flat dry edge at 300, flat wet edge at 280
        assert!(fit_tvdi_edges(&lst, &evi, 2).is_ok());
        let lst = GeoGrid::from_fn(1, 4, gt(), |_, c| [300.0, 200.0, 240.0, 239.0][c]).unwrap();
        // dry: (0.1,300),(0.8,240) slope -85.7; wet: (0.2,200),(0.9,239) slope 55.7 -> cross
        assert!(matches!(
            fit_tvdi_edges(&lst, &evi, 2),
            Err(PreprocessError::EdgesCross { .. })
        ));
    }

    fn edges() -> EdgeFit {
        EdgeFit {
            wet_intercept: 280.0,
            wet_slope: -20.0,
            dry_intercept: 300.0,
            dry_slope: -20.0,
            n_bins: 20,
        }
    }

    #[test]
    fn tvdi_edge_cases() {
        let e = edges();
        let evi = grid1(0.5);
        let at = |t: f32| compute_tvdi(&grid1(t), &evi, &e).unwrap().get(0, 0);
        assert_eq!(at(270.0), 0.0); // wet edge
        assert_eq!(at(290.0), 1.0); // dry edge
        assert_eq!(at(280.0), 0.5); // midpoint
        assert_eq!(at(250.0), 0.0); // clamped below
        assert_eq!(at(320.0), 1.0); // clamped above
    }

    #[test]
    fn tvdi_degenerate_edge_errors() {
        let mut e = edges();
        e.dry_intercept = e.wet_intercept;
        assert!(matches!(
            compute_tvdi(&grid1(280.0), &grid1(0.5), &e),
            Err(PreprocessError::DegenerateEdge { .. })
        ));
    }

    #[test]
    fn ndwi_lswi_examples() {
        let nd = |a: f32, b: f32| compute_ndwi(&grid1(a), &grid1(b)).unwrap();
        assert_eq!(nd(0.2, 0.2).get(0, 0), 0.0);
        assert_eq!(nd(0.3, 0.1).get(0, 0), 0.5);
        let z = nd(0.0, 0.0);
        assert!(z.is_nodata(z.get(0, 0)));

        let ls = |a: f32, b: f32| compute_lswi(&grid1(a), &grid1(b)).unwrap();
        assert_eq!(ls(0.4, 0.4).get(0, 0), 0.0);
        assert_eq!(ls(0.4, 0.2).get(0, 0), (1.0f64 / 3.0) as f32);
        let z = ls(0.0, 0.0);
        assert!(z.is_nodata(z.get(0, 0)));
    }

    proptest! {
        #[test]
        fn water_indices_are_bounded(a in 1e-4f32..=1.0, b in 1e-4f32..=1.0) {
            let v = compute_ndwi(&grid1(a), &grid1(b)).unwrap().get(0, 0);
            prop_assert!((-1.0..=1.0).contains(&v));
        }

        #[test]
        fn tvdi_matches_unclamped_ratio_between_edges(evi in 0.0f64..1.0, frac in 0.0f64..=1.0) {
            let e = edges();
            let t = e.wet(evi) + frac * (e.dry(evi) - e.wet(evi));
            let got = compute_tvdi(&grid1(t as f32), &grid1(evi as f32), &e).unwrap().get(0, 0);
            prop_assert!((0.0..=1.0).contains(&got));
            let f32_evi = evi as f32 as f64;
            let expect = (t as f32 as f64 - e.wet(f32_evi)) / (e.dry(f32_evi) - e.wet(f32_evi));
            prop_assert!((got as f64 - expect.clamp(0.0, 1.0)).abs() < 1e-6);
        }
    }
}
