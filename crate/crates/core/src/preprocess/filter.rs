use crate::grid::GeoGrid;

use super::{PreprocessError, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScreenParams {
    /// Odd window width in pixels.
    pub window: usize,
    /// Deviation threshold in local standard deviations.
    pub k: f64,
}

impl Default for ScreenParams {
    fn default() -> Self {
        Self { window: 3, k: 3.0 }
    }
}

/// Low-pass outlier screen: a pixel becomes nodata when it deviates from the
/// mean of its valid window neighbours (center excluded) by strictly more
/// than `k` neighbour standard deviations. Every other pixel is copied
/// through untouched.
///
/// The center is left out of the window statistics because a lone spike in
/// a 3x3 window can never exceed `sqrt(8)` standard deviations of a sample
/// that includes it.
pub fn screen_outliers(grid: &GeoGrid, params: ScreenParams) -> Result<GeoGrid> {
    let ScreenParams { window, k } = params;
    if window < 3 || window % 2 == 0 || !(k > 0.0) {
        return Err(PreprocessError::DegenerateFit(format!(
            "screen window must be odd and >= 3 with k > 0, got {window} and {k}"
        )));
    }
    let half = (window / 2) as isize;
    let (nr, nc) = (grid.nrows() as isize, grid.ncols() as isize);
    let mut out = grid.values().to_vec();
    for r in 0..nr {
        for c in 0..nc {
            let Some(v) = grid.value_at(r as usize, c as usize) else {
                continue;
            };
            let (mut n, mut sum, mut sq) = (0usize, 0f64, 0f64);
            for dr in -half..=half {
                for dc in -half..=half {
                    let (rr, cc) = (r + dr, c + dc);
                    if (dr == 0 && dc == 0) || rr < 0 || cc < 0 || rr >= nr || cc >= nc {
                        continue;
                    }
                    if let Some(u) = grid.value_at(rr as usize, cc as usize) {
                        let u = u as f64;
                        n += 1;
                        sum += u;
                        sq += u * u;
                    }
                }
            }
            if n < 2 {
                continue;
            }
            let mean = sum / n as f64;
            let std = (sq / n as f64 - mean * mean).max(0.0).sqrt();
            if (v as f64 - mean).abs() > k * std {
                out[(r * nc + c) as usize] = grid.nodata();
            }
        }
    }
    Ok(grid.with_values(out)?)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IdwFillParams {
    pub power: f64,
    pub max_neighbors: usize,
}

impl Default for IdwFillParams {
    fn default() -> Self {
        Self {
            power: 2.0,
            max_neighbors: 8,
        }
    }
}

/// Fills every nodata pixel with the inverse-distance-weighted mean of its
/// `max_neighbors` nearest originally-valid pixels (pixel-unit distances,
/// ties broken by row then column). Valid pixels are unchanged.
pub fn idw_fill(grid: &GeoGrid, params: IdwFillParams) -> Result<GeoGrid> {
    let k = params.max_neighbors.max(1);
    let valid = grid.valid_count();
    if valid == 0 {
        return Err(PreprocessError::AllNodata);
    }
    let (nr, nc) = (grid.nrows() as isize, grid.ncols() as isize);
    let mut out = grid.values().to_vec();
    let mut cand: Vec<(f64, isize, isize, f64)> = Vec::new();
    for r in 0..nr {
        for c in 0..nc {
            if grid.value_at(r as usize, c as usize).is_some() {
                continue;
            }
            // Expanding square rings; ring `rad` holds pixels at distance >= rad,
            // so we can stop once the k-th best is no farther than the ring.
            cand.clear();
            let max_rad = nr.max(nc);
            for rad in 1..=max_rad {
                for dr in -rad..=rad {
                    let edge_row = dr.abs() == rad;
                    let step = if edge_row { 1 } else { 2 * rad };
                    let mut dc = -rad;
                    while dc <= rad {
                        let (rr, cc) = (r + dr, c + dc);
                        if rr >= 0 && cc >= 0 && rr < nr && cc < nc {
                            if let Some(u) = grid.value_at(rr as usize, cc as usize) {
                                let d = ((dr * dr + dc * dc) as f64).sqrt();
                                cand.push((d, rr, cc, u as f64));
                            }
                        }
                        dc += step;
                    }
                }
                if cand.len() >= k {
                    cand.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
                    if cand[k - 1].0 <= rad as f64 {
                        break;
                    }
                }
                if cand.len() == valid {
                    break;
                }
            }
            cand.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
            let (mut wsum, mut vsum) = (0f64, 0f64);
            for &(d, _, _, u) in cand.iter().take(k) {
                let w = d.powf(-params.power);
                wsum += w;
                vsum += w * u;
            }
            out[(r * nc + c) as usize] = (vsum / wsum) as f32;
        }
    }
    Ok(grid.with_values(out)?)
}

/// Per-pixel mean over the members that are valid there.
pub fn aggregate_time(stack: &[GeoGrid]) -> Result<GeoGrid> {
    let first = stack.first().ok_or(PreprocessError::Empty)?;
    for g in &stack[1..] {
        first.ensure_same_grid(g)?;
    }
    let out = (0..first.len())
        .map(|i| {
            let (mut n, mut sum) = (0usize, 0f64);
            for g in stack {
                let v = g.values()[i];
                if !g.is_nodata(v) {
                    n += 1;
                    sum += v as f64;
                }
            }
            if n == 0 {
                first.nodata()
            } else {
                (sum / n as f64) as f32
            }
        })
        .collect();
    Ok(first.with_values(out)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{GeoTransform, DEFAULT_NODATA};
    use proptest::prelude::*;

    const ND: f32 = DEFAULT_NODATA;

    fn gt() -> GeoTransform {
        GeoTransform::new(0.0, 0.0, 1.0).unwrap()
    }

    fn grid(nr: usize, nc: usize, v: Vec<f32>) -> GeoGrid {
        GeoGrid::new(nr, nc, gt(), v, ND).unwrap()
    }

    #[test]
    fn constant_field_is_not_screened() {
        let g = GeoGrid::filled(5, 5, gt(), 4.0).unwrap();
        assert_eq!(screen_outliers(&g, ScreenParams::default()).unwrap(), g);
    }

    #[test]
    fn lone_spike_is_screened() {
        let mut v = vec![1.0; 25];
        v[12] = 1e6;
        let g = grid(5, 5, v);
        let s = screen_outliers(&g, ScreenParams::default()).unwrap();
        assert!(s.is_nodata(s.get(2, 2)));
        // neighbours of the spike: window mean (7 + 1e6)/8, std sqrt(7)/8 * (1e6 - 1),
        // so |1 - mean| / std = 1/sqrt(7) ~ 0.378 < 3 and they survive
        assert_eq!(s.valid_count(), 24);
    }

    #[test]
    fn mild_texture_is_kept() {
        let v: Vec<f32> = (0..49).map(|i| if (i / 7 + i % 7) % 2 == 0 { 1.0 } else { 1.5 }).collect();
        let g = grid(7, 7, v);
        assert_eq!(screen_outliers(&g, ScreenParams::default()).unwrap(), g);
    }

    #[test]
    fn screen_rejects_even_window() {
        let g = GeoGrid::filled(3, 3, gt(), 1.0).unwrap();
        assert!(screen_outliers(&g, ScreenParams { window: 4, k: 3.0 }).is_err());
    }

    #[test]
    fn idw_equidistant_pair() {
        let g = grid(1, 3, vec![2.0, ND, 4.0]);
        let f = idw_fill(&g, IdwFillParams::default()).unwrap();
        assert_eq!(f.values(), &[2.0, 3.0, 4.0]);
    }

    #[test]
    fn idw_single_neighbor() {
        let g = grid(1, 3, vec![ND, 7.0, 1.0]);
        let f = idw_fill(
            &g,
            IdwFillParams {
                power: 2.0,
                max_neighbors: 1,
            },
        )
        .unwrap();
        assert_eq!(f.get(0, 0), 7.0);
    }

    #[test]
    fn idw_hand_weights() {
        // hole at col 2: value 0 at distance 1, value 3 at distance 2
        // (1 * 0 + 0.25 * 3) / 1.25 = 0.6
        let g = grid(1, 4, vec![3.0, ND, ND, 0.0]);
        let f = idw_fill(
            &g,
            IdwFillParams {
                power: 2.0,
                max_neighbors: 2,
            },
        )
        .unwrap();
        assert!((f.get(0, 2) - 0.6).abs() < 1e-7);
        assert!(!f.has_nodata());
    }

    #[test]
    fn idw_all_nodata_errors() {
        let g = grid(2, 2, vec![ND; 4]);
        assert!(matches!(
            idw_fill(&g, IdwFillParams::default()),
            Err(PreprocessError::AllNodata)
        ));
    }

    #[test]
    fn aggregate_examples() {
        let a = grid(1, 3, vec![3.0, 7.0, ND]);
        let b = grid(1, 3, vec![5.0, ND, ND]);
        let m = aggregate_time(&[a, b]).unwrap();
        assert_eq!(m.get(0, 0), 4.0);
        assert_eq!(m.get(0, 1), 7.0);
        assert!(m.is_nodata(m.get(0, 2)));
        assert!(matches!(aggregate_time(&[]), Err(PreprocessError::Empty)));
    }

    proptest! {
        #[test]
        fn idw_of_constant_is_constant(c in -100f32..100.0, holes in proptest::collection::vec(0usize..36, 1..20)) {
            let mut v = vec![c; 36];
            for &h in &holes { v[h] = ND; }
            prop_assume!(v.iter().any(|&x| x != ND));
            let f = idw_fill(&grid(6, 6, v), IdwFillParams::default()).unwrap();
            for &x in f.values() {
                prop_assert!((x - c).abs() <= 1e-5 * c.abs().max(1.0));
            }
        }

        #[test]
        fn screen_only_removes(v in proptest::collection::vec(-10f32..10.0, 36), spike in 0usize..36) {
            let mut v = v;
            v[spike] = 1e4;
            let g = grid(6, 6, v);
            let s = screen_outliers(&g, ScreenParams::default()).unwrap();
            for (a, b) in s.values().iter().zip(g.values()) {
                prop_assert!(a == b || *a == ND);
            }
        }

        #[test]
        fn aggregate_of_copies_is_identity(v in proptest::collection::vec(-1e3f32..1e3, 12), n in 1usize..5) {
            let g = grid(3, 4, v);
            let copies = vec![g.clone(); n];
            prop_assert_eq!(aggregate_time(&copies).unwrap(), g);
        }
    }
}
