use crate::grid::{sample_at_stations, GeoGrid, StationSet};

use super::{Result, TrainError};

/// Agreement between a prediction and a reference.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Metrics {
    /// Squared Pearson correlation.
    pub r2: f64,
    /// Mean of prediction minus truth.
    pub bias: f64,
    pub rmse: f64,
    pub n: usize,
}

/// Metrics over paired samples.
pub fn metrics_from_pairs(pairs: &[(f64, f64)]) -> Result<Metrics> {
    let n = pairs.len();
    if n < 2 {
        return Err(TrainError::InsufficientData(n));
    }
    let nf = n as f64;
    let (mp, mt) = pairs
        .iter()
        .fold((0.0, 0.0), |(a, b), &(p, t)| (a + p, b + t));
    let (mp, mt) = (mp / nf, mt / nf);
    let (mut spp, mut stt, mut spt, mut bias, mut sq) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for &(p, t) in pairs {
        let (dp, dt) = (p - mp, t - mt);
        spp += dp * dp;
        stt += dt * dt;
        spt += dp * dt;
        bias += p - t;
        sq += (p - t) * (p - t);
    }
    if spp <= 0.0 || stt <= 0.0 {
        return Err(TrainError::ZeroVariance);
    }
    let r2 = ((spt * spt) / (spp * stt)).min(1.0);
    Ok(Metrics {
        r2,
        bias: bias / nf,
        rmse: (sq / nf).sqrt(),
        n,
    })
}

/// Metrics over pixels valid in both co-registered grids.
pub fn evaluate_image(pred: &GeoGrid, truth: &GeoGrid) -> Result<Metrics> {
    pred.ensure_same_grid(truth)?;
    metrics_from_pairs(&image_pairs(pred, truth))
}

pub(crate) fn image_pairs(pred: &GeoGrid, truth: &GeoGrid) -> Vec<(f64, f64)> {
    pred.values()
        .iter()
        .zip(truth.values())
        .filter(|(p, t)| !pred.is_nodata(**p) && !truth.is_nodata(**t))
        .map(|(&p, &t)| (p as f64, t as f64))
        .collect()
}

/// Metrics of the prediction sampled at station pixels against the station
/// readings; stations without a reading or over nodata are left out.
pub fn evaluate_stations(pred: &GeoGrid, stations: &StationSet) -> Result<Metrics> {
    metrics_from_pairs(&station_pairs(pred, stations)?)
}

pub(crate) fn station_pairs(pred: &GeoGrid, stations: &StationSet) -> Result<Vec<(f64, f64)>> {
    let sampled = sample_at_stations(pred, stations)?;
    Ok(sampled
        .iter()
        .zip(stations.iter())
        .filter_map(|((_, p), s)| Some(((*p)? as f64, s.value?)))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{GeoTransform, Station, DEFAULT_NODATA};
    use proptest::prelude::*;

    fn g(v: Vec<f32>) -> GeoGrid {
        let n = v.len();
        GeoGrid::new(1, n, GeoTransform::new(0.0, 0.0, 1.0).unwrap(), v, DEFAULT_NODATA).unwrap()
    }

    #[test]
    fn image_examples() {
        let t = g(vec![1.0, 4.0, 2.0, 8.0]);
        let m = evaluate_image(&t, &t).unwrap();
        assert_eq!((m.r2, m.bias, m.rmse, m.n), (1.0, 0.0, 0.0, 4));

        let p = g(t.values().iter().map(|v| v + 2.0).collect());
        let m = evaluate_image(&p, &t).unwrap();
        assert!((m.bias - 2.0).abs() < 1e-12 && (m.rmse - 2.0).abs() < 1e-12 && (m.r2 - 1.0).abs() < 1e-12);

        let p = g(t.values().iter().map(|v| -v).collect());
        let m = evaluate_image(&p, &t).unwrap();
        assert!((m.r2 - 1.0).abs() < 1e-12);
        assert!((m.bias + 2.0 * 3.75).abs() < 1e-12);
    }

    #[test]
    fn image_errors() {
        let t = g(vec![1.0, DEFAULT_NODATA, DEFAULT_NODATA]);
        assert!(matches!(evaluate_image(&t, &t), Err(TrainError::InsufficientData(1))));
        let c = g(vec![2.0, 2.0, 2.0]);
        let v = g(vec![1.0, 2.0, 3.0]);
        assert!(matches!(evaluate_image(&c, &v), Err(TrainError::ZeroVariance)));
    }

    fn station(id: &str, lon: f64, value: Option<f64>) -> Station {
        Station {
            id: id.into(),
            lon,
            lat: 0.5,
            value,
        }
    }

    #[test]
    fn station_examples() {
        let pred = g(vec![3.0, 5.0, DEFAULT_NODATA, 9.0]);
        let s = StationSet::new(vec![
            station("a", 0.5, Some(3.0)),
            station("b", 1.5, Some(5.0)),
            station("c", 2.5, Some(7.0)),
            station("d", 3.5, Some(9.0)),
        ]);
        let m = evaluate_stations(&pred, &s).unwrap();
        assert_eq!((m.r2, m.bias, m.rmse, m.n), (1.0, 0.0, 0.0, 3));
        let one = StationSet::new(vec![station("a", 0.5, Some(3.0)), station("c", 2.5, Some(1.0))]);
        assert!(matches!(evaluate_stations(&pred, &one), Err(TrainError::InsufficientData(1))));
    }

    proptest! {
        #[test]
        fn rmse_decomposes(pairs in proptest::collection::vec((-100f64..100.0, -100f64..100.0), 3..60)) {
            let m = match metrics_from_pairs(&pairs) { Ok(m) => m, Err(_) => return Ok(()) };
            let n = pairs.len() as f64;
            let var = pairs.iter().map(|(p, t)| (p - t - m.bias).powi(2)).sum::<f64>() / n;
            let lhs = m.rmse * m.rmse;
            prop_assert!((lhs - (m.bias * m.bias + var)).abs() <= 1e-9 * lhs.max(1e-12));
            prop_assert!(m.r2 <= 1.0 && m.rmse >= m.bias.abs());
        }

        #[test]
        fn metrics_ignore_sample_order(pairs in proptest::collection::vec((-10f64..10.0, -10f64..10.0), 3..30), rot in 0usize..30) {
            let Ok(a) = metrics_from_pairs(&pairs) else { return Ok(()) };
            let mut shuffled = pairs.clone();
            let k = rot % shuffled.len();
            shuffled.rotate_left(k);
            shuffled.reverse();
            let b = metrics_from_pairs(&shuffled).unwrap();
            prop_assert!((a.r2 - b.r2).abs() < 1e-12 && (a.bias - b.bias).abs() < 1e-12 && (a.rmse - b.rmse).abs() < 1e-12);
        }
    }
}
