use std::fmt;
use std::path::Path;

use serde::Serialize;

use crate::grid::{bilinear_resample, GeoGrid, Ratio};
use crate::net::AmcnModel;

use super::metrics::{image_pairs, metrics_from_pairs, station_pairs};
use super::{Metrics, Result, Scene, TrainError};

#[derive(Debug, Clone, PartialEq)]
pub struct SceneReport {
    pub model: Metrics,
    pub baseline: Metrics,
    pub stations_model: Option<Metrics>,
    pub stations_baseline: Option<Metrics>,
    /// RMSE between the downsampled prediction and the coarse input.
    pub degradation_rmse: f64,
    pub baseline_degradation_rmse: f64,
}

/// Per-scene and pooled skill of the model and of plain bilinear upsampling.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentReport {
    pub scenes: Vec<SceneReport>,
    pub model: Metrics,
    pub baseline: Metrics,
    pub stations_model: Option<Metrics>,
    pub stations_baseline: Option<Metrics>,
    pub degradation_rmse: f64,
    pub baseline_degradation_rmse: f64,
}

/// RMSE between `pred` downsampled by `scale` and the coarse field, over
/// pixels valid in both.
pub fn degradation_rmse(pred: &GeoGrid, lr: &GeoGrid, scale: usize) -> Result<f64> {
    let down = bilinear_resample(pred, Ratio::down(scale as u32))?;
    let pairs = image_pairs(&down, lr);
    if pairs.is_empty() {
        return Err(TrainError::InsufficientData(0));
    }
    Ok((pairs.iter().map(|(p, t)| (p - t).powi(2)).sum::<f64>() / pairs.len() as f64).sqrt())
}

fn sq_sum(pred: &GeoGrid, lr: &GeoGrid, scale: usize) -> Result<(f64, usize)> {
    let down = bilinear_resample(pred, Ratio::down(scale as u32))?;
    let pairs = image_pairs(&down, lr);
    Ok((pairs.iter().map(|(p, t)| (p - t).powi(2)).sum(), pairs.len()))
}

/// Degrades each scene's fine truth by the model's factor, downscales it
/// again with the model and with bilinear upsampling alone, and scores both
/// against the truth and the stations.
pub fn simulated_experiment(model: &AmcnModel, scenes: &[Scene]) -> Result<ExperimentReport> {
    if scenes.is_empty() {
        return Err(TrainError::Empty);
    }
    let r = model.config.scale;
    let mut reports = Vec::with_capacity(scenes.len());
    let (mut pm, mut pb, mut sm, mut sb) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    let (mut dm, mut db, mut dn) = (0.0, 0.0, 0usize);
    for s in scenes {
        let lr = bilinear_resample(&s.hr_precip, Ratio::down(r as u32))?;
        let pred = model.predict(&lr, &s.ancillary)?;
        let base = bilinear_resample(&lr, Ratio::up(r as u32))?;
        let (img_m, img_b) = (image_pairs(&pred, &s.hr_precip), image_pairs(&base, &s.hr_precip));
        let (st_m, st_b) = (station_pairs(&pred, &s.stations)?, station_pairs(&base, &s.stations)?);
        let (qm, n) = sq_sum(&pred, &lr, r)?;
        let (qb, _) = sq_sum(&base, &lr, r)?;
        if n == 0 {
            return Err(TrainError::InsufficientData(0));
        }
        reports.push(SceneReport {
            model: metrics_from_pairs(&img_m)?,
            baseline: metrics_from_pairs(&img_b)?,
            stations_model: metrics_from_pairs(&st_m).ok(),
            stations_baseline: metrics_from_pairs(&st_b).ok(),
            degradation_rmse: (qm / n as f64).sqrt(),
            baseline_degradation_rmse: (qb / n as f64).sqrt(),
        });
        pm.extend(img_m);
        pb.extend(img_b);
        sm.extend(st_m);
        sb.extend(st_b);
        dm += qm;
        db += qb;
        dn += n;
    }
    Ok(ExperimentReport {
        scenes: reports,
        model: metrics_from_pairs(&pm)?,
        baseline: metrics_from_pairs(&pb)?,
        stations_model: metrics_from_pairs(&sm).ok(),
        stations_baseline: metrics_from_pairs(&sb).ok(),
        degradation_rmse: (dm / dn as f64).sqrt(),
        baseline_degradation_rmse: (db / dn as f64).sqrt(),
    })
}

#[derive(Serialize)]
struct Row<'a> {
    scene: String,
    method: &'a str,
    reference: &'a str,
    r2: f64,
    bias: f64,
    rmse: f64,
    n: usize,
    degradation_rmse: f64,
}

impl ExperimentReport {
    fn rows(&self) -> Vec<Row<'_>> {
        let mut rows = Vec::new();
        let mut push = |scene: String, method, reference, m: Option<&Metrics>, d: f64| {
            if let Some(m) = m {
                rows.push(Row {
                    scene,
                    method,
                    reference,
                    r2: m.r2,
                    bias: m.bias,
                    rmse: m.rmse,
                    n: m.n,
                    degradation_rmse: d,
                });
            }
        };
        for (i, s) in self.scenes.iter().enumerate() {
            push(i.to_string(), "model", "image", Some(&s.model), s.degradation_rmse);
            push(i.to_string(), "bilinear", "image", Some(&s.baseline), s.baseline_degradation_rmse);
            push(i.to_string(), "model", "stations", s.stations_model.as_ref(), s.degradation_rmse);
            push(i.to_string(), "bilinear", "stations", s.stations_baseline.as_ref(), s.baseline_degradation_rmse);
        }
        push("pooled".into(), "model", "image", Some(&self.model), self.degradation_rmse);
        push("pooled".into(), "bilinear", "image", Some(&self.baseline), self.baseline_degradation_rmse);
        push("pooled".into(), "model", "stations", self.stations_model.as_ref(), self.degradation_rmse);
        push(
            "pooled".into(),
            "bilinear",
            "stations",
            self.stations_baseline.as_ref(),
            self.baseline_degradation_rmse,
        );
        rows
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for r in self.rows() {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }
}

impl fmt::Display for ExperimentReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{:<8} {:<9} {:<9} {:>8} {:>9} {:>9} {:>6} {:>9}",
            "scene", "method", "reference", "r2", "bias", "rmse", "n", "deg_rmse"
        )?;
        for r in self.rows() {
            writeln!(
                f,
                "{:<8} {:<9} {:<9} {:>8.4} {:>9.3} {:>9.3} {:>6} {:>9.3}",
                r.scene, r.method, r.reference, r.r2, r.bias, r.rmse, r.n, r.degradation_rmse
            )?;
        }
        Ok(())
    }
}
