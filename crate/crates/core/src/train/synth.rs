//! Synthetic scenes standing in for satellite precipitation and its
//! predictors.
//!
//! Precipitation is a skewed sum of anisotropic bumps modulated by
//! large-scale relief and by fine terrain texture that also appears in the
//! DEM, so part of the sub-coarse-pixel structure is recoverable from the
//! ancillary factors. Vegetation, land surface temperature and the water
//! bands respond to a smoothed moisture proxy.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal, StandardNormal};

use crate::grid::{bilinear_resample, GeoGrid, GeoTransform, GridStack, Ratio, Station, StationSet};
use crate::preprocess::{assemble_ancillary, PipelineOptions, RAW_BAND_NAMES};

use super::{Result, TrainError};

/// Coarse pixel size in degrees.
pub const COARSE_CELL: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthOptions {
    pub n_stations: usize,
    /// Multiplicative station bias (0.1 reads 10% high).
    pub station_bias: f64,
    /// Standard deviation of additive station noise in mm/month.
    pub station_noise: f64,
    /// Strength of the terrain-texture modulation of precipitation.
    pub texture_gain: f64,
    /// Fraction of LST pixels dropped as cloud.
    pub cloud_fraction: f64,
}

impl Default for SynthOptions {
    fn default() -> Self {
        Self {
            n_stations: 40,
            station_bias: 0.0,
            station_noise: 0.0,
            texture_gain: 0.35,
            cloud_fraction: 0.005,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub hr_precip: GeoGrid,
    pub lr_precip: GeoGrid,
    /// The nine assembled factors in canonical order.
    pub ancillary: GridStack,
    /// Uncleaned bands in [`RAW_BAND_NAMES`] order.
    pub raw: GridStack,
    pub stations: StationSet,
}

fn gaussian_blur(v: &[f64], nr: usize, nc: usize, sigma: f64) -> Vec<f64> {
    let rad = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-rad..=rad).map(|d| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let pass = |src: &[f64], along_rows: bool| -> Vec<f64> {
        let mut out = vec![0.0; src.len()];
        for r in 0..nr as isize {
            for c in 0..nc as isize {
                let (mut s, mut w) = (0.0, 0.0);
                for (k, &kv) in kernel.iter().enumerate() {
                    let d = k as isize - rad;
                    let (rr, cc) = if along_rows { (r, c + d) } else { (r + d, c) };
                    if rr >= 0 && cc >= 0 && rr < nr as isize && cc < nc as isize {
                        s += kv * src[rr as usize * nc + cc as usize];
                        w += kv;
                    }
                }
                out[r as usize * nc + c as usize] = s / w;
            }
        }
        out
    };
    pass(&pass(v, true), false)
}

fn standardize(v: &mut [f64]) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let std = (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt().max(1e-12);
    v.iter_mut().for_each(|x| *x = (*x - mean) / std);
}

fn smooth_noise(rng: &mut ChaCha8Rng, nr: usize, nc: usize, sigma: f64) -> Vec<f64> {
    let white: Vec<f64> = (0..nr * nc).map(|_| rng.sample(StandardNormal)).collect();
    let mut v = gaussian_blur(&white, nr, nc, sigma);
    standardize(&mut v);
    v
}

/// Sum of randomly rotated anisotropic Gaussian bumps with the given
/// amplitudes; widths are fractions of the scene size.
fn bumps(rng: &mut ChaCha8Rng, nr: usize, nc: usize, amps: &[f64], width: (f64, f64)) -> Vec<f64> {
    let size = nr.max(nc) as f64;
    let shapes: Vec<_> = amps
        .iter()
        .map(|&a| {
            let cy = rng.gen_range(-0.1..1.1) * nr as f64;
            let cx = rng.gen_range(-0.1..1.1) * nc as f64;
            let sx = rng.gen_range(width.0..width.1) * size;
            let sy = rng.gen_range(width.0..width.1) * size;
            let th: f64 = rng.gen_range(0.0..std::f64::consts::PI);
            (a, cy, cx, sx, sy, th.cos(), th.sin())
        })
        .collect();
    let mut out = vec![0.0; nr * nc];
    for r in 0..nr {
        for c in 0..nc {
            let mut s = 0.0;
            for &(a, cy, cx, sx, sy, ct, st) in &shapes {
                let (dy, dx) = (r as f64 + 0.5 - cy, c as f64 + 0.5 - cx);
                let u = (dx * ct + dy * st) / sx;
                let v = (-dx * st + dy * ct) / sy;
                s += a * (-0.5 * (u * u + v * v)).exp();
            }
            out[r * nc + c] = s;
        }
    }
    out
}

fn grid(nr: usize, nc: usize, t: GeoTransform, v: &[f64]) -> Result<GeoGrid> {
    Ok(GeoGrid::new(nr, nc, t, v.iter().map(|&x| x as f32).collect(), crate::grid::DEFAULT_NODATA)?)
}

/// Generates one scene of `nrows x ncols` fine pixels with coarsening factor `r`.
pub fn synth_scene(seed: u64, nrows: usize, ncols: usize, r: usize, opts: &SynthOptions) -> Result<Scene> {
    if r < 2 || nrows == 0 || ncols == 0 || nrows % r != 0 || ncols % r != 0 {
        return Err(TrainError::Config(format!(
            "scene {nrows}x{ncols} is not divisible by factor {r}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (nr, nc) = (nrows, ncols);
    let n = nr * nc;
    let cell = COARSE_CELL / r as f64;
    let x_min = 100.0 + rng.gen_range(0..60) as f64 * COARSE_CELL;
    let y_min = 25.0 + rng.gen_range(0..40) as f64 * COARSE_CELL;
    let t = GeoTransform::new(x_min, y_min, cell)?;

    // terrain: broad relief plus fine texture shared with precipitation
    let texture = smooth_noise(&mut rng, nr, nc, 1.2);
    let relief_amps: Vec<f64> = (0..4).map(|_| rng.gen_range(0.4..1.0)).collect();
    let mut relief = bumps(&mut rng, nr, nc, &relief_amps, (0.15, 0.4));
    standardize(&mut relief);
    let dem: Vec<f64> = (0..n)
        .map(|i| (1200.0 + 450.0 * relief[i] + 90.0 * texture[i]).max(0.0))
        .collect();

    // precipitation: skewed storm bumps over a background
    let amp_dist = LogNormal::new(80f64.ln(), 0.8).unwrap();
    let n_storms = rng.gen_range(3..7);
    let amps: Vec<f64> = (0..n_storms).map(|_| amp_dist.sample(&mut rng)).collect();
    let storms = bumps(&mut rng, nr, nc, &amps, (0.08, 0.3));
    let background = rng.gen_range(15.0..50.0);
    let gain = opts.texture_gain;
    let hr: Vec<f64> = (0..n)
        .map(|i| ((background + storms[i]) * (0.25 * relief[i] + gain * texture[i]).exp()).max(0.0))
        .collect();

    // land surface response to a smoothed moisture proxy
    let moisture: Vec<f64> = gaussian_blur(&hr, nr, nc, 1.0).iter().map(|p| 1.0 - (-p / 120.0).exp()).collect();
    let n1 = smooth_noise(&mut rng, nr, nc, 2.0);
    let n2 = smooth_noise(&mut rng, nr, nc, 0.8);
    let n3 = smooth_noise(&mut rng, nr, nc, 1.5);
    let evi: Vec<f64> = (0..n)
        .map(|i| (0.12 + 0.55 * moisture[i] + 0.04 * n1[i]).clamp(0.02, 0.95))
        .collect();
    let lstd: Vec<f64> = (0..n)
        .map(|i| 318.0 - 0.0065 * dem[i] - 10.0 * evi[i] - 14.0 * moisture[i] + 0.6 * n2[i])
        .collect();
    let lstn: Vec<f64> = (0..n)
        .map(|i| lstd[i] - 14.0 + 5.0 * moisture[i] + 0.4 * n3[i])
        .collect();
    let nir: Vec<f64> = (0..n).map(|i| 0.22 + 0.3 * evi[i] + 0.01 * n1[i]).collect();
    let mir: Vec<f64> = (0..n).map(|i| 0.32 - 0.16 * moisture[i] + 0.01 * n2[i]).collect();
    let swir2: Vec<f64> = (0..n).map(|i| 0.24 - 0.14 * moisture[i] + 0.01 * n3[i]).collect();

    let mut bands = Vec::with_capacity(RAW_BAND_NAMES.len());
    for v in [&dem, &lstd, &lstn, &evi, &nir, &mir, &swir2] {
        bands.push(grid(nr, nc, t, v)?);
    }
    // clouds over the temperature bands and a few spikes
    for b in [1usize, 2] {
        let mut vals = bands[b].values().to_vec();
        for v in vals.iter_mut() {
            if rng.gen_bool(opts.cloud_fraction.clamp(0.0, 1.0)) {
                *v = crate::grid::DEFAULT_NODATA;
            }
        }
        if opts.cloud_fraction > 0.0 {
            let i = rng.gen_range(0..n);
            vals[i] += 40.0;
        }
        bands[b] = bands[b].with_values(vals)?;
    }
    let names = RAW_BAND_NAMES.iter().map(|s| s.to_string()).collect();
    let raw = GridStack::new(bands, names)?;
    let ancillary = assemble_ancillary(&raw, &PipelineOptions::default())?;

    let hr_precip = grid(nr, nc, t, &hr)?;
    let lr_precip = bilinear_resample(&hr_precip, Ratio::down(r as u32))?;

    let picks = rand::seq::index::sample(&mut rng, n, opts.n_stations.min(n)).into_vec();
    let stations = picks
        .iter()
        .enumerate()
        .map(|(k, &i)| {
            let (row, col) = (i / nc, i % nc);
            let (lon, lat) = hr_precip.pixel_center(row, col);
            let noise: f64 = rng.sample::<f64, _>(StandardNormal) * opts.station_noise;
            let v = (hr_precip.get(row, col) as f64 * (1.0 + opts.station_bias) + noise).max(0.0);
            Station {
                id: format!("S{:03}", k + 1),
                lon,
                lat,
                value: Some(v),
            }
        })
        .collect();

    Ok(Scene {
        hr_precip,
        lr_precip,
        ancillary,
        raw,
        stations,
    })
}

/// `count` scenes with seeds derived from `seed`.
pub fn synth_scenes(seed: u64, count: usize, nrows: usize, ncols: usize, r: usize, opts: &SynthOptions) -> Result<Vec<Scene>> {
    (0..count)
        .map(|i| synth_scene(seed.wrapping_mul(1_000_003).wrapping_add(i as u64), nrows, ncols, r, opts))
        .collect()
}
