//! Patch assembly, the training loop, evaluation metrics, the simulated
//! experiment and the synthetic scene generator.

mod experiment;
mod metrics;
mod synth;

pub use experiment::{degradation_rmse, simulated_experiment, ExperimentReport, SceneReport};
pub use metrics::{evaluate_image, evaluate_stations, metrics_from_pairs, Metrics};
pub use synth::{synth_scene, synth_scenes, Scene, SynthOptions, COARSE_CELL};

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use crate::grid::{bilinear_resample, extract_patches, GeoGrid, GridError, GridStack, PatchPair, Ratio, CANONICAL_CHANNELS};
use crate::losses::{
    charbonnier_loss, degradation_loss, total_loss_node, LossError, LossReport, Reduction, EPSILON,
};
use crate::net::{amcn_forward, AmcnConfig, AmcnModel, NetError};
use crate::nn::{Adam, AdamConfig, Graph, NnError, ParamStore, Scalar, Tensor, Var};
use crate::preprocess::{fit_norm_stats, NormStats, PreprocessError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("no usable training patches")]
    Empty,
    #[error("need at least 2 valid samples, got {0}")]
    InsufficientData(usize),
    #[error("zero variance in prediction or truth; r2 undefined")]
    ZeroVariance,
    #[error("non-finite value at epoch {epoch}, iteration {iteration}: {source}")]
    NonFinite {
        epoch: usize,
        iteration: usize,
        source: NnError,
    },
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Preprocess(#[from] PreprocessError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr0: f64,
    pub lr_halving_period: usize,
    pub batch_size: usize,
    pub patch: usize,
    pub stride: usize,
    pub seed: u64,
    pub reduction: Reduction,
}

impl TrainConfig {
    /// Full-size protocol: 100 epochs, batches of 64 patches of 40 pixels.
    pub fn canonical() -> Self {
        Self {
            epochs: 100,
            lr0: 1e-3,
            lr_halving_period: 50,
            batch_size: 64,
            patch: 40,
            stride: 40,
            seed: 0,
            reduction: Reduction::PerPixel,
        }
    }

    /// Desk scale: 30 epochs of 32-pixel patches in batches of 8.
    pub fn desk() -> Self {
        Self {
            epochs: 30,
            batch_size: 8,
            patch: 32,
            stride: 32,
            ..Self::canonical()
        }
    }

    pub fn validate(&self, scale: usize) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.patch == 0 || self.stride == 0 {
            return Err(TrainError::Config("epochs, batch, patch and stride must be positive".into()));
        }
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return Err(TrainError::Config(format!("learning rate {}", self.lr0)));
        }
        if scale == 0 || self.patch % scale != 0 || self.stride % scale != 0 {
            return Err(TrainError::Config(format!(
                "patch {} and stride {} must be multiples of the scale {scale}",
                self.patch, self.stride
            )));
        }
        Ok(())
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::desk()
    }
}

/// Training patches of several scenes with the normalization fitted on them.
#[derive(Debug, Clone)]
pub struct TrainingSet {
    pub patches: Vec<PatchPair>,
    pub norm: NormStats,
    pub scale: usize,
}

/// Stacks the upsampled precipitation in front of the factors, in canonical
/// channel order.
pub fn network_input(lr: &GeoGrid, ancillary: &GridStack, scale: usize) -> Result<GridStack> {
    let up = bilinear_resample(lr, Ratio::up(scale as u32))?;
    let mut channels = vec![up];
    channels.extend(ancillary.channels().iter().cloned());
    let mut names = vec![CANONICAL_CHANNELS[0].to_string()];
    names.extend(ancillary.names().iter().cloned());
    let stack = GridStack::new(channels, names)?;
    stack.ensure_order(&CANONICAL_CHANNELS)?;
    Ok(stack)
}

/// Cuts every scene into `patch`-sized training pairs at `stride`, drops
/// patches touching nodata, and fits the normalization.
pub fn build_training_set(scenes: &[Scene], scale: usize, patch: usize, stride: usize) -> Result<TrainingSet> {
    let grids: Vec<_> = scenes.iter().map(|s| (&s.lr_precip, &s.ancillary, &s.hr_precip)).collect();
    training_set_from_grids(&grids, scale, patch, stride)
}

/// As [`build_training_set`], from `(coarse precipitation, factors, fine
/// precipitation)` triples.
pub fn training_set_from_grids(
    scenes: &[(&GeoGrid, &GridStack, &GeoGrid)],
    scale: usize,
    patch: usize,
    stride: usize,
) -> Result<TrainingSet> {
    let mut patches = Vec::new();
    for &(lr, ancillary, hr) in scenes {
        let input = network_input(lr, ancillary, scale)?;
        patches.extend(extract_patches(&input, hr, lr, patch, stride)?);
    }
    if patches.is_empty() {
        return Err(TrainError::Empty);
    }
    let norm = fit_norm_stats(&patches)?;
    Ok(TrainingSet {
        patches,
        norm,
        scale,
    })
}

/// One mini-batch: coarse precipitation, normalized factors and fine labels.
#[derive(Debug, Clone)]
pub struct Batch<T> {
    pub lr: Tensor<T>,
    pub ancillary: Tensor<T>,
    pub label: Tensor<T>,
}

struct PatchTensors {
    lr: Vec<f32>,
    ancillary: Vec<f32>,
    label: Vec<f32>,
    lr_side: usize,
    side: usize,
    n_anc: usize,
}

fn patch_tensors(p: &PatchPair, norm: &NormStats) -> Result<PatchTensors> {
    let mut ancillary = Vec::new();
    for ch in 1..p.input.len() {
        let z = norm.apply_channel(p.input.channel(ch), ch)?;
        ancillary.extend_from_slice(z.values());
    }
    Ok(PatchTensors {
        lr: p.lr_precip.values().to_vec(),
        ancillary,
        label: p.label.values().to_vec(),
        lr_side: p.lr_precip.nrows(),
        side: p.label.nrows(),
        n_anc: p.input.len() - 1,
    })
}

fn make_batch<T: Scalar>(items: &[&PatchTensors]) -> Result<Batch<T>> {
    let b = items.len();
    let (q, s, a) = (items[0].lr_side, items[0].side, items[0].n_anc);
    let cat = |f: &dyn Fn(&PatchTensors) -> &[f32]| -> Vec<T> {
        items
            .iter()
            .flat_map(|t| f(t).iter().map(|&v| T::from_f32(v).unwrap()))
            .collect()
    };
    Ok(Batch {
        lr: Tensor::new(vec![b, 1, q, q], cat(&|t| &t.lr))?,
        ancillary: Tensor::new(vec![b, a, s, s], cat(&|t| &t.ancillary))?,
        label: Tensor::new(vec![b, 1, s, s], cat(&|t| &t.label))?,
    })
}

impl TrainingSet {
    /// All patches at `indices` as one batch.
    pub fn batch<T: Scalar>(&self, indices: &[usize]) -> Result<Batch<T>> {
        let tensors = indices
            .iter()
            .map(|&i| patch_tensors(&self.patches[i], &self.norm))
            .collect::<Result<Vec<_>>>()?;
        make_batch(&tensors.iter().collect::<Vec<_>>())
    }
}

/// Records the training objective for one batch and returns the node to
/// differentiate with its loss report.
///
/// The Charbonnier term compares the residual head with
/// `(label - f_u(lr)) / std`; the degradation term compares `lr / std` with
/// the bilinear downsampling of the prediction over `std`. The adaptive
/// weights come from the current loss values unless `weights` pins them.
pub fn objective<T: Scalar>(
    g: &mut Graph<T>,
    cfg: &AmcnConfig,
    params: &ParamStore<T>,
    norm: &NormStats,
    batch: &Batch<T>,
    reduction: Reduction,
    weights: Option<(f64, f64)>,
) -> Result<(Var, LossReport)> {
    let fwd = amcn_forward(g, cfg, params, norm, &batch.lr, &batch.ancillary)?;
    let inv_std = T::lit(1.0 / norm.get(0).std);
    let rho: Vec<T> = batch
        .label
        .data()
        .iter()
        .zip(g.value(fwd.up).data())
        .map(|(&l, &u)| (l - u) * inv_std)
        .collect();
    let rho = g.input(Tensor::new(batch.label.shape().to_vec(), rho)?)?;
    let lc = charbonnier_loss(g, fwd.xi, rho, EPSILON, reduction)?;
    if !cfg.use_degradation_loss {
        let l = g.value(lc).data()[0].to_f64().unwrap();
        return Ok((lc, LossReport::charbonnier_only(l)));
    }
    let hr = g.scale(fwd.out, inv_std)?;
    let lr_scaled: Vec<T> = batch.lr.data().iter().map(|&v| v * inv_std).collect();
    let lr = g.input(Tensor::new(batch.lr.shape().to_vec(), lr_scaled)?)?;
    let ld = degradation_loss(g, lr, hr, EPSILON, cfg.scale, reduction)?;
    match weights {
        None => Ok(total_loss_node(g, lc, ld)?),
        Some((alpha, beta)) => {
            let total = g.weighted_sum(&[(lc, T::lit(alpha)), (ld, T::lit(beta))])?;
            let (l_c, l_d) = (g.value(lc).data()[0].to_f64().unwrap(), g.value(ld).data()[0].to_f64().unwrap());
            let l_total = g.value(total).data()[0].to_f64().unwrap();
            Ok((
                total,
                LossReport {
                    l_c,
                    l_d,
                    alpha,
                    beta,
                    l_total,
                },
            ))
        }
    }
}

/// One row of the loss history.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LossRecord {
    pub epoch: usize,
    pub iteration: usize,
    #[serde(rename = "L_c")]
    pub l_c: f64,
    #[serde(rename = "L_d")]
    pub l_d: f64,
    pub alpha: f64,
    pub beta: f64,
    #[serde(rename = "L_total")]
    pub l_total: f64,
}

pub fn write_loss_csv(history: &[LossRecord], path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in history {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Trains `model` in place with Adam on shuffled mini-batches and returns the
/// per-iteration loss history. The last partial batch of an epoch is dropped
/// unless the whole set is smaller than one batch.
pub fn train(model: &mut AmcnModel, set: &TrainingSet, cfg: &TrainConfig) -> Result<Vec<LossRecord>> {
    cfg.validate(model.config.scale)?;
    model.check()?;
    if set.patches.is_empty() {
        return Err(TrainError::Empty);
    }
    if set.scale != model.config.scale {
        return Err(TrainError::Config(format!(
            "training set factor {} vs model factor {}",
            set.scale, model.config.scale
        )));
    }
    let tensors = set
        .patches
        .iter()
        .map(|p| patch_tensors(p, &model.norm))
        .collect::<Result<Vec<_>>>()?;
    let bs = cfg.batch_size.min(tensors.len());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(
        AdamConfig {
            lr: cfg.lr0,
            halve_every: cfg.lr_halving_period,
            ..AdamConfig::default()
        },
        &model.params,
    );
    let mut order: Vec<usize> = (0..tensors.len()).collect();
    let mut history = Vec::new();
    let mut iteration = 0;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let lr = adam.lr_at_epoch(epoch);
        for chunk in order.chunks_exact(bs) {
            let items: Vec<&PatchTensors> = chunk.iter().map(|&i| &tensors[i]).collect();
            let batch = make_batch::<f32>(&items)?;
            let wrap = |source: NnError| TrainError::NonFinite {
                epoch,
                iteration,
                source,
            };
            let mut g = Graph::new();
            let (loss, report) = objective(&mut g, &model.config, &model.params, &model.norm, &batch, cfg.reduction, None)
                .map_err(|e| match e {
                    TrainError::Net(NetError::Nn(s)) | TrainError::Nn(s) | TrainError::Loss(LossError::Nn(s)) => wrap(s),
                    TrainError::Loss(LossError::NonPositive { .. }) => wrap(NnError::NonFinite { op: "total_loss" }),
                    other => other,
                })?;
            let grads = g.backward(loss)?.for_params(&model.params);
            if grads.iter().flatten().any(|v| !v.is_finite()) {
                return Err(wrap(NnError::NonFinite { op: "backward" }));
            }
            adam.step(&mut model.params, &grads, lr)?;
            history.push(LossRecord {
                epoch,
                iteration,
                l_c: report.l_c,
                l_d: report.l_d,
                alpha: report.alpha,
                beta: report.beta,
                l_total: report.l_total,
            });
            iteration += 1;
        }
        log::debug!(
            "epoch {epoch}: L_total {:.5}",
            history.last().map(|r| r.l_total).unwrap_or(f64::NAN)
        );
    }
    Ok(history)
}
