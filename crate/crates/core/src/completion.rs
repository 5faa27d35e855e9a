//! Depth completion from a sparse subset of observed pixels: the sparse
//! depth is nearest-filled and paired with the distance to the nearest
//! observation, and the estimation network is fine-tuned with two extra
//! zero-initialised input channels.

use rand::seq::index;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::datagen::{normalize_depth, DataError, DatasetQuantiles, DepthGrid, Sample, Scene};
use crate::flowmatch::{train, FlowError, LogRow, TrainConfig, TrainState};
use crate::network::{NetworkError, UNet};
use crate::tensor::Tensor;

/// Fraction of ground-truth pixels observed by default.
pub const DEFAULT_KEEP_FRACTION: f64 = 0.02;
/// Conditioning channels added to the network.
pub const COMPLETION_CHANNELS: usize = 2;

#[derive(Debug, thiserror::Error)]
pub enum CompletionError {
    #[error("mask has no observed pixel")]
    EmptyMask,
    #[error("checkpoint cannot be fine-tuned for completion: {0}")]
    IncompatibleCheckpoint(String),
    #[error("keep fraction {0} outside (0, 1]")]
    BadFraction(f64),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error(transparent)]
    Network(#[from] NetworkError),
}

/// Observed subset of a depth grid.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseDepth {
    /// Ground truth restricted to the observed pixels.
    pub values: DepthGrid,
    pub mask: Vec<bool>,
    pub keep_fraction: f64,
}

/// `max(1, round(f H W))`.
pub fn observed_count(height: usize, width: usize, keep_fraction: f64) -> usize {
    ((keep_fraction * (height * width) as f64).round() as usize).max(1)
}

/// Keep a seeded uniform subset of the valid pixels of `gt`.
pub fn sparsify(gt: &DepthGrid, keep_fraction: f64, seed: u64) -> Result<SparseDepth, CompletionError> {
    if !(keep_fraction > 0.0 && keep_fraction <= 1.0) {
        return Err(CompletionError::BadFraction(keep_fraction));
    }
    let valid: Vec<usize> = (0..gt.values().len()).filter(|&i| gt.valid()[i]).collect();
    if valid.is_empty() {
        return Err(DataError::AllInvalid.into());
    }
    let k = observed_count(gt.height(), gt.width(), keep_fraction).min(valid.len());
    let mut mask = vec![false; gt.values().len()];
    for j in index::sample(&mut ChaCha8Rng::seed_from_u64(seed), valid.len(), k) {
        mask[valid[j]] = true;
    }
    Ok(SparseDepth {
        values: gt.masked(&mask),
        mask,
        keep_fraction,
    })
}

/// Exact Euclidean distance from each pixel to the nearest `true` pixel,
/// as `[1, H, W]`.
pub fn distance_transform_l2(height: usize, width: usize, mask: &[bool]) -> Result<Tensor<f32>, CompletionError> {
    assert_eq!(mask.len(), height * width, "mask size");
    let seeds: Vec<(i64, i64)> = (0..mask.len())
        .filter(|&i| mask[i])
        .map(|i| ((i / width) as i64, (i % width) as i64))
        .collect();
    if seeds.is_empty() {
        return Err(CompletionError::EmptyMask);
    }
    let data = (0..mask.len())
        .map(|i| {
            let (y, x) = ((i / width) as i64, (i % width) as i64);
            let d2 = seeds
                .iter()
                .map(|&(sy, sx)| (sy - y).pow(2) + (sx - x).pow(2))
                .min()
                .expect("non-empty");
            (d2 as f64).sqrt() as f32
        })
        .collect();
    Ok(Tensor::new(vec![1, height, width], data).expect("mask shape"))
}

/// The two conditioning maps for one scene.
#[derive(Clone, Debug, PartialEq)]
pub struct CompletionConditioning {
    /// Normalised observed depth, nearest-filled everywhere.
    pub dense_sparse_depth: Tensor<f32>,
    /// Distance to the nearest observation divided by `max(H, W)`.
    pub mask_distance: Tensor<f32>,
}

impl CompletionConditioning {
    /// `[2, H, W]` network input.
    pub fn to_tensor(&self) -> Tensor<f32> {
        let s = self.dense_sparse_depth.shape();
        let mut data = self.dense_sparse_depth.data().to_vec();
        data.extend_from_slice(self.mask_distance.data());
        Tensor::new(vec![2, s[1], s[2]], data).expect("conditioning shape")
    }
}

pub fn build_completion_conditioning(
    sd: &SparseDepth,
    q: &DatasetQuantiles,
) -> Result<CompletionConditioning, CompletionError> {
    let (h, w) = (sd.values.height(), sd.values.width());
    let scale = 1.0 / h.max(w) as f32;
    Ok(CompletionConditioning {
        dense_sparse_depth: normalize_depth(&sd.values, q)?,
        mask_distance: distance_transform_l2(h, w, &sd.mask)?.map(|d| d * scale),
    })
}

/// Sparsify `gt` and build its `[2, H, W]` conditioning in one go.
pub fn conditioning_for(
    gt: &DepthGrid,
    keep_fraction: f64,
    seed: u64,
    q: &DatasetQuantiles,
) -> Result<Tensor<f32>, CompletionError> {
    Ok(build_completion_conditioning(&sparsify(gt, keep_fraction, seed)?, q)?.to_tensor())
}

/// Inflate an estimation model with the completion channels and fine-tune it
/// on `scenes`. A fresh observation pattern is drawn for every training
/// draw. Training starts from `base.ema` for both weights and shadow.
pub fn finetune_completion(
    net: &UNet,
    base: &TrainState,
    scenes: &[Scene],
    q: &DatasetQuantiles,
    keep_fraction: f64,
    config: &TrainConfig,
    on_log: &mut dyn FnMut(&LogRow),
) -> Result<(UNet, TrainState), CompletionError> {
    if net.config().completion_channels != 0 {
        return Err(CompletionError::IncompatibleCheckpoint(format!(
            "network already has {} completion channels",
            net.config().completion_channels
        )));
    }
    net.check_params(&base.ema)
        .map_err(|e| CompletionError::IncompatibleCheckpoint(e.to_string()))?;
    let (inflated, params) = net.inflate(&base.ema, COMPLETION_CHANNELS)?;
    let mut state = TrainState::new(params, config);
    let samples = scenes
        .iter()
        .map(|s| Sample::from_scene(s, q))
        .collect::<Result<Vec<_>, _>>()?;
    let extra = |i: usize, rng: &mut ChaCha8Rng| -> Result<Tensor<f32>, FlowError> {
        conditioning_for(&scenes[i].depth, keep_fraction, rng.next_u64(), q).map_err(|e| match e {
            CompletionError::Flow(f) => f,
            CompletionError::Data(d) => FlowError::Data(d),
            CompletionError::Network(n) => FlowError::Network(n),
            other => FlowError::Config(other.to_string()),
        })
    };
    train(&inflated, &mut state, &samples, config, Some(&extra), on_log)?;
    Ok((inflated, state))
}
