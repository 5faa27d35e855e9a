//! Pseudo-label distillation: a direct image-to-depth regressor labels
//! unannotated images, and a ratio `k` of them joins the ground-truth set.

use rand::seq::index;

use super::train::{apply_gradients, run_steps, stream, LogRow, TrainConfig, TrainState, DATA_STREAM};
use super::FlowError;
use crate::datagen::{denormalize_depth, DatasetQuantiles, Sample, Scene, Source};
use crate::network::UNet;
use crate::network::Params;
use crate::tensor::{Graph, Tensor};

const PREDICT_CHUNK: usize = 16;

fn zero_state(net: &UNet, image: &Tensor<f32>) -> Tensor<f32> {
    let s = image.shape();
    Tensor::zeros(&[s[0], net.config().state_channels, s[2], s[3]])
}

/// Train `net` as a regressor: zero state, `t = 0`, output compared with the
/// normalised depth under squared error.
pub fn train_teacher(
    net: &UNet,
    state: &mut TrainState,
    data: &[Sample],
    config: &TrainConfig,
    on_log: &mut dyn FnMut(&LogRow),
) -> Result<(), FlowError> {
    net.check_params(&state.params)?;
    if data.iter().any(|s| s.source != Source::GroundTruth) {
        return Err(FlowError::Config("teacher trains on ground truth only".into()));
    }
    run_steps(state, config, data.len(), on_log, |state, idx| {
        let images = Tensor::stack(&idx.iter().map(|&i| data[i].image.clone()).collect::<Vec<_>>())?;
        let depth = Tensor::stack(&idx.iter().map(|&i| data[i].depth.clone()).collect::<Vec<_>>())?;
        let mut g = Graph::new();
        let vars = state.params.bind(&mut g);
        let x = g.constant(zero_state(net, &images));
        let c = g.constant(images);
        let out = net.forward(&mut g, &vars, &vec![0.0; idx.len()], x, c, None)?;
        let target = g.constant(depth);
        let loss = g.mse(out, target)?;
        apply_gradients(state, &g, &vars, loss, config)
    })
}

/// Teacher prediction for a batch `[N, C, H, W]`, clamped to `[-1, 1]`.
pub fn teacher_predict(net: &UNet, params: &Params<f32>, images: &Tensor<f32>) -> Result<Tensor<f32>, FlowError> {
    let out = net.predict(params, &vec![0.0; images.dim(0)], &zero_state(net, images), images, None)?;
    Ok(out.map(|v| v.clamp(-1.0, 1.0)))
}

/// Label `images` (each `[C, H, W]`) with the teacher. Depths are stored in
/// metres under `q` and are valid everywhere.
pub fn pseudo_label(
    net: &UNet,
    params: &Params<f32>,
    images: &[Tensor<f32>],
    q: &DatasetQuantiles,
) -> Result<Vec<Scene>, FlowError> {
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(PREDICT_CHUNK) {
        let pred = teacher_predict(net, params, &Tensor::stack(chunk)?)?;
        for (i, image) in chunk.iter().enumerate() {
            out.push(Scene {
                image: image.clone(),
                depth: denormalize_depth(&pred.batch_item(i), q)?,
                source: Source::PseudoLabel,
            });
        }
    }
    Ok(out)
}

/// `|gt| + round(k |gt|)`.
pub fn mixed_size(gt: usize, k: f64) -> usize {
    gt + (k * gt as f64).round() as usize
}

/// All of `gt` followed by a seeded uniform subset of `pseudo` of size
/// `round(k |gt|)`.
pub fn build_mixed_dataset<T: Clone>(gt: &[T], pseudo: &[T], k: f64, seed: u64) -> Result<Vec<T>, FlowError> {
    if !(k.is_finite() && k >= 0.0) {
        return Err(FlowError::Config(format!("ratio k = {k} must be finite and non-negative")));
    }
    let needed = mixed_size(gt.len(), k) - gt.len();
    if needed > pseudo.len() {
        return Err(FlowError::InsufficientPseudo {
            needed,
            available: pseudo.len(),
        });
    }
    let mut picks = index::sample(&mut stream(seed, DATA_STREAM), pseudo.len(), needed).into_vec();
    picks.sort_unstable();
    let mut out = gt.to_vec();
    out.extend(picks.into_iter().map(|i| pseudo[i].clone()));
    Ok(out)
}
