//! Depth completion: keep 2% of the ground truth, build the dense-fill and
//! distance channels, inflate a trained estimator and fine-tune it.
//!
//! cargo run --example depth_completion -- [base_steps] [finetune_steps]

use depthflow::completion::{conditioning_for, finetune_completion, sparsify, DEFAULT_KEEP_FRACTION};
use depthflow::datagen::{generate_split, DatasetQuantiles, Difficulty, NormKind, Sample, Split};
use depthflow::evalkit::{evaluate_image, summarize, EvalOptions};
use depthflow::flowmatch::{stream, train, TrainConfig, TrainState, DIAGNOSTIC_STREAM};
use depthflow::network::{UNet, UNetConfig};
use depthflow::sampler::{ensemble_predict_batch, DepthModel, SamplerConfig};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1).map(|s| s.parse::<usize>());
    let base_steps = args.next().unwrap_or(Ok(400))?;
    let tune_steps = args.next().unwrap_or(Ok(200))?;

    let scenes = generate_split(0, Split::Train, 128, 32, 32, Difficulty::Standard)?;
    let q = DatasetQuantiles::from_grids(scenes.iter().map(|s| &s.depth), NormKind::Log)?;
    let data = scenes.iter().map(|s| Sample::from_scene(s, &q)).collect::<Result<Vec<_>, _>>()?;
    let net = UNet::new(UNetConfig::default())?;
    let config = TrainConfig {
        steps: base_steps,
        // a short run needs a quicker shadow than the 0.999 default
        ema_rate: 0.99,
        ..TrainConfig::desk()
    };
    let mut base = TrainState::new(net.init_params(config.seed), &config);
    train(&net, &mut base, &data, &config, None, &mut |_| {})?;

    let sd = sparsify(&scenes[0].depth, DEFAULT_KEEP_FRACTION, 1)?;
    println!(
        "scene 0 keeps {} of {} pixels",
        sd.mask.iter().filter(|&&m| m).count(),
        sd.mask.len()
    );

    let tune = TrainConfig {
        steps: tune_steps,
        ..config.clone()
    };
    let (inflated, tuned) = finetune_completion(&net, &base, &scenes, &q, DEFAULT_KEEP_FRACTION, &tune, &mut |_| {})?;

    let held_out = generate_split(0, Split::Eval, 16, 32, 32, Difficulty::Standard)?;
    let images: Vec<_> = held_out.iter().map(|s| s.image.clone()).collect();
    let mut seeds = stream(0, DIAGNOSTIC_STREAM);
    let extras = held_out
        .iter()
        .map(|s| conditioning_for(&s.depth, DEFAULT_KEEP_FRACTION, seeds.next_u64(), &q))
        .collect::<Result<Vec<_>, _>>()?;
    let sampler = SamplerConfig {
        ensemble_size: 4,
        ..SamplerConfig::default()
    };
    let score = |model: &DepthModel, extras: Option<&[_]>| -> Result<_, Box<dyn std::error::Error>> {
        let results = ensemble_predict_batch(model, &images, extras, &sampler, &mut ChaCha8Rng::seed_from_u64(3))?;
        let m = results
            .iter()
            .zip(&held_out)
            .map(|(r, s)| evaluate_image(&r.mean_depth, Some(r), &s.depth, &EvalOptions::default()))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(summarize("", &m))
    };
    let model = |net, params| DepthModel {
        net,
        params,
        quantiles: q,
        t_s: config.t_s,
        start: config.start,
    };
    let before = score(&model(&net, &base.ema), None)?;
    let after = score(&model(&inflated, &tuned.ema), Some(&extras))?;
    println!("rmse: estimation {:.4}, completion {:.4}", before.rmse, after.rmse);
    Ok(())
}
