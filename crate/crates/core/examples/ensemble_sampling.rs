//! Few-step Euler sampling with an ensemble: per-pixel mean and spread, and
//! how accuracy moves with the number of function evaluations.
//!
//! cargo run --example ensemble_sampling -- [train_steps]

use depthflow::datagen::{generate_split, DatasetQuantiles, Difficulty, NormKind, Sample, Split};
use depthflow::evalkit::{evaluate_image, summarize, EvalOptions};
use depthflow::flowmatch::{train, TrainConfig, TrainState};
use depthflow::network::{UNet, UNetConfig};
use depthflow::sampler::{ensemble_predict_batch, DepthModel, SamplerConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let steps = std::env::args().nth(1).map_or(Ok(400), |s| s.parse())?;
    let scenes = generate_split(0, Split::Train, 128, 32, 32, Difficulty::Standard)?;
    let q = DatasetQuantiles::from_grids(scenes.iter().map(|s| &s.depth), NormKind::Log)?;
    let data = scenes.iter().map(|s| Sample::from_scene(s, &q)).collect::<Result<Vec<_>, _>>()?;
    let net = UNet::new(UNetConfig::default())?;
    let config = TrainConfig {
        steps,
        // a short run needs a quicker shadow than the 0.999 default
        ema_rate: 0.99,
        ..TrainConfig::desk()
    };
    let mut state = TrainState::new(net.init_params(config.seed), &config);
    train(&net, &mut state, &data, &config, None, &mut |_| {})?;

    let model = DepthModel {
        net: &net,
        params: &state.ema,
        quantiles: q,
        t_s: config.t_s,
        start: config.start,
    };
    let held_out = generate_split(0, Split::Eval, 16, 32, 32, Difficulty::Standard)?;
    let images: Vec<_> = held_out.iter().map(|s| s.image.clone()).collect();
    for nfe in [1, 2, 4, 10] {
        let sampler = SamplerConfig {
            nfe,
            ensemble_size: 5,
            use_ema: true,
        };
        let results = ensemble_predict_batch(&model, &images, None, &sampler, &mut ChaCha8Rng::seed_from_u64(7))?;
        let metrics = results
            .iter()
            .zip(&held_out)
            .map(|(r, s)| evaluate_image(&r.mean_depth, Some(r), &s.depth, &EvalOptions::default()))
            .collect::<Result<Vec<_>, _>>()?;
        let spread = results.iter().map(|r| r.std_depth.data().iter().map(|&v| f64::from(v)).sum::<f64>()).sum::<f64>()
            / results.iter().map(|r| r.std_depth.numel()).sum::<usize>() as f64;
        let report = summarize(&format!("nfe={nfe}"), &metrics);
        println!(
            "nfe {nfe:>2}: delta1 {:.3} abs_rel {:.3} mean spread {spread:.4} uncertainty ratio {:.2}",
            report.delta1, report.abs_rel, report.unc_ratio
        );
    }
    Ok(())
}
