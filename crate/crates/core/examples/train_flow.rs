//! Train a small flow-matching depth model from scratch and watch the loss.
//!
//! cargo run --example train_flow -- [steps]

use depthflow::datagen::{generate_split, DatasetQuantiles, Difficulty, NormKind, Sample, Split};
use depthflow::flowmatch::{train, TrainConfig, TrainState, LOG_HEADER};
use depthflow::network::{UNet, UNetConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let steps = std::env::args().nth(1).map_or(Ok(300), |s| s.parse())?;
    let scenes = generate_split(0, Split::Train, 128, 32, 32, Difficulty::Standard)?;
    let q = DatasetQuantiles::from_grids(scenes.iter().map(|s| &s.depth), NormKind::Log)?;
    let data = scenes.iter().map(|s| Sample::from_scene(s, &q)).collect::<Result<Vec<_>, _>>()?;

    let net = UNet::new(UNetConfig::default())?;
    let config = TrainConfig {
        steps,
        log_every: 50,
        ..TrainConfig::desk()
    };
    let mut state = TrainState::new(net.init_params(config.seed), &config);
    println!("{LOG_HEADER}");
    train(&net, &mut state, &data, &config, None, &mut |row| println!("{}", row.to_csv()))?;
    println!("finished {} steps, smoothed loss {:.4}", state.step, state.smoothed_loss().unwrap_or(f64::NAN));
    Ok(())
}
