//! Pseudo-label distillation: a regression teacher labels unlabelled images
//! and the flow model trains on ground truth plus a fraction k of them.
//!
//! cargo run --example distillation -- [k]

use depthflow::datagen::{generate_split, DatasetQuantiles, Difficulty, NormKind, Sample, Split};
use depthflow::flowmatch::{build_mixed_dataset, mixed_size, pseudo_label, train_teacher, TrainConfig, TrainState};
use depthflow::network::{UNet, UNetConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let k: f64 = std::env::args().nth(1).map_or(Ok(0.1), |s| s.parse())?;
    let gt = generate_split(0, Split::Train, 100, 32, 32, Difficulty::Standard)?;
    let q = DatasetQuantiles::from_grids(gt.iter().map(|s| &s.depth), NormKind::Log)?;
    let gt_samples = gt.iter().map(|s| Sample::from_scene(s, &q)).collect::<Result<Vec<_>, _>>()?;

    let teacher = UNet::new(UNetConfig::default())?;
    let config = TrainConfig {
        steps: 150,
        log_every: 50,
        ..TrainConfig::desk()
    };
    let mut state = TrainState::new(teacher.init_params(1), &config);
    train_teacher(&teacher, &mut state, &gt_samples, &config, &mut |row| {
        println!("teacher {}", row.to_csv())
    })?;

    let unlabeled = generate_split(0, Split::Unlabeled, 40, 32, 32, Difficulty::Standard)?;
    let images: Vec<_> = unlabeled.iter().map(|s| s.image.clone()).collect();
    let pseudo = pseudo_label(&teacher, &state.ema, &images, &q)?;
    let mixed = build_mixed_dataset(&gt, &pseudo, k, 0)?;
    println!(
        "k = {k}: {} ground truth + {} pseudo-labelled = {} (law gives {})",
        gt.len(),
        mixed.len() - gt.len(),
        mixed.len(),
        mixed_size(gt.len(), k)
    );
    Ok(())
}
