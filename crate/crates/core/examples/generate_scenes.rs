//! Procedural scenes: render a few, write them as PGM/PFM and report the
//! log-depth quantiles used for normalisation.
//!
//! cargo run --example generate_scenes -- [out_dir]

use std::path::PathBuf;

use depthflow::datagen::{
    generate_split, normalize_depth, write_manifest, write_pfm, write_ppm, DatasetQuantiles, Difficulty,
    ManifestRecord, NormKind, Split,
};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let out = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "scenes".into()));
    std::fs::create_dir_all(&out)?;

    let scenes = generate_split(0, Split::Train, 8, 32, 32, Difficulty::Standard)?;
    let q = DatasetQuantiles::from_grids(scenes.iter().map(|s| &s.depth), NormKind::Log)?;
    println!("d2 = {:.3} m, d98 = {:.3} m", q.d2, q.d98);

    let mut records = Vec::new();
    for (i, scene) in scenes.iter().enumerate() {
        let (image, depth) = (format!("scene{i}.pgm"), format!("scene{i}.pfm"));
        write_ppm(out.join(&image), &scene.image)?;
        write_pfm(out.join(&depth), &scene.depth.to_tensor())?;
        let n = normalize_depth(&scene.depth, &q)?;
        let (lo, hi) = n.data().iter().fold((f32::MAX, f32::MIN), |(a, b), &v| (a.min(v), b.max(v)));
        println!(
            "scene {i}: {} valid of {} pixels, normalised range [{lo:.2}, {hi:.2}]",
            scene.depth.valid_count(),
            scene.depth.values().len()
        );
        records.push(ManifestRecord {
            image: image.into(),
            depth: depth.into(),
            source: scene.source,
        });
    }
    write_manifest(out.join("manifest.txt"), &records)?;
    println!("wrote {} scenes to {}", scenes.len(), out.display());
    Ok(())
}
