//! Affine-invariant evaluation: align a distorted prediction, then score it
//! with the depth metrics and the edge protocol.

use depthflow::datagen::{generate_scene, DepthGrid, Difficulty};
use depthflow::evalkit::{
    abs_rel, affine_align, delta1, edge_precision_recall, rmse, sobel_edges, FitSpace, DEFAULT_EDGE_THRESHOLD,
};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let gt = generate_scene(42, 32, 32, Difficulty::Standard)?.depth;
    // right up to a power law, with a 5% bias near the right edge
    let values: Vec<f32> = gt
        .values()
        .iter()
        .enumerate()
        .map(|(i, &d)| {
            let bump = if i % 32 > 24 { 1.05 } else { 1.0 };
            (1.7 * d.powf(0.8) + 0.2) * bump
        })
        .collect();
    let pred = DepthGrid::new(32, 32, values)?;

    for space in [FitSpace::Linear, FitSpace::Log] {
        let (aligned, fit) = affine_align(&pred, &gt, space)?;
        println!(
            "{:>6} fit: a {:+.3} b {:+.3} -> abs_rel {:.4} delta1 {:.3} rmse {:.3}",
            space.name(),
            fit.a,
            fit.b,
            abs_rel(&aligned, &gt)?,
            delta1(&aligned, &gt)?,
            rmse(&aligned, &gt)?
        );
    }

    let (aligned, _) = affine_align(&pred, &gt, FitSpace::Log)?;
    let (pe, ge) = (sobel_edges(&aligned, DEFAULT_EDGE_THRESHOLD)?, sobel_edges(&gt, DEFAULT_EDGE_THRESHOLD)?);
    for tau in 0..3 {
        let s = edge_precision_recall(&pe, &ge, tau)?;
        println!("edges within {tau} px: precision {:.3} recall {:.3}", s.precision, s.recall);
    }
    Ok(())
}
