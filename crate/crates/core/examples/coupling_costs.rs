//! How far apart are the two ends of the flow? Paired image/depth coupling
//! against a random shuffle and the optimal assignment.

use depthflow::datagen::{generate_split, normalize_depth, DatasetQuantiles, Difficulty, NormKind, Split};
use depthflow::evalkit::{brute_force_assignment, coupling_cost, hungarian, Norm, Pairing};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let train = generate_split(0, Split::Train, 64, 32, 32, Difficulty::Standard)?;
    let q = DatasetQuantiles::from_grids(train.iter().map(|s| &s.depth), NormKind::Log)?;
    for batch in 0..3u64 {
        let scenes = generate_split(batch, Split::Diagnostic, 32, 32, 32, Difficulty::Standard)?;
        let x0: Vec<_> = scenes.iter().map(|s| s.image.clone()).collect();
        let x1 = scenes.iter().map(|s| normalize_depth(&s.depth, &q)).collect::<Result<Vec<_>, _>>()?;
        for norm in [Norm::L1, Norm::L2] {
            let cost = |p| coupling_cost(&x0, &x1, p, norm);
            println!(
                "batch {batch} {}: paired {:.4} random {:.4} optimal {:.4}",
                norm.name(),
                cost(Pairing::Paired)?,
                cost(Pairing::Random(batch))?,
                cost(Pairing::Optimal)?
            );
        }
    }

    // the assignment solver against exhaustive search
    let cost: Vec<Vec<f64>> = (0..7).map(|i| (0..7).map(|j| ((i * 5 + j * 3) % 7) as f64 + 0.1 * j as f64).collect()).collect();
    let (h, hp) = hungarian(&cost);
    let (b, _) = brute_force_assignment(&cost);
    println!("7x7 assignment: hungarian {h:.2} {hp:?}, brute force {b:.2}");
    Ok(())
}
