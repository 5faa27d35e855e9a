//! Finite-difference check of the UNet backward pass in 64-bit precision.

use depthflow::network::{UNet, UNetConfig};
use depthflow::tensor::{grad_check_with, GradCheckOptions, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| StandardNormal.sample(rng)).collect()).unwrap()
}

fn main() {
    let net = UNet::new(UNetConfig {
        base_width: 8,
        time_embed_dim: 16,
        ..UNetConfig::default()
    })
    .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut params = net.init_params::<f64>(1);
    // the output layer starts at zero, which hides every upstream gradient
    for (name, t) in params.entries_mut() {
        if name.starts_with("out.conv") {
            *t = randn(t.shape(), &mut rng).map(|v| 0.1 * v);
        }
    }
    let x = randn(&[2, 1, 16, 16], &mut rng);
    let cond = randn(&[2, 1, 16, 16], &mut rng);
    let target = randn(&[2, 1, 16, 16], &mut rng);

    let opts = GradCheckOptions {
        h: 1e-5,
        coords_per_param: 4,
        seed: 3,
        min_magnitude: 0.0,
    };
    let report = grad_check_with(
        |g, vars| {
            let (xv, cv) = (g.constant(x.clone()), g.constant(cond.clone()));
            let out = net.forward(g, vars, &[0.25, 0.75], xv, cv, None).expect("forward");
            let tv = g.constant(target.clone());
            g.mse(out, tv)
        },
        &params.to_vec(),
        &opts,
    )
    .unwrap();
    println!(
        "{} coordinates, max relative error {:.2e} (worst at {:?})",
        report.coords_checked, report.max_rel_error, report.worst
    );
}
