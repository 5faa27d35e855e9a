#![allow(dead_code)]

use depthflow::network::{NetworkError, Params, UNet, UNetConfig};
use depthflow::tensor::{grad_check_with, Element, GradCheckOptions, GradCheckReport, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

pub fn randn<T: Element>(shape: &[usize], std: f64, rng: &mut ChaCha8Rng) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let d = Normal::new(0.0, std).unwrap();
    Tensor::new(shape.to_vec(), (0..n).map(|_| T::lit(d.sample(rng))).collect()).unwrap()
}

/// Initial weights with a random output layer; the zero-initialised one
/// would block every upstream gradient.
pub fn live_params<T: Element>(net: &UNet, seed: u64) -> Params<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = net.init_params::<T>(seed);
    for (name, t) in p.entries_mut() {
        if name.starts_with("out.conv") {
            *t = randn(t.shape(), 0.1, &mut rng);
        }
    }
    p
}

/// Finite-difference check of the desk UNet on a batch of two 32x32 inputs.
/// The squared-error target sits close to the current output, which keeps
/// the loss value small next to its gradient. The loss is rounded to `T`,
/// so its magnitude sets the noise floor of the central difference.
pub fn unet_grad_check<T: Element>(opts: &GradCheckOptions) -> GradCheckReport {
    let net = UNet::new(UNetConfig::default()).unwrap();
    let params = live_params::<T>(&net, 5);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = randn::<T>(&[2, 1, 32, 32], 1.0, &mut rng);
    let cond = randn::<T>(&[2, 1, 32, 32], 0.5, &mut rng);
    let times = [0.3, 0.8];
    let out0 = net.predict(&params, &times, &x, &cond, None).unwrap();
    let offset = randn::<T>(&[2, 1, 32, 32], 0.05, &mut rng);
    let target = Tensor::new(
        out0.shape().to_vec(),
        out0.data().iter().zip(offset.data()).map(|(&a, &b)| a + b).collect(),
    )
    .unwrap();
    grad_check_with(
        |g, vars| {
            let xv = g.constant(x.clone());
            let cv = g.constant(cond.clone());
            let out = net.forward(g, vars, &times, xv, cv, None).map_err(|e| match e {
                NetworkError::Tensor(t) => t,
                other => panic!("{other}"),
            })?;
            let tv = g.constant(target.clone());
            g.mse(out, tv)
        },
        &params.to_vec(),
        opts,
    )
    .unwrap()
}

/// f64: every coordinate eligible.
pub const GRAD_F64: GradCheckOptions = GradCheckOptions {
    h: 1e-5,
    coords_per_param: 8,
    seed: 7,
    min_magnitude: 0.0,
};

/// f32: coordinates within a factor two of their tensor's largest gradient.
/// Forward roundoff swamps the finite difference of the smaller ones, and a
/// step of 1e-3 leaves it near 1% even on these.
pub const GRAD_F32: GradCheckOptions = GradCheckOptions {
    h: 5e-3,
    coords_per_param: 8,
    seed: 7,
    min_magnitude: 0.5,
};
