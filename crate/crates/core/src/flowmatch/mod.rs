//! Flow matching between images and depth: the interpolant, terminal noise
//! augmentation, the regression loss, the optimiser loop and the teacher
//! distillation pipeline.

mod distill;
mod optim;
mod train;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::datagen::DataError;
use crate::network::NetworkError;
use crate::tensor::{Tensor, TensorError};

pub use distill::{build_mixed_dataset, mixed_size, pseudo_label, teacher_predict, train_teacher};
pub use optim::{ema_update, Adam};
pub use train::{
    flow_batch, stream, train, train_step, ExtraFn, LogRow, TrainConfig, TrainState, AUGMENT_STREAM, DATA_STREAM,
    DIAGNOSTIC_STREAM, LOG_HEADER, SAMPLE_STREAM,
};

#[derive(Debug, thiserror::Error)]
pub enum FlowError {
    #[error("time {0} outside [0, 1]")]
    OutOfRangeT(f64),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite loss {loss} at step {step}")]
    NonFiniteLoss { step: usize, loss: f64 },
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("need {needed} pseudo-labelled scenes, only {available} available")]
    InsufficientPseudo { needed: usize, available: usize },
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Offset `s` of the cosine schedule.
pub const COSINE_OFFSET: f64 = 0.008;

/// Cosine cumulative signal level, normalised so that `alpha_bar(0) = 1`.
pub fn cosine_alpha_bar(t: f64) -> Result<f64, FlowError> {
    if !(0.0..=1.0).contains(&t) {
        return Err(FlowError::OutOfRangeT(t));
    }
    let f = |u: f64| ((u + COSINE_OFFSET) / (1.0 + COSINE_OFFSET) * std::f64::consts::FRAC_PI_2).cos().powi(2);
    Ok((f(t) / f(0.0)).clamp(0.0, 1.0))
}

/// Where the flow starts.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum StartDistribution {
    /// Noise-augmented image (direct image to depth transport).
    #[default]
    Image,
    /// Pure standard-normal noise, with the image only as conditioning.
    Noise,
}

impl StartDistribution {
    pub fn name(self) -> &'static str {
        match self {
            StartDistribution::Image => "image",
            StartDistribution::Noise => "noise",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "image" => Some(StartDistribution::Image),
            "noise" => Some(StartDistribution::Noise),
            _ => None,
        }
    }
}

pub(crate) fn gaussian_like(shape: &[usize], rng: &mut impl Rng) -> Tensor<f32> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.sample::<f32, _>(StandardNormal)).collect();
    Tensor::new(shape.to_vec(), data).expect("gaussian shape")
}

/// `sqrt(ab) * x + sqrt(1 - ab) * eps` with `ab = alpha_bar(t_s)` and fresh
/// standard-normal `eps`.
pub fn noise_augment(x: &Tensor<f32>, t_s: f64, rng: &mut impl Rng) -> Result<Tensor<f32>, FlowError> {
    let ab = cosine_alpha_bar(t_s)?;
    if ab == 1.0 {
        return Ok(x.clone());
    }
    let (a, b) = (ab.sqrt() as f32, (1.0 - ab).sqrt() as f32);
    let eps = gaussian_like(x.shape(), rng);
    Ok(x.zip_map(&eps, |v, e| a * v + b * e)?)
}

/// The starting state of the flow for a given clean image.
pub fn start_state(
    image: &Tensor<f32>,
    state_shape: &[usize],
    t_s: f64,
    start: StartDistribution,
    rng: &mut impl Rng,
) -> Result<Tensor<f32>, FlowError> {
    match start {
        StartDistribution::Image => {
            if image.shape() != state_shape {
                return Err(FlowError::ShapeMismatch(format!(
                    "image {:?} cannot start a state of shape {state_shape:?}",
                    image.shape()
                )));
            }
            noise_augment(image, t_s, rng)
        }
        StartDistribution::Noise => Ok(gaussian_like(state_shape, rng)),
    }
}

/// One point on the conditional probability path.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowSample {
    pub t: f64,
    pub x_t: Tensor<f32>,
    /// Regression target `x1 - x0_used`.
    pub target_u: Tensor<f32>,
    /// Clean image conditioning.
    pub cond: Tensor<f32>,
    pub x0_used: Tensor<f32>,
    /// Completion conditioning channels, when the network takes them.
    pub extra: Option<Tensor<f32>>,
}

/// Noise parameters of the interpolant.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PathConfig {
    pub sigma_min: f64,
    pub t_s: f64,
    pub start: StartDistribution,
}

/// Draw `t ~ U[0, 1]` and build the sample at that time.
pub fn sample_flow(
    image: &Tensor<f32>,
    depth: &Tensor<f32>,
    path: &PathConfig,
    rng: &mut impl Rng,
) -> Result<FlowSample, FlowError> {
    let t = rng.random_range(0.0..=1.0);
    sample_flow_at(t, image, depth, path, rng)
}

/// `x_t = t x1 + (1 - t) x0 + sigma_min z` with `x0` the augmented start.
pub fn sample_flow_at(
    t: f64,
    image: &Tensor<f32>,
    depth: &Tensor<f32>,
    path: &PathConfig,
    rng: &mut impl Rng,
) -> Result<FlowSample, FlowError> {
    if !(0.0..=1.0).contains(&t) {
        return Err(FlowError::OutOfRangeT(t));
    }
    let x0 = start_state(image, depth.shape(), path.t_s, path.start, rng)?;
    let tf = t as f32;
    let mut x_t = depth.zip_map(&x0, |x1, x0| tf * x1 + (1.0 - tf) * x0)?;
    if path.sigma_min > 0.0 {
        let s = path.sigma_min as f32;
        for v in x_t.data_mut() {
            *v += s * rng.sample::<f32, _>(StandardNormal);
        }
    }
    Ok(FlowSample {
        t,
        target_u: depth.sub(&x0)?,
        x_t,
        cond: image.clone(),
        x0_used: x0,
        extra: None,
    })
}

/// Mean squared error over all elements.
pub fn cfm_loss(v_pred: &Tensor<f32>, target_u: &Tensor<f32>) -> Result<f64, FlowError> {
    if v_pred.shape() != target_u.shape() {
        return Err(FlowError::ShapeMismatch(format!("{:?} vs {:?}", v_pred.shape(), target_u.shape())));
    }
    let sum: f64 = v_pred
        .data()
        .iter()
        .zip(target_u.data())
        .map(|(&a, &b)| (f64::from(a) - f64::from(b)).powi(2))
        .sum();
    Ok(sum / v_pred.numel() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn exact(sigma_min: f64, t_s: f64) -> PathConfig {
        PathConfig {
            sigma_min,
            t_s,
            start: StartDistribution::Image,
        }
    }

    #[test]
    fn alpha_bar_endpoints_and_order() {
        assert_eq!(cosine_alpha_bar(0.0).unwrap(), 1.0);
        assert!(cosine_alpha_bar(1.0).unwrap() < 1e-3);
        let (a, b, c) = (
            cosine_alpha_bar(0.2).unwrap(),
            cosine_alpha_bar(0.4).unwrap(),
            cosine_alpha_bar(0.8).unwrap(),
        );
        assert!(a > b && b > c);
        assert!(matches!(cosine_alpha_bar(1.5), Err(FlowError::OutOfRangeT(_))));
        assert!(matches!(cosine_alpha_bar(-0.1), Err(FlowError::OutOfRangeT(_))));
    }

    #[test]
    fn alpha_bar_matches_closed_form() {
        // evaluated independently with the un-normalised cosine
        let s = 0.008f64;
        let raw = |t: f64| ((t + s) / (1.0 + s) * std::f64::consts::PI / 2.0).cos().powi(2);
        for t in [0.1, 0.4, 0.7, 0.95] {
            let expect = raw(t) / raw(0.0);
            assert!((cosine_alpha_bar(t).unwrap() - expect).abs() < 1e-14);
        }
    }

    proptest! {
        #[test]
        fn alpha_bar_is_strictly_decreasing(a in 0.0f64..0.999, d in 1e-3f64..0.5) {
            let b = (a + d).min(1.0);
            prop_assert!(cosine_alpha_bar(a).unwrap() > cosine_alpha_bar(b).unwrap());
            prop_assert!(cosine_alpha_bar(a).unwrap() > 0.0);
        }
    }

    #[test]
    fn zero_noise_level_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = gaussian_like(&[1, 4, 4], &mut rng);
        assert_eq!(noise_augment(&x, 0.0, &mut rng).unwrap(), x);
    }

    fn moments(v: &[f32]) -> (f64, f64) {
        let n = v.len() as f64;
        let m = v.iter().map(|&x| f64::from(x)).sum::<f64>() / n;
        (m, v.iter().map(|&x| (f64::from(x) - m).powi(2)).sum::<f64>() / n)
    }

    #[test]
    fn full_noise_is_standard_normal() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::zeros(&[1, 100, 100]);
        let (m, v) = moments(noise_augment(&x, 1.0, &mut rng).unwrap().data());
        assert!(m.abs() < 0.05 && (0.9..=1.1).contains(&v), "{m} {v}");
    }

    #[test]
    fn augmentation_preserves_unit_variance() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = gaussian_like(&[1, 100, 100], &mut rng);
        for t_s in [0.1, 0.4, 0.7, 0.9] {
            let (_, v) = moments(noise_augment(&x, t_s, &mut rng).unwrap().data());
            assert!((0.9..=1.1).contains(&v), "t_s {t_s}: {v}");
        }
    }

    #[test]
    fn interpolant_endpoints_are_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x0 = gaussian_like(&[1, 4, 4], &mut rng);
        let x1 = gaussian_like(&[1, 4, 4], &mut rng);
        let p = exact(0.0, 0.0);
        assert_eq!(sample_flow_at(0.0, &x0, &x1, &p, &mut rng).unwrap().x_t, x0);
        let end = sample_flow_at(1.0, &x0, &x1, &p, &mut rng).unwrap();
        assert_eq!(end.x_t, x1);
        assert_eq!(end.target_u, x1.sub(&x0).unwrap());
        assert_eq!(end.cond, x0);
    }

    #[test]
    fn scalar_interpolant() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let s = sample_flow_at(0.25, &Tensor::scalar(0.0), &Tensor::scalar(2.0), &exact(0.0, 0.0), &mut rng).unwrap();
        assert_eq!(s.x_t.item(), 0.5);
        assert_eq!(s.target_u.item(), 2.0);
    }

    #[test]
    fn noise_start_ignores_the_image() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let img = Tensor::full(&[1, 8, 8], 0.9f32);
        let p = PathConfig {
            start: StartDistribution::Noise,
            ..exact(0.0, 0.4)
        };
        let s = sample_flow_at(0.0, &img, &Tensor::zeros(&[1, 8, 8]), &p, &mut rng).unwrap();
        let a = cosine_alpha_bar(0.4).unwrap().sqrt() as f32;
        // an image-start state would be centred on 0.9 * sqrt(alpha_bar)
        assert!((s.x0_used.mean() as f32 - 0.9 * a).abs() > 0.3);
        assert_eq!(s.cond, img);
    }

    #[test]
    fn sample_flow_rejects_mismatch() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let r = sample_flow(&Tensor::zeros(&[1, 4, 4]), &Tensor::zeros(&[1, 4, 5]), &exact(0.0, 0.0), &mut rng);
        assert!(matches!(r, Err(FlowError::ShapeMismatch(_))));
    }

    #[test]
    fn loss_examples() {
        let a = Tensor::new(vec![2], vec![0.3f32, -1.0]).unwrap();
        assert_eq!(cfm_loss(&a, &a).unwrap(), 0.0);
        assert_eq!(cfm_loss(&Tensor::scalar(1.0), &Tensor::scalar(2.0)).unwrap(), 1.0);
        // per-item losses 1 and 3
        let v = Tensor::new(vec![2, 1], vec![0.0f32, 0.0]).unwrap();
        let u = Tensor::new(vec![2, 1], vec![1.0f32, 3f32.sqrt()]).unwrap();
        assert!((cfm_loss(&v, &u).unwrap() - 2.0).abs() < 1e-6);
        assert!(matches!(cfm_loss(&a, &Tensor::scalar(0.0)), Err(FlowError::ShapeMismatch(_))));
    }
}
