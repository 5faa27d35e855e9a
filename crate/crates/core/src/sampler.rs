//! Few-step Euler integration of the learned field from the augmented image
//! to depth, and ensembles with per-pixel spread.

use rand::Rng;

use crate::datagen::{denormalize_depth, DataError, DatasetQuantiles, DepthGrid};
use crate::flowmatch::{start_state, FlowError, StartDistribution};
use crate::network::{NetworkError, Params, UNet};
use crate::tensor::{Tensor, TensorError};

/// Largest number of states pushed through the network at once.
const MAX_BATCH: usize = 40;

#[derive(Debug, thiserror::Error)]
pub enum SampleError {
    #[error("non-finite state after step {0}")]
    NonFiniteState(usize),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid sampler config: {0}")]
    Config(String),
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Clone, Debug, PartialEq)]
pub struct SamplerConfig {
    pub nfe: usize,
    pub ensemble_size: usize,
    pub use_ema: bool,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            nfe: 4,
            ensemble_size: 10,
            use_ema: true,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<(), SampleError> {
        if self.nfe == 0 {
            return Err(SampleError::Config("nfe must be at least 1".into()));
        }
        if self.ensemble_size == 0 {
            return Err(SampleError::Config("ensemble size must be at least 1".into()));
        }
        Ok(())
    }
}

/// A time-dependent vector field over batched states.
pub trait VectorField {
    fn eval(
        &self,
        times: &[f64],
        x: &Tensor<f32>,
        cond: &Tensor<f32>,
        extra: Option<&Tensor<f32>>,
    ) -> Result<Tensor<f32>, SampleError>;
}

/// Everything inference needs from a trained checkpoint.
#[derive(Clone, Copy, Debug)]
pub struct DepthModel<'a> {
    pub net: &'a UNet,
    pub params: &'a Params<f32>,
    pub quantiles: DatasetQuantiles,
    pub t_s: f64,
    pub start: StartDistribution,
}

impl VectorField for DepthModel<'_> {
    fn eval(
        &self,
        times: &[f64],
        x: &Tensor<f32>,
        cond: &Tensor<f32>,
        extra: Option<&Tensor<f32>>,
    ) -> Result<Tensor<f32>, SampleError> {
        Ok(self.net.predict(self.params, times, x, cond, extra)?)
    }
}

/// Left-endpoint Euler: `x += v(i / nfe, x) / nfe` for `i = 0..nfe`.
pub fn euler_integrate(
    field: &impl VectorField,
    x_start: &Tensor<f32>,
    cond: &Tensor<f32>,
    nfe: usize,
    extra: Option<&Tensor<f32>>,
) -> Result<Tensor<f32>, SampleError> {
    if nfe == 0 {
        return Err(SampleError::Config("nfe must be at least 1".into()));
    }
    let n = x_start.dim(0);
    let dt = 1.0 / nfe as f32;
    let mut x = x_start.clone();
    for i in 0..nfe {
        let t = i as f64 / nfe as f64;
        let v = field.eval(&vec![t; n], &x, cond, extra)?;
        if v.shape() != x.shape() {
            return Err(SampleError::ShapeMismatch(format!("field {:?} vs state {:?}", v.shape(), x.shape())));
        }
        for (xi, vi) in x.data_mut().iter_mut().zip(v.data()) {
            *xi += dt * vi;
        }
        if !x.is_finite() {
            return Err(SampleError::NonFiniteState(i + 1));
        }
    }
    Ok(x)
}

/// Integrate `copies` independent members for each image and return the
/// clamped normalised predictions, `[copies, 1, H, W]` per image.
pub fn sample_normalized(
    model: &DepthModel,
    images: &[Tensor<f32>],
    extras: Option<&[Tensor<f32>]>,
    copies: usize,
    nfe: usize,
    rng: &mut impl Rng,
) -> Result<Vec<Tensor<f32>>, SampleError> {
    let cfg = model.net.config();
    let Some(first) = images.first() else {
        return Ok(Vec::new());
    };
    let (h, w) = (first.dim(1), first.dim(2));
    for img in images {
        if img.shape() != [cfg.cond_channels, h, w] {
            return Err(SampleError::ShapeMismatch(format!(
                "image {:?}, expected [{}, {h}, {w}]",
                img.shape(),
                cfg.cond_channels
            )));
        }
    }
    if let Some(e) = extras {
        if e.len() != images.len() {
            return Err(SampleError::ShapeMismatch("one extra conditioning per image".into()));
        }
    }
    let state_shape = [cfg.state_channels, h, w];
    // every (image, member) pair in order, then chunked through the network
    let jobs: Vec<usize> = (0..images.len()).flat_map(|i| std::iter::repeat_n(i, copies)).collect();
    let mut flat: Vec<Tensor<f32>> = Vec::with_capacity(jobs.len());
    for chunk in jobs.chunks(MAX_BATCH) {
        let starts = chunk
            .iter()
            .map(|&i| start_state(&images[i], &state_shape, model.t_s, model.start, rng))
            .collect::<Result<Vec<_>, _>>()?;
        let x0 = Tensor::stack(&starts)?;
        let cond = Tensor::stack(&chunk.iter().map(|&i| images[i].clone()).collect::<Vec<_>>())?;
        let extra = extras
            .map(|e| Tensor::stack(&chunk.iter().map(|&i| e[i].clone()).collect::<Vec<_>>()))
            .transpose()?;
        let out = euler_integrate(model, &x0, &cond, nfe, extra.as_ref())?;
        for j in 0..chunk.len() {
            flat.push(out.batch_item(j).map(|v| v.clamp(-1.0, 1.0)));
        }
    }
    flat.chunks(copies)
        .map(|members| {
            let members: Vec<Tensor<f32>> = members.iter().map(|m| m.clone().reshape(state_shape.to_vec())).collect::<Result<_, _>>()?;
            Ok(Tensor::stack(&members)?)
        })
        .collect()
}

/// One member: augment, integrate, clamp, denormalise.
pub fn predict_depth(
    model: &DepthModel,
    image: &Tensor<f32>,
    extra: Option<&Tensor<f32>>,
    nfe: usize,
    rng: &mut impl Rng,
) -> Result<DepthGrid, SampleError> {
    let extras = extra.map(|e| vec![e.clone()]);
    let out = sample_normalized(model, std::slice::from_ref(image), extras.as_deref(), 1, nfe, rng)?;
    Ok(denormalize_depth(&out[0].batch_item(0), &model.quantiles)?)
}

/// Ensemble statistics for one image. Members, mean and spread are in
/// normalised depth units; `mean_depth` is the denormalised mean.
#[derive(Clone, Debug, PartialEq)]
pub struct EnsembleResult {
    pub mean_depth: DepthGrid,
    pub mean_normalized: Tensor<f32>,
    pub std_depth: Tensor<f32>,
    pub members: Tensor<f32>,
}

/// Per-pixel mean and population standard deviation over axis 0 of
/// `[N, 1, H, W]`.
pub fn member_stats(members: &Tensor<f32>) -> (Tensor<f32>, Tensor<f32>) {
    let n = members.dim(0);
    let per = members.numel() / n;
    let mut mean = vec![0.0f64; per];
    let mut sq = vec![0.0f64; per];
    for m in members.data().chunks(per) {
        for (acc, &v) in mean.iter_mut().zip(m) {
            *acc += f64::from(v);
        }
    }
    mean.iter_mut().for_each(|v| *v /= n as f64);
    for m in members.data().chunks(per) {
        for ((acc, &v), &mu) in sq.iter_mut().zip(m).zip(&mean) {
            *acc += (f64::from(v) - mu).powi(2);
        }
    }
    let shape = members.shape()[1..].to_vec();
    let std = sq.iter().map(|&s| (s / n as f64).sqrt() as f32).collect();
    (
        Tensor::new(shape.clone(), mean.iter().map(|&v| v as f32).collect()).expect("mean shape"),
        Tensor::new(shape, std).expect("std shape"),
    )
}

/// Ensembles for several images at once.
pub fn ensemble_predict_batch(
    model: &DepthModel,
    images: &[Tensor<f32>],
    extras: Option<&[Tensor<f32>]>,
    config: &SamplerConfig,
    rng: &mut impl Rng,
) -> Result<Vec<EnsembleResult>, SampleError> {
    config.validate()?;
    sample_normalized(model, images, extras, config.ensemble_size, config.nfe, rng)?
        .into_iter()
        .map(|members| {
            let (mean, std) = member_stats(&members);
            Ok(EnsembleResult {
                mean_depth: denormalize_depth(&mean, &model.quantiles)?,
                mean_normalized: mean,
                std_depth: std,
                members,
            })
        })
        .collect()
}

pub fn ensemble_predict(
    model: &DepthModel,
    image: &Tensor<f32>,
    extra: Option<&Tensor<f32>>,
    config: &SamplerConfig,
    rng: &mut impl Rng,
) -> Result<EnsembleResult, SampleError> {
    let extras = extra.map(|e| vec![e.clone()]);
    let mut out = ensemble_predict_batch(model, std::slice::from_ref(image), extras.as_deref(), config, rng)?;
    Ok(out.remove(0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{normalize_depth, NormKind};
    use crate::network::UNetConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    struct Constant(f32);
    impl VectorField for Constant {
        fn eval(&self, _: &[f64], x: &Tensor<f32>, _: &Tensor<f32>, _: Option<&Tensor<f32>>) -> Result<Tensor<f32>, SampleError> {
            Ok(Tensor::full(x.shape(), self.0))
        }
    }

    struct Identity;
    impl VectorField for Identity {
        fn eval(&self, _: &[f64], x: &Tensor<f32>, _: &Tensor<f32>, _: Option<&Tensor<f32>>) -> Result<Tensor<f32>, SampleError> {
            Ok(x.clone())
        }
    }

    #[test]
    fn constant_field_is_exact_for_any_nfe() {
        let x = Tensor::new(vec![1, 1, 1, 2], vec![0.5f32, -0.25]).unwrap();
        for nfe in [1, 2, 4, 8] {
            let out = euler_integrate(&Constant(0.75), &x, &x, nfe, None).unwrap();
            assert_eq!(out.data(), &[1.25, 0.5]);
        }
    }

    #[test]
    fn linear_field_euler_values() {
        let x = Tensor::full(&[1, 1, 1, 1], 1.0f32);
        let at = |nfe| euler_integrate(&Identity, &x, &x, nfe, None).unwrap().item() as f64;
        assert_eq!(at(1), 2.0);
        assert_eq!(at(2), 2.25);
        let e = std::f64::consts::E;
        let errs: Vec<f64> = [1, 2, 4, 10, 50].iter().map(|&n| (e - at(n)).abs()).collect();
        assert!(errs.windows(2).all(|p| p[1] < p[0]), "{errs:?}");
        assert!(matches!(euler_integrate(&Identity, &x, &x, 0, None), Err(SampleError::Config(_))));
    }

    #[test]
    fn non_finite_state_is_reported() {
        let x = Tensor::full(&[1, 1, 1, 1], 1.0f32);
        assert!(matches!(euler_integrate(&Constant(f32::INFINITY), &x, &x, 3, None), Err(SampleError::NonFiniteState(1))));
    }

    #[test]
    fn stats_of_two_members() {
        let m = Tensor::new(vec![2, 1, 1, 1], vec![1.0f32, 3.0]).unwrap();
        let (mean, std) = member_stats(&m);
        assert_eq!((mean.item(), std.item()), (2.0, 1.0));
    }

    fn zero_model<'a>(net: &'a UNet, params: &'a Params<f32>, t_s: f64) -> DepthModel<'a> {
        DepthModel {
            net,
            params,
            quantiles: DatasetQuantiles::new(1.0, 20.0, NormKind::Log).unwrap(),
            t_s,
            start: StartDistribution::Image,
        }
    }

    fn net() -> (UNet, Params<f32>) {
        let net = UNet::new(UNetConfig {
            base_width: 4,
            time_embed_dim: 8,
            ..UNetConfig::default()
        })
        .unwrap();
        let p = net.init_params(3);
        (net, p)
    }

    fn image(seed: u64) -> Tensor<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::new(vec![1, 8, 8], (0..64).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn zero_network_without_noise_returns_the_image() {
        let (net, p) = net();
        let m = zero_model(&net, &p, 0.0);
        let img = image(0);
        let d = predict_depth(&m, &img, None, 4, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let back = normalize_depth(&d, &m.quantiles).unwrap();
        for (a, b) in back.data().iter().zip(img.data()) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn ensemble_spread() {
        let (net, p) = net();
        let img = image(1);
        let single = SamplerConfig {
            ensemble_size: 1,
            ..SamplerConfig::default()
        };
        let m = zero_model(&net, &p, 0.4);
        let r = ensemble_predict(&m, &img, None, &single, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!(r.std_depth.data().iter().all(|&s| s == 0.0));

        let clean = zero_model(&net, &p, 0.0);
        let r = ensemble_predict(&clean, &img, None, &SamplerConfig::default(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(r.members.shape(), &[10, 1, 8, 8]);
        assert!(r.std_depth.data().iter().all(|&s| s == 0.0));

        let run = |seed| ensemble_predict(&m, &img, None, &SamplerConfig::default(), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let (a, b) = (run(5), run(5));
        assert_eq!(a, b);
        assert!(a.std_depth.data().iter().any(|&s| s > 0.0));
    }

    #[test]
    fn batched_and_single_ensembles_agree() {
        let (net, mut p) = net();
        for v in p.get_mut("out.conv.weight").unwrap().data_mut() {
            *v = 0.05;
        }
        let m = zero_model(&net, &p, 0.0);
        let imgs: Vec<_> = (0..5).map(image).collect();
        let cfg = SamplerConfig {
            ensemble_size: 9,
            nfe: 2,
            use_ema: true,
        };
        let batched = ensemble_predict_batch(&m, &imgs, None, &cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        for (img, b) in imgs.iter().zip(&batched) {
            let one = ensemble_predict(&m, img, None, &cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
            for (x, y) in one.mean_normalized.data().iter().zip(b.mean_normalized.data()) {
                assert!((x - y).abs() < 1e-5);
            }
        }
        assert!(matches!(
            ensemble_predict(&m, &Tensor::zeros(&[1, 8, 6]), None, &cfg, &mut ChaCha8Rng::seed_from_u64(0)),
            Err(SampleError::Network(_))
        ));
    }
}
