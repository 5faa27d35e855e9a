//! Affine-invariant depth metrics, edge fidelity, coupling costs and the
//! uncertainty check.

mod coupling;
mod edges;
mod report;

pub use coupling::{brute_force_assignment, coupling_cost, hungarian, Norm, Pairing, MAX_OPTIMAL};
pub use edges::{edge_precision_recall, sobel_edges, EdgeMap, EdgeScores, DEFAULT_EDGE_THRESHOLD};
pub use report::{evaluate_image, summarize, EvalOptions, ImageMetrics, MetricsReport, METRICS_HEADER};

use crate::datagen::{quantile_sorted, DataError, DepthGrid};
use crate::sampler::EnsembleResult;

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("ground truth is constant in fit space")]
    DegenerateGT,
    #[error("only {0} jointly valid pixels, need at least 2")]
    TooFewValid(usize),
    #[error("no jointly valid pixels")]
    NoValidPixels,
    #[error("prediction is not positive at a valid pixel")]
    NonPositivePrediction,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("set sizes differ: {0} vs {1}")]
    SizeMismatch(usize, usize),
    #[error("{0} elements is too many for the optimal assignment")]
    TooLargeForOptimal(usize),
    #[error("uncertainty split is degenerate")]
    DegenerateSplit,
    #[error(transparent)]
    Data(#[from] DataError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum FitSpace {
    #[default]
    Log,
    Linear,
}

impl FitSpace {
    pub fn name(self) -> &'static str {
        match self {
            FitSpace::Log => "log",
            FitSpace::Linear => "linear",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "log" => Some(FitSpace::Log),
            "linear" => Some(FitSpace::Linear),
            _ => None,
        }
    }

    fn forward(self, d: f64) -> f64 {
        match self {
            FitSpace::Log => d.ln(),
            FitSpace::Linear => d,
        }
    }

    fn inverse(self, v: f64) -> f64 {
        match self {
            FitSpace::Log => v.exp(),
            FitSpace::Linear => v,
        }
    }
}

/// Least-squares map `g ~ a p + b` in fit space. Equivalently
/// `aligned = (p - shift) / scale` with `scale = 1/a`, `shift = -b/a`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AffineFit {
    pub a: f64,
    pub b: f64,
    pub space: FitSpace,
    /// Pixels whose aligned value came out non-positive (linear space only);
    /// they are marked invalid in the aligned grid.
    pub dropped: usize,
}

impl AffineFit {
    pub fn scale(&self) -> f64 {
        1.0 / self.a
    }

    pub fn shift(&self) -> f64 {
        -self.b / self.a
    }

    pub fn apply(&self, p: f64) -> f64 {
        self.space.inverse(self.a * self.space.forward(p) + self.b)
    }
}

fn check_same(pred: &DepthGrid, gt: &DepthGrid) -> Result<(), EvalError> {
    if (pred.height(), pred.width()) != (gt.height(), gt.width()) {
        return Err(EvalError::ShapeMismatch(format!(
            "{}x{} vs {}x{}",
            pred.height(),
            pred.width(),
            gt.height(),
            gt.width()
        )));
    }
    Ok(())
}

/// `(pred, gt)` at pixels valid in both grids.
pub fn joint_values(pred: &DepthGrid, gt: &DepthGrid) -> Result<(Vec<f64>, Vec<f64>), EvalError> {
    check_same(pred, gt)?;
    let mut p = Vec::new();
    let mut g = Vec::new();
    for i in 0..gt.values().len() {
        if pred.valid()[i] && gt.valid()[i] {
            p.push(f64::from(pred.values()[i]));
            g.push(f64::from(gt.values()[i]));
        }
    }
    Ok((p, g))
}

/// Closed-form fit of `g ~ a p + b`. A constant `p` takes the minimum-norm
/// solution `a = 0`; a negative `a` (an inverted prediction) is kept.
pub fn fit_affine(p: &[f64], g: &[f64]) -> Result<(f64, f64), EvalError> {
    let n = p.len();
    if n < 2 {
        return Err(EvalError::TooFewValid(n));
    }
    let nf = n as f64;
    let mp = p.iter().sum::<f64>() / nf;
    let mg = g.iter().sum::<f64>() / nf;
    let (mut spp, mut spg, mut sgg) = (0.0, 0.0, 0.0);
    for (&x, &y) in p.iter().zip(g) {
        spp += (x - mp) * (x - mp);
        spg += (x - mp) * (y - mg);
        sgg += (y - mg) * (y - mg);
    }
    if sgg <= 1e-12 * nf * mg.abs().max(1.0).powi(2) {
        return Err(EvalError::DegenerateGT);
    }
    let a = if spp == 0.0 { 0.0 } else { spg / spp };
    Ok((a, mg - a * mp))
}

/// Align `pred` to `gt` over the jointly valid pixels. The aligned grid keeps
/// `pred`'s validity.
pub fn affine_align(pred: &DepthGrid, gt: &DepthGrid, space: FitSpace) -> Result<(DepthGrid, AffineFit), EvalError> {
    let (p, g) = joint_values(pred, gt)?;
    let p: Vec<f64> = p.into_iter().map(|v| space.forward(v)).collect();
    let g: Vec<f64> = g.into_iter().map(|v| space.forward(v)).collect();
    let (a, b) = fit_affine(&p, &g)?;
    let mut fit = AffineFit { a, b, space, dropped: 0 };
    let mut valid = pred.valid().to_vec();
    let values: Vec<f32> = pred
        .values()
        .iter()
        .zip(valid.iter_mut())
        .map(|(&v, ok)| {
            if !*ok {
                return 0.0;
            }
            let out = fit.apply(f64::from(v)) as f32;
            if !(out.is_finite() && out > 0.0) {
                *ok = false;
                fit.dropped += 1;
            }
            out
        })
        .collect();
    let aligned = DepthGrid::from_mask(pred.height(), pred.width(), values, valid)?;
    Ok((aligned, fit))
}

fn nonempty(n: usize) -> Result<f64, EvalError> {
    if n == 0 {
        Err(EvalError::NoValidPixels)
    } else {
        Ok(n as f64)
    }
}

/// Mean of `|g - p| / g`.
pub fn abs_rel_values(pred: &[f64], gt: &[f64]) -> Result<f64, EvalError> {
    let n = nonempty(pred.len())?;
    Ok(pred.iter().zip(gt).map(|(&p, &g)| (g - p).abs() / g).sum::<f64>() / n)
}

/// Fraction with `max(g/p, p/g) < 1.25`, evaluated in single precision like
/// the stored grids.
pub fn delta1_values(pred: &[f64], gt: &[f64]) -> Result<f64, EvalError> {
    let n = nonempty(pred.len())?;
    let mut hits = 0usize;
    for (&p, &g) in pred.iter().zip(gt) {
        if p <= 0.0 {
            return Err(EvalError::NonPositivePrediction);
        }
        let (p, g) = (p as f32, g as f32);
        if (g / p).max(p / g) < 1.25 {
            hits += 1;
        }
    }
    Ok(hits as f64 / n)
}

pub fn rmse_values(pred: &[f64], gt: &[f64]) -> Result<f64, EvalError> {
    let n = nonempty(pred.len())?;
    Ok((pred.iter().zip(gt).map(|(&p, &g)| (g - p).powi(2)).sum::<f64>() / n).sqrt())
}

pub fn abs_rel(pred_aligned: &DepthGrid, gt: &DepthGrid) -> Result<f64, EvalError> {
    let (p, g) = joint_values(pred_aligned, gt)?;
    abs_rel_values(&p, &g)
}

pub fn delta1(pred_aligned: &DepthGrid, gt: &DepthGrid) -> Result<f64, EvalError> {
    let (p, g) = joint_values(pred_aligned, gt)?;
    delta1_values(&p, &g)
}

pub fn rmse(pred_aligned: &DepthGrid, gt: &DepthGrid) -> Result<f64, EvalError> {
    let (p, g) = joint_values(pred_aligned, gt)?;
    rmse_values(&p, &g)
}

/// Mean error where `std` exceeds its `q`-quantile divided by the mean error
/// elsewhere.
pub fn uncertainty_split_ratio(std: &[f64], err: &[f64], q: f64) -> Result<f64, EvalError> {
    if std.len() != err.len() {
        return Err(EvalError::SizeMismatch(std.len(), err.len()));
    }
    if std.is_empty() {
        return Err(EvalError::DegenerateSplit);
    }
    let mut sorted = std.to_vec();
    sorted.sort_by(f64::total_cmp);
    let thr = quantile_sorted(&sorted, q);
    let (mut hi, mut nhi, mut lo, mut nlo) = (0.0, 0usize, 0.0, 0usize);
    for (&s, &e) in std.iter().zip(err) {
        if s > thr {
            hi += e;
            nhi += 1;
        } else {
            lo += e;
            nlo += 1;
        }
    }
    if nhi < 10 || nlo < 10 || lo == 0.0 {
        return Err(EvalError::DegenerateSplit);
    }
    Ok((hi / nhi as f64) / (lo / nlo as f64))
}

/// Uncertainty-error ratio of an ensemble against ground truth, using the
/// log-aligned ensemble mean.
pub fn uncertainty_error_ratio(result: &EnsembleResult, gt: &DepthGrid, q: f64) -> Result<f64, EvalError> {
    let (aligned, _) = affine_align(&result.mean_depth, gt, FitSpace::Log)?;
    if result.std_depth.numel() != gt.values().len() {
        return Err(EvalError::ShapeMismatch("std map size".into()));
    }
    let mut std = Vec::new();
    let mut err = Vec::new();
    for i in 0..gt.values().len() {
        if aligned.valid()[i] && gt.valid()[i] {
            std.push(f64::from(result.std_depth.data()[i]));
            err.push(f64::from((aligned.values()[i] - gt.values()[i]).abs()));
        }
    }
    uncertainty_split_ratio(&std, &err, q)
}
