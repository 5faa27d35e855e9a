use super::{
    abs_rel, affine_align, delta1, edge_precision_recall, rmse, sobel_edges, uncertainty_error_ratio, EvalError, FitSpace,
    DEFAULT_EDGE_THRESHOLD,
};
use crate::datagen::DepthGrid;
use crate::sampler::EnsembleResult;

pub const METRICS_HEADER: &str = "dataset,n_images,abs_rel,delta1,rmse,edge_p,edge_r,unc_ratio";

#[derive(Clone, Debug, PartialEq)]
pub struct EvalOptions {
    pub fit_space: FitSpace,
    pub edge_threshold: f64,
    pub edge_tolerance: usize,
    pub unc_quantile: f64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            fit_space: FitSpace::Log,
            edge_threshold: DEFAULT_EDGE_THRESHOLD,
            edge_tolerance: 1,
            unc_quantile: 0.8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageMetrics {
    pub abs_rel: f64,
    pub delta1: f64,
    pub rmse: f64,
    pub edge_p: f64,
    pub edge_r: f64,
    /// `None` when there is no ensemble or the spread does not split.
    pub unc_ratio: Option<f64>,
}

/// Align `pred` to `gt` and compute every per-image metric. `ensemble`
/// supplies the spread for the uncertainty ratio.
pub fn evaluate_image(
    pred: &DepthGrid,
    ensemble: Option<&EnsembleResult>,
    gt: &DepthGrid,
    opts: &EvalOptions,
) -> Result<ImageMetrics, EvalError> {
    let (aligned, _) = affine_align(pred, gt, opts.fit_space)?;
    let scores = edge_precision_recall(
        &sobel_edges(&aligned, opts.edge_threshold)?,
        &sobel_edges(gt, opts.edge_threshold)?,
        opts.edge_tolerance,
    )?;
    let unc_ratio = match ensemble {
        Some(e) => match uncertainty_error_ratio(e, gt, opts.unc_quantile) {
            Ok(r) => Some(r),
            Err(EvalError::DegenerateSplit) => None,
            Err(other) => return Err(other),
        },
        None => None,
    };
    Ok(ImageMetrics {
        abs_rel: abs_rel(&aligned, gt)?,
        delta1: delta1(&aligned, gt)?,
        rmse: rmse(&aligned, gt)?,
        edge_p: scores.precision,
        edge_r: scores.recall,
        unc_ratio,
    })
}

/// Dataset-level averages of per-image metrics.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub dataset: String,
    pub n_images: usize,
    pub abs_rel: f64,
    pub delta1: f64,
    pub rmse: f64,
    pub edge_p: f64,
    pub edge_r: f64,
    /// Mean over images with a defined ratio; NaN when none has one.
    pub unc_ratio: f64,
}

impl MetricsReport {
    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
            self.dataset, self.n_images, self.abs_rel, self.delta1, self.rmse, self.edge_p, self.edge_r, self.unc_ratio
        )
    }
}

pub fn summarize(dataset: &str, metrics: &[ImageMetrics]) -> MetricsReport {
    let n = metrics.len().max(1) as f64;
    let mean = |f: fn(&ImageMetrics) -> f64| metrics.iter().map(f).sum::<f64>() / n;
    let ratios: Vec<f64> = metrics.iter().filter_map(|m| m.unc_ratio).collect();
    MetricsReport {
        dataset: dataset.to_string(),
        n_images: metrics.len(),
        abs_rel: mean(|m| m.abs_rel),
        delta1: mean(|m| m.delta1),
        rmse: mean(|m| m.rmse),
        edge_p: mean(|m| m.edge_p),
        edge_r: mean(|m| m.edge_r),
        unc_ratio: if ratios.is_empty() {
            f64::NAN
        } else {
            ratios.iter().sum::<f64>() / ratios.len() as f64
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{generate_scene, Difficulty};

    #[test]
    fn ground_truth_against_itself() {
        let s = generate_scene(3, 32, 32, Difficulty::Standard).unwrap();
        let m = evaluate_image(&s.depth, None, &s.depth, &EvalOptions::default()).unwrap();
        assert!(m.abs_rel < 1e-6 && m.rmse < 1e-5, "{m:?}");
        assert_eq!((m.delta1, m.edge_p, m.edge_r), (1.0, 1.0, 1.0));
        let r = summarize("self", &[m.clone(), m]);
        assert_eq!(r.n_images, 2);
        assert!(r.unc_ratio.is_nan());
        assert_eq!(r.to_csv().split(',').count(), METRICS_HEADER.split(',').count());
        assert!(r.to_csv().starts_with("self,2,"));
    }
}
