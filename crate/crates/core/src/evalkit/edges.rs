use super::EvalError;
use crate::datagen::{fill_invalid, DepthGrid};

pub const DEFAULT_EDGE_THRESHOLD: f64 = 0.1;

#[derive(Clone, Debug, PartialEq)]
pub struct EdgeMap {
    pub height: usize,
    pub width: usize,
    pub edges: Vec<bool>,
    pub threshold: f64,
}

impl EdgeMap {
    pub fn count(&self) -> usize {
        self.edges.iter().filter(|&&e| e).count()
    }
}

/// Sobel magnitude on min-max normalised depth (border pixels replicated);
/// a pixel is an edge when the magnitude exceeds `threshold`. Invalid pixels
/// are nearest-filled first.
pub fn sobel_edges(depth: &DepthGrid, threshold: f64) -> Result<EdgeMap, EvalError> {
    let filled = fill_invalid(depth)?;
    let (h, w) = (filled.height(), filled.width());
    let v = filled.values();
    let (lo, hi) = v.iter().fold((f64::MAX, f64::MIN), |(lo, hi), &x| (lo.min(f64::from(x)), hi.max(f64::from(x))));
    let range = hi - lo;
    let norm: Vec<f64> = if range > 0.0 {
        v.iter().map(|&x| (f64::from(x) - lo) / range).collect()
    } else {
        vec![0.0; v.len()]
    };
    let at = |y: isize, x: isize| {
        let yy = y.clamp(0, h as isize - 1) as usize;
        let xx = x.clamp(0, w as isize - 1) as usize;
        norm[yy * w + xx]
    };
    let mut edges = vec![false; h * w];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let gx = (at(y - 1, x + 1) + 2.0 * at(y, x + 1) + at(y + 1, x + 1))
                - (at(y - 1, x - 1) + 2.0 * at(y, x - 1) + at(y + 1, x - 1));
            let gy = (at(y + 1, x - 1) + 2.0 * at(y + 1, x) + at(y + 1, x + 1))
                - (at(y - 1, x - 1) + 2.0 * at(y - 1, x) + at(y - 1, x + 1));
            edges[y as usize * w + x as usize] = (gx * gx + gy * gy).sqrt() > threshold;
        }
    }
    Ok(EdgeMap {
        height: h,
        width: w,
        edges,
        threshold,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EdgeScores {
    pub precision: f64,
    pub recall: f64,
    /// No predicted edges; precision reported as 0.
    pub pred_empty: bool,
    /// No ground-truth edges; recall reported as 0.
    pub gt_empty: bool,
}

fn dilate(map: &EdgeMap, tau: usize) -> Vec<bool> {
    let (h, w) = (map.height, map.width);
    let mut out = vec![false; h * w];
    for y in 0..h {
        for x in 0..w {
            if !map.edges[y * w + x] {
                continue;
            }
            for yy in y.saturating_sub(tau)..(y + tau + 1).min(h) {
                for xx in x.saturating_sub(tau)..(x + tau + 1).min(w) {
                    out[yy * w + xx] = true;
                }
            }
        }
    }
    out
}

fn hit_rate(of: &EdgeMap, within: &[bool]) -> (f64, bool) {
    let n = of.count();
    if n == 0 {
        return (0.0, true);
    }
    let hits = of.edges.iter().zip(within).filter(|(&e, &d)| e && d).count();
    (hits as f64 / n as f64, false)
}

/// Precision: predicted edges within Chebyshev distance `tau` of a true edge.
/// Recall: true edges within `tau` of a predicted edge.
pub fn edge_precision_recall(pred: &EdgeMap, gt: &EdgeMap, tau: usize) -> Result<EdgeScores, EvalError> {
    if (pred.height, pred.width) != (gt.height, gt.width) {
        return Err(EvalError::ShapeMismatch(format!(
            "edge maps {}x{} vs {}x{}",
            pred.height, pred.width, gt.height, gt.width
        )));
    }
    let (precision, pred_empty) = hit_rate(pred, &dilate(gt, tau));
    let (recall, gt_empty) = hit_rate(gt, &dilate(pred, tau));
    Ok(EdgeScores {
        precision,
        recall,
        pred_empty,
        gt_empty,
    })
}
