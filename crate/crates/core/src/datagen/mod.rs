//! Synthetic scenes with analytic depth, depth normalisation and file I/O.

mod io;
mod scene;

pub use io::{
    read_manifest, read_pfm, read_pgm_mask, read_ppm, write_manifest, write_pfm, write_pgm_mask,
    write_ppm, ManifestRecord,
};
pub use scene::{generate_scene, generate_split, scene_seed, Difficulty, Split, SKY_PROBABILITY};

use crate::tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("bad scene size {0}x{1}: need multiples of 4, at least 16")]
    BadSize(usize, usize),
    #[error("quantiles d2={0} d98={1} are degenerate")]
    DegenerateQuantiles(f64, f64),
    #[error("depth grid has no valid pixel")]
    AllInvalid,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("malformed header: {0}")]
    MalformedHeader(String),
    #[error("malformed manifest line {line}: {reason}")]
    MalformedManifest { line: usize, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Value stored at invalid (sky / no geometry) pixels.
pub const INVALID_DEPTH: f32 = 0.0;

/// Metric depth with a validity mask.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthGrid {
    height: usize,
    width: usize,
    values: Vec<f32>,
    valid: Vec<bool>,
}

impl DepthGrid {
    /// Pixels that are non-finite or non-positive are marked invalid.
    pub fn new(height: usize, width: usize, values: Vec<f32>) -> Result<Self, DataError> {
        if values.len() != height * width {
            return Err(DataError::ShapeMismatch(format!(
                "{} values for {height}x{width}",
                values.len()
            )));
        }
        let valid = values.iter().map(|v| v.is_finite() && *v > 0.0).collect();
        Ok(Self::with_mask(height, width, values, valid))
    }

    fn with_mask(height: usize, width: usize, mut values: Vec<f32>, valid: Vec<bool>) -> Self {
        for (v, &ok) in values.iter_mut().zip(&valid) {
            if !ok {
                *v = INVALID_DEPTH;
            }
        }
        Self {
            height,
            width,
            values,
            valid,
        }
    }

    pub fn from_mask(height: usize, width: usize, values: Vec<f32>, valid: Vec<bool>) -> Result<Self, DataError> {
        if values.len() != height * width || valid.len() != values.len() {
            return Err(DataError::ShapeMismatch("values/mask length".into()));
        }
        if values.iter().zip(&valid).any(|(v, &ok)| ok && !(v.is_finite() && *v > 0.0)) {
            return Err(DataError::ShapeMismatch("valid pixel with non-positive depth".into()));
        }
        Ok(Self::with_mask(height, width, values, valid))
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn valid(&self) -> &[bool] {
        &self.valid
    }

    pub fn get(&self, y: usize, x: usize) -> Option<f32> {
        let i = y * self.width + x;
        self.valid[i].then_some(self.values[i])
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    pub fn is_fully_valid(&self) -> bool {
        self.valid.iter().all(|&v| v)
    }

    pub fn valid_values(&self) -> impl Iterator<Item = f32> + '_ {
        self.values.iter().zip(&self.valid).filter(|(_, &ok)| ok).map(|(&v, _)| v)
    }

    /// Restrict the mask further (pixels outside `keep` become invalid).
    pub fn masked(&self, keep: &[bool]) -> Self {
        let valid = self.valid.iter().zip(keep).map(|(&a, &b)| a && b).collect();
        Self::with_mask(self.height, self.width, self.values.clone(), valid)
    }

    /// `[1, H, W]` tensor of the raw values (invalid pixels hold the sentinel).
    pub fn to_tensor(&self) -> Tensor<f32> {
        Tensor::new(vec![1, self.height, self.width], self.values.clone()).expect("grid shape")
    }
}

/// Provenance of a training pair.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Source {
    GroundTruth,
    PseudoLabel,
}

impl Source {
    pub fn tag(self) -> &'static str {
        match self {
            Source::GroundTruth => "ground_truth",
            Source::PseudoLabel => "pseudo_label",
        }
    }

    pub fn parse(tag: &str) -> Option<Self> {
        match tag {
            "ground_truth" => Some(Source::GroundTruth),
            "pseudo_label" => Some(Source::PseudoLabel),
            _ => None,
        }
    }
}

/// An image and its metric depth.
#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    /// `[C, H, W]`, values in `[-1, 1]`.
    pub image: Tensor<f32>,
    pub depth: DepthGrid,
    pub source: Source,
}

/// A training pair in network space.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// `[C, H, W]` image in `[-1, 1]`.
    pub image: Tensor<f32>,
    /// `[1, H, W]` normalised depth in `[-1, 1]`, invalid pixels NN-filled.
    pub depth: Tensor<f32>,
    pub valid: Vec<bool>,
    pub source: Source,
}

impl Sample {
    pub fn from_scene(scene: &Scene, q: &DatasetQuantiles) -> Result<Self, DataError> {
        Ok(Self {
            image: scene.image.clone(),
            depth: normalize_depth(&scene.depth, q)?,
            valid: scene.depth.valid().to_vec(),
            source: scene.source,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormKind {
    Log,
    Linear,
}

impl NormKind {
    fn forward(self, d: f64) -> f64 {
        match self {
            NormKind::Log => d.ln(),
            NormKind::Linear => d,
        }
    }

    fn inverse(self, v: f64) -> f64 {
        match self {
            NormKind::Log => v.exp(),
            NormKind::Linear => v,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            NormKind::Log => "log",
            NormKind::Linear => "linear",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "log" => Some(NormKind::Log),
            "linear" => Some(NormKind::Linear),
            _ => None,
        }
    }
}

/// Per-dataset depth quantiles used to map depth into `[-1, 1]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DatasetQuantiles {
    pub d2: f64,
    pub d98: f64,
    pub kind: NormKind,
}

impl DatasetQuantiles {
    pub fn new(d2: f64, d98: f64, kind: NormKind) -> Result<Self, DataError> {
        let q = Self { d2, d98, kind };
        q.validate()?;
        Ok(q)
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let ok = self.d2.is_finite() && self.d98.is_finite() && self.d2 > 0.0 && self.d2 < self.d98;
        if ok {
            Ok(())
        } else {
            Err(DataError::DegenerateQuantiles(self.d2, self.d98))
        }
    }

    /// 2% / 98% quantiles over the valid pixels of `grids`.
    pub fn from_grids<'a>(grids: impl IntoIterator<Item = &'a DepthGrid>, kind: NormKind) -> Result<Self, DataError> {
        let mut all: Vec<f64> = grids
            .into_iter()
            .flat_map(|g| g.valid_values().map(f64::from))
            .collect();
        if all.is_empty() {
            return Err(DataError::AllInvalid);
        }
        all.sort_by(f64::total_cmp);
        Self::new(quantile_sorted(&all, 0.02), quantile_sorted(&all, 0.98), kind)
    }

    /// Scalar normalisation, clamped to `[-1, 1]`.
    pub fn normalize(&self, d: f64) -> f64 {
        let lo = self.kind.forward(self.d2);
        let hi = self.kind.forward(self.d98);
        (((self.kind.forward(d) - lo) / (hi - lo) - 0.5) * 2.0).clamp(-1.0, 1.0)
    }

    /// Scalar inverse of [`normalize`](Self::normalize); the input is clamped first.
    pub fn denormalize(&self, v: f64) -> f64 {
        let lo = self.kind.forward(self.d2);
        let hi = self.kind.forward(self.d98);
        let v = v.clamp(-1.0, 1.0);
        self.kind.inverse(lo + (v / 2.0 + 0.5) * (hi - lo)).clamp(self.d2, self.d98)
    }
}

/// Linear-interpolation quantile of an ascending slice.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let pos = p * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] * (1.0 - frac) + sorted[hi] * frac
}

/// Normalise metric depth to `[1, H, W]` in `[-1, 1]`. Invalid pixels take
/// their nearest valid neighbour's value first.
pub fn normalize_depth(d: &DepthGrid, q: &DatasetQuantiles) -> Result<Tensor<f32>, DataError> {
    q.validate()?;
    let filled = fill_invalid(d)?;
    let data = filled
        .values()
        .iter()
        .map(|&v| q.normalize(f64::from(v)) as f32)
        .collect();
    Ok(Tensor::new(vec![1, d.height(), d.width()], data).expect("grid shape"))
}

/// Map a `[1, H, W]` (or `[H, W]`-sized) normalised tensor back to metric depth.
pub fn denormalize_depth(nd: &Tensor<f32>, q: &DatasetQuantiles) -> Result<DepthGrid, DataError> {
    q.validate()?;
    let (h, w) = match nd.shape() {
        &[1, h, w] | &[1, 1, h, w] => (h, w),
        s => return Err(DataError::ShapeMismatch(format!("normalised depth {s:?}"))),
    };
    let values = nd.data().iter().map(|&v| q.denormalize(f64::from(v)) as f32).collect();
    DepthGrid::new(h, w, values)
}

/// Replace every invalid pixel by its nearest valid pixel (Euclidean; ties
/// go to the first candidate in row-major order).
pub fn fill_invalid(d: &DepthGrid) -> Result<DepthGrid, DataError> {
    let w = d.width();
    let seeds: Vec<(usize, usize, f32)> = (0..d.height())
        .flat_map(|y| (0..w).map(move |x| (y, x)))
        .filter_map(|(y, x)| d.get(y, x).map(|v| (y, x, v)))
        .collect();
    if seeds.is_empty() {
        return Err(DataError::AllInvalid);
    }
    if seeds.len() == d.values().len() {
        return Ok(d.clone());
    }
    let mut values = d.values().to_vec();
    for (i, v) in values.iter_mut().enumerate() {
        if d.valid()[i] {
            continue;
        }
        let (y, x) = ((i / w) as isize, (i % w) as isize);
        let mut best = (isize::MAX, 0.0f32);
        for &(sy, sx, sv) in &seeds {
            let dy = sy as isize - y;
            let dx = sx as isize - x;
            let dist = dy * dy + dx * dx;
            if dist < best.0 {
                best = (dist, sv);
            }
        }
        *v = best.1;
    }
    DepthGrid::new(d.height(), w, values)
}
