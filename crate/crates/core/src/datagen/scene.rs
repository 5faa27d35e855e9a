//! Procedural scene generator.
//!
//! A camera one metre above a floor plane looks at the horizon; the floor's
//! depth grows towards the horizon and is capped by a back wall. Boxes and
//! ellipses stand on the floor, so their depth is tied to the row where they
//! touch it. Shading attenuates albedo with depth and blends in a bright haze,
//! giving two monocular cues (contact row and brightness).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{DataError, DepthGrid, Scene, Source};
use crate::tensor::Tensor;

/// Probability that the region above the horizon is sky (invalid depth).
pub const SKY_PROBABILITY: f64 = 0.3;
const NOISE_SIGMA: f64 = 0.02;
const ATTENUATION: f64 = 0.15;
const HAZE: f64 = 1.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Difficulty {
    /// One or two objects, never sky.
    Easy,
    /// Two to six objects, sky with probability [`SKY_PROBABILITY`].
    Standard,
}

impl Difficulty {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "easy" => Some(Difficulty::Easy),
            "standard" => Some(Difficulty::Standard),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug)]
enum Shape {
    Box,
    Ellipse,
}

#[derive(Clone, Copy, Debug)]
struct Object {
    shape: Shape,
    depth: f64,
    albedo: f64,
    cx: f64,
    half_w: f64,
    bottom: f64,
    top: f64,
}

impl Object {
    fn covers(&self, x: f64, y: f64) -> bool {
        if y > self.bottom || y < self.top {
            return false;
        }
        let dx = (x - self.cx) / self.half_w;
        match self.shape {
            Shape::Box => dx.abs() <= 1.0,
            Shape::Ellipse => {
                let cy = 0.5 * (self.top + self.bottom);
                let ry = 0.5 * (self.bottom - self.top);
                let dy = (y - cy) / ry;
                dx * dx + dy * dy <= 1.0
            }
        }
    }
}

/// Closest object covering `(x, y)` that is nearer than `background`.
fn nearest_cover(objects: &[Object], x: f64, y: f64, background: Option<f64>) -> Option<&Object> {
    objects
        .iter()
        .filter(|o| o.covers(x, y) && background.is_none_or(|b| o.depth < b))
        .min_by(|a, b| a.depth.total_cmp(&b.depth))
}

/// `albedo * 1/(1 + 0.15 d)` plus in-scattered haze, mapped to `[-1, 1]`.
fn shade(albedo: f64, depth: f64) -> f64 {
    let transmission = 1.0 / (1.0 + ATTENUATION * depth);
    2.0 * (albedo * transmission + HAZE * (1.0 - transmission)) - 1.0
}

/// Generate one grayscale scene. Pure function of its arguments.
pub fn generate_scene(seed: u64, height: usize, width: usize, difficulty: Difficulty) -> Result<Scene, DataError> {
    if height < 16 || width < 16 || !height.is_multiple_of(4) || !width.is_multiple_of(4) {
        return Err(DataError::BadSize(height, width));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w) = (height as f64, width as f64);

    let horizon = rng.random_range(0.2..0.45) * h;
    let d_near: f64 = rng.random_range(0.9..1.6);
    let d_far: f64 = rng.random_range(18.0..24.0);
    let sky = difficulty == Difficulty::Standard && rng.random_bool(SKY_PROBABILITY);
    let floor_albedo = rng.random_range(0.15..0.45);
    let wall_albedo = rng.random_range(0.2..0.6);
    // pixels per metre at unit depth, from a 1 m camera height
    let focal = d_near * (h - horizon);

    let n_objects = match difficulty {
        Difficulty::Easy => rng.random_range(1..=2),
        Difficulty::Standard => rng.random_range(2..=6),
    };
    let objects: Vec<Object> = (0..n_objects)
        .map(|_| {
            let (zmin, zmax) = (1.3 * d_near, 0.7 * d_far);
            let depth = (rng.random_range(zmin.ln()..zmax.ln())).exp();
            let bottom = horizon + focal / depth;
            let size_h = rng.random_range(0.4..2.0) * focal / depth;
            let half_w = 0.5 * rng.random_range(0.3..1.5) * focal / depth;
            Object {
                shape: if rng.random_bool(0.5) { Shape::Box } else { Shape::Ellipse },
                depth,
                albedo: rng.random_range(0.0..0.5),
                cx: rng.random_range(0.0..w),
                half_w: half_w.max(0.75),
                bottom,
                top: bottom - size_h.max(1.0),
            }
        })
        .collect();

    let noise = Normal::new(0.0, NOISE_SIGMA).expect("valid sigma");
    let mut depth = vec![0.0f32; height * width];
    let mut image = vec![0.0f32; height * width];
    for row in 0..height {
        let y = row as f64 + 0.5;
        for col in 0..width {
            let x = col as f64 + 0.5;
            // background: floor below the horizon, wall or sky above it
            let (mut d, mut albedo): (Option<f64>, f64) = if y > horizon {
                let floor = focal / (y - horizon);
                if floor < d_far {
                    let wx = (x - 0.5 * w) * floor / focal;
                    let checker = ((wx / 0.6).floor() + (floor / 0.6).floor()) as i64 % 2 == 0;
                    (Some(floor), floor_albedo + if checker { 0.08 } else { 0.0 })
                } else {
                    (Some(d_far), wall_albedo)
                }
            } else if sky {
                (None, 0.0)
            } else {
                (Some(d_far), wall_albedo)
            };
            if let Some(o) = nearest_cover(&objects, x, y, d) {
                d = Some(o.depth);
                albedo = o.albedo;
            }
            let i = row * width + col;
            let clean = match d {
                Some(v) => {
                    depth[i] = v as f32;
                    shade(albedo, v)
                }
                None => 2.0 * HAZE - 1.0,
            };
            image[i] = (clean + noise.sample(&mut rng)).clamp(-1.0, 1.0) as f32;
        }
    }
    Ok(Scene {
        image: Tensor::new(vec![1, height, width], image).expect("image shape"),
        depth: DepthGrid::new(height, width, depth)?,
        source: Source::GroundTruth,
    })
}

/// Disjoint seed ranges for the dataset splits.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Eval,
    Unlabeled,
    Diagnostic,
}

impl Split {
    fn id(self) -> u64 {
        match self {
            Split::Train => 0,
            Split::Eval => 1,
            Split::Unlabeled => 2,
            Split::Diagnostic => 3,
        }
    }
}

/// Per-scene seed: `seed * 2^24 + split * 2^22 + index`, so splits of up to
/// 2^22 scenes never share a seed.
pub fn scene_seed(seed: u64, split: Split, index: usize) -> u64 {
    assert!(index < 1 << 22, "split index out of range");
    seed.wrapping_mul(1 << 24) + (split.id() << 22) + index as u64
}

/// `n` scenes of one split.
pub fn generate_split(
    seed: u64,
    split: Split,
    n: usize,
    height: usize,
    width: usize,
    difficulty: Difficulty,
) -> Result<Vec<Scene>, DataError> {
    (0..n)
        .map(|i| generate_scene(scene_seed(seed, split, i), height, width, difficulty))
        .collect()
}
