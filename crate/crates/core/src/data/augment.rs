use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{EdgeMethod, SampleRecord};
use crate::error::Result;

/// Geometric augmentation: optional horizontal flip followed by a rotation
/// about the image center.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Transform {
    pub angle_deg: f64,
    pub flip_horizontal: bool,
}

impl Transform {
    pub const IDENTITY: Transform = Transform {
        angle_deg: 0.0,
        flip_horizontal: false,
    };

    /// Angle uniform in `[-45, 45]` degrees, flip with probability 1/2.
    pub fn sample(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            angle_deg: rng.random_range(-45.0..=45.0),
            flip_horizontal: rng.random(),
        }
    }

    pub fn is_identity(&self) -> bool {
        self.angle_deg == 0.0 && !self.flip_horizontal
    }

    /// Source coordinate (y, x) for an output pixel.
    fn source(&self, y: usize, x: usize, h: usize, w: usize) -> (f64, f64) {
        let cy = (h as f64 - 1.0) / 2.0;
        let cx = (w as f64 - 1.0) / 2.0;
        let (s, c) = self.angle_deg.to_radians().sin_cos();
        let dy = y as f64 - cy;
        let dx = x as f64 - cx;
        // inverse rotation
        let sy = c * dy - s * dx + cy;
        let sx = s * dy + c * dx + cx;
        let sx = if self.flip_horizontal {
            w as f64 - 1.0 - sx
        } else {
            sx
        };
        (sy, sx)
    }
}

/// Applies `t` to a real-valued map with bilinear sampling; samples that
/// fall outside the source read as zero.
pub fn warp_map(map: &Array2<f32>, t: &Transform) -> Array2<f32> {
    if t.is_identity() {
        return map.clone();
    }
    let (h, w) = map.dim();
    let get = |y: i64, x: i64| -> f64 {
        if y < 0 || x < 0 || y >= h as i64 || x >= w as i64 {
            0.0
        } else {
            map[(y as usize, x as usize)] as f64
        }
    };
    Array2::from_shape_fn((h, w), |(y, x)| {
        let (sy, sx) = t.source(y, x, h, w);
        let y0 = sy.floor();
        let x0 = sx.floor();
        let fy = sy - y0;
        let fx = sx - x0;
        let (y0, x0) = (y0 as i64, x0 as i64);
        let v = (1.0 - fy) * ((1.0 - fx) * get(y0, x0) + fx * get(y0, x0 + 1))
            + fy * ((1.0 - fx) * get(y0 + 1, x0) + fx * get(y0 + 1, x0 + 1));
        v as f32
    })
}

fn warp_mask(mask: &Array2<u8>, t: &Transform) -> Array2<u8> {
    warp_map(&mask.mapv(|v| v as f32), t).mapv(|v| (v >= 0.5) as u8)
}

/// Random flip/rotation with the transform drawn from `seed`.
pub fn augment(sample: &SampleRecord, seed: u64) -> Result<SampleRecord> {
    augment_with(sample, &Transform::sample(seed), EdgeMethod::default())
}

/// Warps the image and both masks with `t`, then re-derives the boundary
/// and shape targets from the warped region mask.
pub fn augment_with(
    sample: &SampleRecord,
    t: &Transform,
    edges: EdgeMethod,
) -> Result<SampleRecord> {
    if t.is_identity() {
        return Ok(sample.clone());
    }
    let image = warp_map(&sample.image, t).mapv(|v| v.clamp(0.0, 1.0));
    let region = warp_mask(&sample.region_mask, t);
    let mut vessels = warp_mask(&sample.vessel_mask, t);
    vessels.zip_mut_with(&region, |v, r| *v &= *r);
    SampleRecord::from_masks(sample.id.clone(), image, region, vessels, edges)
}
