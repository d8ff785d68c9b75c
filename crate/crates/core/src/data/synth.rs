use std::collections::VecDeque;
use std::f64::consts::PI;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{EdgeMethod, SampleRecord};
use crate::error::{Error, Result};

/// Parameters of the synthetic lesion generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub image_size: usize,
    pub n_blobs: usize,
    /// Target fraction of lesion pixels covered by vessels.
    pub vessel_density: f64,
    pub noise_level: f64,
    /// Strength and count of bright streaks outside the lesion, in `[0, 1]`.
    pub artifact_level: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            image_size: 64,
            n_blobs: 1,
            vessel_density: 0.3,
            noise_level: 0.05,
            artifact_level: 0.5,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.image_size < 32 {
            return Err(Error::validation(format!(
                "image_size must be at least 32, got {}",
                self.image_size
            )));
        }
        if self.n_blobs == 0 {
            return Err(Error::validation("n_blobs must be positive"));
        }
        if !(0.0..=1.0).contains(&self.vessel_density) {
            return Err(Error::validation(format!(
                "vessel_density must lie in [0,1], got {}",
                self.vessel_density
            )));
        }
        if !(self.noise_level >= 0.0 && self.noise_level.is_finite()) {
            return Err(Error::validation(
                "noise_level must be a finite non-negative number",
            ));
        }
        if !(0.0..=1.0).contains(&self.artifact_level) {
            return Err(Error::validation("artifact_level must lie in [0,1]"));
        }
        Ok(())
    }
}

const BACKGROUND: f64 = 0.08;
const LESION: f64 = 0.32;
const VESSEL: f64 = 0.85;

/// Deterministic OCTA-like sample: irregular lesion, a branching vessel
/// tree inside it, bright streak artifacts outside it, speckle noise.
pub fn generate_synthetic_sample(seed: u64, spec: &SynthSpec) -> Result<SampleRecord> {
    spec.validate()?;
    let n = spec.image_size;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut region = Array2::<u8>::zeros((n, n));
    let mut centers = Vec::with_capacity(spec.n_blobs);
    for _ in 0..spec.n_blobs {
        let (blob, center) = star_blob(n, spec.n_blobs, &mut rng);
        region.zip_mut_with(&blob, |r, b| *r |= *b);
        centers.push(center);
    }

    let vessels = grow_vessels(&region, &centers, spec.vessel_density, &mut rng);

    let mut image = background_texture(n, &mut rng);
    for ((y, x), v) in image.indexed_iter_mut() {
        if vessels[(y, x)] == 1 {
            *v = VESSEL;
        } else if region[(y, x)] == 1 {
            *v = LESION;
        }
    }
    let image = box_blur(&image);
    let mut image = add_streaks(image, &region, spec.artifact_level, &mut rng);
    if spec.noise_level > 0.0 {
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        for v in image.iter_mut() {
            let speckle = 1.0 + spec.noise_level * normal.sample(&mut rng);
            let additive = 0.5 * spec.noise_level * normal.sample(&mut rng);
            *v = *v * speckle + additive;
        }
    }
    let image = image.mapv(|v| v.clamp(0.0, 1.0) as f32);

    SampleRecord::from_masks(
        format!("synth-{seed:06}"),
        image,
        region,
        vessels,
        EdgeMethod::default(),
    )
}

/// `count` samples with seeds `base_seed, base_seed + 1, ...`.
pub fn synthetic_corpus(
    count: usize,
    base_seed: u64,
    spec: &SynthSpec,
) -> Result<Vec<SampleRecord>> {
    (0..count as u64)
        .map(|i| generate_synthetic_sample(base_seed + i, spec))
        .collect()
}

/// Star-shaped blob `r < r0 (1 + sum a_k cos(k theta + phi_k))`, reduced to
/// the 4-connected component containing its center.
fn star_blob(n: usize, n_blobs: usize, rng: &mut ChaCha8Rng) -> (Array2<u8>, (f64, f64)) {
    let nf = n as f64;
    let shrink = 1.0 / (n_blobs as f64).sqrt();
    let cy = rng.random_range(0.38..0.62) * nf;
    let cx = rng.random_range(0.38..0.62) * nf;
    let r0 = rng.random_range(0.17..0.27) * nf * shrink;
    let harmonics: Vec<(f64, f64, f64)> = (2..=4)
        .map(|k| {
            (
                k as f64,
                rng.random_range(0.0..0.14),
                rng.random_range(0.0..2.0 * PI),
            )
        })
        .collect();
    let mut blob = Array2::from_shape_fn((n, n), |(y, x)| {
        let dy = y as f64 - cy;
        let dx = x as f64 - cx;
        let theta = dy.atan2(dx);
        let radius = r0
            * (1.0
                + harmonics
                    .iter()
                    .map(|(k, a, p)| a * (k * theta + p).cos())
                    .sum::<f64>());
        ((dy * dy + dx * dx).sqrt() < radius) as u8
    });
    let seed = (cy.round() as usize, cx.round() as usize);
    blob[seed] = 1;
    (component_4(&blob, seed), (cy, cx))
}

fn component_4(mask: &Array2<u8>, seed: (usize, usize)) -> Array2<u8> {
    let (h, w) = mask.dim();
    let mut out = Array2::<u8>::zeros((h, w));
    let mut queue = VecDeque::from([seed]);
    out[seed] = 1;
    while let Some((y, x)) = queue.pop_front() {
        let nbrs = [
            (y.wrapping_sub(1), x),
            (y + 1, x),
            (y, x.wrapping_sub(1)),
            (y, x + 1),
        ];
        for (ny, nx) in nbrs {
            if ny < h && nx < w && mask[(ny, nx)] == 1 && out[(ny, nx)] == 0 {
                out[(ny, nx)] = 1;
                queue.push_back((ny, nx));
            }
        }
    }
    out
}

/// Grows random branches from the lesion centers until the vessel fraction
/// of the lesion reaches `density`. Vessels are clipped to the region.
fn grow_vessels(
    region: &Array2<u8>,
    centers: &[(f64, f64)],
    density: f64,
    rng: &mut ChaCha8Rng,
) -> Array2<u8> {
    let (h, w) = region.dim();
    let mut vessels = Array2::<u8>::zeros((h, w));
    let area = region.iter().filter(|v| **v == 1).count();
    if area == 0 || density <= 0.0 {
        return vessels;
    }
    let target = (density * area as f64).round() as usize;
    let mut count = 0usize;
    let mut tips: Vec<(f64, f64, f64)> = centers
        .iter()
        .flat_map(|&(y, x)| {
            let base = rng.random_range(0.0..2.0 * PI);
            (0..3).map(move |i| (y, x, base + i as f64 * 2.0 * PI / 3.0))
        })
        .collect();
    let mut iterations = 0;
    while count < target && iterations < 20_000 {
        iterations += 1;
        let idx = rng.random_range(0..tips.len());
        let (y0, x0, heading) = tips[idx];
        let angle = heading + rng.random_range(-0.6..0.6);
        let length = rng.random_range(3.0..8.0);
        let y1 = y0 + length * angle.sin();
        let x1 = x0 + length * angle.cos();
        let inside = |y: f64, x: f64| {
            let (yi, xi) = (y.round(), x.round());
            yi >= 0.0
                && xi >= 0.0
                && (yi as usize) < h
                && (xi as usize) < w
                && region[(yi as usize, xi as usize)] == 1
        };
        if !inside(y1, x1) {
            continue;
        }
        count += stamp_segment(&mut vessels, region, (y0, x0), (y1, x1), target - count);
        tips.push((y1, x1, angle));
        if rng.random::<f64>() < 0.3 {
            tips.push((
                y1,
                x1,
                angle + rng.random_range(0.6..1.2) * if rng.random() { 1.0 } else { -1.0 },
            ));
        }
    }
    vessels
}

/// Draws a segment of radius 1 px, stopping after `budget` new pixels.
fn stamp_segment(
    vessels: &mut Array2<u8>,
    region: &Array2<u8>,
    from: (f64, f64),
    to: (f64, f64),
    budget: usize,
) -> usize {
    let (h, w) = vessels.dim();
    let steps = ((to.0 - from.0).abs().max((to.1 - from.1).abs()) * 2.0)
        .ceil()
        .max(1.0) as usize;
    let mut added = 0;
    for s in 0..=steps {
        let t = s as f64 / steps as f64;
        let cy = from.0 + t * (to.0 - from.0);
        let cx = from.1 + t * (to.1 - from.1);
        for dy in -1i64..=1 {
            for dx in -1i64..=1 {
                if dy != 0 && dx != 0 {
                    continue;
                }
                let y = cy.round() as i64 + dy;
                let x = cx.round() as i64 + dx;
                if y < 0 || x < 0 || y >= h as i64 || x >= w as i64 {
                    continue;
                }
                let p = (y as usize, x as usize);
                if region[p] == 1 && vessels[p] == 0 {
                    vessels[p] = 1;
                    added += 1;
                    if added >= budget {
                        return added;
                    }
                }
            }
        }
    }
    added
}

fn background_texture(n: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let waves: Vec<(f64, f64, f64)> = (0..3)
        .map(|_| {
            (
                rng.random_range(0.5..3.0) * 2.0 * PI / n as f64,
                rng.random_range(0.0..PI),
                rng.random_range(0.0..2.0 * PI),
            )
        })
        .collect();
    Array2::from_shape_fn((n, n), |(y, x)| {
        let t: f64 = waves
            .iter()
            .map(|(f, dir, ph)| (f * (x as f64 * dir.cos() + y as f64 * dir.sin()) + ph).sin())
            .sum();
        BACKGROUND + 0.01 * t
    })
}

fn box_blur(img: &Array2<f64>) -> Array2<f64> {
    let (h, w) = img.dim();
    Array2::from_shape_fn((h, w), |(y, x)| {
        let mut acc = 0.0;
        let mut cnt = 0.0;
        for yy in y.saturating_sub(1)..(y + 2).min(h) {
            for xx in x.saturating_sub(1)..(x + 2).min(w) {
                // center weighted twice to keep vessels crisp
                let wgt = if yy == y && xx == x { 2.0 } else { 1.0 };
                acc += wgt * img[(yy, xx)];
                cnt += wgt;
            }
        }
        acc / cnt
    })
}

/// Bright straight streaks emulating projection artifacts, kept at least
/// two pixels away from the lesion.
fn add_streaks(
    mut img: Array2<f64>,
    region: &Array2<u8>,
    level: f64,
    rng: &mut ChaCha8Rng,
) -> Array2<f64> {
    let (h, w) = img.dim();
    let count = (level * 4.0).round() as usize;
    if count == 0 {
        return img;
    }
    let keep_out = dilate(region, 2);
    for _ in 0..count {
        let angle = rng.random_range(0.0..PI);
        let py = rng.random_range(0.0..h as f64);
        let px = rng.random_range(0.0..w as f64);
        let intensity = 0.3 + 0.5 * level * rng.random_range(0.6..1.0);
        let (s, c) = angle.sin_cos();
        for ((y, x), v) in img.indexed_iter_mut() {
            // distance from the line through (py, px) with direction (s, c)
            let d = ((y as f64 - py) * c - (x as f64 - px) * s).abs();
            if d < 0.8 && keep_out[(y, x)] == 0 {
                *v = v.max(intensity);
            }
        }
    }
    img
}

fn dilate(mask: &Array2<u8>, radius: i64) -> Array2<u8> {
    let (h, w) = mask.dim();
    Array2::from_shape_fn((h, w), |(y, x)| {
        for dy in -radius..=radius {
            for dx in -radius..=radius {
                let yy = y as i64 + dy;
                let xx = x as i64 + dx;
                if yy >= 0
                    && xx >= 0
                    && yy < h as i64
                    && xx < w as i64
                    && mask[(yy as usize, xx as usize)] == 1
                {
                    return 1;
                }
            }
        }
        0
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn count(m: &Array2<u8>) -> usize {
        m.iter().filter(|v| **v == 1).count()
    }

    #[test]
    fn single_blob_is_one_component() {
        let spec = SynthSpec {
            noise_level: 0.0,
            ..SynthSpec::default()
        };
        let s = generate_synthetic_sample(1, &spec).unwrap();
        let first = s
            .region_mask
            .indexed_iter()
            .find(|(_, v)| **v == 1)
            .unwrap()
            .0;
        assert_eq!(
            count(&component_4(&s.region_mask, first)),
            count(&s.region_mask)
        );
    }

    #[test]
    fn deterministic_in_seed() {
        let spec = SynthSpec::default();
        assert_eq!(
            generate_synthetic_sample(1, &spec).unwrap(),
            generate_synthetic_sample(1, &spec).unwrap()
        );
        assert_ne!(
            generate_synthetic_sample(1, &spec).unwrap().image,
            generate_synthetic_sample(2, &spec).unwrap().image
        );
    }

    #[test]
    fn vessel_fraction_tracks_density() {
        let s = generate_synthetic_sample(7, &SynthSpec::default()).unwrap();
        let ratio = count(&s.vessel_mask) as f64 / count(&s.region_mask) as f64;
        assert!((0.2..=0.4).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn artifacts_stay_outside_lesion() {
        let spec = SynthSpec {
            noise_level: 0.0,
            artifact_level: 1.0,
            ..SynthSpec::default()
        };
        let s = generate_synthetic_sample(3, &spec).unwrap();
        let near = dilate(&s.region_mask, 1);
        let bright_outside = s
            .image
            .indexed_iter()
            .filter(|(p, v)| near[*p] == 0 && **v > 0.25)
            .count();
        assert!(bright_outside > 0);
    }

    #[test]
    fn invalid_specs_are_rejected() {
        for spec in [
            SynthSpec {
                image_size: 16,
                ..SynthSpec::default()
            },
            SynthSpec {
                vessel_density: 1.5,
                ..SynthSpec::default()
            },
            SynthSpec {
                n_blobs: 0,
                ..SynthSpec::default()
            },
        ] {
            assert!(matches!(
                generate_synthetic_sample(0, &spec),
                Err(Error::Validation(_))
            ));
        }
    }
}
