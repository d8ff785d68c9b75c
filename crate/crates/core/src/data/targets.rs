use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::ensure_binary;
use crate::error::Result;

/// How the boundary target is extracted from a region mask.
///
/// Both variants return the inner one-pixel contour; image-border pixels
/// are never marked.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case")]
pub enum EdgeMethod {
    /// Region pixels with at least one 4-neighbour outside the region.
    MorphGradient,
    /// Canny (Gaussian sigma 1, Sobel, non-maximum suppression, hysteresis)
    /// on the mask scaled to `[0, 1]`, kept on the inner side of the edge.
    Canny { low: f64, high: f64 },
}

impl Default for EdgeMethod {
    fn default() -> Self {
        EdgeMethod::MorphGradient
    }
}

impl EdgeMethod {
    pub fn canny() -> Self {
        EdgeMethod::Canny {
            low: 0.1,
            high: 0.3,
        }
    }
}

pub fn boundary_from_mask(mask: &Array2<u8>, method: EdgeMethod) -> Result<Array2<u8>> {
    ensure_binary(mask, "region mask")?;
    let (h, w) = mask.dim();
    let mut out = match method {
        EdgeMethod::MorphGradient => {
            let eroded = erode4(mask);
            Array2::from_shape_fn((h, w), |p| mask[p] & (1 - eroded[p]))
        }
        EdgeMethod::Canny { low, high } => {
            let band = inner_band(mask);
            let edges = canny(mask, low, high);
            Array2::from_shape_fn((h, w), |p| edges[p] & band[p])
        }
    };
    clear_border(&mut out);
    Ok(out)
}

fn clear_border(m: &mut Array2<u8>) {
    let (h, w) = m.dim();
    for y in 0..h {
        for x in 0..w {
            if y == 0 || x == 0 || y + 1 == h || x + 1 == w {
                m[(y, x)] = 0;
            }
        }
    }
}

/// Morphological erosion with the 4-neighbourhood; pixels outside the
/// image do not erode.
pub fn erode4(mask: &Array2<u8>) -> Array2<u8> {
    let (h, w) = mask.dim();
    Array2::from_shape_fn((h, w), |(y, x)| {
        let mut v = mask[(y, x)];
        if y > 0 {
            v &= mask[(y - 1, x)];
        }
        if y + 1 < h {
            v &= mask[(y + 1, x)];
        }
        if x > 0 {
            v &= mask[(y, x - 1)];
        }
        if x + 1 < w {
            v &= mask[(y, x + 1)];
        }
        v
    })
}

fn morph3x3(mask: &Array2<u8>, dilate: bool) -> Array2<u8> {
    let (h, w) = mask.dim();
    Array2::from_shape_fn((h, w), |(y, x)| {
        let mut v = mask[(y, x)];
        for dy in -1i64..=1 {
            for dx in -1i64..=1 {
                let yy = y as i64 + dy;
                let xx = x as i64 + dx;
                if yy < 0 || xx < 0 || yy >= h as i64 || xx >= w as i64 {
                    continue;
                }
                let n = mask[(yy as usize, xx as usize)];
                v = if dilate { v | n } else { v & n };
            }
        }
        v
    })
}

fn inner_band(mask: &Array2<u8>) -> Array2<u8> {
    let eroded = morph3x3(mask, false);
    Array2::from_shape_fn(mask.dim(), |p| mask[p] & (1 - eroded[p]))
}

/// The two-pixel morphological edge band `dilate3x3(mask) - erode3x3(mask)`.
pub fn edge_band(mask: &Array2<u8>) -> Array2<u8> {
    let d = morph3x3(mask, true);
    let e = morph3x3(mask, false);
    Array2::from_shape_fn(mask.dim(), |p| d[p] & (1 - e[p]))
}

fn canny(mask: &Array2<u8>, low: f64, high: f64) -> Array2<u8> {
    let (h, w) = mask.dim();
    let at = |img: &Array2<f64>, y: i64, x: i64| {
        img[(
            y.clamp(0, h as i64 - 1) as usize,
            x.clamp(0, w as i64 - 1) as usize,
        )]
    };
    let src = mask.mapv(|v| v as f64);
    let kernel: Vec<f64> = {
        let k: Vec<f64> = (-2i64..=2).map(|i| (-(i * i) as f64 / 2.0).exp()).collect();
        let s: f64 = k.iter().sum();
        k.into_iter().map(|v| v / s).collect()
    };
    let horiz = Array2::from_shape_fn((h, w), |(y, x)| {
        (0..5)
            .map(|i| kernel[i] * at(&src, y as i64, x as i64 + i as i64 - 2))
            .sum::<f64>()
    });
    let smooth = Array2::from_shape_fn((h, w), |(y, x)| {
        (0..5)
            .map(|i| kernel[i] * at(&horiz, y as i64 + i as i64 - 2, x as i64))
            .sum::<f64>()
    });
    let mut gx = Array2::zeros((h, w));
    let mut gy = Array2::zeros((h, w));
    for y in 0..h as i64 {
        for x in 0..w as i64 {
            let p = |dy: i64, dx: i64| at(&smooth, y + dy, x + dx);
            gx[(y as usize, x as usize)] =
                (p(-1, 1) + 2.0 * p(0, 1) + p(1, 1)) - (p(-1, -1) + 2.0 * p(0, -1) + p(1, -1));
            gy[(y as usize, x as usize)] =
                (p(1, -1) + 2.0 * p(1, 0) + p(1, 1)) - (p(-1, -1) + 2.0 * p(-1, 0) + p(-1, 1));
        }
    }
    let mag = Array2::from_shape_fn((h, w), |p| {
        let a: f64 = gx[p];
        let b: f64 = gy[p];
        (a * a + b * b).sqrt() / 4.0
    });

    let mut thin = Array2::<f64>::zeros((h, w));
    for y in 1..h.saturating_sub(1) {
        for x in 1..w.saturating_sub(1) {
            let m = mag[(y, x)];
            if m <= 0.0 {
                continue;
            }
            let angle = gy[(y, x)].atan2(gx[(y, x)]).to_degrees().rem_euclid(180.0);
            let (dy, dx): (i64, i64) = if !(22.5..157.5).contains(&angle) {
                (0, 1)
            } else if angle < 67.5 {
                (1, 1)
            } else if angle < 112.5 {
                (1, 0)
            } else {
                (1, -1)
            };
            let a = mag[((y as i64 + dy) as usize, (x as i64 + dx) as usize)];
            let b = mag[((y as i64 - dy) as usize, (x as i64 - dx) as usize)];
            if m >= a && m >= b {
                thin[(y, x)] = m;
            }
        }
    }

    let mut out = Array2::<u8>::zeros((h, w));
    let mut stack: Vec<(usize, usize)> = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if thin[(y, x)] >= high && out[(y, x)] == 0 {
                out[(y, x)] = 1;
                stack.push((y, x));
                while let Some((cy, cx)) = stack.pop() {
                    for dy in -1i64..=1 {
                        for dx in -1i64..=1 {
                            let ny = cy as i64 + dy;
                            let nx = cx as i64 + dx;
                            if ny < 0 || nx < 0 || ny >= h as i64 || nx >= w as i64 {
                                continue;
                            }
                            let n = (ny as usize, nx as usize);
                            if out[n] == 0 && thin[n] >= low {
                                out[n] = 1;
                                stack.push(n);
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Squared Euclidean distance from every pixel to the nearest pixel where
/// `is_feature` holds (exact, separable lower-envelope algorithm).
/// Returns `f64::INFINITY` everywhere when there is no feature pixel.
fn squared_edt(h: usize, w: usize, is_feature: impl Fn(usize, usize) -> bool) -> Array2<f64> {
    const INF: f64 = 1e20;
    let mut grid = Array2::from_shape_fn((h, w), |(y, x)| if is_feature(y, x) { 0.0 } else { INF });
    let mut buf = vec![0.0; h.max(w)];
    let mut out = vec![0.0; h.max(w)];
    for x in 0..w {
        for y in 0..h {
            buf[y] = grid[(y, x)];
        }
        edt_1d(&buf[..h], &mut out[..h]);
        for y in 0..h {
            grid[(y, x)] = out[y];
        }
    }
    for y in 0..h {
        for x in 0..w {
            buf[x] = grid[(y, x)];
        }
        edt_1d(&buf[..w], &mut out[..w]);
        for x in 0..w {
            grid[(y, x)] = out[x];
        }
    }
    grid.mapv_inplace(|v| if v >= INF * 0.5 { f64::INFINITY } else { v });
    grid
}

fn edt_1d(f: &[f64], d: &mut [f64]) {
    let n = f.len();
    let mut v = vec![0usize; n];
    let mut z = vec![0.0f64; n + 1];
    let mut k = 0usize;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    let intersect = |q: usize, p: usize| {
        ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q as f64 - p as f64))
    };
    for q in 1..n {
        let mut s = intersect(q, v[k]);
        while s <= z[k] {
            k -= 1;
            s = intersect(q, v[k]);
        }
        k += 1;
        v[k] = q;
        z[k] = s;
        z[k + 1] = f64::INFINITY;
    }
    k = 0;
    for (q, out) in d.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let p = v[k];
        *out = (q as f64 - p as f64).powi(2) + f[p];
    }
}

/// Unnormalized signed distance in pixels: inside pixels get minus the
/// distance to the nearest background pixel, outside pixels the distance
/// to the nearest region pixel. Infinite when the other class is absent.
pub fn signed_distance(mask: &Array2<u8>) -> Result<Array2<f64>> {
    ensure_binary(mask, "region mask")?;
    let (h, w) = mask.dim();
    let to_fg = squared_edt(h, w, |y, x| mask[(y, x)] == 1);
    let to_bg = squared_edt(h, w, |y, x| mask[(y, x)] == 0);
    Ok(Array2::from_shape_fn((h, w), |p| {
        if mask[p] == 1 {
            -to_bg[p].sqrt()
        } else {
            to_fg[p].sqrt()
        }
    }))
}

/// Normalization constant: one tenth of the image diagonal.
pub fn sdf_normalizer(h: usize, w: usize) -> f64 {
    0.1 * ((h * h + w * w) as f64).sqrt()
}

pub fn sdf_from_mask(mask: &Array2<u8>) -> Result<Array2<f32>> {
    let sd = signed_distance(mask)?;
    let (h, w) = mask.dim();
    let d = sdf_normalizer(h, w);
    Ok(sd.mapv(|v| (v / d).clamp(-1.0, 1.0) as f32))
}
