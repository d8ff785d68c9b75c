//! Plain-loop f64 reference implementations for single images. Matrices
//! are row-major `Vec<Vec<f64>>`; graphs are node-major `(K, C)`.

use candle_core::{DType, Tensor};

use crate::error::Result;

pub type Mat = Vec<Vec<f64>>;

/// Row `b` of a `(B, R, C)` tensor as a matrix.
pub fn mat_of(t: &Tensor, b: usize) -> Result<Mat> {
    Ok(t.get(b)?.to_dtype(DType::F64)?.to_vec2()?)
}

pub fn transpose(m: &Mat) -> Mat {
    if m.is_empty() {
        return Vec::new();
    }
    (0..m[0].len())
        .map(|j| m.iter().map(|row| row[j]).collect())
        .collect()
}

pub fn max_abs_diff(a: &Mat, b: &Mat) -> f64 {
    let mut worst = 0.0f64;
    assert_eq!(a.len(), b.len(), "row count");
    for (ra, rb) in a.iter().zip(b) {
        assert_eq!(ra.len(), rb.len(), "column count");
        for (x, y) in ra.iter().zip(rb) {
            worst = worst.max((x - y).abs());
        }
    }
    worst
}

/// `x W + b` for `W` stored `(in, out)`.
pub fn linear(x: &[f64], w: &Mat, b: Option<&[f64]>) -> Vec<f64> {
    let out = w[0].len();
    let mut y = vec![0.0; out];
    for j in 0..out {
        let mut acc = b.map_or(0.0, |b| b[j]);
        for (i, xi) in x.iter().enumerate() {
            acc += xi * w[i][j];
        }
        y[j] = acc;
    }
    y
}

pub fn relu(x: Vec<f64>) -> Vec<f64> {
    x.into_iter().map(|v| v.max(0.0)).collect()
}

pub fn mlp(x: &[f64], w1: &Mat, w2: &Mat) -> Vec<f64> {
    linear(&relu(linear(x, w1, None)), w2, None)
}

/// Soft assignment `(N, K)` and normalized nodes `(K, C)`.
pub fn projection(f: &Mat, centers: &Mat, scales: &Mat) -> (Mat, Mat) {
    let (n, k, c) = (f.len(), centers.len(), centers[0].len());
    let mut assign = vec![vec![0.0; k]; n];
    for i in 0..n {
        let mut logits = vec![0.0; k];
        for m in 0..k {
            let mut d = 0.0;
            for ch in 0..c {
                let r = (f[i][ch] - centers[m][ch]) / scales[m][ch];
                d += r * r;
            }
            logits[m] = -0.5 * d;
        }
        let top = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for m in 0..k {
            assign[i][m] = (logits[m] - top).exp();
            z += assign[i][m];
        }
        for m in 0..k {
            assign[i][m] /= z;
        }
    }
    let mut nodes = vec![vec![0.0; c]; k];
    for m in 0..k {
        let mut mass = 0.0;
        for i in 0..n {
            mass += assign[i][m];
        }
        let mut norm2 = 0.0;
        for ch in 0..c {
            let mut acc = 0.0;
            for i in 0..n {
                acc += assign[i][m] * (f[i][ch] - centers[m][ch]) / scales[m][ch];
            }
            nodes[m][ch] = acc / mass.max(crate::migr::MASS_EPS);
            norm2 += nodes[m][ch] * nodes[m][ch];
        }
        let eps2 = crate::migr::NODE_EPS * crate::migr::NODE_EPS;
        for ch in 0..c {
            nodes[m][ch] = if norm2 >= eps2 {
                nodes[m][ch] / norm2.sqrt()
            } else {
                0.0
            };
        }
    }
    (assign, nodes)
}

/// Pairwise inner products of node rows.
pub fn adjacency(nodes: &Mat) -> Mat {
    let k = nodes.len();
    let mut a = vec![vec![0.0; k]; k];
    for i in 0..k {
        for j in 0..k {
            a[i][j] = nodes[i].iter().zip(&nodes[j]).map(|(x, y)| x * y).sum();
        }
    }
    a
}

/// Weights of one interaction: key, value and query MLPs and the scalar
/// transfer weight.
pub struct InteractWeights<'a> {
    pub key: (&'a Mat, &'a Mat),
    pub value: (&'a Mat, &'a Mat),
    pub query: (&'a Mat, &'a Mat),
    pub weight: f64,
}

pub fn interact(g_reg: &Mat, g_task: &Mat, w: &InteractWeights) -> Mat {
    let k = g_reg.len();
    let keys: Mat = g_reg.iter().map(|g| mlp(g, w.key.0, w.key.1)).collect();
    let values: Mat = g_reg.iter().map(|g| mlp(g, w.value.0, w.value.1)).collect();
    let queries: Mat = g_task
        .iter()
        .map(|g| mlp(g, w.query.0, w.query.1))
        .collect();
    let c = g_task[0].len();
    let mut out = g_task.clone();
    for i in 0..k {
        for ch in 0..c {
            let mut moved = 0.0;
            for j in 0..k {
                let att: f64 = queries[i].iter().zip(&keys[j]).map(|(q, s)| q * s).sum();
                moved += att * values[j][ch];
            }
            out[i][ch] += w.weight * moved;
        }
    }
    out
}

/// `act(A G M)` on node-major `G`.
pub fn reason(g: &Mat, a: &Mat, m: &Mat, relu_out: bool) -> Mat {
    let (k, c) = (g.len(), g[0].len());
    let mut out = vec![vec![0.0; c]; k];
    for i in 0..k {
        for o in 0..c {
            let mut acc = 0.0;
            for j in 0..k {
                for ch in 0..c {
                    acc += a[i][j] * g[j][ch] * m[ch][o];
                }
            }
            out[i][o] = if relu_out { acc.max(0.0) } else { acc };
        }
    }
    out
}

/// `F + Q G`.
pub fn reproject(q: &Mat, g: &Mat, f: &Mat) -> Mat {
    let mut out = f.clone();
    for i in 0..f.len() {
        for ch in 0..f[0].len() {
            for m in 0..g.len() {
                out[i][ch] += q[i][m] * g[m][ch];
            }
        }
    }
    out
}

/// Per-pixel scaling of `fused` `(N, C)` by `map` `(N)`.
pub fn gate(map: &[f64], fused: &Mat) -> Mat {
    fused
        .iter()
        .zip(map)
        .map(|(row, s)| row.iter().map(|v| v * s).collect())
        .collect()
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Task head probability per pixel: `sigmoid(f w + b)`.
pub fn head(f: &Mat, w: &Mat, b: f64) -> Vec<f64> {
    f.iter()
        .map(|row| sigmoid(linear(row, w, Some(&[b]))[0]))
        .collect()
}

/// Edge embedding and node update weights of the reinforcement step.
pub struct EnhanceWeights<'a> {
    pub edge_w: &'a Mat,
    pub edge_b: &'a [f64],
    pub update_w: &'a Mat,
    pub update_b: &'a [f64],
}

/// `max_m ReLU(W [f | ReLU(W_e (f - node_m) + b_e)] + b)` per channel,
/// optionally over the `top_k` nearest nodes only (ties to lower index).
pub fn enhance(fused: &Mat, nodes: &Mat, w: &EnhanceWeights, top_k: Option<usize>) -> Mat {
    let (n, c, k) = (fused.len(), fused[0].len(), nodes.len());
    let mut out = vec![vec![f64::NEG_INFINITY; c]; n];
    for i in 0..n {
        let mut allowed: Vec<usize> = (0..k).collect();
        if let Some(t) = top_k {
            let dist: Vec<f64> = nodes
                .iter()
                .map(|nd| {
                    fused[i]
                        .iter()
                        .zip(nd)
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum()
                })
                .collect();
            allowed.sort_by(|a, b| dist[*a].total_cmp(&dist[*b]).then(a.cmp(b)));
            allowed.truncate(t.max(1));
        }
        for &m in &allowed {
            let diff: Vec<f64> = fused[i].iter().zip(&nodes[m]).map(|(a, b)| a - b).collect();
            let e = relu(linear(&diff, w.edge_w, Some(w.edge_b)));
            let mut cat = fused[i].clone();
            cat.extend(e);
            let cand = relu(linear(&cat, w.update_w, Some(w.update_b)));
            for ch in 0..c {
                if cand[ch] > out[i][ch] {
                    out[i][ch] = cand[ch];
                }
            }
        }
    }
    out
}

/// Two-pass mean and population variance over samples of equal length.
pub fn mean_variance(samples: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>) {
    let z = samples.len() as f64;
    let len = samples[0].len();
    let mut mean = vec![0.0; len];
    for s in samples {
        for (m, v) in mean.iter_mut().zip(s) {
            *m += v;
        }
    }
    for m in mean.iter_mut() {
        *m /= z;
    }
    let mut var = vec![0.0; len];
    for s in samples {
        for ((acc, v), m) in var.iter_mut().zip(s).zip(&mean) {
            *acc += (v - m) * (v - m);
        }
    }
    for v in var.iter_mut() {
        *v /= z;
    }
    (mean, var)
}

pub fn bce(p: f64, t: f64) -> f64 {
    let p = p.clamp(
        crate::uncertainty::PROB_EPS,
        1.0 - crate::uncertainty::PROB_EPS,
    );
    -(t * p.ln() + (1.0 - t) * (1.0 - p).ln())
}

/// Mean over pixels of `(1 + minmax(V)) * BCE` for one image.
pub fn uce(pred: &[f64], target: &[f64], v: &[f64]) -> f64 {
    let lo = v.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for i in 0..pred.len() {
        let norm = if hi > lo {
            (v[i] - lo) / (hi - lo)
        } else {
            0.0
        };
        total += (1.0 + norm) * bce(pred[i], target[i]);
    }
    total / pred.len() as f64
}

/// `1 - (2 sum(p t) + eps) / (sum(p) + sum(t) + eps)`.
pub fn soft_dice(pred: &[f64], target: &[f64]) -> f64 {
    let eps = crate::uncertainty::DICE_EPS;
    let inter: f64 = pred.iter().zip(target).map(|(p, t)| p * t).sum();
    let total: f64 = pred.iter().sum::<f64>() + target.iter().sum::<f64>();
    1.0 - (2.0 * inter + eps) / (total + eps)
}
