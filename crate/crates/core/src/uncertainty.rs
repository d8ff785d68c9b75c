//! Monte Carlo dropout statistics, the variance-weighted BCE, per-task
//! losses and the variance-derived task weights.

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{mix_seed, sigmoid, Pass};

/// Probability clamp used inside every log.
pub const PROB_EPS: f64 = 1e-7;
/// Smoothing term of the soft Dice.
pub const DICE_EPS: f64 = 1e-6;

/// Dropout seed of sample `z` for batch element `b`.
pub fn sample_seed(seed: u64, z: usize, b: usize) -> u64 {
    mix_seed(mix_seed(seed, z as u64), b as u64)
}

/// Runs `z` stochastic forward passes of `forward` over `image` `(B, ...)`.
///
/// Up to `chunk` samples are stacked into one batch. Every (sample, batch
/// element) pair has its own dropout stream, so the result does not depend
/// on `chunk`. Returns `[sample][output]`, each output `(B, ...)`.
pub fn mc_sample<F>(
    image: &Tensor,
    z: usize,
    seed: u64,
    chunk: usize,
    mut forward: F,
) -> Result<Vec<Vec<Tensor>>>
where
    F: FnMut(&Tensor, &mut Pass) -> Result<Vec<Tensor>>,
{
    if z < 1 {
        return Err(Error::validation(
            "Monte Carlo sampling needs at least one sample",
        ));
    }
    let b = image.dim(0)?;
    let chunk = chunk.clamp(1, z);
    let mut out = Vec::with_capacity(z);
    let mut start = 0;
    while start < z {
        let n = chunk.min(z - start);
        let seeds: Vec<u64> = (start..start + n)
            .flat_map(|zi| (0..b).map(move |bi| sample_seed(seed, zi, bi)))
            .collect();
        let batch = if n == 1 {
            image.clone()
        } else {
            Tensor::cat(&vec![image; n], 0)?
        };
        let outputs = forward(&batch, &mut Pass::monte_carlo(&seeds))?;
        for i in 0..n {
            out.push(
                outputs
                    .iter()
                    .map(|t| t.narrow(0, i * b, b).map(|t| t.detach()))
                    .collect::<candle_core::Result<Vec<_>>>()?,
            );
        }
        start += n;
    }
    Ok(out)
}

/// Mean prediction and population variance over Z samples.
#[derive(Debug, Clone)]
pub struct UncertaintyMap {
    pub mean: Tensor,
    pub variance: Tensor,
    pub samples: usize,
}

pub fn mean_variance(samples: &[Tensor]) -> Result<UncertaintyMap> {
    let Some(first) = samples.first() else {
        return Err(Error::validation("cannot summarize an empty sample list"));
    };
    if let Some(bad) = samples.iter().find(|s| s.dims() != first.dims()) {
        return Err(Error::shape(format!(
            "sample shapes {:?} and {:?} differ",
            first.dims(),
            bad.dims()
        )));
    }
    let stack = Tensor::stack(samples, 0)?;
    let mean = stack.mean(0)?;
    let variance = stack.broadcast_sub(&mean)?.sqr()?.mean(0)?;
    Ok(UncertaintyMap {
        mean,
        variance,
        samples: samples.len(),
    })
}

fn ensure_finite(t: &Tensor, what: &str) -> Result<()> {
    let s = t.to_dtype(DType::F64)?.sum_all()?.to_scalar::<f64>()?;
    if s.is_finite() {
        Ok(())
    } else {
        Err(Error::validation(format!(
            "{what} contains NaN or infinite values"
        )))
    }
}

/// Per-image min-max scaling of `v` `(B, ...)` to `[0, 1]`; constant
/// images map to zero.
pub fn normalize_per_image(v: &Tensor) -> Result<Tensor> {
    let b = v.dim(0)?;
    let flat = v.reshape((b, ()))?;
    let lo = flat.min_keepdim(1)?;
    let range = flat.max_keepdim(1)?.sub(&lo)?;
    let live = range.gt(0.0)?.to_dtype(v.dtype())?;
    let norm = flat
        .broadcast_sub(&lo)?
        .broadcast_div(&range.maximum(f64::MIN_POSITIVE)?)?
        .broadcast_mul(&live)?;
    Ok(norm.reshape(v.dims())?)
}

/// Elementwise binary cross-entropy with the prediction clamped to
/// `[PROB_EPS, 1 - PROB_EPS]`.
pub fn bce(pred: &Tensor, target: &Tensor) -> Result<Tensor> {
    let p = pred.clamp(PROB_EPS, 1.0 - PROB_EPS)?;
    let one_minus_t = target.affine(-1.0, 1.0)?;
    let pos = target.mul(&p.log()?)?;
    let neg = one_minus_t.mul(&p.affine(-1.0, 1.0)?.log()?)?;
    Ok(pos.add(&neg)?.neg()?)
}

/// Mean over pixels of `(1 + normalize(V)) * BCE`; no gradient reaches `V`.
pub fn uce_loss(pred: &Tensor, target: &Tensor, variance: Option<&Tensor>) -> Result<Tensor> {
    if pred.dims() != target.dims() {
        return Err(Error::shape(format!(
            "prediction {:?} vs target {:?}",
            pred.dims(),
            target.dims()
        )));
    }
    ensure_finite(pred, "prediction")?;
    ensure_finite(target, "target")?;
    let per_pixel = bce(pred, target)?;
    let weighted = match variance {
        None => per_pixel,
        Some(v) => {
            if v.dims() != pred.dims() {
                return Err(Error::shape(format!(
                    "variance {:?} vs prediction {:?}",
                    v.dims(),
                    pred.dims()
                )));
            }
            ensure_finite(v, "variance")?;
            let w = normalize_per_image(&v.detach().to_dtype(pred.dtype())?)?.affine(1.0, 1.0)?;
            per_pixel.mul(&w)?
        }
    };
    Ok(weighted.mean_all()?)
}

/// `1 - (2 sum(pg) + eps) / (sum(p) + sum(g) + eps)` per image, averaged
/// over the batch.
pub fn soft_dice_loss(pred: &Tensor, target: &Tensor) -> Result<Tensor> {
    if pred.dims() != target.dims() {
        return Err(Error::shape(format!(
            "prediction {:?} vs target {:?}",
            pred.dims(),
            target.dims()
        )));
    }
    let b = pred.dim(0)?;
    let p = pred.reshape((b, ()))?;
    let g = target.reshape((b, ()))?;
    let inter = p.mul(&g)?.sum(1)?;
    let denom = p.sum(1)?.add(&g.sum(1)?)?;
    let dice = inter
        .affine(2.0, DICE_EPS)?
        .div(&denom.affine(1.0, DICE_EPS)?)?;
    Ok(dice.affine(-1.0, 1.0)?.mean_all()?)
}

pub fn mse_loss(pred: &Tensor, target: &Tensor) -> Result<Tensor> {
    if pred.dims() != target.dims() {
        return Err(Error::shape(format!(
            "prediction {:?} vs target {:?}",
            pred.dims(),
            target.dims()
        )));
    }
    Ok(pred.sub(target)?.sqr()?.mean_all()?)
}

/// Confidence-of-error for the signed-distance output: `2 sigmoid(|e|) - 1`,
/// zero for an exact prediction and approaching one for large errors.
pub fn shape_error_confidence(pred: &Tensor, target: &Tensor) -> Result<Tensor> {
    Ok(sigmoid(&pred.sub(target)?.abs()?)?.affine(2.0, -1.0)?)
}

/// Shape regression loss: MSE plus the variance-weighted BCE of the error
/// confidence against a zero target.
pub fn shape_loss(pred: &Tensor, target: &Tensor, variance: Option<&Tensor>) -> Result<Tensor> {
    let conf = shape_error_confidence(pred, target)?;
    let zero = conf.zeros_like()?;
    Ok(mse_loss(pred, target)?.add(&uce_loss(&conf, &zero, variance)?)?)
}

/// Dice plus variance-weighted BCE.
pub fn segmentation_loss(
    pred: &Tensor,
    target: &Tensor,
    variance: Option<&Tensor>,
) -> Result<Tensor> {
    Ok(soft_dice_loss(pred, target)?.add(&uce_loss(pred, target, variance)?)?)
}

/// Four task maps, each `(B, 1, H, W)`. `shape` is the signed-distance
/// regression in `[-1, 1]`; the others are probabilities.
#[derive(Debug, Clone)]
pub struct TaskMaps {
    pub region: Tensor,
    pub boundary: Tensor,
    pub shape: Tensor,
    pub vessel: Tensor,
}

/// Optional per-pixel variance maps for the variance-weighted terms.
#[derive(Debug, Clone, Default)]
pub struct TaskVariances {
    pub region: Option<Tensor>,
    pub boundary: Option<Tensor>,
    pub shape: Option<Tensor>,
    pub vessel: Option<Tensor>,
}

#[derive(Debug, Clone)]
pub struct TaskLosses {
    pub region: Tensor,
    pub boundary: Tensor,
    pub shape: Tensor,
    pub vessel: Tensor,
}

impl TaskLosses {
    pub fn values(&self) -> Result<[f64; 4]> {
        let v = |t: &Tensor| -> Result<f64> { Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?) };
        Ok([
            v(&self.region)?,
            v(&self.boundary)?,
            v(&self.shape)?,
            v(&self.vessel)?,
        ])
    }
}

pub fn task_losses(preds: &TaskMaps, targets: &TaskMaps, v: &TaskVariances) -> Result<TaskLosses> {
    Ok(TaskLosses {
        region: segmentation_loss(&preds.region, &targets.region, v.region.as_ref())?,
        boundary: segmentation_loss(&preds.boundary, &targets.boundary, v.boundary.as_ref())?,
        shape: shape_loss(&preds.shape, &targets.shape, v.shape.as_ref())?,
        vessel: segmentation_loss(&preds.vessel, &targets.vessel, v.vessel.as_ref())?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub region: f64,
    pub boundary: f64,
    pub shape: f64,
}

impl LossWeights {
    pub const UNIFORM: LossWeights = LossWeights {
        region: 1.0 / 3.0,
        boundary: 1.0 / 3.0,
        shape: 1.0 / 3.0,
    };

    /// Equal weights over the enabled tasks; the region task is always on.
    pub fn uniform_over(boundary: bool, shape: bool) -> Self {
        let n = 1.0 + boundary as u8 as f64 + shape as u8 as f64;
        Self {
            region: 1.0 / n,
            boundary: if boundary { 1.0 / n } else { 0.0 },
            shape: if shape { 1.0 / n } else { 0.0 },
        }
    }

    pub fn sum(&self) -> f64 {
        self.region + self.boundary + self.shape
    }

    pub fn as_array(&self) -> [f64; 3] {
        [self.region, self.boundary, self.shape]
    }
}

/// `lambda_i = V_i / (V_reg + V_bou + V_shp)`; uniform when all are zero.
pub fn adaptive_weights(v_reg: f64, v_bou: f64, v_shp: f64) -> Result<LossWeights> {
    let v = [v_reg, v_bou, v_shp];
    if v.iter().any(|x| !x.is_finite() || *x < 0.0) {
        return Err(Error::validation(format!(
            "task variances must be finite and >= 0, got {v:?}"
        )));
    }
    let total: f64 = v.iter().sum();
    if total == 0.0 {
        return Ok(LossWeights::UNIFORM);
    }
    Ok(LossWeights {
        region: v_reg / total,
        boundary: v_bou / total,
        shape: v_shp / total,
    })
}

/// `lambda_reg L_reg + lambda_bou L_bou + lambda_shp L_shp + L_ves`.
pub fn total_loss(l: &TaskLosses, w: &LossWeights) -> Result<Tensor> {
    Ok(l.region
        .affine(w.region, 0.0)?
        .add(&l.boundary.affine(w.boundary, 0.0)?)?
        .add(&l.shape.affine(w.shape, 0.0)?)?
        .add(&l.vessel)?)
}

/// Mean of a tensor as f64.
pub fn mean_value(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.mean_all()?.to_scalar::<f64>()?)
}
