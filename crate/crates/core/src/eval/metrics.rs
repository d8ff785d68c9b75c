use ndarray::{Array2, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Pixel counts of a binary prediction against a binary reference.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl Confusion {
    pub fn from_masks(pred: &Array2<u8>, gt: &Array2<u8>) -> Result<Self> {
        if pred.dim() != gt.dim() {
            return Err(Error::shape(format!(
                "prediction is {:?} but reference is {:?}",
                pred.dim(),
                gt.dim()
            )));
        }
        let mut c = Confusion::default();
        Zip::from(pred)
            .and(gt)
            .for_each(|&p, &g| match (p != 0, g != 0) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                (false, false) => c.tn += 1,
            });
        Ok(c)
    }

    /// `2TP / (2TP + FP + FN)`; 1 when both masks are empty.
    pub fn dice(&self) -> f64 {
        ratio(2 * self.tp, 2 * self.tp + self.fp + self.fn_)
    }

    /// `TP / (TP + FP + FN)`; 1 when both masks are empty.
    pub fn iou(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp + self.fn_)
    }

    /// `TP / (TP + FP)`; 1 when nothing is predicted.
    pub fn precision(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp)
    }

    /// `TP / (TP + FN)`; 1 when the reference is empty.
    pub fn recall(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_)
    }
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        1.0
    } else {
        num as f64 / den as f64
    }
}

/// Overlap scores plus the clinical quantities of one image.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub dice: f64,
    pub iou: f64,
    pub precision: f64,
    pub recall: f64,
    pub lesion_area_px: u64,
    pub vessel_density: f64,
    pub avascular_area_px: u64,
}

/// Overlap metrics of `pred` against `gt`; the clinical fields are left 0.
pub fn confusion_metrics(pred: &Array2<u8>, gt: &Array2<u8>) -> Result<MetricsRecord> {
    let c = Confusion::from_masks(pred, gt)?;
    Ok(MetricsRecord {
        dice: c.dice(),
        iou: c.iou(),
        precision: c.precision(),
        recall: c.recall(),
        ..MetricsRecord::default()
    })
}

/// Lesion area, vessel density and avascular area of a predicted lesion.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Clinical {
    pub lesion_area_px: u64,
    pub vessel_density: f64,
    pub avascular_area_px: u64,
}

/// Vessels are clipped to the region before counting.
pub fn clinical_metrics(region: &Array2<u8>, vessel: &Array2<u8>) -> Result<Clinical> {
    if region.dim() != vessel.dim() {
        return Err(Error::shape(format!(
            "region is {:?} but vessels are {:?}",
            region.dim(),
            vessel.dim()
        )));
    }
    let mut area = 0u64;
    let mut inside = 0u64;
    Zip::from(region).and(vessel).for_each(|&r, &v| {
        if r != 0 {
            area += 1;
            if v != 0 {
                inside += 1;
            }
        }
    });
    Ok(Clinical {
        lesion_area_px: area,
        vessel_density: if area == 0 {
            0.0
        } else {
            inside as f64 / area as f64
        },
        avascular_area_px: area - inside,
    })
}

impl MetricsRecord {
    pub fn with_clinical(mut self, c: Clinical) -> Self {
        self.lesion_area_px = c.lesion_area_px;
        self.vessel_density = c.vessel_density;
        self.avascular_area_px = c.avascular_area_px;
        self
    }
}

/// Binary mask of `prob > threshold`.
pub fn threshold(prob: &Array2<f32>, threshold: f32) -> Array2<u8> {
    prob.mapv(|p| u8::from(p > threshold))
}

/// Mean and sample standard deviation (`n - 1`); std is 0 for one value.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, var.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask(h: usize, w: usize, f: impl Fn(usize, usize) -> bool) -> Array2<u8> {
        Array2::from_shape_fn((h, w), |(y, x)| u8::from(f(y, x)))
    }

    #[test]
    fn identical_and_disjoint() {
        let a = mask(8, 8, |y, _| y < 3);
        let m = confusion_metrics(&a, &a).unwrap();
        assert_eq!((m.dice, m.iou, m.precision, m.recall), (1.0, 1.0, 1.0, 1.0));
        let b = mask(8, 8, |y, _| y > 5);
        let m = confusion_metrics(&b, &a).unwrap();
        assert_eq!((m.dice, m.iou), (0.0, 0.0));
        let z = Array2::zeros((8, 8));
        let m = confusion_metrics(&z, &z).unwrap();
        assert_eq!((m.dice, m.iou, m.precision, m.recall), (1.0, 1.0, 1.0, 1.0));
        assert!(confusion_metrics(&z, &Array2::zeros((8, 9))).is_err());
    }

    #[test]
    fn half_covered_reference() {
        let gt = mask(10, 10, |_, _| true);
        let pred = mask(10, 10, |y, _| y < 5);
        let m = confusion_metrics(&pred, &gt).unwrap();
        assert!((m.dice - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!((m.recall, m.precision), (0.5, 1.0));
    }

    #[test]
    fn clinical_counts() {
        let region = mask(20, 20, |y, _| y < 10);
        let vessel = mask(20, 20, |y, x| y < 4 && x < 20);
        let c = clinical_metrics(&region, &vessel).unwrap();
        assert_eq!(c.lesion_area_px, 200);
        assert!((c.vessel_density - 0.4).abs() < 1e-15);
        assert_eq!(c.avascular_area_px, 120);
        let c = clinical_metrics(&region, &region).unwrap();
        assert_eq!((c.vessel_density, c.avascular_area_px), (1.0, 0));
        let empty = Array2::zeros((20, 20));
        let c = clinical_metrics(&empty, &vessel).unwrap();
        assert_eq!(
            (c.lesion_area_px, c.vessel_density, c.avascular_area_px),
            (0, 0.0, 0)
        );
    }

    #[test]
    fn mean_std_uses_sample_deviation() {
        let (m, s) = mean_std(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m, 2.5);
        assert!((s - (5.0f64 / 3.0).sqrt()).abs() < 1e-15);
    }
}
