//! Samples, synthetic lesion generation, target derivation and dataset I/O.

mod augment;
mod cache;
mod dataset;
mod synth;
mod targets;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

pub use augment::{augment, augment_with, warp_map, Transform};
pub use cache::{read_f32_array, write_f32_array, ArrayHeader};
pub use dataset::{load_dataset, split_records, write_dataset, DatasetSplit, SPLIT_FRACTIONS};
pub use synth::{generate_synthetic_sample, synthetic_corpus, SynthSpec};
pub use targets::{
    boundary_from_mask, edge_band, erode4, sdf_from_mask, sdf_normalizer, signed_distance,
    EdgeMethod,
};

use crate::error::{Error, Result};

/// One training example with its derived boundary and shape targets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub id: String,
    /// Grayscale intensities in `[0, 1]`.
    pub image: Array2<f32>,
    pub region_mask: Array2<u8>,
    pub vessel_mask: Array2<u8>,
    pub boundary_map: Array2<u8>,
    /// Normalized signed distance, negative inside the region, in `[-1, 1]`.
    pub shape_map: Array2<f32>,
}

impl SampleRecord {
    /// Builds a record from an image and its two masks, deriving the
    /// boundary and shape targets from the region mask.
    pub fn from_masks(
        id: impl Into<String>,
        image: Array2<f32>,
        region_mask: Array2<u8>,
        vessel_mask: Array2<u8>,
        edges: EdgeMethod,
    ) -> Result<Self> {
        let dims = image.dim();
        if region_mask.dim() != dims || vessel_mask.dim() != dims {
            return Err(Error::shape(format!(
                "image is {:?} but masks are {:?} and {:?}",
                dims,
                region_mask.dim(),
                vessel_mask.dim()
            )));
        }
        let boundary_map = boundary_from_mask(&region_mask, edges)?;
        let shape_map = sdf_from_mask(&region_mask)?;
        Ok(Self {
            id: id.into(),
            image,
            region_mask,
            vessel_mask,
            boundary_map,
            shape_map,
        })
    }

    pub fn height(&self) -> usize {
        self.image.nrows()
    }

    pub fn width(&self) -> usize {
        self.image.ncols()
    }

    /// Checks the record invariants. `vessels_inside` enables the
    /// vessel-within-region check, which only synthetic data guarantees.
    pub fn check_invariants(&self, vessels_inside: bool) -> Result<()> {
        if self.image.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::validation(format!(
                "{}: image outside [0,1]",
                self.id
            )));
        }
        if vessels_inside
            && self
                .vessel_mask
                .iter()
                .zip(self.region_mask.iter())
                .any(|(v, r)| *v == 1 && *r == 0)
        {
            return Err(Error::validation(format!(
                "{}: vessel pixel outside region",
                self.id
            )));
        }
        let band = edge_band(&self.region_mask);
        if self
            .boundary_map
            .iter()
            .zip(band.iter())
            .any(|(b, e)| *b == 1 && *e == 0)
        {
            return Err(Error::validation(format!(
                "{}: boundary outside edge band",
                self.id
            )));
        }
        for (s, r) in self.shape_map.iter().zip(self.region_mask.iter()) {
            let ok = s.abs() <= 1.0 && if *r == 1 { *s < 0.0 } else { *s > 0.0 };
            if !ok {
                return Err(Error::validation(format!(
                    "{}: shape map sign/range violated",
                    self.id
                )));
            }
        }
        Ok(())
    }
}

/// Errors unless every entry is 0 or 1.
pub(crate) fn ensure_binary(mask: &Array2<u8>, what: &str) -> Result<()> {
    if let Some(v) = mask.iter().find(|v| **v > 1) {
        return Err(Error::validation(format!(
            "{what} must be binary, found value {v}"
        )));
    }
    Ok(())
}
