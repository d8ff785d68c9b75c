use std::path::{Path, PathBuf};

use candle_core::{DType, Tensor};
use image::{GrayImage, Luma};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::checkpoint::load_checkpoint;
use super::config::RunConfig;
use super::model::{batch_tensor, CascadeModel, Mode};
use crate::data::write_f32_array;
use crate::error::{Error, Result};
use crate::eval::threshold;
use crate::nn::{ParamStore, Pass};
use crate::uncertainty::{mc_sample, mean_variance};

/// `(B, 1, H, W)` tensor to one array per batch element.
pub fn tensor_maps(t: &Tensor) -> Result<Vec<Array2<f32>>> {
    let (b, c, h, w) = t.dims4()?;
    if c != 1 {
        return Err(Error::shape(format!(
            "expected single-channel maps, got {c} channels"
        )));
    }
    let data: Vec<f32> = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1()?;
    Ok(data
        .chunks(h * w)
        .take(b)
        .map(|c| Array2::from_shape_vec((h, w), c.to_vec()).expect("chunk matches map size"))
        .collect())
}

/// Region and vessel probabilities of one image.
#[derive(Debug, Clone)]
pub struct ProbabilityMaps {
    pub region: Array2<f32>,
    pub vessel: Array2<f32>,
}

/// Deterministic inference (running statistics, no dropout, hard mask).
pub fn predict_maps(
    model: &CascadeModel,
    images: &[&Array2<f32>],
    batch: usize,
) -> Result<Vec<ProbabilityMaps>> {
    let mut out = Vec::with_capacity(images.len());
    for group in images.chunks(batch.max(1)) {
        let x = batch_tensor(group, DType::F32)?;
        let o = model.forward(&x, Mode::Infer, &mut Pass::eval())?;
        for (region, vessel) in tensor_maps(&o.region)?
            .into_iter()
            .zip(tensor_maps(&o.vessel)?)
        {
            out.push(ProbabilityMaps { region, vessel });
        }
    }
    Ok(out)
}

/// Inference output for one image.
#[derive(Debug, Clone)]
pub struct Prediction {
    pub region_prob: Array2<f32>,
    pub vessel_prob: Array2<f32>,
    pub region_mask: Array2<u8>,
    pub vessel_mask: Array2<u8>,
    /// Monte Carlo variance of the region and vessel probabilities.
    pub uncertainty: Option<(Array2<f32>, Array2<f32>)>,
}

/// A trained model restored from a checkpoint.
pub struct Predictor {
    pub config: RunConfig,
    model: CascadeModel,
    _store: ParamStore,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McSettings {
    pub samples: usize,
    pub seed: u64,
    pub chunk: usize,
}

impl Predictor {
    pub fn from_checkpoint(path: &Path) -> Result<Self> {
        let (meta, tensors) = load_checkpoint(path)?;
        let mut store = ParamStore::new(meta.config.train.seed, DType::F32);
        let model = CascadeModel::new(&mut store, &meta.config.model)?;
        store.load(&tensors)?;
        Ok(Self {
            config: meta.config,
            model,
            _store: store,
        })
    }

    /// Wraps an in-memory model.
    pub fn from_parts(config: RunConfig, store: ParamStore, model: CascadeModel) -> Self {
        Self {
            config,
            model,
            _store: store,
        }
    }

    pub fn model(&self) -> &CascadeModel {
        &self.model
    }

    /// Thresholded predictions from a deterministic pass; with `mc`, also
    /// the Monte Carlo variance of both probability maps.
    pub fn predict(
        &self,
        images: &[&Array2<f32>],
        mc: Option<McSettings>,
    ) -> Result<Vec<Prediction>> {
        let size = self.config.train.input_size;
        if let Some(bad) = images.iter().find(|i| i.dim() != (size, size)) {
            return Err(Error::validation(format!(
                "image is {:?} but the checkpoint was trained on {size}x{size}",
                bad.dim()
            )));
        }
        let batch = self.config.train.batch;
        let maps = predict_maps(&self.model, images, batch)?;
        let mut uncertainty: Vec<Option<(Array2<f32>, Array2<f32>)>> = vec![None; images.len()];
        if let Some(mc) = mc {
            for (g, group) in images.chunks(batch).enumerate() {
                let x = batch_tensor(group, DType::F32)?;
                let seed = crate::nn::mix_seed(mc.seed, g as u64);
                let samples = mc_sample(&x, mc.samples, seed, mc.chunk, |x, pass| {
                    let o = self.model.forward(x, Mode::Infer, pass)?;
                    Ok(vec![o.region, o.vessel])
                })?;
                let region: Vec<Tensor> = samples.iter().map(|s| s[0].clone()).collect();
                let vessel: Vec<Tensor> = samples.iter().map(|s| s[1].clone()).collect();
                let vr = tensor_maps(&mean_variance(&region)?.variance)?;
                let vv = tensor_maps(&mean_variance(&vessel)?.variance)?;
                for (i, pair) in vr.into_iter().zip(vv).enumerate() {
                    uncertainty[g * batch + i] = Some(pair);
                }
            }
        }
        Ok(maps
            .into_iter()
            .zip(uncertainty)
            .map(|(m, u)| Prediction {
                region_mask: threshold(&m.region, 0.5),
                vessel_mask: threshold(&m.vessel, 0.5),
                region_prob: m.region,
                vessel_prob: m.vessel,
                uncertainty: u,
            })
            .collect())
    }
}

/// Reads an 8-bit grayscale PNG as intensities in `[0, 1]`.
pub fn read_image(path: &Path) -> Result<Array2<f32>> {
    let img = image::open(path)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?
        .to_luma8();
    let (w, h) = img.dimensions();
    Ok(Array2::from_shape_fn((h as usize, w as usize), |(y, x)| {
        img.get_pixel(x as u32, y as u32)[0] as f32 / 255.0
    }))
}

/// PNG files of `path` (a file, or every `.png` in a directory, sorted).
pub fn list_images(path: &Path) -> Result<Vec<PathBuf>> {
    if path.is_file() {
        return Ok(vec![path.to_path_buf()]);
    }
    let mut files: Vec<PathBuf> = std::fs::read_dir(path)
        .map_err(|e| Error::io(path, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::validation(format!(
            "no PNG images under {}",
            path.display()
        )));
    }
    Ok(files)
}

/// Saves a `[0, 1]` map as an 8-bit PNG (values clamped).
pub fn write_gray(path: &Path, map: &Array2<f32>) -> Result<()> {
    let (h, w) = map.dim();
    let img = GrayImage::from_fn(w as u32, h as u32, |x, y| {
        Luma([(map[(y as usize, x as usize)].clamp(0.0, 1.0) * 255.0).round() as u8])
    });
    img.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

pub fn write_mask(path: &Path, mask: &Array2<u8>) -> Result<()> {
    write_gray(path, &mask.mapv(|v| if v != 0 { 1.0 } else { 0.0 }))
}

/// Writes masks, probability maps and (when present) float variance
/// arrays plus heatmaps for `stem` into `dir`.
pub fn write_prediction(dir: &Path, stem: &str, p: &Prediction) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_mask(&dir.join(format!("{stem}_region_mask.png")), &p.region_mask)?;
    write_mask(&dir.join(format!("{stem}_vessel_mask.png")), &p.vessel_mask)?;
    write_gray(&dir.join(format!("{stem}_region_prob.png")), &p.region_prob)?;
    write_gray(&dir.join(format!("{stem}_vessel_prob.png")), &p.vessel_prob)?;
    if let Some((vr, vv)) = &p.uncertainty {
        for (name, v) in [("region", vr), ("vessel", vv)] {
            let stem_path = dir.join(format!("{stem}_{name}_variance"));
            write_f32_array(
                &stem_path,
                &[v.nrows(), v.ncols()],
                v.as_slice().expect("standard layout"),
            )?;
            super::report::write_heatmap(&dir.join(format!("{stem}_{name}_variance.png")), v)?;
        }
    }
    Ok(())
}

/// Region and vessel metrics of deterministic predictions on labelled
/// records; both rows carry the clinical quantities of the prediction.
pub fn evaluate_records(
    model: &CascadeModel,
    records: &[crate::data::SampleRecord],
    batch: usize,
) -> Result<Vec<super::report::MetricRow>> {
    use crate::eval::{clinical_metrics, confusion_metrics};
    let images: Vec<&Array2<f32>> = records.iter().map(|r| &r.image).collect();
    let maps = predict_maps(model, &images, batch)?;
    let mut rows = Vec::with_capacity(2 * records.len());
    for (r, m) in records.iter().zip(maps) {
        let region = threshold(&m.region, 0.5);
        let vessel = threshold(&m.vessel, 0.5);
        let clinical = clinical_metrics(&region, &vessel)?;
        for (task, pred, gt) in [
            ("region", &region, &r.region_mask),
            ("vessel", &vessel, &r.vessel_mask),
        ] {
            rows.push(super::report::MetricRow {
                id: r.id.clone(),
                task: task.to_string(),
                metrics: confusion_metrics(pred, gt)?.with_clinical(clinical),
            });
        }
    }
    Ok(rows)
}
