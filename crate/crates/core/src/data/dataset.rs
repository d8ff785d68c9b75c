use std::fs;
use std::path::Path;

use image::{GrayImage, Luma};
use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::cache::{read_f32_array, write_f32_array};
use super::{ensure_binary, EdgeMethod, SampleRecord};
use crate::error::{Error, Result};

/// Train / validation / test fractions.
pub const SPLIT_FRACTIONS: (f64, f64, f64) = (0.60, 0.10, 0.30);

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train: Vec<SampleRecord>,
    pub val: Vec<SampleRecord>,
    pub test: Vec<SampleRecord>,
}

impl DatasetSplit {
    pub fn sizes(&self) -> (usize, usize, usize) {
        (self.train.len(), self.val.len(), self.test.len())
    }

    pub fn ids(&self) -> (Vec<String>, Vec<String>, Vec<String>) {
        let ids = |v: &[SampleRecord]| v.iter().map(|s| s.id.clone()).collect();
        (ids(&self.train), ids(&self.val), ids(&self.test))
    }
}

/// Sorts by id, shuffles with `seed`, then takes floor(60%) for train,
/// floor(10%) (at least one) for validation and the remainder for test.
pub fn split_records(mut records: Vec<SampleRecord>, seed: u64) -> DatasetSplit {
    records.sort_by(|a, b| a.id.cmp(&b.id));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    records.shuffle(&mut rng);
    let n = records.len();
    let n_train = n * 6 / 10;
    let n_val = (n / 10).max(1).min(n - n_train);
    let test = records.split_off(n_train + n_val);
    let val = records.split_off(n_train);
    DatasetSplit {
        train: records,
        val,
        test,
    }
}

fn read_gray(path: &Path) -> Result<GrayImage> {
    Ok(image::open(path)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?
        .to_luma8())
}

fn gray_to_array(img: &GrayImage) -> Array2<u8> {
    let (w, h) = img.dimensions();
    Array2::from_shape_fn((h as usize, w as usize), |(y, x)| {
        img.get_pixel(x as u32, y as u32)[0]
    })
}

/// Loads `<root>/images/<id>.png` with `<root>/region/<id>.png` and
/// `<root>/vessel/<id>.png`, deriving boundary and shape targets (cached
/// under `<root>/derived/`), and splits the corpus with `split_seed`.
pub fn load_dataset(root: &Path, split_seed: u64) -> Result<DatasetSplit> {
    let image_dir = root.join("images");
    let mut ids: Vec<String> = fs::read_dir(&image_dir)
        .map_err(|e| Error::io(&image_dir, e))?
        .filter_map(|entry| {
            let path = entry.ok()?.path();
            let is_png = path
                .extension()
                .is_some_and(|e| e.eq_ignore_ascii_case("png"));
            is_png.then(|| path.file_stem()?.to_str().map(str::to_string))?
        })
        .collect();
    ids.sort();
    if ids.is_empty() {
        return Err(Error::validation(format!(
            "no PNG images under {}",
            image_dir.display()
        )));
    }
    let records = ids
        .iter()
        .map(|id| load_sample(root, id))
        .collect::<Result<Vec<_>>>()?;
    Ok(split_records(records, split_seed))
}

fn load_sample(root: &Path, id: &str) -> Result<SampleRecord> {
    let file = format!("{id}.png");
    let image = read_gray(&root.join("images").join(&file))?;
    let mut masks = Vec::with_capacity(2);
    for kind in ["region", "vessel"] {
        let path = root.join(kind).join(&file);
        if !path.exists() {
            return Err(Error::Load {
                id: id.to_string(),
                reason: format!("missing {kind} mask {}", path.display()),
            });
        }
        let m = gray_to_array(&read_gray(&path)?).mapv(|v| (v >= 128) as u8);
        if m.dim() != (image.height() as usize, image.width() as usize) {
            return Err(Error::Load {
                id: id.to_string(),
                reason: format!("{kind} mask size differs from image"),
            });
        }
        masks.push(m);
    }
    let vessel = masks.pop().expect("two masks");
    let region = masks.pop().expect("two masks");
    let image = gray_to_array(&image).mapv(|v| v as f32 / 255.0);

    let derived = root.join("derived");
    let boundary_stem = derived.join(format!("{id}.boundary"));
    let shape_stem = derived.join(format!("{id}.shape"));
    let dims = region.dim();
    let cached = (|| -> Result<(Array2<u8>, Array2<f32>)> {
        let (bs, b) = read_f32_array(&boundary_stem)?;
        let (ss, s) = read_f32_array(&shape_stem)?;
        if bs != [dims.0, dims.1] || ss != [dims.0, dims.1] {
            return Err(Error::shape("stale cache"));
        }
        let b = Array2::from_shape_vec(dims, b.into_iter().map(|v| v as u8).collect())
            .map_err(|e| Error::shape(e.to_string()))?;
        ensure_binary(&b, "cached boundary")?;
        let s = Array2::from_shape_vec(dims, s).map_err(|e| Error::shape(e.to_string()))?;
        Ok((b, s))
    })();
    match cached {
        Ok((boundary_map, shape_map)) => Ok(SampleRecord {
            id: id.to_string(),
            image,
            region_mask: region,
            vessel_mask: vessel,
            boundary_map,
            shape_map,
        }),
        Err(_) => {
            let rec = SampleRecord::from_masks(id, image, region, vessel, EdgeMethod::default())?;
            let shape = [dims.0, dims.1];
            let boundary: Vec<f32> = rec.boundary_map.iter().map(|v| *v as f32).collect();
            let sdf: Vec<f32> = rec.shape_map.iter().copied().collect();
            if let Err(e) = write_f32_array(&boundary_stem, &shape, &boundary)
                .and_then(|_| write_f32_array(&shape_stem, &shape, &sdf))
            {
                log::warn!("could not cache derived maps for {id}: {e}");
            }
            Ok(rec)
        }
    }
}

fn save_png(path: &Path, h: usize, w: usize, value: impl Fn(usize, usize) -> u8) -> Result<()> {
    let img = GrayImage::from_fn(w as u32, h as u32, |x, y| {
        Luma([value(y as usize, x as usize)])
    });
    img.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// Writes records in the dataset layout read by [`load_dataset`].
pub fn write_dataset(root: &Path, records: &[SampleRecord]) -> Result<()> {
    for dir in ["images", "region", "vessel"] {
        let d = root.join(dir);
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    for rec in records {
        let (h, w) = rec.image.dim();
        let file = format!("{}.png", rec.id);
        save_png(&root.join("images").join(&file), h, w, |y, x| {
            (rec.image[(y, x)].clamp(0.0, 1.0) * 255.0).round() as u8
        })?;
        save_png(&root.join("region").join(&file), h, w, |y, x| {
            rec.region_mask[(y, x)] * 255
        })?;
        save_png(&root.join("vessel").join(&file), h, w, |y, x| {
            rec.vessel_mask[(y, x)] * 255
        })?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synthetic_corpus, SynthSpec};

    fn dummy(n: usize) -> Vec<SampleRecord> {
        synthetic_corpus(
            n,
            0,
            &SynthSpec {
                image_size: 32,
                ..SynthSpec::default()
            },
        )
        .unwrap()
    }

    #[test]
    fn split_sizes_follow_floor_rule() {
        assert_eq!(split_records(dummy(10), 1).sizes(), (6, 1, 3));
        let n = 184;
        assert_eq!((n * 6 / 10, n / 10, n - n * 6 / 10 - n / 10), (110, 18, 56));
    }

    #[test]
    fn split_is_deterministic_and_disjoint() {
        let a = split_records(dummy(12), 5).ids();
        let b = split_records(dummy(12).into_iter().rev().collect(), 5).ids();
        assert_eq!(a, b);
        let mut all: Vec<_> = a.0.iter().chain(a.1.iter()).chain(a.2.iter()).collect();
        all.sort();
        all.dedup();
        assert_eq!(all.len(), 12);
    }

    #[test]
    fn load_roundtrip_and_missing_mask() {
        let dir = tempfile::tempdir().unwrap();
        let recs = dummy(10);
        write_dataset(dir.path(), &recs).unwrap();
        let split = load_dataset(dir.path(), 3).unwrap();
        assert_eq!(split.sizes(), (6, 1, 3));
        let again = load_dataset(dir.path(), 3).unwrap();
        assert_eq!(split.ids(), again.ids());
        let loaded = split
            .train
            .iter()
            .chain(&split.val)
            .chain(&split.test)
            .find(|r| r.id == recs[0].id)
            .unwrap();
        assert_eq!(loaded.region_mask, recs[0].region_mask);
        assert_eq!(loaded.shape_map, recs[0].shape_map);

        fs::remove_file(
            dir.path()
                .join("vessel")
                .join(format!("{}.png", recs[4].id)),
        )
        .unwrap();
        match load_dataset(dir.path(), 3) {
            Err(Error::Load { id, .. }) => assert_eq!(id, recs[4].id),
            other => panic!("expected load error, got {other:?}"),
        }
    }
}
