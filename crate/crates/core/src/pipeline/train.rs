use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use candle_core::{DType, Device, Tensor};
use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta, FORMAT_VERSION};
use super::config::RunConfig;
use super::infer::{predict_maps, tensor_maps};
use super::model::{batch_tensor, CascadeModel, CascadeOutput, Mode};
use crate::data::{
    augment_with, boundary_from_mask, load_dataset, split_records, synthetic_corpus, warp_map,
    DatasetSplit, SampleRecord, Transform,
};
use crate::error::{Error, Result};
use crate::eval::{confusion_metrics, threshold};
use crate::nn::{mix_seed, Adam, ParamStore, Pass};
use crate::uncertainty::{
    adaptive_weights, mc_sample, mean_variance, segmentation_loss, shape_loss, LossWeights,
};

/// Task order used in every per-task array: region, boundary, shape, vessel.
pub const TASKS: [&str; 4] = ["region", "boundary", "shape", "vessel"];

const DROPOUT_STREAM: u64 = 1;
const SHUFFLE_STREAM: u64 = 2;
const AUGMENT_STREAM: u64 = 3;
const MC_STREAM: u64 = 4;

fn stream(seed: u64, tag: u64, a: u64, b: u64) -> u64 {
    mix_seed(mix_seed(mix_seed(seed, tag), a), b)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: usize,
    /// Region, boundary, shape and vessel loss; 0 for disabled tasks.
    pub losses: [f64; 4],
    pub weights: LossWeights,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Step means of the four task losses.
    pub losses: [f64; 4],
    pub total: f64,
    pub weights: LossWeights,
    pub val_region_dice: f64,
    pub val_vessel_dice: f64,
    pub seconds: f64,
}

/// One task-weight refresh: the mean validation variances and the weights
/// derived from them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightUpdate {
    pub epoch: usize,
    pub variances: [f64; 3],
    pub weights: LossWeights,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config_hash: String,
    /// Task weights in force before the first refresh.
    pub initial_weights: LossWeights,
    pub epochs: Vec<EpochRecord>,
    pub steps: Vec<StepRecord>,
    pub weight_updates: Vec<WeightUpdate>,
    pub wall_clock_s: f64,
}

impl Default for RunRecord {
    fn default() -> Self {
        Self {
            config_hash: String::new(),
            initial_weights: LossWeights::UNIFORM,
            epochs: Vec::new(),
            steps: Vec::new(),
            weight_updates: Vec::new(),
            wall_clock_s: 0.0,
        }
    }
}

impl RunRecord {
    pub fn lambda_history(&self) -> Vec<LossWeights> {
        self.weight_updates.iter().map(|u| u.weights).collect()
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(path, e))
    }

    pub fn read_json(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// SHA-256 of the resolved configuration text.
pub fn config_hash(config: &RunConfig) -> Result<String> {
    let digest = Sha256::digest(config.to_toml()?.as_bytes());
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}

/// Synthetic corpus or on-disk dataset, split 60/10/30.
pub fn prepare_split(config: &RunConfig) -> Result<DatasetSplit> {
    let data = &config.data;
    let split = match &data.root {
        Some(root) => load_dataset(root, data.split_seed)?,
        None => {
            let mut records = synthetic_corpus(data.samples, data.synth_seed, &data.synth)?;
            if data.edges != crate::data::EdgeMethod::default() {
                for r in records.iter_mut() {
                    r.boundary_map = boundary_from_mask(&r.region_mask, data.edges)?;
                }
            }
            split_records(records, data.split_seed)
        }
    };
    let size = config.train.input_size;
    for r in split.train.iter().chain(&split.val).chain(&split.test) {
        if r.height() != size || r.width() != size {
            return Err(Error::validation(format!(
                "sample `{}` is {}x{} but train.input_size is {size}",
                r.id,
                r.height(),
                r.width()
            )));
        }
    }
    Ok(split)
}

/// Stacked targets of a batch, each `(B, 1, H, W)`.
pub struct Batch {
    pub image: Tensor,
    pub region: Tensor,
    pub boundary: Tensor,
    pub shape: Tensor,
    pub vessel: Tensor,
}

impl Batch {
    pub fn new(records: &[&SampleRecord], dtype: DType) -> Result<Self> {
        let masks = |f: &dyn Fn(&SampleRecord) -> &Array2<u8>| -> Result<Tensor> {
            let maps: Vec<Array2<f32>> = records.iter().map(|r| f(r).mapv(f32::from)).collect();
            batch_tensor(&maps.iter().collect::<Vec<_>>(), dtype)
        };
        Ok(Self {
            image: batch_tensor(&records.iter().map(|r| &r.image).collect::<Vec<_>>(), dtype)?,
            region: masks(&|r| &r.region_mask)?,
            boundary: masks(&|r| &r.boundary_map)?,
            shape: batch_tensor(
                &records.iter().map(|r| &r.shape_map).collect::<Vec<_>>(),
                dtype,
            )?,
            vessel: masks(&|r| &r.vessel_mask)?,
        })
    }
}

/// Per-pixel predictive variance of each task for one training sample.
type VarianceMaps = [Array2<f32>; 4];

/// Owns the model, optimizer and run state; trains epoch by epoch and can
/// be checkpointed and resumed between epochs.
pub struct Trainer {
    config: RunConfig,
    store: ParamStore,
    model: CascadeModel,
    adam: Adam,
    weights: LossWeights,
    variances: BTreeMap<String, VarianceMaps>,
    record: RunRecord,
    started: bool,
}

impl Trainer {
    pub fn new(config: RunConfig) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new(config.train.seed, DType::F32);
        let model = CascadeModel::new(&mut store, &config.model)?;
        let tasks = config.model.tasks;
        let weights = LossWeights::uniform_over(tasks.boundary, tasks.shape);
        Ok(Self {
            adam: Adam::new(config.train.lr, config.train.weight_decay),
            weights,
            variances: BTreeMap::new(),
            record: RunRecord {
                config_hash: config_hash(&config)?,
                initial_weights: weights,
                ..RunRecord::default()
            },
            config,
            store,
            model,
            started: false,
        })
    }

    /// Rebuilds a trainer from a checkpoint written by [`Trainer::save`].
    pub fn resume(path: &Path) -> Result<Self> {
        let (meta, tensors) = load_checkpoint(path)?;
        let mut t = Self::new(meta.config)?;
        t.store.load(&tensors)?;
        let adam: BTreeMap<String, Tensor> = tensors
            .iter()
            .filter(|(k, _)| k.starts_with("adam."))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();
        t.adam.restore(meta.adam_steps, &adam);
        for (key, v) in &tensors {
            let Some(rest) = key.strip_prefix("variance.") else {
                continue;
            };
            let Some((id, task)) = rest.rsplit_once('.') else {
                continue;
            };
            let Some(slot) = TASKS.iter().position(|t| *t == task) else {
                continue;
            };
            let map = tensor_maps(&v.unsqueeze(0)?.unsqueeze(0)?)?.remove(0);
            let entry = t.variances.entry(id.to_string()).or_insert_with(|| {
                let z = Array2::zeros(map.dim());
                [z.clone(), z.clone(), z.clone(), z]
            });
            entry[slot] = map;
        }
        t.weights = meta.weights;
        t.record = meta.record;
        t.started = meta.epochs_done > 0;
        if t.record.epochs.len() != meta.epochs_done {
            return Err(Error::Checkpoint(
                "run record disagrees with the epoch counter".into(),
            ));
        }
        Ok(t)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut tensors = self.store.named_tensors();
        tensors.extend(self.adam.state_tensors());
        for (id, maps) in &self.variances {
            for (task, map) in TASKS.iter().zip(maps) {
                let (h, w) = map.dim();
                let t = Tensor::from_slice(
                    map.as_slice().expect("standard layout"),
                    (h, w),
                    &Device::Cpu,
                )?;
                tensors.insert(format!("variance.{id}.{task}"), t);
            }
        }
        let meta = CheckpointMeta {
            format_version: FORMAT_VERSION,
            config: self.config.clone(),
            epochs_done: self.epochs_done(),
            adam_steps: self.adam.steps_taken(),
            weights: self.weights,
            record: self.record.clone(),
        };
        save_checkpoint(path, &meta, &tensors)
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    pub fn model(&self) -> &CascadeModel {
        &self.model
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn record(&self) -> &RunRecord {
        &self.record
    }

    pub fn weights(&self) -> LossWeights {
        self.weights
    }

    pub fn epochs_done(&self) -> usize {
        self.record.epochs.len()
    }

    pub fn is_finished(&self) -> bool {
        self.epochs_done() >= self.config.train.epochs
    }

    /// Trains the remaining epochs, calling `on_epoch` after each.
    pub fn fit(
        &mut self,
        split: &DatasetSplit,
        mut on_epoch: impl FnMut(&Trainer) -> Result<()>,
    ) -> Result<()> {
        while !self.is_finished() {
            self.run_epoch(split)?;
            on_epoch(self)?;
        }
        Ok(())
    }

    /// One pass over the training split, followed by the weight refresh
    /// when the epoch is a multiple of the update period, and validation.
    pub fn run_epoch(&mut self, split: &DatasetSplit) -> Result<&EpochRecord> {
        let epoch = self.epochs_done() + 1;
        match self.epoch_inner(split) {
            // once parameters have moved, a rejected forward pass means they degenerated
            Err(Error::Validation(msg)) if self.adam.steps_taken() > 0 => Err(Error::Divergence {
                tensor: msg,
                epoch,
                step: self.record.steps.last().map_or(0, |s| s.step),
            }),
            Err(e) => Err(e),
            Ok(()) => Ok(self.record.epochs.last().expect("epoch recorded")),
        }
    }

    fn epoch_inner(&mut self, split: &DatasetSplit) -> Result<()> {
        if split.train.is_empty() {
            return Err(Error::validation("training split is empty"));
        }
        let clock = Instant::now();
        let tc = self.config.train.clone();
        let epoch = self.epochs_done() + 1;
        if !self.started {
            let first: Vec<&SampleRecord> = split.train.iter().take(tc.batch).collect();
            self.model
                .seed_graph_centers(&Batch::new(&first, DType::F32)?.image)?;
            self.started = true;
        }

        let mut order: Vec<usize> = (0..split.train.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(stream(
            tc.seed,
            SHUFFLE_STREAM,
            epoch as u64,
            0,
        )));
        let mut sums = [0.0; 5];
        let mut steps = 0usize;
        for (step, chunk) in order.chunks(tc.batch).enumerate() {
            let rec = self.train_step(split, chunk, epoch, step)?;
            for (s, v) in sums.iter_mut().zip(rec.losses.iter().chain([&rec.total])) {
                *s += v;
            }
            steps += 1;
            self.record.steps.push(rec);
        }

        if epoch % tc.weight_update_period == 0 {
            self.refresh(split, epoch)?;
        }
        let (val_region_dice, val_vessel_dice) =
            validation_dice(&self.model, &split.val, tc.batch)?;
        let n = steps as f64;
        self.record.epochs.push(EpochRecord {
            epoch,
            losses: [sums[0] / n, sums[1] / n, sums[2] / n, sums[3] / n],
            total: sums[4] / n,
            weights: self.weights,
            val_region_dice,
            val_vessel_dice,
            seconds: clock.elapsed().as_secs_f64(),
        });
        self.record.wall_clock_s += clock.elapsed().as_secs_f64();
        Ok(())
    }

    fn train_step(
        &mut self,
        split: &DatasetSplit,
        chunk: &[usize],
        epoch: usize,
        step: usize,
    ) -> Result<StepRecord> {
        let tc = &self.config.train;
        let tasks = self.config.model.tasks;
        let mut records = Vec::with_capacity(chunk.len());
        let mut variance: Vec<Option<VarianceMaps>> = Vec::with_capacity(chunk.len());
        for &i in chunk {
            let src = &split.train[i];
            let t = if tc.augment {
                Transform::sample(stream(tc.seed, AUGMENT_STREAM, epoch as u64, i as u64))
            } else {
                Transform::IDENTITY
            };
            records.push(augment_with(src, &t, self.config.data.edges)?);
            variance.push(
                self.variances
                    .get(&src.id)
                    .filter(|_| tasks.uce)
                    .map(|maps| maps.clone().map(|m| warp_map(&m, &t))),
            );
        }
        let refs: Vec<&SampleRecord> = records.iter().collect();
        let batch = Batch::new(&refs, DType::F32)?;
        let v = |task: usize| -> Result<Option<Tensor>> {
            if variance.iter().any(|v| v.is_none()) {
                return Ok(None);
            }
            let maps: Vec<&Array2<f32>> = variance
                .iter()
                .map(|v| &v.as_ref().expect("checked")[task])
                .collect();
            Ok(Some(batch_tensor(&maps, DType::F32)?))
        };

        let seeds: Vec<u64> = (0..chunk.len())
            .map(|b| {
                stream(
                    tc.seed,
                    DROPOUT_STREAM,
                    epoch as u64,
                    (step * tc.batch + b) as u64,
                )
            })
            .collect();
        let mut pass = Pass::train(&seeds);
        let stage = if tc.two_stage {
            if epoch <= tc.epochs.div_ceil(2) {
                Stage::Region
            } else {
                Stage::Vessel
            }
        } else {
            Stage::Joint
        };
        let forward = |pass: &mut Pass| -> Result<CascadeOutput> {
            Ok(match stage {
                Stage::Joint => self.model.forward(&batch.image, Mode::Train, pass)?,
                Stage::Region => {
                    let r = self.model.region_forward(&batch.image, pass)?;
                    let zeros = r.region.zeros_like()?;
                    CascadeOutput {
                        vessel_logit: zeros.clone(),
                        vessel: zeros.clone(),
                        masked_image: zeros,
                        region_logit: r.region_logit,
                        region: r.region,
                        boundary: r.boundary,
                        shape: r.shape,
                        heads: r.heads,
                    }
                }
                Stage::Vessel => {
                    let mut frozen = self.model.region_forward(&batch.image, &mut Pass::eval())?;
                    frozen.region = frozen.region.detach();
                    self.model
                        .cascade(&batch.image, frozen, Mode::Train, pass)?
                }
            })
        };
        let out = forward(&mut pass)?;
        let fail = |tensor: &str| Error::Divergence {
            tensor: tensor.to_string(),
            epoch,
            step,
        };
        let finite = |t: &Tensor| -> Result<bool> {
            Ok(t.to_dtype(DType::F64)?
                .sum_all()?
                .to_scalar::<f64>()?
                .is_finite())
        };
        let mut checks: Vec<(&str, &Tensor)> = vec![("region_logit", &out.region_logit)];
        if let Some(b) = &out.boundary {
            checks.push(("boundary", b));
        }
        if let Some(s) = &out.shape {
            checks.push(("shape", s));
        }
        checks.push(("vessel_logit", &out.vessel_logit));
        for (name, t) in checks {
            if !finite(t)? {
                return Err(fail(name));
            }
        }

        let zero = Tensor::zeros((), DType::F32, &Device::Cpu)?;
        let train_region = stage != Stage::Vessel;
        let train_vessel = stage != Stage::Region;
        let region = if train_region {
            segmentation_loss(&out.region, &batch.region, v(0)?.as_ref())?
        } else {
            zero.clone()
        };
        let boundary = match (&out.boundary, train_region) {
            (Some(p), true) => segmentation_loss(p, &batch.boundary, v(1)?.as_ref())?,
            _ => zero.clone(),
        };
        let shape = match (&out.shape, train_region) {
            (Some(p), true) => shape_loss(p, &batch.shape, v(2)?.as_ref())?,
            _ => zero.clone(),
        };
        let vessel = if train_vessel {
            segmentation_loss(&out.vessel, &batch.vessel, v(3)?.as_ref())?
        } else {
            zero.clone()
        };
        let losses = [region, boundary, shape, vessel];
        let mut values = [0.0; 4];
        for ((value, loss), name) in values.iter_mut().zip(&losses).zip([
            "loss.region",
            "loss.boundary",
            "loss.shape",
            "loss.vessel",
        ]) {
            *value = loss.to_dtype(DType::F64)?.to_scalar::<f64>()?;
            if !value.is_finite() {
                return Err(fail(name));
            }
        }
        let w = self.weights;
        let total = losses[0]
            .affine(w.region, 0.0)?
            .add(&losses[1].affine(w.boundary, 0.0)?)?
            .add(&losses[2].affine(w.shape, 0.0)?)?
            .add(&losses[3])?;
        let total_value = total.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        if !total_value.is_finite() {
            return Err(fail("loss.total"));
        }
        let grads = total.backward()?;
        self.adam.step(&self.store, &grads)?;
        Ok(StepRecord {
            epoch,
            step,
            losses: values,
            weights: w,
            total: total_value,
        })
    }

    /// Task weights from Monte Carlo variances on a fixed validation
    /// mini-batch, and fresh per-pixel variance maps for the training set.
    fn refresh(&mut self, split: &DatasetSplit, epoch: usize) -> Result<()> {
        let tc = self.config.train.clone();
        let tasks = self.config.model.tasks;
        if !tasks.uce {
            self.record.weight_updates.push(WeightUpdate {
                epoch,
                variances: [0.0; 3],
                weights: self.weights,
            });
            return Ok(());
        }
        let pool = if split.val.is_empty() {
            &split.train
        } else {
            &split.val
        };
        let probe: Vec<&SampleRecord> = pool.iter().take(tc.weight_batch).collect();
        let maps =
            self.task_variances(&probe, stream(tc.seed, MC_STREAM, epoch as u64, u64::MAX))?;
        let mean = |task: usize| -> f64 {
            let total: f64 = maps
                .iter()
                .map(|m| m[task].iter().map(|v| *v as f64).sum::<f64>())
                .sum();
            total / maps.iter().map(|m| m[task].len()).sum::<usize>() as f64
        };
        let variances = [
            mean(0),
            if tasks.boundary { mean(1) } else { 0.0 },
            if tasks.shape { mean(2) } else { 0.0 },
        ];
        self.weights = if variances.iter().sum::<f64>() > 0.0 {
            adaptive_weights(variances[0], variances[1], variances[2])?
        } else {
            LossWeights::uniform_over(tasks.boundary, tasks.shape)
        };
        self.record.weight_updates.push(WeightUpdate {
            epoch,
            variances,
            weights: self.weights,
        });

        for (g, group) in split.train.chunks(tc.batch).enumerate() {
            let refs: Vec<&SampleRecord> = group.iter().collect();
            let maps =
                self.task_variances(&refs, stream(tc.seed, MC_STREAM, epoch as u64, g as u64))?;
            for (r, m) in group.iter().zip(maps) {
                self.variances.insert(r.id.clone(), m);
            }
        }
        Ok(())
    }

    /// Monte Carlo variance of the four task outputs for each record.
    fn task_variances(&self, records: &[&SampleRecord], seed: u64) -> Result<Vec<VarianceMaps>> {
        let tc = &self.config.train;
        let image = Batch::new(records, DType::F32)?.image;
        let samples = mc_sample(&image, tc.mc_samples, seed, tc.mc_chunk, |x, pass| {
            let o = self.model.forward(x, Mode::Train, pass)?;
            let zeros = o.region.zeros_like()?;
            Ok(vec![
                o.region,
                o.boundary.unwrap_or_else(|| zeros.clone()),
                o.shape.unwrap_or_else(|| zeros.clone()),
                o.vessel,
            ])
        })?;
        let mut per_task = Vec::with_capacity(4);
        for task in 0..4 {
            let stack: Vec<Tensor> = samples.iter().map(|s| s[task].clone()).collect();
            per_task.push(tensor_maps(&mean_variance(&stack)?.variance)?);
        }
        let mut out = Vec::with_capacity(records.len());
        for b in 0..records.len() {
            out.push([
                per_task[0][b].clone(),
                per_task[1][b].clone(),
                per_task[2][b].clone(),
                per_task[3][b].clone(),
            ]);
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Stage {
    Joint,
    Region,
    Vessel,
}

/// Mean region and vessel Dice of thresholded inference predictions.
pub fn validation_dice(
    model: &CascadeModel,
    records: &[SampleRecord],
    batch: usize,
) -> Result<(f64, f64)> {
    if records.is_empty() {
        return Ok((f64::NAN, f64::NAN));
    }
    let images: Vec<&Array2<f32>> = records.iter().map(|r| &r.image).collect();
    let preds = predict_maps(model, &images, batch)?;
    let (mut region, mut vessel) = (0.0, 0.0);
    for (r, p) in records.iter().zip(&preds) {
        region += confusion_metrics(&threshold(&p.region, 0.5), &r.region_mask)?.dice;
        vessel += confusion_metrics(&threshold(&p.vessel, 0.5), &r.vessel_mask)?.dice;
    }
    let n = records.len() as f64;
    Ok((region / n, vessel / n))
}
