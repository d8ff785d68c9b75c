use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::backbone::{hard_mask_image, mask_image, BackboneConfig, Decoder, Encoder, Router};
use crate::error::{Error, Result};
use crate::migr::{from_pixels, GraphConfig, Migr};
use crate::mrgr::{HeadMaps, Mrgr};
use crate::nn::{resize_bilinear, sigmoid, ParamStore, Pass};

/// Which auxiliary tasks, loss terms and graph modules a model uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskFlags {
    pub boundary: bool,
    pub shape: bool,
    pub uce: bool,
    pub graph: bool,
}

impl TaskFlags {
    pub const FULL: TaskFlags = TaskFlags {
        boundary: true,
        shape: true,
        uce: true,
        graph: true,
    };
}

impl Default for TaskFlags {
    fn default() -> Self {
        Self::FULL
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub graph: GraphConfig,
    pub tasks: TaskFlags,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.graph.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Soft region mask feeds the vessel branch.
    Train,
    /// Region probability thresholded at 0.5 before masking.
    Infer,
}

#[derive(Debug, Clone)]
pub struct CascadeOutput {
    pub region_logit: Tensor,
    pub region: Tensor,
    pub boundary: Option<Tensor>,
    /// Signed-distance estimate in `[-1, 1]`.
    pub shape: Option<Tensor>,
    pub vessel_logit: Tensor,
    pub vessel: Tensor,
    /// Input of the vessel branch.
    pub masked_image: Tensor,
    pub heads: Option<HeadMaps>,
}

#[derive(Debug, Clone)]
pub struct RegionOutput {
    pub region_logit: Tensor,
    pub region: Tensor,
    pub boundary: Option<Tensor>,
    pub shape: Option<Tensor>,
    pub heads: Option<HeadMaps>,
}

/// Region branch (encoder, routing, graph reasoning, task decoders) followed
/// by the vessel branch on the region-masked image.
pub struct CascadeModel {
    config: ModelConfig,
    encoder: Encoder,
    router: Router,
    graph: Option<(Migr, Mrgr)>,
    region_decoder: Decoder,
    boundary_decoder: Option<Decoder>,
    shape_decoder: Option<Decoder>,
    vessel_encoder: Encoder,
    vessel_decoder: Decoder,
}

impl CascadeModel {
    pub fn new(store: &mut ParamStore, config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let bb = &config.backbone;
        let c = bb.routed_channels;
        let mut root = store.root();
        let encoder = Encoder::new(&mut root.sub("region.encoder"), bb, 1)?;
        let router = Router::new(&mut root.sub("region.route"), bb)?;
        let graph = if config.tasks.graph {
            Some((
                Migr::new(&mut root.sub("migr"), c, &config.graph)?,
                Mrgr::new(&mut root.sub("mrgr"), c, &config.graph)?,
            ))
        } else {
            None
        };
        let region_decoder = Decoder::new(
            &mut root.sub("region.decoder"),
            bb,
            c,
            bb.decoder_widths(),
            true,
        )?;
        let boundary_decoder = config
            .tasks
            .boundary
            .then(|| {
                Decoder::new(
                    &mut root.sub("boundary.decoder"),
                    bb,
                    c,
                    bb.aux_decoder_widths(),
                    false,
                )
            })
            .transpose()?;
        let shape_decoder = config
            .tasks
            .shape
            .then(|| {
                Decoder::new(
                    &mut root.sub("shape.decoder"),
                    bb,
                    c,
                    bb.aux_decoder_widths(),
                    false,
                )
            })
            .transpose()?;
        let vessel_encoder = Encoder::new(&mut root.sub("vessel.encoder"), bb, 1)?;
        let deep = bb.encoder_channels()[4];
        let vessel_decoder = Decoder::new(
            &mut root.sub("vessel.decoder"),
            bb,
            deep,
            bb.decoder_widths(),
            true,
        )?;
        Ok(Self {
            config: config.clone(),
            encoder,
            router,
            graph,
            region_decoder,
            boundary_decoder,
            shape_decoder,
            vessel_encoder,
            vessel_decoder,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Seeds every graph center from features of `image` computed with
    /// batch statistics. No-op without graph modules.
    pub fn seed_graph_centers(&self, image: &Tensor) -> Result<()> {
        let Some((migr, mrgr)) = &self.graph else {
            return Ok(());
        };
        let mut pass = Pass::batch_stats();
        let taps = self.encoder.encode(image, &mut pass)?;
        let routed = self.router.route(&taps, &pass)?;
        migr.seed_centers(&routed)?;
        mrgr.seed_centers(&migr.forward(&routed)?)?;
        Ok(())
    }

    pub fn forward(&self, image: &Tensor, mode: Mode, pass: &mut Pass) -> Result<CascadeOutput> {
        let r = self.region_forward(image, pass)?;
        self.cascade(image, r, mode, pass)
    }

    /// Vessel branch on top of a region pass: masks `image` with the region
    /// probability (soft in training mode, thresholded at inference).
    pub fn cascade(
        &self,
        image: &Tensor,
        r: RegionOutput,
        mode: Mode,
        pass: &mut Pass,
    ) -> Result<CascadeOutput> {
        let masked_image = match mode {
            Mode::Train => mask_image(image, &r.region)?,
            Mode::Infer => hard_mask_image(image, &r.region)?,
        };
        let vessel_logit = self.vessel_branch(&masked_image, pass)?;
        let vessel = sigmoid(&vessel_logit)?;
        Ok(CascadeOutput {
            region_logit: r.region_logit,
            region: r.region,
            boundary: r.boundary,
            shape: r.shape,
            vessel_logit,
            vessel,
            masked_image,
            heads: r.heads,
        })
    }

    /// Region branch only: encoder, routing, graph modules and the region,
    /// boundary and shape decoders.
    pub fn region_forward(&self, image: &Tensor, pass: &mut Pass) -> Result<RegionOutput> {
        let (_, ch, h, w) = image.dims4()?;
        if ch != 1 {
            return Err(Error::shape(format!(
                "expected one input channel, got {ch}"
            )));
        }
        let taps = self.encoder.encode(image, pass)?;
        let routed = self.router.route(&taps, pass)?;
        let (h5, w5) = routed.region.spatial()?;

        let (deep_reg, deep_bou, deep_shp, heads) = match &self.graph {
            Some((migr, mrgr)) => {
                let m = migr.forward(&routed)?;
                let r = mrgr.forward(&m)?;
                (
                    from_pixels(&r.region, h5, w5)?,
                    from_pixels(&m.boundary, h5, w5)?,
                    from_pixels(&m.shape, h5, w5)?,
                    Some(r.heads),
                )
            }
            None => (
                routed.region.data.clone(),
                routed.boundary.data.clone(),
                routed.shape.data.clone(),
                None,
            ),
        };
        let head_map =
            |t: &Tensor| -> Result<Tensor> { resize_bilinear(&from_pixels(t, h5, w5)?, h, w) };

        let region_logit = self.region_decoder.decode(&deep_reg, &taps, pass)?;
        let region = sigmoid(&region_logit)?;
        let boundary = match &self.boundary_decoder {
            Some(dec) => {
                let mut logit = dec.decode(&deep_bou, &taps, pass)?;
                if let Some(hm) = &heads {
                    logit = logit.add(&head_map(&hm.boundary_logit)?)?;
                }
                Some(sigmoid(&logit)?)
            }
            None => None,
        };
        let shape = match &self.shape_decoder {
            Some(dec) => {
                let mut raw = dec.decode(&deep_shp, &taps, pass)?;
                if let Some(hm) = &heads {
                    raw = raw.add(&head_map(&hm.shape_logit)?)?;
                }
                Some(raw.tanh()?)
            }
            None => None,
        };

        Ok(RegionOutput {
            region_logit,
            region,
            boundary,
            shape,
            heads,
        })
    }

    /// Vessel logits for an already masked image.
    pub fn vessel_branch(&self, masked: &Tensor, pass: &mut Pass) -> Result<Tensor> {
        let taps = self.vessel_encoder.encode(masked, pass)?;
        self.vessel_decoder.decode(&taps[4].data, &taps, pass)
    }
}

/// `(B, 1, H, W)` tensor from row-major images of equal size.
pub fn batch_tensor(images: &[&ndarray::Array2<f32>], dtype: DType) -> Result<Tensor> {
    let Some(first) = images.first() else {
        return Err(Error::validation("empty batch"));
    };
    let (h, w) = first.dim();
    let mut data = Vec::with_capacity(images.len() * h * w);
    for img in images {
        if img.dim() != (h, w) {
            return Err(Error::shape(format!(
                "batch mixes {h}x{w} with {:?}",
                img.dim()
            )));
        }
        data.extend(img.iter().copied());
    }
    Ok(
        Tensor::from_vec(data, (images.len(), 1, h, w), &candle_core::Device::Cpu)?
            .to_dtype(dtype)?,
    )
}
