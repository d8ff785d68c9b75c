//! Nested U-shaped encoder with five taps, multi-scale feature routing
//! into boundary/shape/region streams, task decoders and the image masking
//! step that links the region and vessel branches.

mod rsu;

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

pub use rsu::{ConvBnRelu, NestedUBlock};

use crate::error::{Error, Result};
use crate::nn::{max_pool2, resize_bilinear, BatchNorm2d, Conv2d, Pass, Scope};

pub const DEPTH: usize = 5;
/// Input height and width must be multiples of this.
pub const INPUT_MULTIPLE: usize = 1 << (DEPTH - 1);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackboneConfig {
    pub depth: usize,
    pub base_channels: usize,
    /// Dilation of the bottom convolution inside each level's nested block.
    pub nested_dilations: Vec<usize>,
    /// Inner depth of each level's nested block.
    pub nested_heights: Vec<usize>,
    pub dropout_rate: f64,
    /// When false the dropout sites are removed entirely.
    pub mc_dropout_active: bool,
    /// Common channel width of the routed features.
    pub routed_channels: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            depth: DEPTH,
            base_channels: 8,
            nested_dilations: vec![3, 3, 2, 2, 2],
            nested_heights: vec![5, 4, 3, 2, 2],
            dropout_rate: 0.5,
            mc_dropout_active: true,
            routed_channels: 32,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth != DEPTH {
            return Err(Error::validation(format!(
                "depth must be {DEPTH}, got {}",
                self.depth
            )));
        }
        if self.nested_dilations.len() != DEPTH || self.nested_heights.len() != DEPTH {
            return Err(Error::validation(
                "nested_dilations and nested_heights need one entry per level",
            ));
        }
        if self
            .nested_dilations
            .iter()
            .chain(&self.nested_heights)
            .any(|v| *v == 0)
        {
            return Err(Error::validation("dilations and heights must be positive"));
        }
        if self.base_channels < 4 || self.routed_channels == 0 {
            return Err(Error::validation(
                "base_channels must be >= 4 and routed_channels > 0",
            ));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::validation("dropout_rate must lie in [0,1)"));
        }
        Ok(())
    }

    /// Output channels of encoder levels 1..=5.
    pub fn encoder_channels(&self) -> [usize; DEPTH] {
        let b = self.base_channels;
        [b, b, 2 * b, 2 * b, 4 * b]
    }

    fn encoder_mid_channels(&self) -> [usize; DEPTH] {
        let b = self.base_channels;
        [(b / 4).max(1), (b / 2).max(1), (b / 2).max(1), b, b]
    }

    /// Widths of the main decoder stages at levels 1..=4.
    pub fn decoder_widths(&self) -> [usize; 4] {
        let b = self.base_channels;
        [b / 2, b / 2, b, 2 * b]
    }

    /// Widths of the lighter auxiliary (boundary, shape) decoders.
    pub fn aux_decoder_widths(&self) -> [usize; 4] {
        let b = self.base_channels;
        [
            (b / 4).max(1),
            (b / 4).max(1),
            (b / 2).max(1),
            (b / 2).max(1),
        ]
    }

    fn effective_dropout(&self) -> f64 {
        if self.mc_dropout_active {
            self.dropout_rate
        } else {
            0.0
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Boundary,
    Shape,
    Region,
    Vessel,
    Generic,
}

/// Activation tensor `(B, C, H, W)` tagged with its task role and level.
#[derive(Debug, Clone)]
pub struct FeatureMap {
    pub data: Tensor,
    pub role: Role,
    pub level: usize,
}

impl FeatureMap {
    pub fn new(data: Tensor, role: Role, level: usize) -> Self {
        Self { data, role, level }
    }

    pub fn spatial(&self) -> Result<(usize, usize)> {
        let (_, _, h, w) = self.data.dims4()?;
        Ok((h, w))
    }

    pub fn channels(&self) -> Result<usize> {
        Ok(self.data.dim(1)?)
    }

    pub fn ensure_finite(&self) -> Result<()> {
        ensure_finite(
            &self.data,
            &format!("{:?} feature at level {}", self.role, self.level),
        )
    }
}

/// Errors when `t` contains NaN or infinite values.
pub fn ensure_finite(t: &Tensor, what: &str) -> Result<()> {
    let s = t
        .to_dtype(DType::F64)?
        .abs()?
        .sum_all()?
        .to_scalar::<f64>()?;
    if s.is_finite() {
        Ok(())
    } else {
        Err(Error::validation(format!("non-finite values in {what}")))
    }
}

/// Five-level encoder of nested U blocks; taps at strides 1, 2, 4, 8, 16.
pub struct Encoder {
    levels: Vec<NestedUBlock>,
    dropout: f64,
}

impl Encoder {
    pub fn new(scope: &mut Scope, config: &BackboneConfig, in_channels: usize) -> Result<Self> {
        config.validate()?;
        let out = config.encoder_channels();
        let mid = config.encoder_mid_channels();
        let mut levels = Vec::with_capacity(DEPTH);
        for l in 0..DEPTH {
            let in_c = if l == 0 { in_channels } else { out[l - 1] };
            levels.push(NestedUBlock::new(
                &mut scope.sub(&format!("l{}", l + 1)),
                in_c,
                mid[l],
                out[l],
                config.nested_heights[l],
                config.nested_dilations[l],
            )?);
        }
        Ok(Self {
            levels,
            dropout: config.effective_dropout(),
        })
    }

    pub fn encode(&self, image: &Tensor, pass: &mut Pass) -> Result<Vec<FeatureMap>> {
        let (_, _, h, w) = image.dims4()?;
        if h % INPUT_MULTIPLE != 0 || w % INPUT_MULTIPLE != 0 || h == 0 || w == 0 {
            return Err(Error::shape(format!(
                "input {h}x{w} must have height and width divisible by {INPUT_MULTIPLE}"
            )));
        }
        let mut taps = Vec::with_capacity(DEPTH);
        let mut x = image.clone();
        for (l, block) in self.levels.iter().enumerate() {
            if l > 0 {
                x = max_pool2(&x)?;
            }
            x = block.forward(&x, pass)?;
            // lower three levels carry MC dropout
            if l >= 2 {
                x = pass.dropout(&x, self.dropout)?;
            }
            taps.push(FeatureMap::new(x.clone(), Role::Generic, l + 1));
        }
        Ok(taps)
    }
}

/// `R(.)`: 1x1 convolution followed by batch norm.
pub struct Reconstruct {
    conv: Conv2d,
    bn: BatchNorm2d,
}

impl Reconstruct {
    pub fn new(scope: &mut Scope, in_c: usize, out_c: usize) -> Result<Self> {
        Ok(Self {
            conv: Conv2d::new(&mut scope.sub("conv"), in_c, out_c, 1, 1, false)?,
            bn: BatchNorm2d::new(&mut scope.sub("bn"), out_c)?,
        })
    }

    pub fn forward(&self, x: &Tensor, pass: &Pass) -> Result<Tensor> {
        self.bn.forward(&self.conv.forward(x)?, pass)
    }
}

/// Routed task streams, all at the spatial size of tap L5.
#[derive(Debug, Clone)]
pub struct RoutedFeatures {
    pub boundary: FeatureMap,
    pub shape: FeatureMap,
    pub region: FeatureMap,
}

/// Builds `F_bou = R(L2|L3|L4)`, `F_shp = R(L3|L4|L5)`, `F_reg = R(L5)`
/// after bilinear resizing of every tap to the L5 size.
pub struct Router {
    boundary: Reconstruct,
    shape: Reconstruct,
    region: Reconstruct,
}

impl Router {
    pub fn new(scope: &mut Scope, config: &BackboneConfig) -> Result<Self> {
        let c = config.encoder_channels();
        let out = config.routed_channels;
        Ok(Self {
            boundary: Reconstruct::new(&mut scope.sub("bou"), c[1] + c[2] + c[3], out)?,
            shape: Reconstruct::new(&mut scope.sub("shp"), c[2] + c[3] + c[4], out)?,
            region: Reconstruct::new(&mut scope.sub("reg"), c[4], out)?,
        })
    }

    pub fn route(&self, taps: &[FeatureMap], pass: &Pass) -> Result<RoutedFeatures> {
        if taps.len() != DEPTH {
            return Err(Error::shape(format!(
                "expected {DEPTH} taps, got {}",
                taps.len()
            )));
        }
        let batch = taps[0].data.dim(0)?;
        if let Some(t) = taps.iter().find(|t| t.data.dim(0).ok() != Some(batch)) {
            return Err(Error::shape(format!(
                "tap L{} has batch {:?}, expected {batch}",
                t.level,
                t.data.dim(0)
            )));
        }
        let (h, w) = taps[4].spatial()?;
        let resized = taps
            .iter()
            .map(|t| resize_bilinear(&t.data, h, w))
            .collect::<Result<Vec<_>>>()?;
        let bou = Tensor::cat(&[&resized[1], &resized[2], &resized[3]], 1)?;
        let shp = Tensor::cat(&[&resized[2], &resized[3], &resized[4]], 1)?;
        Ok(RoutedFeatures {
            boundary: FeatureMap::new(self.boundary.forward(&bou, pass)?, Role::Boundary, 5),
            shape: FeatureMap::new(self.shape.forward(&shp, pass)?, Role::Shape, 5),
            region: FeatureMap::new(self.region.forward(&resized[4], pass)?, Role::Region, 5),
        })
    }
}

/// Upsampling decoder: at levels 4..1 the running feature is resized to
/// the skip tap, concatenated with it and convolved; a final 1x1
/// convolution gives one output channel at full resolution.
pub struct Decoder {
    stages: Vec<ConvBnRelu>,
    head: Conv2d,
    dropout: f64,
}

impl Decoder {
    pub fn new(
        scope: &mut Scope,
        config: &BackboneConfig,
        deep_channels: usize,
        widths: [usize; 4],
        dropout: bool,
    ) -> Result<Self> {
        let skips = config.encoder_channels();
        let mut stages = Vec::with_capacity(4);
        let mut in_c = deep_channels;
        for level in (1..=4).rev() {
            let out = widths[level - 1];
            stages.push(ConvBnRelu::new(
                &mut scope.sub(&format!("l{level}")),
                in_c + skips[level - 1],
                out,
                1,
            )?);
            in_c = out;
        }
        Ok(Self {
            stages,
            head: Conv2d::new(&mut scope.sub("head"), in_c, 1, 1, 1, true)?,
            dropout: if dropout {
                config.effective_dropout()
            } else {
                0.0
            },
        })
    }

    /// `deep` is the task feature at L5 resolution; `taps` the encoder taps.
    pub fn decode(&self, deep: &Tensor, taps: &[FeatureMap], pass: &mut Pass) -> Result<Tensor> {
        if taps.len() != DEPTH {
            return Err(Error::shape(format!(
                "expected {DEPTH} taps, got {}",
                taps.len()
            )));
        }
        let mut y = deep.clone();
        for (stage, level) in self.stages.iter().zip((1..=4).rev()) {
            let skip = &taps[level - 1].data;
            let (_, _, h, w) = skip.dims4()?;
            y = resize_bilinear(&y, h, w)?;
            y = stage.forward(&Tensor::cat(&[&y, skip], 1)?, pass)?;
            // lower three decoder levels carry MC dropout
            if level >= 2 {
                y = pass.dropout(&y, self.dropout)?;
            }
        }
        self.head.forward(&y)
    }
}

/// `image * region_prob`, elementwise. Both `(B, 1, H, W)`.
pub fn mask_image(image: &Tensor, region_prob: &Tensor) -> Result<Tensor> {
    if image.dims() != region_prob.dims() {
        return Err(Error::shape(format!(
            "image {:?} and region probability {:?} differ in shape",
            image.dims(),
            region_prob.dims()
        )));
    }
    Ok(image.mul(region_prob)?)
}

/// Hard version used at inference: the mask is `region_prob > 0.5`.
pub fn hard_mask_image(image: &Tensor, region_prob: &Tensor) -> Result<Tensor> {
    let mask = region_prob.gt(0.5)?.to_dtype(image.dtype())?;
    mask_image(image, &mask)
}
