use candle_core::Tensor;

use crate::error::Result;
use crate::nn::{max_pool2, resize_bilinear, BatchNorm2d, Conv2d, Pass, Scope};

/// 3x3 convolution, batch norm, ReLU.
pub struct ConvBnRelu {
    conv: Conv2d,
    bn: BatchNorm2d,
}

impl ConvBnRelu {
    pub fn new(scope: &mut Scope, in_c: usize, out_c: usize, dilation: usize) -> Result<Self> {
        Ok(Self {
            conv: Conv2d::new(&mut scope.sub("conv"), in_c, out_c, 3, dilation, false)?,
            bn: BatchNorm2d::new(&mut scope.sub("bn"), out_c)?,
        })
    }

    pub fn forward(&self, x: &Tensor, pass: &Pass) -> Result<Tensor> {
        Ok(self.bn.forward(&self.conv.forward(x)?, pass)?.relu()?)
    }
}

/// Residual nested U block: an inner encoder-decoder of `height` levels
/// whose output is added to the block's input projection. Inner levels
/// pool by two while the map stays at least 8 px; the bottom convolution
/// is dilated.
pub struct NestedUBlock {
    input: ConvBnRelu,
    down: Vec<ConvBnRelu>,
    bottom: ConvBnRelu,
    up: Vec<ConvBnRelu>,
}

impl NestedUBlock {
    pub fn new(
        scope: &mut Scope,
        in_c: usize,
        mid_c: usize,
        out_c: usize,
        height: usize,
        dilation: usize,
    ) -> Result<Self> {
        let height = height.max(2);
        let input = ConvBnRelu::new(&mut scope.sub("in"), in_c, out_c, 1)?;
        let mut down = Vec::with_capacity(height - 1);
        for i in 0..height - 1 {
            let c = if i == 0 { out_c } else { mid_c };
            down.push(ConvBnRelu::new(
                &mut scope.sub(&format!("down{i}")),
                c,
                mid_c,
                1,
            )?);
        }
        let bottom = ConvBnRelu::new(&mut scope.sub("bottom"), mid_c, mid_c, dilation)?;
        let mut up = Vec::with_capacity(height - 1);
        for i in 0..height - 1 {
            let out = if i == 0 { out_c } else { mid_c };
            up.push(ConvBnRelu::new(
                &mut scope.sub(&format!("up{i}")),
                2 * mid_c,
                out,
                1,
            )?);
        }
        Ok(Self {
            input,
            down,
            bottom,
            up,
        })
    }

    pub fn forward(&self, x: &Tensor, pass: &Pass) -> Result<Tensor> {
        let hx = self.input.forward(x, pass)?;
        let mut skips: Vec<Tensor> = Vec::with_capacity(self.down.len());
        let mut cur = hx.clone();
        for (i, conv) in self.down.iter().enumerate() {
            if i > 0 {
                let (_, _, h, w) = cur.dims4()?;
                if h >= 16 && w >= 16 && h % 2 == 0 && w % 2 == 0 {
                    cur = max_pool2(&cur)?;
                }
            }
            cur = conv.forward(&cur, pass)?;
            skips.push(cur.clone());
        }
        let mut y = self.bottom.forward(&cur, pass)?;
        for i in (0..self.up.len()).rev() {
            let skip = &skips[i];
            let (_, _, h, w) = skip.dims4()?;
            let y_up = resize_bilinear(&y, h, w)?;
            y = self.up[i].forward(&Tensor::cat(&[&y_up, skip], 1)?, pass)?;
        }
        Ok((y + hx)?)
    }
}
