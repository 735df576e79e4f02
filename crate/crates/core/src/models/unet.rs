//! Same-padding U-Net: per level two 3x3 conv + ReLU, 2x2 max pooling down,
//! nearest x2 upsampling + 2x2 conv up, skip concatenation, sigmoid head.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use super::{check_positive_dims, conv_params, LayerRow, UNetConfig};
use crate::error::{Error, Result};
use crate::nn::{upsample2x, Conv2d, Init, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UNetHead {
    /// A single 1x1 convolution to one channel (23 conv layers at depth 5).
    Conv1x1,
    /// 3x3 conv to two channels + ReLU, then 1x1 to one channel; the head of
    /// the widely used Keras U-Net (24 conv layers, 31,031,685 parameters).
    Conv3x3Then1x1,
}

struct DoubleConv {
    a: Conv2d,
    b: Conv2d,
}

impl DoubleConv {
    fn new(ps: &mut ParamStore, name: &str, cin: usize, cout: usize) -> Result<Self> {
        Ok(Self {
            a: ps.conv2d(&format!("{name}.conv1"), cin, cout, 3, 1, 1, Init::HeNormal)?,
            b: ps.conv2d(&format!("{name}.conv2"), cout, cout, 3, 1, 1, Init::HeNormal)?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = self.a.forward(x)?.relu()?;
        Ok(self.b.forward(&y)?.relu()?)
    }
}

struct UpStage {
    up: Conv2d,
    conv: DoubleConv,
}

pub(super) struct UNet {
    in_channels: usize,
    multiple: usize,
    down: Vec<DoubleConv>,
    up: Vec<UpStage>,
    head: Vec<Conv2d>,
}

impl UNet {
    pub(super) fn new(cfg: &UNetConfig, ps: &mut ParamStore) -> Result<Self> {
        let w = |i: usize| cfg.base_width << i;
        let mut down = Vec::with_capacity(cfg.depth);
        let mut cin = cfg.in_channels;
        for i in 0..cfg.depth {
            down.push(DoubleConv::new(ps, &format!("down{i}"), cin, w(i))?);
            cin = w(i);
        }
        let mut up = Vec::with_capacity(cfg.depth - 1);
        for i in (0..cfg.depth - 1).rev() {
            up.push(UpStage {
                up: ps.conv2d(&format!("up{i}.upconv"), w(i + 1), w(i), 2, 1, 0, Init::HeNormal)?,
                conv: DoubleConv::new(ps, &format!("up{i}"), 2 * w(i), w(i))?,
            });
        }
        let head = match cfg.head {
            UNetHead::Conv1x1 => vec![ps.conv2d("head.conv", w(0), cfg.out_channels, 1, 1, 0, Init::HeNormal)?],
            UNetHead::Conv3x3Then1x1 => vec![
                ps.conv2d("head.conv3", w(0), 2, 3, 1, 1, Init::HeNormal)?,
                ps.conv2d("head.conv", 2, cfg.out_channels, 1, 1, 0, Init::HeNormal)?,
            ],
        };
        Ok(Self {
            in_channels: cfg.in_channels,
            multiple: cfg.size_multiple(),
            down,
            up,
            head,
        })
    }

    pub(super) fn forward_logits(&self, x: &Tensor) -> Result<Tensor> {
        let (_, _, h, w) = check_positive_dims(x, self.in_channels, "unet")?;
        if h % self.multiple != 0 || w % self.multiple != 0 {
            return Err(Error::Shape(format!(
                "unet input height and width must be divisible by {}, got {h}x{w}",
                self.multiple
            )));
        }
        let mut skips = Vec::with_capacity(self.down.len());
        let mut y = x.clone();
        for (i, block) in self.down.iter().enumerate() {
            if i > 0 {
                y = y.max_pool2d(2)?;
            }
            y = block.forward(&y)?;
            skips.push(y.clone());
        }
        skips.pop();
        for stage in &self.up {
            // "same" 2x2 conv: pad one row/column on the bottom/right
            let u = upsample2x(&y)?
                .pad_with_zeros(2, 0, 1)?
                .pad_with_zeros(3, 0, 1)?;
            let u = stage.up.forward(&u)?.relu()?;
            let skip = skips.pop().expect("one skip per up stage");
            y = stage.conv.forward(&Tensor::cat(&[&skip, &u], 1)?)?;
        }
        let last = self.head.len() - 1;
        for (i, conv) in self.head.iter().enumerate() {
            y = conv.forward(&y)?;
            if i < last {
                y = y.relu()?;
            }
        }
        Ok(y)
    }

    pub(super) fn convolutions(&self) -> Vec<&Conv2d> {
        let mut v = Vec::new();
        for d in &self.down {
            v.extend([&d.a, &d.b]);
        }
        for u in &self.up {
            v.extend([&u.up, &u.conv.a, &u.conv.b]);
        }
        v.extend(self.head.iter());
        v
    }
}

pub(super) fn layer_table(cfg: &UNetConfig, h: usize, w: usize) -> Result<Vec<LayerRow>> {
    let m = cfg.size_multiple();
    if h == 0 || w == 0 || !h.is_multiple_of(m) || !w.is_multiple_of(m) {
        return Err(Error::Shape(format!(
            "unet input height and width must be divisible by {m}, got {h}x{w}"
        )));
    }
    let bw = |i: usize| cfg.base_width << i;
    let conv = |name: String, c: usize, lvl: usize, params: usize| LayerRow {
        name,
        output_shape: [1, c, h >> lvl, w >> lvl],
        params,
        is_conv: true,
    };
    let mut rows = Vec::new();
    let mut cin = cfg.in_channels;
    for i in 0..cfg.depth {
        if i > 0 {
            rows.push(LayerRow {
                name: format!("pool{i} 2x2"),
                output_shape: [1, cin, h >> i, w >> i],
                params: 0,
                is_conv: false,
            });
        }
        rows.push(conv(format!("down{i}.conv1 3x3"), bw(i), i, conv_params(cin, bw(i), 3)));
        rows.push(conv(format!("down{i}.conv2 3x3"), bw(i), i, conv_params(bw(i), bw(i), 3)));
        cin = bw(i);
    }
    for i in (0..cfg.depth - 1).rev() {
        rows.push(conv(format!("up{i}.upconv x2+2x2"), bw(i), i, conv_params(bw(i + 1), bw(i), 2)));
        rows.push(conv(format!("up{i}.conv1 3x3"), bw(i), i, conv_params(2 * bw(i), bw(i), 3)));
        rows.push(conv(format!("up{i}.conv2 3x3"), bw(i), i, conv_params(bw(i), bw(i), 3)));
    }
    match cfg.head {
        UNetHead::Conv1x1 => {
            rows.push(conv("head 1x1".into(), cfg.out_channels, 0, conv_params(bw(0), cfg.out_channels, 1)));
        }
        UNetHead::Conv3x3Then1x1 => {
            rows.push(conv("head.conv3 3x3".into(), 2, 0, conv_params(bw(0), 2, 3)));
            rows.push(conv("head 1x1".into(), cfg.out_channels, 0, conv_params(2, cfg.out_channels, 1)));
        }
    }
    Ok(rows)
}
