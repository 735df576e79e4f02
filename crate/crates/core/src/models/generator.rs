//! 9-block ResNet encoder/decoder (CycleGAN layout): reflection-padded 7x7
//! stem, two stride-2 downsamplings, residual blocks, two nearest-upsample +
//! 3x3 conv stages, reflection-padded 7x7 head.

use candle_core::Tensor;

use super::{check_positive_dims, conv_params, FinalActivation, GeneratorConfig, LayerRow, Norm};
use crate::error::{Error, Result};
use crate::nn::{instance_norm, reflect_pad, upsample2x, Conv2d, Init, ParamStore};

const GAN_INIT: Init = Init::Normal(0.02);

struct ResBlock {
    conv1: Conv2d,
    conv2: Conv2d,
}

pub(super) struct Generator {
    norm: Norm,
    final_activation: FinalActivation,
    in_channels: usize,
    stem: Conv2d,
    down: [Conv2d; 2],
    blocks: Vec<ResBlock>,
    up: [Conv2d; 2],
    head: Conv2d,
}

impl Generator {
    pub(super) fn new(cfg: &GeneratorConfig, ps: &mut ParamStore) -> Result<Self> {
        let w = cfg.base_width;
        let stem = ps.conv2d("stem", cfg.in_channels, w, 7, 1, 0, GAN_INIT)?;
        let down = [
            ps.conv2d("down1", w, 2 * w, 3, 2, 1, GAN_INIT)?,
            ps.conv2d("down2", 2 * w, 4 * w, 3, 2, 1, GAN_INIT)?,
        ];
        let blocks = (0..cfg.n_res_blocks)
            .map(|i| {
                Ok(ResBlock {
                    conv1: ps.conv2d(&format!("res{i:02}.conv1"), 4 * w, 4 * w, 3, 1, 0, GAN_INIT)?,
                    conv2: ps.conv2d(&format!("res{i:02}.conv2"), 4 * w, 4 * w, 3, 1, 0, GAN_INIT)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let up = [
            ps.conv2d("up1", 4 * w, 2 * w, 3, 1, 1, GAN_INIT)?,
            ps.conv2d("up2", 2 * w, w, 3, 1, 1, GAN_INIT)?,
        ];
        let head = ps.conv2d("head", w, cfg.out_channels, 7, 1, 0, GAN_INIT)?;
        Ok(Self {
            norm: cfg.norm,
            final_activation: cfg.final_activation,
            in_channels: cfg.in_channels,
            stem,
            down,
            blocks,
            up,
            head,
        })
    }

    fn norm(&self, x: Tensor) -> Result<Tensor> {
        match self.norm {
            Norm::Instance => instance_norm(&x),
            Norm::None => Ok(x),
        }
    }

    pub(super) fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (_, _, h, w) = check_positive_dims(x, self.in_channels, "generator")?;
        if h % 4 != 0 || w % 4 != 0 {
            return Err(Error::Shape(format!(
                "generator input height and width must be divisible by 4, got {h}x{w}"
            )));
        }
        let mut y = self.norm(self.stem.forward(&reflect_pad(x, 3)?)?)?.relu()?;
        for conv in &self.down {
            y = self.norm(conv.forward(&y)?)?.relu()?;
        }
        for block in &self.blocks {
            let r = self.norm(block.conv1.forward(&reflect_pad(&y, 1)?)?)?.relu()?;
            let r = self.norm(block.conv2.forward(&reflect_pad(&r, 1)?)?)?;
            y = (y + r)?;
        }
        for conv in &self.up {
            let up = upsample2x(&y)?;
            y = self.norm(conv.forward(&up)?)?.relu()?;
        }
        let out = self.head.forward(&reflect_pad(&y, 3)?)?;
        match self.final_activation {
            FinalActivation::Tanh => Ok(out.tanh()?),
            FinalActivation::Logits => Ok(out),
        }
    }

    pub(super) fn convolutions(&self) -> Vec<&Conv2d> {
        let mut v = vec![&self.stem, &self.down[0], &self.down[1]];
        for b in &self.blocks {
            v.push(&b.conv1);
            v.push(&b.conv2);
        }
        v.extend([&self.up[0], &self.up[1], &self.head]);
        v
    }
}

pub(super) fn layer_table(cfg: &GeneratorConfig, h: usize, w: usize) -> Result<Vec<LayerRow>> {
    if !h.is_multiple_of(4) || !w.is_multiple_of(4) || h == 0 || w == 0 {
        return Err(Error::Shape(format!(
            "generator input height and width must be divisible by 4, got {h}x{w}"
        )));
    }
    let bw = cfg.base_width;
    let row = |name: String, c: usize, hh: usize, ww: usize, params: usize| LayerRow {
        name,
        output_shape: [1, c, hh, ww],
        params,
        is_conv: true,
    };
    let mut rows = vec![
        row("stem 7x7".into(), bw, h, w, conv_params(cfg.in_channels, bw, 7)),
        row("down1 3x3/2".into(), 2 * bw, h / 2, w / 2, conv_params(bw, 2 * bw, 3)),
        row("down2 3x3/2".into(), 4 * bw, h / 4, w / 4, conv_params(2 * bw, 4 * bw, 3)),
    ];
    for i in 0..cfg.n_res_blocks {
        for j in 1..=2 {
            rows.push(row(
                format!("res{i:02}.conv{j} 3x3"),
                4 * bw,
                h / 4,
                w / 4,
                conv_params(4 * bw, 4 * bw, 3),
            ));
        }
    }
    rows.push(row("up1 x2+3x3".into(), 2 * bw, h / 2, w / 2, conv_params(4 * bw, 2 * bw, 3)));
    rows.push(row("up2 x2+3x3".into(), bw, h, w, conv_params(2 * bw, bw, 3)));
    rows.push(row("head 7x7".into(), cfg.out_channels, h, w, conv_params(bw, cfg.out_channels, 7)));
    Ok(rows)
}
