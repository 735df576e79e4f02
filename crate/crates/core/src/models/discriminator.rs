use candle_core::Tensor;

use super::{check_positive_dims, conv_params, DiscriminatorConfig, LayerRow};
use crate::error::{Error, Result};
use crate::nn::{instance_norm, leaky_relu, Conv2d, Init, ParamStore};

const PADDING: usize = 1;

pub(super) struct PatchDiscriminator {
    in_channels: usize,
    slope: f64,
    min_input: usize,
    blocks: Vec<Conv2d>,
}

impl PatchDiscriminator {
    pub(super) fn new(cfg: &DiscriminatorConfig, ps: &mut ParamStore) -> Result<Self> {
        let mut cin = cfg.in_channels;
        let mut blocks = Vec::with_capacity(5);
        for (i, (&cout, &stride)) in cfg.widths().iter().zip(&cfg.strides).enumerate() {
            blocks.push(ps.conv2d(
                &format!("block{}", i + 1),
                cin,
                cout,
                cfg.kernel,
                stride,
                PADDING,
                Init::Normal(0.02),
            )?);
            cin = cout;
        }
        Ok(Self {
            in_channels: cfg.in_channels,
            slope: cfg.leaky_slope,
            min_input: receptive_field(cfg).0,
            blocks,
        })
    }

    /// Raw (pre-sigmoid) score map, one unit per input patch.
    pub(super) fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (_, _, h, w) = check_positive_dims(x, self.in_channels, "discriminator")?;
        if h < self.min_input || w < self.min_input {
            return Err(Error::Shape(format!(
                "discriminator input {h}x{w} is smaller than its {0}x{0} receptive field; \
                 use inputs of at least {0}x{0}",
                self.min_input
            )));
        }
        let last = self.blocks.len() - 1;
        let mut y = x.clone();
        for (i, conv) in self.blocks.iter().enumerate() {
            y = conv.forward(&y)?;
            if i == last {
                break;
            }
            if i > 0 {
                y = instance_norm(&y)?;
            }
            y = leaky_relu(&y, self.slope)?;
        }
        Ok(y)
    }

    pub(super) fn convolutions(&self) -> Vec<&Conv2d> {
        self.blocks.iter().collect()
    }
}

fn conv_out(size: usize, kernel: usize, stride: usize) -> Option<usize> {
    (size + 2 * PADDING).checked_sub(kernel).map(|v| v / stride + 1)
}

/// Input patch seen by one output unit, via the backward recurrence
/// `r_in = r_out * stride + (kernel - stride)` starting from `r = 1`.
pub fn receptive_field(cfg: &DiscriminatorConfig) -> (usize, usize) {
    let r = cfg
        .strides
        .iter()
        .rev()
        .fold(1usize, |r, &s| r * s + cfg.kernel.saturating_sub(s));
    (r, r)
}

pub(super) fn layer_table(cfg: &DiscriminatorConfig, h: usize, w: usize) -> Result<Vec<LayerRow>> {
    let (rf, _) = receptive_field(cfg);
    if h < rf || w < rf {
        return Err(Error::Shape(format!(
            "discriminator input {h}x{w} is smaller than its {rf}x{rf} receptive field"
        )));
    }
    let (mut hh, mut ww, mut cin) = (h, w, cfg.in_channels);
    let mut rows = Vec::new();
    for (i, (&cout, &s)) in cfg.widths().iter().zip(&cfg.strides).enumerate() {
        hh = conv_out(hh, cfg.kernel, s).ok_or_else(|| Error::Shape("input too small".into()))?;
        ww = conv_out(ww, cfg.kernel, s).ok_or_else(|| Error::Shape("input too small".into()))?;
        rows.push(LayerRow {
            name: format!("block{} {k}x{k}/{s}", i + 1, k = cfg.kernel),
            output_shape: [1, cout, hh, ww],
            params: conv_params(cin, cout, cfg.kernel),
            is_conv: true,
        });
        cin = cout;
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cfg_with(kernel: usize, strides: Vec<usize>) -> DiscriminatorConfig {
        DiscriminatorConfig {
            kernel,
            n_blocks: strides.len(),
            strides,
            ..DiscriminatorConfig::default()
        }
    }

    #[test]
    fn default_receptive_field_is_70() {
        assert_eq!(receptive_field(&DiscriminatorConfig::default()), (70, 70));
    }

    #[test]
    fn hand_recurrences() {
        assert_eq!(receptive_field(&cfg_with(4, vec![1])), (4, 4));
        assert_eq!(receptive_field(&cfg_with(4, vec![2, 1])), (10, 10));
    }

    #[test]
    fn output_size_for_256_is_30() {
        let rows = layer_table(&DiscriminatorConfig::default(), 256, 256).unwrap();
        let sizes: Vec<usize> = rows.iter().map(|r| r.output_shape[2]).collect();
        assert_eq!(sizes, vec![128, 64, 32, 31, 30]);
    }

    proptest! {
        #[test]
        fn receptive_field_monotone(k in 1usize..8, dk in 0usize..4, s in prop::collection::vec(1usize..4, 1..6), bump in 0usize..6) {
            let base = receptive_field(&cfg_with(k, s.clone())).0;
            prop_assert!(receptive_field(&cfg_with(k + dk, s.clone())).0 >= base);
            let mut s2 = s.clone();
            let i = bump % s2.len();
            s2[i] += 1;
            prop_assert!(receptive_field(&cfg_with(k, s2)).0 >= base);
        }
    }
}
