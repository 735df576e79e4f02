//! Network architectures and their closed-form arithmetic.
//!
//! Output shape rules (input `N x C x H x W`):
//!
//! * generator / segmentor: `N x out x H x W`, requires `H, W` divisible by 4
//! * patch discriminator: each block maps `s -> floor((s + 2 - 4) / stride) + 1`;
//!   256 -> 128 -> 64 -> 32 -> 31 -> 30 with the default strides
//! * U-Net: `N x 1 x H x W`, requires `H, W` divisible by `2^(depth - 1)`
//!
//! Every model also exposes a layer table computed from its config alone,
//! which the `summary` command prints.

mod discriminator;
mod generator;
mod unet;

pub use discriminator::receptive_field;
pub use unet::UNetHead;

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Conv2d, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Norm {
    Instance,
    None,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinalActivation {
    Tanh,
    Logits,
}

/// ResNet encoder/decoder trunk shared by both generators and the segmentor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    pub base_width: usize,
    pub n_res_blocks: usize,
    pub norm: Norm,
    pub final_activation: FinalActivation,
}

impl GeneratorConfig {
    pub fn generator(base_width: usize, n_res_blocks: usize) -> Self {
        Self {
            in_channels: 1,
            out_channels: 1,
            base_width,
            n_res_blocks,
            norm: Norm::Instance,
            final_activation: FinalActivation::Tanh,
        }
    }

    pub fn segmentor(base_width: usize, n_res_blocks: usize) -> Self {
        Self {
            out_channels: 2,
            final_activation: FinalActivation::Logits,
            ..Self::generator(base_width, n_res_blocks)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_res_blocks < 1 {
            return Err(Error::Config("generator.res_blocks must be >= 1".into()));
        }
        if self.base_width < 4 {
            return Err(Error::Config("generator.base_width must be >= 4".into()));
        }
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::Config("generator channel counts must be >= 1".into()));
        }
        Ok(())
    }
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self::generator(64, 9)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiscriminatorConfig {
    pub in_channels: usize,
    pub base_width: usize,
    pub n_blocks: usize,
    pub kernel: usize,
    pub strides: Vec<usize>,
    pub leaky_slope: f64,
}

impl DiscriminatorConfig {
    pub fn with_width(base_width: usize) -> Self {
        Self {
            base_width,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_blocks != 5 || self.strides.len() != 5 {
            return Err(Error::Config("discriminator must have exactly 5 blocks".into()));
        }
        if self.kernel == 0 || self.strides.contains(&0) {
            return Err(Error::Config("discriminator kernel and strides must be >= 1".into()));
        }
        if self.base_width == 0 || self.in_channels == 0 {
            return Err(Error::Config("disc.base_width must be >= 1".into()));
        }
        Ok(())
    }

    /// Channel widths of the five blocks.
    pub fn widths(&self) -> [usize; 5] {
        let w = self.base_width;
        [w, 2 * w, 4 * w, 8 * w, 1]
    }
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        Self {
            in_channels: 1,
            base_width: 64,
            n_blocks: 5,
            kernel: 4,
            strides: vec![2, 2, 2, 1, 1],
            leaky_slope: 0.2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UNetConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    pub depth: usize,
    pub base_width: usize,
    pub head: UNetHead,
}

impl UNetConfig {
    pub fn with_width(base_width: usize) -> Self {
        Self {
            base_width,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth < 2 {
            return Err(Error::Config("unet.depth must be >= 2".into()));
        }
        if self.base_width == 0 {
            return Err(Error::Config("unet.base_width must be >= 1".into()));
        }
        if self.in_channels == 0 || self.out_channels != 1 {
            return Err(Error::Config("unet must map 1+ channels to a single probability map".into()));
        }
        Ok(())
    }

    /// Spatial sizes must be divisible by this.
    pub fn size_multiple(&self) -> usize {
        1 << (self.depth - 1)
    }
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self {
            in_channels: 1,
            out_channels: 1,
            depth: 5,
            base_width: 64,
            head: UNetHead::Conv1x1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ArchConfig {
    Generator(GeneratorConfig),
    Discriminator(DiscriminatorConfig),
    UNet(UNetConfig),
    /// No layers; used for tallies of empty ensembles.
    Empty,
}

/// One row of an architecture summary.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LayerRow {
    pub name: String,
    pub output_shape: [usize; 4],
    pub params: usize,
    pub is_conv: bool,
}

enum Network {
    Generator(generator::Generator),
    Discriminator(discriminator::PatchDiscriminator),
    UNet(unet::UNet),
    Empty,
}

/// A built network: its config, its parameters and a forward pass.
pub struct Model {
    config: ArchConfig,
    params: ParamStore,
    net: Network,
}

impl std::fmt::Debug for Model {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Model")
            .field("config", &self.config)
            .field("params", &self.params)
            .finish()
    }
}

impl Model {
    pub fn config(&self) -> &ArchConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn parameter_count(&self) -> usize {
        self.params.parameter_count()
    }

    /// Forward pass on an `N x C x H x W` batch. Generators end in tanh, the
    /// segmentor returns raw 2-channel logits, the discriminator returns a
    /// raw score map and the U-Net returns sigmoid probabilities.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        match &self.net {
            Network::Generator(g) => g.forward(x),
            Network::Discriminator(d) => d.forward(x),
            Network::UNet(u) => crate::nn::sigmoid(&u.forward_logits(x)?),
            Network::Empty => Ok(x.clone()),
        }
    }

    /// U-Net pre-sigmoid output; identical to [`Model::forward`] for the
    /// other architectures.
    pub fn forward_logits(&self, x: &Tensor) -> Result<Tensor> {
        match &self.net {
            Network::UNet(u) => u.forward_logits(x),
            _ => self.forward(x),
        }
    }

    pub fn convolutions(&self) -> Vec<&Conv2d> {
        match &self.net {
            Network::Generator(g) => g.convolutions(),
            Network::Discriminator(d) => d.convolutions(),
            Network::UNet(u) => u.convolutions(),
            Network::Empty => Vec::new(),
        }
    }

    pub fn conv_layer_count(&self) -> usize {
        self.convolutions().len()
    }
}

pub fn build_generator(cfg: &GeneratorConfig, seed: u64) -> Result<Model> {
    cfg.validate()?;
    let mut params = ParamStore::new(seed);
    let g = generator::Generator::new(cfg, &mut params)?;
    Ok(Model {
        config: ArchConfig::Generator(cfg.clone()),
        params,
        net: Network::Generator(g),
    })
}

/// Same trunk as [`build_generator`] with a 2-channel logit head.
pub fn build_segmentor(cfg: &GeneratorConfig, seed: u64) -> Result<Model> {
    if cfg.out_channels != 2 || cfg.final_activation != FinalActivation::Logits {
        return Err(Error::Config(
            "segmentor needs out_channels = 2 and logits output".into(),
        ));
    }
    build_generator(cfg, seed)
}

pub fn build_patch_discriminator(cfg: &DiscriminatorConfig, seed: u64) -> Result<Model> {
    cfg.validate()?;
    let mut params = ParamStore::new(seed);
    let d = discriminator::PatchDiscriminator::new(cfg, &mut params)?;
    Ok(Model {
        config: ArchConfig::Discriminator(cfg.clone()),
        params,
        net: Network::Discriminator(d),
    })
}

pub fn build_unet(cfg: &UNetConfig, seed: u64) -> Result<Model> {
    cfg.validate()?;
    let mut params = ParamStore::new(seed);
    let u = unet::UNet::new(cfg, &mut params)?;
    Ok(Model {
        config: ArchConfig::UNet(cfg.clone()),
        params,
        net: Network::UNet(u),
    })
}

pub fn build_empty() -> Model {
    Model {
        config: ArchConfig::Empty,
        params: ParamStore::new(0),
        net: Network::Empty,
    }
}

pub fn build(cfg: &ArchConfig, seed: u64) -> Result<Model> {
    match cfg {
        ArchConfig::Generator(g) => build_generator(g, seed),
        ArchConfig::Discriminator(d) => build_patch_discriminator(d, seed),
        ArchConfig::UNet(u) => build_unet(u, seed),
        ArchConfig::Empty => Ok(build_empty()),
    }
}

/// Exact trainable scalar count of a built model.
pub fn count_parameters(model: &Model) -> usize {
    model.parameter_count()
}

fn conv_params(cin: usize, cout: usize, k: usize) -> usize {
    cout * cin * k * k + cout
}

/// Closed-form parameter tally from the config alone.
pub fn analytic_parameter_count(cfg: &ArchConfig) -> usize {
    match cfg {
        ArchConfig::Generator(g) => {
            let w = g.base_width;
            conv_params(g.in_channels, w, 7)
                + conv_params(w, 2 * w, 3)
                + conv_params(2 * w, 4 * w, 3)
                + g.n_res_blocks * 2 * conv_params(4 * w, 4 * w, 3)
                + conv_params(4 * w, 2 * w, 3)
                + conv_params(2 * w, w, 3)
                + conv_params(w, g.out_channels, 7)
        }
        ArchConfig::Discriminator(d) => {
            let widths = d.widths();
            let mut cin = d.in_channels;
            widths
                .iter()
                .map(|&cout| {
                    let p = conv_params(cin, cout, d.kernel);
                    cin = cout;
                    p
                })
                .sum()
        }
        ArchConfig::UNet(u) => {
            let w = |i: usize| u.base_width << i;
            let mut total = conv_params(u.in_channels, w(0), 3) + conv_params(w(0), w(0), 3);
            for i in 1..u.depth {
                total += conv_params(w(i - 1), w(i), 3) + conv_params(w(i), w(i), 3);
            }
            for i in (0..u.depth - 1).rev() {
                total += conv_params(w(i + 1), w(i), 2)
                    + conv_params(2 * w(i), w(i), 3)
                    + conv_params(w(i), w(i), 3);
            }
            total
                + match u.head {
                    UNetHead::Conv1x1 => conv_params(w(0), u.out_channels, 1),
                    UNetHead::Conv3x3Then1x1 => conv_params(w(0), 2, 3) + conv_params(2, u.out_channels, 1),
                }
        }
        ArchConfig::Empty => 0,
    }
}

/// Closed-form convolution-layer census.
pub fn analytic_conv_count(cfg: &ArchConfig) -> usize {
    match cfg {
        ArchConfig::Generator(g) => 3 + 2 * g.n_res_blocks + 3,
        ArchConfig::Discriminator(d) => d.n_blocks,
        ArchConfig::UNet(u) => {
            2 * u.depth
                + 3 * (u.depth - 1)
                + match u.head {
                    UNetHead::Conv1x1 => 1,
                    UNetHead::Conv3x3Then1x1 => 2,
                }
        }
        ArchConfig::Empty => 0,
    }
}

/// Per-layer table for an `1 x C x h x w` input.
pub fn layer_table(cfg: &ArchConfig, h: usize, w: usize) -> Result<Vec<LayerRow>> {
    match cfg {
        ArchConfig::Generator(g) => generator::layer_table(g, h, w),
        ArchConfig::Discriminator(d) => discriminator::layer_table(d, h, w),
        ArchConfig::UNet(u) => unet::layer_table(u, h, w),
        ArchConfig::Empty => Ok(Vec::new()),
    }
}

/// Renders a layer table as aligned text with a total line.
pub fn format_layer_table(title: &str, rows: &[LayerRow]) -> String {
    let mut out = format!("{title}\n");
    out += &format!("{:<28} {:>24} {:>14}\n", "layer", "output shape", "params");
    out += &format!("{}\n", "-".repeat(68));
    for r in rows {
        let shape = format!("{:?}", r.output_shape);
        out += &format!("{:<28} {:>24} {:>14}\n", r.name, shape, r.params);
    }
    let total: usize = rows.iter().map(|r| r.params).sum();
    let convs = rows.iter().filter(|r| r.is_conv).count();
    out += &format!("{}\n", "-".repeat(68));
    out += &format!("total parameters: {total}   convolution layers: {convs}\n");
    out
}

pub(crate) fn check_positive_dims(x: &Tensor, in_channels: usize, what: &str) -> Result<(usize, usize, usize, usize)> {
    let (n, c, h, w) = x
        .dims4()
        .map_err(|_| Error::Shape(format!("{what} expects an N x C x H x W tensor, got {:?}", x.dims())))?;
    if c != in_channels {
        return Err(Error::Shape(format!(
            "{what} expects {in_channels} input channel(s), got {c}"
        )));
    }
    Ok((n, c, h, w))
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{Device, Tensor};

    #[test]
    fn generator_tally_at_full_width() {
        // Hand tally for the 1-channel, 64-wide, 9-block trunk.
        let cfg = ArchConfig::Generator(GeneratorConfig::default());
        assert_eq!(analytic_parameter_count(&cfg), 11_365_633);
    }

    #[test]
    fn discriminator_first_block_params() {
        assert_eq!(conv_params(1, 64, 4), 1088);
        let cfg = ArchConfig::Discriminator(DiscriminatorConfig::default());
        assert_eq!(analytic_parameter_count(&cfg), 2_762_689);
    }

    #[test]
    fn unet_census_and_tally() {
        let cfg = ArchConfig::UNet(UNetConfig::default());
        assert_eq!(analytic_conv_count(&cfg), 23);
        assert_eq!(analytic_parameter_count(&cfg), 31_030_593);
        let keras = ArchConfig::UNet(UNetConfig {
            head: UNetHead::Conv3x3Then1x1,
            ..UNetConfig::default()
        });
        assert_eq!(analytic_parameter_count(&keras), 31_031_685);
        assert_eq!(analytic_conv_count(&keras), 24);
    }

    #[test]
    fn segmentor_differs_only_in_head() {
        let g = analytic_parameter_count(&ArchConfig::Generator(GeneratorConfig::generator(64, 9)));
        let s = analytic_parameter_count(&ArchConfig::Generator(GeneratorConfig::segmentor(64, 9)));
        // one extra 7x7 output filter over 64 channels plus its bias
        assert_eq!(s - g, 64 * 49 + 1);
    }

    #[test]
    fn empty_model_has_no_parameters() {
        assert_eq!(count_parameters(&build_empty()), 0);
        assert_eq!(analytic_parameter_count(&ArchConfig::Empty), 0);
    }

    #[test]
    fn layer_tables_sum_to_tally() {
        for cfg in [
            ArchConfig::Generator(GeneratorConfig::generator(16, 3)),
            ArchConfig::Generator(GeneratorConfig::segmentor(8, 1)),
            ArchConfig::Discriminator(DiscriminatorConfig::with_width(16)),
            ArchConfig::UNet(UNetConfig::with_width(8)),
        ] {
            let rows = layer_table(&cfg, 256, 256).unwrap();
            let total: usize = rows.iter().map(|r| r.params).sum();
            assert_eq!(total, analytic_parameter_count(&cfg), "{cfg:?}");
            assert_eq!(rows.iter().filter(|r| r.is_conv).count(), analytic_conv_count(&cfg));
        }
    }

    #[test]
    fn segmentor_softmax_sums_to_one() {
        let m = build_segmentor(&GeneratorConfig::segmentor(4, 1), 0).unwrap();
        let x = Tensor::randn(0f32, 1., (1, 1, 16, 16), &Device::Cpu).unwrap();
        let y = m.forward(&x).unwrap();
        assert_eq!(y.dims(), &[1, 2, 16, 16]);
        let p = crate::nn::channel_softmax(&y).unwrap().sum_keepdim(1).unwrap();
        let v: Vec<f32> = p.flatten_all().unwrap().to_vec1().unwrap();
        assert!(v.iter().all(|s| (s - 1.0).abs() < 1e-6));
    }
}
