//! The two training stages: the synthesis network (two generators, a
//! segmentor on the A→B path and two patch discriminators) and the U-Net
//! segmenter, plus synthesis of B-style slices from a trained checkpoint.
//!
//! Artifacts of a training directory:
//!
//! ```text
//! <out>/loss_log.csv
//! <out>/run.json
//! <out>/checkpoints/epoch_NNNN/{manifest.json, <net>.safetensors, <net>.adam.safetensors}
//! ```

mod checkpoint;
mod essnet;
mod log_csv;
mod synth;
mod unet;

pub use checkpoint::{
    latest_checkpoint, list_checkpoints, load_checkpoint_manifest, resolve_checkpoint, save_checkpoint,
    CheckpointManifest, Stage, CHECKPOINT_SCHEMA_VERSION,
};
pub use essnet::{
    discriminator_update, essnet_training_step, generator_update, train_essnet, EssNet, Fakes,
};
pub use log_csv::{parse_loss_log, LossLog, LossLogTable, ESSNET_LOG_HEADER, UNET_LOG_HEADER};
pub use synth::{synthesize, synthesize_with_stats, SynthOutcome};
pub use unet::{load_unet, select_unet_training, train_unet, unet_training_step, UNetTrainer};

use std::path::{Path, PathBuf};

use candle_core::{Device, Tensor};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::{derive_seed, ImageSlice};
use crate::error::{Error, Result};
use crate::losses::{AdversarialMode, LossWeights};
use crate::models::{DiscriminatorConfig, GeneratorConfig, UNetConfig, UNetHead};

pub const LOSS_LOG_FILE: &str = "loss_log.csv";
pub const RUN_FILE: &str = "run.json";
pub const CHECKPOINTS_DIR: &str = "checkpoints";

/// Optimizer and schedule settings of the synthesis stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EssNetTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Learning rate of both generators and the segmentor.
    pub lr_g: f64,
    /// Learning rate of both discriminators.
    pub lr_d: f64,
    pub beta1: f64,
    pub weights: LossWeights,
    pub adversarial: AdversarialMode,
    pub seed: u64,
    /// Drop the segmentor entirely (plain cycle GAN).
    pub ablation_no_seg: bool,
    pub image_size: u32,
    pub generator_width: usize,
    pub res_blocks: usize,
    pub disc_width: usize,
    pub checkpoint_every: usize,
    pub keep_checkpoints: usize,
}

impl Default for EssNetTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 1,
            lr_g: 1e-4,
            lr_d: 2e-4,
            beta1: 0.5,
            weights: LossWeights::default(),
            adversarial: AdversarialMode::NonSaturating,
            seed: 0,
            ablation_no_seg: false,
            image_size: 256,
            generator_width: 64,
            res_blocks: 9,
            disc_width: 64,
            checkpoint_every: 10,
            keep_checkpoints: 3,
        }
    }
}

impl EssNetTrainConfig {
    pub fn generator_config(&self) -> GeneratorConfig {
        GeneratorConfig::generator(self.generator_width, self.res_blocks)
    }

    pub fn segmentor_config(&self) -> GeneratorConfig {
        GeneratorConfig::segmentor(self.generator_width, self.res_blocks)
    }

    pub fn discriminator_config(&self) -> DiscriminatorConfig {
        DiscriminatorConfig::with_width(self.disc_width)
    }

    pub fn diagnostics(&self) -> Vec<String> {
        let mut d = Vec::new();
        if self.epochs == 0 {
            d.push("essnet.epochs must be >= 1".into());
        }
        if self.batch_size == 0 {
            d.push("essnet.batch_size must be >= 1".into());
        }
        for (name, lr) in [("essnet.lr_g", self.lr_g), ("essnet.lr_d", self.lr_d)] {
            if !(lr.is_finite() && lr > 0.0) {
                d.push(format!("{name} must be > 0"));
            }
        }
        if !(0.0..1.0).contains(&self.beta1) {
            d.push("essnet.beta1 must be in [0, 1)".into());
        }
        if self.checkpoint_every == 0 {
            d.push("essnet.checkpoint_every must be >= 1".into());
        }
        if self.keep_checkpoints == 0 {
            d.push("essnet.keep_checkpoints must be >= 1".into());
        }
        if self.image_size == 0 || !self.image_size.is_multiple_of(4) {
            d.push("image_size must be a positive multiple of 4".into());
        }
        d.extend(self.weights.diagnostics());
        for r in [
            self.generator_config().validate(),
            self.discriminator_config().validate(),
        ] {
            if let Err(e) = r {
                d.push(e.to_string());
            }
        }
        d
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.diagnostics();
        if d.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(d.join("; ")))
        }
    }
}

/// Optimizer and schedule settings of the segmentation stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UNetTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub seed: u64,
    pub image_size: u32,
    pub base_width: usize,
    pub depth: usize,
    pub head: UNetHead,
    pub checkpoint_every: usize,
    pub keep_checkpoints: usize,
}

impl Default for UNetTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 300,
            batch_size: 2,
            lr: 1e-4,
            beta1: 0.9,
            seed: 0,
            image_size: 256,
            base_width: 64,
            depth: 5,
            head: UNetHead::Conv1x1,
            checkpoint_every: 10,
            keep_checkpoints: 3,
        }
    }
}

impl UNetTrainConfig {
    pub fn model_config(&self) -> UNetConfig {
        UNetConfig {
            depth: self.depth,
            head: self.head,
            ..UNetConfig::with_width(self.base_width)
        }
    }

    /// `ceil(n_images / batch_size)`.
    pub fn steps_per_epoch(&self, n_images: usize) -> usize {
        n_images.div_ceil(self.batch_size.max(1))
    }

    pub fn diagnostics(&self) -> Vec<String> {
        let mut d = Vec::new();
        if self.epochs == 0 {
            d.push("unet.epochs must be >= 1".into());
        }
        if self.batch_size == 0 {
            d.push("unet.batch_size must be >= 1".into());
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            d.push("unet.lr must be > 0".into());
        }
        if !(0.0..1.0).contains(&self.beta1) {
            d.push("unet.beta1 must be in [0, 1)".into());
        }
        if self.checkpoint_every == 0 {
            d.push("unet.checkpoint_every must be >= 1".into());
        }
        if self.keep_checkpoints == 0 {
            d.push("unet.keep_checkpoints must be >= 1".into());
        }
        match self.model_config().validate() {
            Err(e) => d.push(e.to_string()),
            Ok(()) => {
                let m = self.model_config().size_multiple() as u32;
                if self.image_size == 0 || !self.image_size.is_multiple_of(m) {
                    d.push(format!("image_size must be a positive multiple of {m} for unet.depth {}", self.depth));
                }
            }
        }
        d
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.diagnostics();
        if d.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(d.join("; ")))
        }
    }
}

/// Record of one training (or synthesis) run, written to `run.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingRun {
    pub run_id: String,
    pub stage: Stage,
    pub config: serde_json::Value,
    pub loss_log: PathBuf,
    pub checkpoints: Vec<PathBuf>,
    pub steps: u64,
    pub seconds_per_epoch: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub frames_per_second: Option<f64>,
}

impl TrainingRun {
    pub fn save(&self, out_dir: &Path) -> Result<()> {
        let path = out_dir.join(RUN_FILE);
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::json("run record", e))?;
        std::fs::write(&path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(out_dir: &Path) -> Result<Self> {
        let path = out_dir.join(RUN_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), e))
    }
}

/// `"run-"` followed by the first 12 hex digits of the SHA-256 of `text`.
pub fn run_id_for(text: &str) -> String {
    let digest = Sha256::digest(text.as_bytes());
    let hex: String = digest.iter().take(6).map(|b| format!("{b:02x}")).collect();
    format!("run-{hex}")
}

/// Initialization seed of one named network, independent of which other
/// networks are built.
pub fn network_seed(master: u64, name: &str) -> u64 {
    let tag = name
        .bytes()
        .fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3));
    derive_seed(master, tag, 0)
}

fn check_same_size(slices: &[&ImageSlice]) -> Result<(usize, usize)> {
    let first = slices
        .first()
        .ok_or_else(|| Error::InvalidInput("empty batch".into()))?;
    let (w, h) = (first.width, first.height);
    if let Some(s) = slices.iter().find(|s| (s.width, s.height) != (w, h)) {
        return Err(Error::Shape(format!(
            "slice {} is {}x{}, batch expects {w}x{h}",
            s.id, s.width, s.height
        )));
    }
    Ok((h as usize, w as usize))
}

/// Stacks slices into an `N x 1 x H x W` f32 batch.
pub fn images_tensor(slices: &[&ImageSlice]) -> Result<Tensor> {
    let (h, w) = check_same_size(slices)?;
    let data: Vec<f32> = slices.iter().flat_map(|s| s.pixels.iter().copied()).collect();
    Ok(Tensor::from_vec(data, (slices.len(), 1, h, w), &Device::Cpu)?)
}

/// Stacks masks into an `N x H x W` f32 batch of zeros and ones.
pub fn masks_tensor(slices: &[&ImageSlice]) -> Result<Tensor> {
    let (h, w) = check_same_size(slices)?;
    let mut data = Vec::with_capacity(slices.len() * h * w);
    for s in slices {
        let m = s
            .mask
            .as_ref()
            .ok_or_else(|| Error::Data(format!("slice {} has no mask", s.id)))?;
        data.extend(m.iter().map(|&v| v as f32));
    }
    Ok(Tensor::from_vec(data, (slices.len(), h, w), &Device::Cpu)?)
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T, what: &str) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::json(what, e))?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_scale_defaults() {
        let e = EssNetTrainConfig::default();
        assert_eq!((e.epochs, e.batch_size, e.lr_g, e.lr_d), (100, 1, 1e-4, 2e-4));
        let u = UNetTrainConfig::default();
        assert_eq!((u.epochs, u.batch_size, u.lr), (300, 2, 1e-4));
        assert!(e.diagnostics().is_empty());
        assert!(u.diagnostics().is_empty());
    }

    #[test]
    fn steps_per_epoch_rounds_up() {
        let u = UNetTrainConfig::default();
        assert_eq!(u.steps_per_epoch(1064), 532);
        assert_eq!(u.steps_per_epoch(350), 175);
        assert_eq!(u.steps_per_epoch(7), 4);
    }

    #[test]
    fn zero_batch_is_named() {
        let u = UNetTrainConfig {
            batch_size: 0,
            ..UNetTrainConfig::default()
        };
        assert!(u.diagnostics().iter().any(|d| d.contains("unet.batch_size")));
    }

    #[test]
    fn run_id_shape() {
        let id = run_id_for("{}");
        assert_eq!(id.len(), 16);
        assert!(id.starts_with("run-"));
        assert_eq!(id, run_id_for("{}"));
        assert_ne!(id, run_id_for("{ }"));
    }

    #[test]
    fn network_seeds_differ_by_name() {
        assert_ne!(network_seed(1, "g1"), network_seed(1, "g2"));
        assert_eq!(network_seed(1, "g1"), network_seed(1, "g1"));
    }
}
