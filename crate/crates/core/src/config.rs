//! Experiment configuration: JSON with optional `paper` / `desk` presets.
//!
//! A config file is resolved by overlaying it on the defaults of its preset
//! (the full-scale values when no preset is named). A preset also pins some
//! fields; a file that contradicts them is reported by [`validate_value`].

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::losses::{AdversarialMode, LossWeights};
use crate::models::UNetHead;
use crate::training::{run_id_for, EssNetTrainConfig, UNetTrainConfig};

/// Environment variable that forces single-threaded, reproducible runs.
pub const DETERMINISTIC_ENV: &str = "XMOD_DETERMINISTIC";

/// Applies [`DETERMINISTIC_ENV`]: when set to `1`, pins the tensor backend
/// to one thread. Call before any tensor work. Returns whether it applied.
pub fn apply_deterministic_env() -> bool {
    let on = std::env::var(DETERMINISTIC_ENV).is_ok_and(|v| v == "1");
    if on {
        std::env::set_var("RAYON_NUM_THREADS", "1");
        std::env::set_var("CANDLE_NUM_THREADS", "1");
    }
    on
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    Paper,
    Desk,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhantomData {
    pub count_a: usize,
    pub count_b: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Prepared A (CT-like, labeled) dataset directory.
    pub a_dir: Option<PathBuf>,
    /// Prepared B (MR-like) dataset directory; split by subject into
    /// training and test sets.
    pub b_dir: Option<PathBuf>,
    /// Generate phantom datasets inside the run directory instead.
    pub phantom: Option<PhantomData>,
    /// Share of B subjects held out for testing when `test_subjects` is
    /// not given.
    pub test_fraction: f64,
    pub test_subjects: Option<Vec<String>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorSection {
    pub base_width: usize,
    pub res_blocks: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiscSection {
    pub base_width: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UNetSection {
    pub base_width: usize,
    pub depth: usize,
    pub head: UNetHead,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub checkpoint_every: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EssNetSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_g: f64,
    pub lr_d: f64,
    pub beta1: f64,
    pub ablation_no_seg: bool,
    pub adversarial: AdversarialMode,
    pub checkpoint_every: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preset: Option<Preset>,
    pub seed: u64,
    pub image_size: u32,
    pub data: DataConfig,
    pub generator: GeneratorSection,
    pub disc: DiscSection,
    pub unet: UNetSection,
    pub essnet: EssNetSection,
    pub loss: LossWeights,
    /// Synthetic-image counts added to the real training set, one U-Net
    /// per entry.
    pub arrangements: Vec<usize>,
}

fn paper_defaults() -> ExperimentConfig {
    ExperimentConfig {
        preset: None,
        seed: 0,
        image_size: 256,
        data: DataConfig {
            a_dir: None,
            b_dir: None,
            phantom: None,
            test_fraction: 0.15,
            test_subjects: None,
        },
        generator: GeneratorSection {
            base_width: 64,
            res_blocks: 9,
        },
        disc: DiscSection { base_width: 64 },
        unet: UNetSection {
            base_width: 64,
            depth: 5,
            head: UNetHead::Conv1x1,
            epochs: 300,
            batch_size: 2,
            lr: 1e-4,
            beta1: 0.9,
            checkpoint_every: 10,
        },
        essnet: EssNetSection {
            epochs: 100,
            batch_size: 1,
            lr_g: 1e-4,
            lr_d: 2e-4,
            beta1: 0.5,
            ablation_no_seg: false,
            adversarial: AdversarialMode::NonSaturating,
            checkpoint_every: 10,
        },
        loss: LossWeights::default(),
        arrangements: vec![0, 354, 714, 1034, 1487, 2050],
    }
}

fn desk_defaults() -> ExperimentConfig {
    let mut c = paper_defaults();
    c.image_size = 64;
    c.generator.base_width = 16;
    c.disc.base_width = 16;
    c.unet.base_width = 16;
    c.unet.epochs = 15;
    c.unet.lr = 1e-3;
    c.unet.checkpoint_every = 5;
    c.essnet.epochs = 3;
    c.essnet.checkpoint_every = 3;
    c.data.phantom = Some(PhantomData {
        count_a: 12,
        count_b: 16,
    });
    c.data.test_fraction = 0.25;
    c.arrangements = vec![0, 12];
    c
}

impl ExperimentConfig {
    pub fn defaults(preset: Option<Preset>) -> Self {
        let mut c = match preset {
            Some(Preset::Desk) => desk_defaults(),
            _ => paper_defaults(),
        };
        c.preset = preset;
        c
    }

    /// Canonical JSON snapshot; resolving it again yields the same config.
    pub fn snapshot(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }

    pub fn run_id(&self) -> String {
        run_id_for(&self.snapshot())
    }

    pub fn essnet_train_config(&self) -> EssNetTrainConfig {
        EssNetTrainConfig {
            epochs: self.essnet.epochs,
            batch_size: self.essnet.batch_size,
            lr_g: self.essnet.lr_g,
            lr_d: self.essnet.lr_d,
            beta1: self.essnet.beta1,
            weights: self.loss,
            adversarial: self.essnet.adversarial,
            seed: self.seed,
            ablation_no_seg: self.essnet.ablation_no_seg,
            image_size: self.image_size,
            generator_width: self.generator.base_width,
            res_blocks: self.generator.res_blocks,
            disc_width: self.disc.base_width,
            checkpoint_every: self.essnet.checkpoint_every,
            keep_checkpoints: 3,
        }
    }

    pub fn unet_train_config(&self) -> UNetTrainConfig {
        UNetTrainConfig {
            epochs: self.unet.epochs,
            batch_size: self.unet.batch_size,
            lr: self.unet.lr,
            beta1: self.unet.beta1,
            seed: self.seed,
            image_size: self.image_size,
            base_width: self.unet.base_width,
            depth: self.unet.depth,
            head: self.unet.head,
            checkpoint_every: self.unet.checkpoint_every,
            keep_checkpoints: 3,
        }
    }

    /// Range and preset-consistency diagnostics of a resolved config.
    pub fn diagnostics(&self) -> Vec<String> {
        let mut d = self.essnet_train_config().diagnostics();
        for u in self.unet_train_config().diagnostics() {
            if !d.contains(&u) {
                d.push(u);
            }
        }
        if !(self.data.test_fraction > 0.0 && self.data.test_fraction < 1.0) {
            d.push("data.test_fraction must be in (0, 1)".into());
        }
        if let Some(p) = &self.data.phantom {
            if p.count_a == 0 || p.count_b < 2 {
                d.push("data.phantom needs count_a >= 1 and count_b >= 2".into());
            }
        }
        if self.arrangements.is_empty() {
            d.push("arrangements must list at least one synthetic count".into());
        }
        let mut seen = std::collections::HashSet::new();
        if let Some(n) = self.arrangements.iter().find(|n| !seen.insert(**n)) {
            d.push(format!("arrangements lists {n} twice"));
        }
        d.extend(self.preset_conflicts());
        d
    }

    fn preset_conflicts(&self) -> Vec<String> {
        let mut d = Vec::new();
        let mut pin = |field: &str, have: String, want: String, preset: &str| {
            if have != want {
                d.push(format!("preset {preset} fixes {field} = {want}, config has {have}"));
            }
        };
        match self.preset {
            Some(Preset::Paper) => {
                let p = paper_defaults();
                let l = |w: &LossWeights| format!("{:?}", w.as_array());
                pin("loss", l(&self.loss), l(&p.loss), "paper");
                for (f, have, want) in [
                    ("essnet.lr_g", self.essnet.lr_g, p.essnet.lr_g),
                    ("essnet.lr_d", self.essnet.lr_d, p.essnet.lr_d),
                ] {
                    pin(f, have.to_string(), want.to_string(), "paper");
                }
                for (f, have, want) in [
                    ("essnet.epochs", self.essnet.epochs, p.essnet.epochs),
                    ("essnet.batch_size", self.essnet.batch_size, p.essnet.batch_size),
                    ("unet.epochs", self.unet.epochs, p.unet.epochs),
                    ("unet.batch_size", self.unet.batch_size, p.unet.batch_size),
                    ("generator.base_width", self.generator.base_width, 64),
                    ("disc.base_width", self.disc.base_width, 64),
                    ("unet.base_width", self.unet.base_width, 64),
                    ("image_size", self.image_size as usize, 256),
                ] {
                    pin(f, have.to_string(), want.to_string(), "paper");
                }
            }
            Some(Preset::Desk) => {
                for (f, have, want) in [
                    ("generator.base_width", self.generator.base_width, 16),
                    ("disc.base_width", self.disc.base_width, 16),
                    ("unet.base_width", self.unet.base_width, 16),
                    ("image_size", self.image_size as usize, 64),
                ] {
                    pin(f, have.to_string(), want.to_string(), "desk");
                }
            }
            None => {}
        }
        d
    }
}

fn merge(base: &mut Value, overlay: Value) {
    match (base, overlay) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, o) => *b = o,
    }
}

/// Resolves a parsed config against its preset defaults. Schema problems
/// are returned as diagnostics.
pub fn resolve_value(value: Value) -> std::result::Result<ExperimentConfig, Vec<String>> {
    if !value.is_object() {
        return Err(vec!["config must be a JSON object".into()]);
    }
    let preset = match value.get("preset") {
        None | Some(Value::Null) => None,
        Some(p) => match serde_json::from_value::<Preset>(p.clone()) {
            Ok(p) => Some(p),
            Err(_) => return Err(vec![format!("preset must be \"paper\" or \"desk\", got {p}")]),
        },
    };
    let mut base = serde_json::to_value(ExperimentConfig::defaults(preset)).expect("defaults serialize");
    merge(&mut base, value);
    serde_json::from_value(base).map_err(|e| vec![format!("schema: {e}")])
}

/// All diagnostics of a parsed config; empty means valid.
pub fn validate_value(value: Value) -> Vec<String> {
    match resolve_value(value) {
        Ok(cfg) => cfg.diagnostics(),
        Err(d) => d,
    }
}

/// Diagnostics of a config file. An unreadable or unparsable file yields a
/// single fatal diagnostic.
pub fn validate_config(path: &Path) -> Vec<String> {
    let text = match std::fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) => return vec![format!("cannot read {}: {e}", path.display())],
    };
    match serde_json::from_str::<Value>(&text) {
        Ok(v) => validate_value(v),
        Err(e) => vec![format!("{} is not valid JSON: {e}", path.display())],
    }
}

/// Reads, resolves and validates a config file.
pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    parse_config(&text)
}

pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    let value: Value =
        serde_json::from_str(text).map_err(|e| Error::Config(format!("config is not valid JSON: {e}")))?;
    let cfg = resolve_value(value).map_err(|d| Error::Config(d.join("; ")))?;
    let d = cfg.diagnostics();
    if d.is_empty() {
        Ok(cfg)
    } else {
        Err(Error::Config(d.join("; ")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn paper_preset_is_clean() {
        assert!(validate_value(json!({"preset": "paper"})).is_empty());
        assert!(validate_value(json!({})).is_empty());
        assert!(validate_value(json!({"preset": "desk"})).is_empty());
    }

    #[test]
    fn negative_lambda_and_zero_batch() {
        let d = validate_value(json!({"loss": {"lambda3": -1.0}}));
        assert_eq!(d, vec!["loss.lambda3 must be ≥ 0".to_string()]);
        let d = validate_value(json!({"unet": {"batch_size": 0}}));
        assert!(d.iter().any(|m| m.contains("unet.batch_size")), "{d:?}");
    }

    #[test]
    fn preset_conflict_reported() {
        let d = validate_value(json!({"preset": "paper", "generator": {"base_width": 16}}));
        assert_eq!(d, vec!["preset paper fixes generator.base_width = 64, config has 16".to_string()]);
        let d = validate_value(json!({"preset": "desk", "image_size": 128}));
        assert_eq!(d.len(), 1);
        // no preset: anything consistent goes
        assert!(validate_value(json!({"generator": {"base_width": 16}})).is_empty());
    }

    #[test]
    fn schema_errors_are_diagnostics() {
        assert_eq!(validate_value(json!({"bogus": 1})).len(), 1);
        assert_eq!(validate_value(json!({"preset": "huge"})).len(), 1);
        assert_eq!(validate_value(json!([1, 2])).len(), 1);
    }

    #[test]
    fn snapshot_is_fixed_point() {
        for preset in [json!({"preset": "paper"}), json!({"preset": "desk", "seed": 3}), json!({"essnet": {"epochs": 2}})] {
            let cfg = resolve_value(preset).unwrap();
            let again = parse_config(&cfg.snapshot()).unwrap();
            assert_eq!(again, cfg);
            assert_eq!(again.snapshot(), cfg.snapshot());
        }
    }

    #[test]
    fn unreadable_file_single_diagnostic() {
        let d = validate_config(Path::new("/nonexistent/config.json"));
        assert_eq!(d.len(), 1);
    }
}
