use std::path::Path;
use std::time::Instant;

use candle_core::Tensor;

use super::checkpoint::{checkpoint_dir, load_network, prune_checkpoints};
use super::{
    images_tensor, latest_checkpoint, list_checkpoints, load_checkpoint_manifest, masks_tensor, network_seed,
    resolve_checkpoint, run_id_for, save_checkpoint, CheckpointManifest, LossLog, Stage, TrainingRun,
    UNetTrainConfig, CHECKPOINT_SCHEMA_VERSION, LOSS_LOG_FILE, UNET_LOG_HEADER,
};
use crate::dataset::{tool_version, DatasetManifest, EpochShuffler, ImageSlice, SliceEntry};
use crate::error::{Error, Result};
use crate::losses::{bce_with_logits, scalar};
use crate::models::{build, build_unet, Model};
use crate::nn::{Adam, AdamConfig};

const STREAM_UNET: u64 = 0x554E_4554;

/// One optimizer step of pixel-wise binary cross-entropy. `y` holds the
/// `N x H x W` masks. Returns the loss before the update.
pub fn unet_training_step(model: &Model, opt: &mut Adam, x: &Tensor, y: &Tensor) -> Result<f64> {
    let logits = model.forward_logits(x)?;
    let loss = bce_with_logits(&logits, &y.unsqueeze(1)?)?;
    let v = scalar(&loss)?;
    if !v.is_finite() {
        return Err(Error::NonFinite { term: "bce".into() });
    }
    opt.step(model.params(), &loss.backward()?)?;
    Ok(v)
}

/// A U-Net with its optimizer and progress counters.
pub struct UNetTrainer {
    pub cfg: UNetTrainConfig,
    pub model: Model,
    opt: Adam,
    pub step: u64,
    /// Completed epochs.
    pub epoch: usize,
}

impl UNetTrainer {
    pub fn new(cfg: &UNetTrainConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            model: build_unet(&cfg.model_config(), network_seed(cfg.seed, "unet"))?,
            opt: Adam::new(AdamConfig::new(cfg.lr, cfg.beta1)),
            cfg: cfg.clone(),
            step: 0,
            epoch: 0,
        })
    }

    /// Runs one epoch over `images` in a seeded per-epoch order, appending
    /// one log row per step. Returns the mean step loss.
    pub fn train_epoch(&mut self, images: &[ImageSlice], mut log: Option<&mut LossLog>) -> Result<f64> {
        if images.is_empty() {
            return Err(Error::Data("no training images".into()));
        }
        let order = EpochShuffler::permutation(images.len(), self.cfg.seed, STREAM_UNET, self.epoch as u64);
        let mut total = 0.0;
        let mut steps = 0;
        for chunk in order.chunks(self.cfg.batch_size) {
            let batch: Vec<&ImageSlice> = chunk.iter().map(|&i| &images[i]).collect();
            let x = images_tensor(&batch)?;
            let y = masks_tensor(&batch)?;
            let loss = unet_training_step(&self.model, &mut self.opt, &x, &y)?;
            self.step += 1;
            if let Some(log) = log.as_deref_mut() {
                log.append(self.step, &[(self.epoch + 1) as f64, loss])?;
            }
            total += loss;
            steps += 1;
        }
        self.epoch += 1;
        Ok(total / steps as f64)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let manifest = CheckpointManifest {
            schema_version: CHECKPOINT_SCHEMA_VERSION,
            created_by: tool_version(),
            stage: Stage::Unet,
            epoch: self.epoch,
            step: self.step,
            seed: self.cfg.seed,
            image_size: self.cfg.image_size,
            networks: [("unet".to_string(), self.model.config().clone())].into(),
            loss_weights: None,
            sampler: None,
            essnet: None,
            unet: Some(self.cfg.clone()),
        };
        save_checkpoint(dir, &manifest, &[("unet", &self.model, Some(&self.opt))])
    }

    pub fn load(&mut self, dir: &Path) -> Result<CheckpointManifest> {
        let m = load_checkpoint_manifest(dir)?;
        if m.stage != Stage::Unet {
            return Err(Error::Checkpoint(format!("{} is not a U-Net checkpoint", dir.display())));
        }
        if let Some(saved) = &m.unet {
            let comparable = |c: &UNetTrainConfig| UNetTrainConfig {
                epochs: 0,
                checkpoint_every: 0,
                keep_checkpoints: 0,
                ..c.clone()
            };
            if comparable(saved) != comparable(&self.cfg) {
                return Err(Error::Checkpoint(format!(
                    "{} was written by a run with different training settings",
                    dir.display()
                )));
            }
        }
        load_network(dir, &m, "unet", &mut self.model, Some(&mut self.opt))?;
        self.step = m.step;
        self.epoch = m.epoch;
        Ok(m)
    }
}

/// Loads a trained U-Net for inference from a checkpoint directory or a
/// training output directory.
pub fn load_unet(path: &Path) -> Result<(Model, CheckpointManifest)> {
    let dir = resolve_checkpoint(path)?;
    let m = load_checkpoint_manifest(&dir)?;
    if m.stage != Stage::Unet {
        return Err(Error::Checkpoint(format!("{} is not a U-Net checkpoint", dir.display())));
    }
    let arch = m
        .networks
        .get("unet")
        .ok_or_else(|| Error::Checkpoint("checkpoint holds no network `unet`".into()))?;
    let mut model = build(arch, 0)?;
    load_network(&dir, &m, "unet", &mut model, None)?;
    Ok((model, m))
}

/// Training entries of one arrangement: every liver-visible real entry plus
/// the first `take` liver-visible synthetic entries (all of them when
/// `take` is `None`). Every selected entry must carry a mask.
pub fn select_unet_training<'a>(
    real: &'a DatasetManifest,
    synthetic: Option<&'a DatasetManifest>,
    take: Option<usize>,
) -> Result<(Vec<&'a SliceEntry>, Vec<&'a SliceEntry>)> {
    let real_entries: Vec<&SliceEntry> = real.liver_visible().collect();
    let synth_entries: Vec<&SliceEntry> = match (synthetic, take) {
        (None, None | Some(0)) => Vec::new(),
        (None, Some(n)) => {
            return Err(Error::Data(format!("{n} synthetic slices requested but no synthetic set given")));
        }
        (Some(s), take) => {
            let pool: Vec<&SliceEntry> = s.liver_visible().collect();
            let n = take.unwrap_or(pool.len());
            if n > pool.len() {
                return Err(Error::Data(format!(
                    "{n} synthetic slices requested, only {} available",
                    pool.len()
                )));
            }
            pool.into_iter().take(n).collect()
        }
    };
    if let Some(e) = real_entries.iter().chain(&synth_entries).find(|e| e.mask_path.is_none()) {
        return Err(Error::Data(format!("training entry {} has no mask", e.id)));
    }
    if real_entries.is_empty() && synth_entries.is_empty() {
        return Err(Error::Data("no masked training entries".into()));
    }
    Ok((real_entries, synth_entries))
}

fn load_selected(manifest: &DatasetManifest, entries: &[&SliceEntry], size: u32) -> Result<Vec<ImageSlice>> {
    let ids: std::collections::HashSet<&str> = entries.iter().map(|e| e.id.as_str()).collect();
    manifest.load_slices(|e| ids.contains(e.id.as_str()), Some(size))
}

/// Trains a U-Net on one arrangement, resuming from the newest checkpoint in
/// `out_dir` when one exists.
pub fn train_unet(
    cfg: &UNetTrainConfig,
    real: &DatasetManifest,
    synthetic: Option<&DatasetManifest>,
    take: Option<usize>,
    out_dir: &Path,
) -> Result<TrainingRun> {
    cfg.validate()?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let (real_entries, synth_entries) = select_unet_training(real, synthetic, take)?;
    let mut images = load_selected(real, &real_entries, cfg.image_size)?;
    if let Some(s) = synthetic {
        images.extend(load_selected(s, &synth_entries, cfg.image_size)?);
    }
    log::info!(
        "U-Net arrangement: {} real + {} synthetic, {} steps per epoch",
        real_entries.len(),
        synth_entries.len(),
        cfg.steps_per_epoch(images.len())
    );

    let mut trainer = UNetTrainer::new(cfg)?;
    let mut seconds_per_epoch = Vec::new();
    let resume = latest_checkpoint(out_dir);
    if let Some(dir) = &resume {
        trainer.load(dir)?;
        if let Ok(prev) = TrainingRun::load(out_dir) {
            seconds_per_epoch = prev.seconds_per_epoch.into_iter().take(trainer.epoch).collect();
        }
        log::info!("resuming U-Net training from {} (epoch {})", dir.display(), trainer.epoch);
    }
    let log_path = out_dir.join(LOSS_LOG_FILE);
    let mut log = LossLog::open(&log_path, UNET_LOG_HEADER, resume.as_ref().map(|_| trainer.step))?;

    while trainer.epoch < cfg.epochs {
        let started = Instant::now();
        let mean = match trainer.train_epoch(&images, Some(&mut log)) {
            Ok(m) => m,
            Err(Error::NonFinite { term }) => {
                log.flush()?;
                let kept = latest_checkpoint(out_dir)
                    .map_or("none written yet".to_string(), |p| p.display().to_string());
                return Err(Error::TrainingAbort(format!(
                    "non-finite `{term}` in epoch {}; last good checkpoint: {kept}",
                    trainer.epoch + 1
                )));
            }
            Err(e) => return Err(e),
        };
        log.flush()?;
        seconds_per_epoch.push(started.elapsed().as_secs_f64());
        let done = trainer.epoch;
        log::debug!("U-Net epoch {done}/{}: mean bce {mean:.5}", cfg.epochs);
        if done % cfg.checkpoint_every == 0 || done == cfg.epochs {
            trainer.save(&checkpoint_dir(out_dir, done))?;
            prune_checkpoints(out_dir, cfg.keep_checkpoints)?;
        }
    }

    let config = serde_json::json!({
        "unet": cfg,
        "real_images": real_entries.len(),
        "synthetic_images": synth_entries.len(),
    });
    let run = TrainingRun {
        run_id: run_id_for(&config.to_string()),
        stage: Stage::Unet,
        config,
        loss_log: log_path,
        checkpoints: list_checkpoints(out_dir).into_iter().map(|(_, p)| p).collect(),
        steps: trainer.step,
        seconds_per_epoch,
        frames_per_second: None,
    };
    run.save(out_dir)?;
    Ok(run)
}
