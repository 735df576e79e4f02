use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use candle_core::Tensor;

use super::checkpoint::{checkpoint_dir, load_network, prune_checkpoints};
use super::{
    images_tensor, latest_checkpoint, list_checkpoints, load_checkpoint_manifest, masks_tensor, network_seed,
    run_id_for, save_checkpoint, CheckpointManifest, EssNetTrainConfig, LossLog, Stage, TrainingRun,
    CHECKPOINT_SCHEMA_VERSION, ESSNET_LOG_HEADER, LOSS_LOG_FILE,
};
use crate::dataset::{tool_version, DatasetManifest, ImageSlice, SamplerState, UnpairedSampler};
use crate::error::{Error, Result};
use crate::losses::{
    cycle_loss, discriminator_loss_with, generator_adversarial_loss_with, scalar, segmentation_loss, total_loss,
    total_loss_without_seg, LossBreakdown, LossParts,
};
use crate::models::{build_generator, build_patch_discriminator, build_segmentor, receptive_field, ArchConfig, Model};
use crate::nn::{reflect_pad, Adam, AdamConfig};

/// The five networks of the synthesis stage and their optimizers.
/// `s` is absent in ablation mode.
pub struct EssNet {
    pub cfg: EssNetTrainConfig,
    pub g1: Model,
    pub g2: Model,
    pub s: Option<Model>,
    pub d1: Model,
    pub d2: Model,
    opt_g1: Adam,
    opt_g2: Adam,
    opt_s: Option<Adam>,
    opt_d1: Adam,
    opt_d2: Adam,
    /// Completed training steps.
    pub step: u64,
}

/// Generator outputs of one step, detached for the discriminator updates.
pub struct Fakes {
    pub fake_a: Tensor,
    pub fake_b: Tensor,
}

impl EssNet {
    pub fn new(cfg: &EssNetTrainConfig) -> Result<Self> {
        cfg.validate()?;
        let seed = |name| network_seed(cfg.seed, name);
        let g_opt = || Adam::new(AdamConfig::new(cfg.lr_g, cfg.beta1));
        let d_opt = || Adam::new(AdamConfig::new(cfg.lr_d, cfg.beta1));
        let s = if cfg.ablation_no_seg {
            None
        } else {
            Some(build_segmentor(&cfg.segmentor_config(), seed("s"))?)
        };
        Ok(Self {
            g1: build_generator(&cfg.generator_config(), seed("g1"))?,
            g2: build_generator(&cfg.generator_config(), seed("g2"))?,
            d1: build_patch_discriminator(&cfg.discriminator_config(), seed("d1"))?,
            d2: build_patch_discriminator(&cfg.discriminator_config(), seed("d2"))?,
            opt_s: s.as_ref().map(|_| g_opt()),
            s,
            opt_g1: g_opt(),
            opt_g2: g_opt(),
            opt_d1: d_opt(),
            opt_d2: d_opt(),
            cfg: cfg.clone(),
            step: 0,
        })
    }

    fn slots(&self) -> Vec<(&'static str, &Model, Option<&Adam>)> {
        let mut v = vec![
            ("g1", &self.g1, Some(&self.opt_g1)),
            ("g2", &self.g2, Some(&self.opt_g2)),
        ];
        if let (Some(s), Some(o)) = (&self.s, &self.opt_s) {
            v.push(("s", s, Some(o)));
        }
        v.push(("d1", &self.d1, Some(&self.opt_d1)));
        v.push(("d2", &self.d2, Some(&self.opt_d2)));
        v
    }

    pub fn network_configs(&self) -> BTreeMap<String, ArchConfig> {
        self.slots()
            .into_iter()
            .map(|(n, m, _)| (n.to_string(), m.config().clone()))
            .collect()
    }

    /// Per-network trainable parameter counts, in `g1, g2, [s,] d1, d2` order.
    pub fn parameter_counts(&self) -> Vec<(&'static str, usize)> {
        self.slots().into_iter().map(|(n, m, _)| (n, m.parameter_count())).collect()
    }

    pub fn save(&self, dir: &Path, epoch: usize, sampler: &SamplerState) -> Result<()> {
        let manifest = CheckpointManifest {
            schema_version: CHECKPOINT_SCHEMA_VERSION,
            created_by: tool_version(),
            stage: Stage::Essnet,
            epoch,
            step: self.step,
            seed: self.cfg.seed,
            image_size: self.cfg.image_size,
            networks: self.network_configs(),
            loss_weights: Some(self.cfg.weights),
            sampler: Some(sampler.clone()),
            essnet: Some(self.cfg.clone()),
            unet: None,
        };
        save_checkpoint(dir, &manifest, &self.slots())
    }

    /// Restores weights, optimizer moments and the step counter. The
    /// checkpoint must come from a run with the same architecture, seed,
    /// batch size, loss settings and optimizer settings.
    pub fn load(&mut self, dir: &Path) -> Result<CheckpointManifest> {
        let m = load_checkpoint_manifest(dir)?;
        if m.stage != Stage::Essnet {
            return Err(Error::Checkpoint(format!("{} is not a synthesis-stage checkpoint", dir.display())));
        }
        if let Some(saved) = &m.essnet {
            let comparable = |c: &EssNetTrainConfig| EssNetTrainConfig {
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
        let (cfg_has_s, ckpt_has_s) = (self.s.is_some(), m.networks.contains_key("s"));
        if cfg_has_s != ckpt_has_s {
            return Err(Error::Checkpoint("segmentor presence differs between checkpoint and config".into()));
        }
        load_network(dir, &m, "g1", &mut self.g1, Some(&mut self.opt_g1))?;
        load_network(dir, &m, "g2", &mut self.g2, Some(&mut self.opt_g2))?;
        if let (Some(s), Some(o)) = (self.s.as_mut(), self.opt_s.as_mut()) {
            load_network(dir, &m, "s", s, Some(o))?;
        }
        load_network(dir, &m, "d1", &mut self.d1, Some(&mut self.opt_d1))?;
        load_network(dir, &m, "d2", &mut self.d2, Some(&mut self.opt_d2))?;
        self.step = m.step;
        Ok(m)
    }
}

/// Discriminator input: slices smaller than the patch size are mirrored out
/// to it, so small working resolutions still give every output unit a
/// full patch.
fn patch_input(cfg: &EssNetTrainConfig, x: &Tensor) -> Result<Tensor> {
    let (rf, _) = receptive_field(&cfg.discriminator_config());
    let (_, _, h, w) = x.dims4()?;
    let short = rf.saturating_sub(h.min(w));
    reflect_pad(x, short.div_ceil(2))
}

/// Generator-side half of a step: both translation paths, the weighted
/// objective, and one update of `g1`, `g2` and (unless ablated) `s`.
pub fn generator_update(
    state: &mut EssNet,
    x_a: &Tensor,
    mask_a: Option<&Tensor>,
    y_b: &Tensor,
) -> Result<(LossParts<f64>, Fakes)> {
    let mode = state.cfg.adversarial;
    // path A: x -> fake_b -> rec_a, with the segmentor on fake_b
    let fake_b = state.g1.forward(x_a)?;
    let rec_a = state.g2.forward(&fake_b)?;
    // path B: y -> fake_a -> rec_b
    let fake_a = state.g2.forward(y_b)?;
    let rec_b = state.g1.forward(&fake_a)?;

    let adv_a2b = generator_adversarial_loss_with(mode, &state.d1.forward(&patch_input(&state.cfg, &fake_b)?)?)?;
    let adv_b2a = generator_adversarial_loss_with(mode, &state.d2.forward(&patch_input(&state.cfg, &fake_a)?)?)?;
    let cycle_a = cycle_loss(x_a, &rec_a)?;
    let cycle_b = cycle_loss(y_b, &rec_b)?;
    let seg = match &state.s {
        Some(s) => {
            let mask = mask_a.ok_or_else(|| {
                Error::Data("A-side batch has no mask; the segmentation branch needs one".into())
            })?;
            segmentation_loss(&s.forward(&fake_b)?, mask)?
        }
        None => Tensor::new(0f32, x_a.device())?,
    };
    let parts = LossParts {
        adv_a2b,
        adv_b2a,
        cycle_a,
        cycle_b,
        seg,
    };
    let total = if state.s.is_some() {
        total_loss(&parts, &state.cfg.weights)?
    } else {
        total_loss_without_seg(&parts, &state.cfg.weights)?
    };
    let grads = total.backward()?;
    state.opt_g1.step(state.g1.params(), &grads)?;
    state.opt_g2.step(state.g2.params(), &grads)?;
    if let (Some(s), Some(o)) = (&state.s, state.opt_s.as_mut()) {
        o.step(s.params(), &grads)?;
    }
    let values = LossParts {
        adv_a2b: scalar(&parts.adv_a2b)?,
        adv_b2a: scalar(&parts.adv_b2a)?,
        cycle_a: scalar(&parts.cycle_a)?,
        cycle_b: scalar(&parts.cycle_b)?,
        seg: scalar(&parts.seg)?,
    };
    Ok((
        values,
        Fakes {
            fake_a: fake_a.detach(),
            fake_b: fake_b.detach(),
        },
    ))
}

/// Discriminator-side half of a step: `d1` on real B vs `fake_b`, then `d2`
/// on real A vs `fake_a`. Returns the two losses.
pub fn discriminator_update(state: &mut EssNet, x_a: &Tensor, y_b: &Tensor, fakes: &Fakes) -> Result<(f64, f64)> {
    let mode = state.cfg.adversarial;
    let cfg = state.cfg.clone();
    let mut losses = [0.0; 2];
    for (i, (d, opt, real, fake, name)) in [
        (&state.d1, &mut state.opt_d1, y_b, &fakes.fake_b, "d1"),
        (&state.d2, &mut state.opt_d2, x_a, &fakes.fake_a, "d2"),
    ]
    .into_iter()
    .enumerate()
    {
        let real = patch_input(&cfg, real)?;
        let fake = patch_input(&cfg, &fake.detach())?;
        let loss = discriminator_loss_with(mode, &d.forward(&real)?, &d.forward(&fake)?)?;
        let v = scalar(&loss)?;
        if !v.is_finite() {
            return Err(Error::NonFinite { term: name.into() });
        }
        opt.step(d.params(), &loss.backward()?)?;
        losses[i] = v;
    }
    Ok((losses[0], losses[1]))
}

/// One full step: generator/segmentor update, then `d1`, then `d2`.
pub fn essnet_training_step(
    state: &mut EssNet,
    x_a: &Tensor,
    mask_a: Option<&Tensor>,
    y_b: &Tensor,
) -> Result<LossBreakdown> {
    let (parts, fakes) = generator_update(state, x_a, mask_a, y_b)?;
    let (d1, d2) = discriminator_update(state, x_a, y_b, &fakes)?;
    state.step += 1;
    Ok(LossBreakdown::from_parts(&parts, &state.cfg.weights, d1, d2))
}

fn abort(e: Error, step: u64, out_dir: &Path) -> Error {
    match e {
        Error::NonFinite { term } => {
            let kept = latest_checkpoint(out_dir)
                .map_or("none written yet".to_string(), |p| p.display().to_string());
            Error::TrainingAbort(format!(
                "non-finite `{term}` at step {step}; last good checkpoint: {kept}"
            ))
        }
        other => other,
    }
}

/// Trains the synthesis networks on the liver-visible A slices and the
/// eligible B slices, resuming from the newest checkpoint in `out_dir` when
/// one exists.
pub fn train_essnet(
    cfg: &EssNetTrainConfig,
    data_a: &DatasetManifest,
    data_b: &DatasetManifest,
    out_dir: &Path,
) -> Result<TrainingRun> {
    cfg.validate()?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let size = Some(cfg.image_size);
    let pool_a = data_a.load_slices(|e| e.liver_visible, size)?;
    let pool_b = data_b.load_slices(|e| e.is_trainable(), size)?;
    if pool_a.is_empty() || pool_b.is_empty() {
        return Err(Error::Data(format!(
            "synthesis training needs slices on both sides (A: {}, B: {})",
            pool_a.len(),
            pool_b.len()
        )));
    }
    if !cfg.ablation_no_seg {
        if let Some(s) = pool_a.iter().find(|s| s.mask.is_none()) {
            return Err(Error::Data(format!("A slice {} has no mask", s.id)));
        }
    }

    let mut net = EssNet::new(cfg)?;
    let mut sampler_state = SamplerState::new(cfg.seed);
    let mut start_epoch = 0;
    let mut seconds_per_epoch = Vec::new();
    let resume = latest_checkpoint(out_dir);
    if let Some(dir) = &resume {
        let m = net.load(dir)?;
        start_epoch = m.epoch;
        sampler_state = m
            .sampler
            .ok_or_else(|| Error::Checkpoint(format!("{}: missing sampler state", dir.display())))?;
        if let Ok(prev) = TrainingRun::load(out_dir) {
            seconds_per_epoch = prev.seconds_per_epoch.into_iter().take(start_epoch).collect();
        }
        log::info!("resuming synthesis training from {} (epoch {start_epoch})", dir.display());
    }
    let log_path = out_dir.join(LOSS_LOG_FILE);
    let mut log = LossLog::open(&log_path, ESSNET_LOG_HEADER, resume.as_ref().map(|_| net.step))?;
    let mut sampler = UnpairedSampler::new(pool_a.len(), pool_b.len(), cfg.batch_size, &sampler_state)?;
    let steps_per_epoch = pool_a.len().div_ceil(cfg.batch_size);

    for epoch in start_epoch..cfg.epochs {
        let started = Instant::now();
        for _ in 0..steps_per_epoch {
            let (ia, ib) = sampler.next_batch();
            let a: Vec<&ImageSlice> = ia.iter().map(|&i| &pool_a[i]).collect();
            let b: Vec<&ImageSlice> = ib.iter().map(|&i| &pool_b[i]).collect();
            let x = images_tensor(&a)?;
            let mask = if cfg.ablation_no_seg { None } else { Some(masks_tensor(&a)?) };
            let y = images_tensor(&b)?;
            let breakdown = match essnet_training_step(&mut net, &x, mask.as_ref(), &y) {
                Ok(b) => b,
                Err(e) => {
                    log.flush()?;
                    return Err(abort(e, net.step + 1, out_dir));
                }
            };
            log.append_breakdown(net.step, &breakdown)?;
        }
        log.flush()?;
        seconds_per_epoch.push(started.elapsed().as_secs_f64());
        let done = epoch + 1;
        log::info!("synthesis epoch {done}/{} ({:.1}s)", cfg.epochs, seconds_per_epoch[epoch]);
        if done % cfg.checkpoint_every == 0 || done == cfg.epochs {
            net.save(&checkpoint_dir(out_dir, done), done, &sampler.state())?;
            prune_checkpoints(out_dir, cfg.keep_checkpoints)?;
        }
    }

    let config = serde_json::to_value(cfg).map_err(|e| Error::json("synthesis config", e))?;
    let run = TrainingRun {
        run_id: run_id_for(&config.to_string()),
        stage: Stage::Essnet,
        config,
        loss_log: log_path,
        checkpoints: list_checkpoints(out_dir).into_iter().map(|(_, p)| p).collect(),
        steps: net.step,
        seconds_per_epoch,
        frames_per_second: None,
    };
    run.save(out_dir)?;
    Ok(run)
}
