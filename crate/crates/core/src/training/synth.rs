use std::path::{Path, PathBuf};
use std::time::Instant;

use super::checkpoint::load_network;
use super::{images_tensor, load_checkpoint_manifest, resolve_checkpoint, write_json, Stage};
use crate::dataset::{
    denormalize_slice, resample_slice, tool_version, write_gray16_png, write_mask_png, DatasetManifest, ImageSlice, Modality,
    SliceEntry, IMAGES_DIR, MASKS_DIR,
};
use crate::error::{Error, Result};
use crate::models::build;

const SYNTH_BIT_DEPTH: u8 = 16;

#[derive(Clone, Debug)]
pub struct SynthOutcome {
    pub manifest: DatasetManifest,
    pub frames_per_second: f64,
}

/// Translates every liver-visible A slice with the trained A→B generator
/// and writes a B-modality dataset whose masks are copied from the A side.
pub fn synthesize(checkpoint: &Path, manifest_a: &DatasetManifest, out_dir: &Path) -> Result<DatasetManifest> {
    synthesize_with_stats(checkpoint, manifest_a, out_dir).map(|o| o.manifest)
}

pub fn synthesize_with_stats(checkpoint: &Path, manifest_a: &DatasetManifest, out_dir: &Path) -> Result<SynthOutcome> {
    let dir = resolve_checkpoint(checkpoint)?;
    let m = load_checkpoint_manifest(&dir)?;
    if m.stage != Stage::Essnet {
        return Err(Error::Checkpoint(format!("{} is not a synthesis-stage checkpoint", dir.display())));
    }
    let arch = m
        .networks
        .get("g1")
        .ok_or_else(|| Error::Checkpoint("checkpoint holds no network `g1`".into()))?;
    let mut g1 = build(arch, 0)?;
    load_network(&dir, &m, "g1", &mut g1, None)?;

    for sub in [IMAGES_DIR, MASKS_DIR] {
        let p = out_dir.join(sub);
        std::fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    let mut out = DatasetManifest::new(out_dir, Modality::BMr);
    let started = Instant::now();
    let mut frames = 0usize;
    for entry in manifest_a.liver_visible() {
        let mut slice = manifest_a.load_slice(entry)?;
        if (slice.width, slice.height) != (m.image_size, m.image_size) {
            slice = resample_slice(&slice, m.image_size)?;
        }
        let y = g1.forward(&images_tensor(&[&slice])?)?;
        let pixels: Vec<f32> = y.flatten_all()?.to_vec1()?;
        let pixels = pixels.into_iter().map(|v| v.clamp(-1.0, 1.0)).collect();
        let synth = ImageSlice::new(entry.id.clone(), slice.width, slice.height, pixels, slice.mask.clone())?;
        let image_rel = PathBuf::from(IMAGES_DIR).join(format!("{}.png", entry.id));
        write_gray16_png(out_dir.join(&image_rel), &denormalize_slice(&synth, SYNTH_BIT_DEPTH))?;
        let mask_rel = match &synth.mask {
            Some(mask) => {
                let rel = PathBuf::from(MASKS_DIR).join(format!("{}.png", entry.id));
                write_mask_png(out_dir.join(&rel), synth.width, synth.height, mask)?;
                Some(rel)
            }
            None => None,
        };
        out.entries.push(SliceEntry {
            id: entry.id.clone(),
            image_path: image_rel,
            mask_path: mask_rel,
            width: synth.width,
            height: synth.height,
            source_bit_depth: SYNTH_BIT_DEPTH,
            liver_visible: synth.foreground_count() > 0,
            subject_id: entry.subject_id.clone(),
            synthetic: true,
        });
        frames += 1;
    }
    let elapsed = started.elapsed().as_secs_f64();
    out.created_by = tool_version();
    out.save()?;
    let fps = if elapsed > 0.0 { frames as f64 / elapsed } else { 0.0 };
    write_json(
        &out_dir.join("synth_run.json"),
        &serde_json::json!({ "frames": frames, "seconds": elapsed, "frames_per_second": fps }),
        "synthesis record",
    )?;
    Ok(SynthOutcome {
        manifest: out,
        frames_per_second: fps,
    })
}
