//! Segmentation metrics, checkpoint evaluation and the comparison tables.
//!
//! Dice and IoU are pooled over every test pixel; the per-image values are
//! kept as an appendix. An empty prediction on an empty mask scores 1.0.

mod metrics;
mod tables;

pub use metrics::{dice, iou, roc_curve, ConfusionCounts, RocCurve};
pub use tables::{arrangement_label, reproduce_tables, Tables, REFERENCE_ARRANGEMENTS, REFERENCE_ABLATION};

use std::path::Path;

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::dataset::{resample_slice, DatasetManifest};
use crate::error::{Error, Result};
use crate::training::{images_tensor, load_unet};

pub const DEFAULT_THRESHOLD: f64 = 0.5;

/// Where the synthetic part of a training set came from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SynthesisSource {
    #[default]
    None,
    Essnet,
    Cyclegan,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerImageMetrics {
    pub id: String,
    pub dice: f64,
    pub iou: f64,
    pub foreground: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub run_id: String,
    pub arrangement: String,
    #[serde(default)]
    pub synthesis: SynthesisSource,
    #[serde(default)]
    pub n_real: usize,
    #[serde(default)]
    pub n_synthetic: usize,
    pub threshold: f64,
    pub dice: f64,
    pub iou: f64,
    pub auc: Option<f64>,
    pub counts: ConfusionCounts,
    pub per_image: Vec<PerImageMetrics>,
}

impl MetricsReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let r: Self = serde_json::from_str(text).map_err(|e| Error::json("metrics report", e))?;
        if !(0.0..=1.0).contains(&r.dice) || !(0.0..=1.0).contains(&r.iou) {
            return Err(Error::Evaluation(format!("report {}: dice/iou outside [0, 1]", r.arrangement)));
        }
        Ok(r)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

/// One evaluated image: raw foreground scores and the binary ground truth.
pub struct ScoredImage<'a> {
    pub id: &'a str,
    pub scores: &'a [f64],
    pub mask: &'a [u8],
}

/// Pooled Dice/IoU at `threshold` (score ≥ threshold is foreground), the
/// per-image list, and pixel-level AUC from the raw scores. The AUC is
/// absent when the pooled ground truth holds a single class.
pub fn evaluate_scores(images: &[ScoredImage<'_>], threshold: f64) -> Result<(ConfusionCounts, Vec<PerImageMetrics>, Option<f64>)> {
    let mut pooled = ConfusionCounts::default();
    let mut per_image = Vec::with_capacity(images.len());
    let mut all_scores = Vec::new();
    let mut all_labels = Vec::new();
    for im in images {
        let pred: Vec<u8> = im.scores.iter().map(|&s| u8::from(s >= threshold)).collect();
        let c = ConfusionCounts::from_masks(&pred, im.mask).map_err(|e| Error::Evaluation(format!("{}: {e}", im.id)))?;
        pooled.add(&c);
        per_image.push(PerImageMetrics {
            id: im.id.to_string(),
            dice: c.dice(),
            iou: c.iou(),
            foreground: c.tp + c.fn_,
        });
        all_scores.extend_from_slice(im.scores);
        all_labels.extend_from_slice(im.mask);
    }
    let auc = match roc_curve(&all_scores, &all_labels) {
        Ok(r) => Some(r.auc),
        Err(Error::InvalidInput(_)) => None,
        Err(e) => return Err(e),
    };
    Ok((pooled, per_image, auc))
}

/// Runs a trained U-Net over every eligible entry of `test` (liver-visible,
/// or unlabeled, which is an error here) and scores it.
pub fn evaluate_segmentation(checkpoint: &Path, test: &DatasetManifest, threshold: f64) -> Result<MetricsReport> {
    evaluate_segmentation_with_roc(checkpoint, test, threshold).map(|(r, _)| r)
}

/// As [`evaluate_segmentation`], also returning the pooled ROC curve.
pub fn evaluate_segmentation_with_roc(
    checkpoint: &Path,
    test: &DatasetManifest,
    threshold: f64,
) -> Result<(MetricsReport, Option<RocCurve>)> {
    let (model, m) = load_unet(checkpoint)?;
    let entries: Vec<_> = test.entries.iter().filter(|e| e.is_trainable()).collect();
    if entries.is_empty() {
        return Err(Error::Evaluation("test set has no eligible entries".into()));
    }
    if let Some(e) = entries.iter().find(|e| e.mask_path.is_none()) {
        return Err(Error::Evaluation(format!("test entry {} has no mask", e.id)));
    }
    let mut ids = Vec::with_capacity(entries.len());
    let mut scores = Vec::with_capacity(entries.len());
    let mut masks = Vec::with_capacity(entries.len());
    for e in entries {
        let mut s = test.load_slice(e)?;
        if (s.width, s.height) != (m.image_size, m.image_size) {
            s = resample_slice(&s, m.image_size)?;
        }
        let p: Tensor = model.forward(&images_tensor(&[&s])?)?;
        let p: Vec<f32> = p.flatten_all()?.to_vec1()?;
        scores.push(p.into_iter().map(f64::from).collect::<Vec<f64>>());
        masks.push(s.mask.clone().expect("mask checked above"));
        ids.push(s.id);
    }
    let images: Vec<ScoredImage<'_>> = ids
        .iter()
        .zip(&scores)
        .zip(&masks)
        .map(|((id, s), m)| ScoredImage { id, scores: s, mask: m })
        .collect();
    let (counts, per_image, auc) = evaluate_scores(&images, threshold)?;
    let roc = if auc.is_some() {
        let flat_s: Vec<f64> = scores.concat();
        let flat_m: Vec<u8> = masks.concat();
        Some(roc_curve(&flat_s, &flat_m)?)
    } else {
        None
    };
    let report = MetricsReport {
        run_id: String::new(),
        arrangement: String::new(),
        synthesis: SynthesisSource::None,
        n_real: 0,
        n_synthetic: 0,
        threshold,
        dice: counts.dice(),
        iou: counts.iou(),
        auc,
        counts,
        per_image,
    };
    Ok((report, roc))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn oracle_scores_are_perfect() {
        let mask = [0u8, 1, 1, 0, 1, 0];
        let scores: Vec<f64> = mask.iter().map(|&m| m as f64).collect();
        let (c, per, auc) = evaluate_scores(&[ScoredImage { id: "x", scores: &scores, mask: &mask }], 0.5).unwrap();
        assert_eq!((c.dice(), c.iou(), auc), (1.0, 1.0, Some(1.0)));
        assert_eq!(per[0].foreground, 3);
    }

    #[test]
    fn constant_scores_give_half_auc() {
        let mask = [0u8, 1, 1, 0];
        let scores = [0.5; 4];
        let (_, _, auc) = evaluate_scores(&[ScoredImage { id: "x", scores: &scores, mask: &mask }], 0.5).unwrap();
        assert_eq!(auc, Some(0.5));
    }

    #[test]
    fn pooled_identity_holds_but_not_for_means() {
        let a = ([1u8, 1, 0, 0], [1.0, 1.0, 0.0, 0.0]);
        let b = ([1u8, 0, 0, 0], [1.0, 1.0, 1.0, 0.0]);
        let imgs = [
            ScoredImage { id: "a", scores: &a.1, mask: &a.0 },
            ScoredImage { id: "b", scores: &b.1, mask: &b.0 },
        ];
        let (c, per, _) = evaluate_scores(&imgs, 0.5).unwrap();
        assert!((c.iou() - c.dice() / (2.0 - c.dice())).abs() < 1e-12);
        let md = per.iter().map(|p| p.dice).sum::<f64>() / 2.0;
        let mi = per.iter().map(|p| p.iou).sum::<f64>() / 2.0;
        assert!((mi - md / (2.0 - md)).abs() > 1e-3);
    }

    #[test]
    fn report_json_round_trip() {
        let r = MetricsReport {
            run_id: "run-000000000000".into(),
            arrangement: "Real only (350)".into(),
            synthesis: SynthesisSource::None,
            n_real: 350,
            n_synthetic: 0,
            threshold: 0.5,
            dice: 0.9459,
            iou: 0.8974,
            auc: None,
            counts: ConfusionCounts::default(),
            per_image: vec![],
        };
        assert_eq!(MetricsReport::from_json(&r.to_json()).unwrap(), r);
    }
}
