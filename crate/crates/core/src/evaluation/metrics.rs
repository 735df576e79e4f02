use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Pixel confusion counts of a binary prediction.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

fn check_pair(pred: &[u8], gt: &[u8]) -> Result<()> {
    if pred.len() != gt.len() {
        return Err(Error::Shape(format!(
            "prediction has {} pixels, ground truth {}",
            pred.len(),
            gt.len()
        )));
    }
    if pred.iter().chain(gt).any(|&v| v > 1) {
        return Err(Error::InvalidInput("masks must be binary (0 or 1)".into()));
    }
    Ok(())
}

impl ConfusionCounts {
    pub fn from_masks(pred: &[u8], gt: &[u8]) -> Result<Self> {
        check_pair(pred, gt)?;
        let mut c = Self::default();
        for (&p, &g) in pred.iter().zip(gt) {
            match (p, g) {
                (1, 1) => c.tp += 1,
                (1, 0) => c.fp += 1,
                (0, 1) => c.fn_ += 1,
                _ => c.tn += 1,
            }
        }
        Ok(c)
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    pub fn add(&mut self, other: &Self) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
        self.tn += other.tn;
    }

    /// `2 TP / (2 TP + FP + FN)`, or 1.0 when both masks are empty.
    pub fn dice(&self) -> f64 {
        let denom = 2 * self.tp + self.fp + self.fn_;
        if denom == 0 {
            1.0
        } else {
            (2 * self.tp) as f64 / denom as f64
        }
    }

    /// `TP / (TP + FP + FN)`, or 1.0 when both masks are empty.
    pub fn iou(&self) -> f64 {
        let denom = self.tp + self.fp + self.fn_;
        if denom == 0 {
            1.0
        } else {
            self.tp as f64 / denom as f64
        }
    }
}

pub fn dice(pred: &[u8], gt: &[u8]) -> Result<f64> {
    Ok(ConfusionCounts::from_masks(pred, gt)?.dice())
}

pub fn iou(pred: &[u8], gt: &[u8]) -> Result<f64> {
    Ok(ConfusionCounts::from_masks(pred, gt)?.iou())
}

/// Receiver operating characteristic. Point 0 is `(0, 0)` at threshold
/// `+inf`; point `i > 0` classifies `score >= thresholds[i]` as positive.
#[derive(Clone, Debug, PartialEq)]
pub struct RocCurve {
    pub thresholds: Vec<f64>,
    pub fpr: Vec<f64>,
    pub tpr: Vec<f64>,
    pub auc: f64,
}

/// ROC over every distinct score, with tied scores grouped into a single
/// step, and its trapezoidal area.
pub fn roc_curve(scores: &[f64], labels: &[u8]) -> Result<RocCurve> {
    if scores.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if labels.iter().any(|&l| l > 1) {
        return Err(Error::InvalidInput("labels must be binary".into()));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::InvalidInput("scores contain NaN".into()));
    }
    let pos = labels.iter().filter(|&&l| l == 1).count() as u64;
    let neg = labels.len() as u64 - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::InvalidInput(
            "ROC needs at least one positive and one negative label".into(),
        ));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));

    let mut thresholds = vec![f64::INFINITY];
    let mut fpr = vec![0.0];
    let mut tpr = vec![0.0];
    let (mut tp, mut fp) = (0u64, 0u64);
    // twice the area, in units of one positive x one negative
    let mut area2: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        let (tp0, fp0) = (tp, fp);
        while i < order.len() && scores[order[i]] == s {
            if labels[order[i]] == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        area2 += (fp - fp0) as u128 * (tp + tp0) as u128;
        thresholds.push(s);
        fpr.push(fp as f64 / neg as f64);
        tpr.push(tp as f64 / pos as f64);
    }
    let auc = area2 as f64 / (2.0 * pos as f64 * neg as f64);
    Ok(RocCurve {
        thresholds,
        fpr,
        tpr,
        auc,
    })
}

impl RocCurve {
    /// `threshold,fpr,tpr` rows for external plotting.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("threshold,fpr,tpr\n");
        for i in 0..self.fpr.len() {
            s.push_str(&format!("{},{},{}\n", self.thresholds[i], self.fpr[i], self.tpr[i]));
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn hand_values() {
        let p = [1, 1, 0, 0];
        let g = [1, 0, 1, 0];
        assert_eq!(dice(&p, &g).unwrap(), 0.5);
        assert!((iou(&p, &g).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(dice(&[1, 1, 0], &[1, 1, 0]).unwrap(), 1.0);
        assert_eq!(dice(&[1, 0], &[0, 1]).unwrap(), 0.0);
        assert_eq!(dice(&[0, 0], &[0, 0]).unwrap(), 1.0);
        assert_eq!(iou(&[0, 0], &[0, 0]).unwrap(), 1.0);
    }

    #[test]
    fn non_binary_rejected() {
        assert!(dice(&[2, 0], &[1, 0]).is_err());
        assert!(iou(&[1, 0, 1], &[1, 0]).is_err());
    }

    #[test]
    fn roc_examples() {
        let r = roc_curve(&[0.9, 0.6, 0.4, 0.2], &[1, 1, 0, 0]).unwrap();
        assert_eq!(r.auc, 1.0);
        let r = roc_curve(&[0.1, 0.4, 0.35, 0.8], &[0, 0, 1, 1]).unwrap();
        assert!((r.auc - 0.75).abs() < 1e-15);
        assert_eq!((r.fpr[0], r.tpr[0]), (0.0, 0.0));
        assert_eq!((*r.fpr.last().unwrap(), *r.tpr.last().unwrap()), (1.0, 1.0));
        let r = roc_curve(&[0.5; 6], &[0, 1, 0, 1, 1, 0]).unwrap();
        assert_eq!(r.auc, 0.5);
        assert_eq!(r.fpr.len(), 2);
        assert!(roc_curve(&[0.1, 0.2], &[1, 1]).is_err());
    }

    proptest! {
        #[test]
        fn dice_iou_symmetric_and_ordered(v in prop::collection::vec((0u8..2, 0u8..2), 1..64)) {
            let (p, g): (Vec<u8>, Vec<u8>) = v.into_iter().unzip();
            let (d, j) = (dice(&p, &g).unwrap(), iou(&p, &g).unwrap());
            prop_assert_eq!(d, dice(&g, &p).unwrap());
            prop_assert_eq!(j, iou(&g, &p).unwrap());
            prop_assert!(d >= j);
            if d == j {
                prop_assert!(d == 0.0 || d == 1.0);
            }
            let c = ConfusionCounts::from_masks(&p, &g).unwrap();
            prop_assert!((c.iou() - c.dice() / (2.0 - c.dice())).abs() < 1e-12);
        }

        #[test]
        fn roc_monotone(v in prop::collection::vec((0u32..20, 0u8..2), 2..80)) {
            let scores: Vec<f64> = v.iter().map(|(s, _)| *s as f64).collect();
            let labels: Vec<u8> = v.iter().map(|(_, l)| *l).collect();
            prop_assume!(labels.contains(&0) && labels.contains(&1));
            let r = roc_curve(&scores, &labels).unwrap();
            for i in 1..r.fpr.len() {
                prop_assert!(r.fpr[i] >= r.fpr[i - 1] && r.tpr[i] >= r.tpr[i - 1]);
                prop_assert!(r.thresholds[i] < r.thresholds[i - 1]);
            }
            let exp: Vec<f64> = scores.iter().map(|s| (s * 0.3).exp()).collect();
            prop_assert_eq!(roc_curve(&exp, &labels).unwrap().auc, r.auc);
        }
    }
}
