//! Training objectives for the synthesis network.
//!
//! All adversarial terms take raw discriminator logits and average over the
//! patch map. Sign conventions: every function returns a quantity to be
//! *minimized*.

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Weights of the five terms of the total generator objective.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub lambda4: f64,
    pub lambda5: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda1: 1.0,
            lambda2: 1.0,
            lambda3: 10.0,
            lambda4: 10.0,
            lambda5: 1.0,
        }
    }
}

impl LossWeights {
    pub fn as_array(&self) -> [f64; 5] {
        [self.lambda1, self.lambda2, self.lambda3, self.lambda4, self.lambda5]
    }

    /// One message per negative or non-finite weight.
    pub fn diagnostics(&self) -> Vec<String> {
        self.as_array()
            .iter()
            .enumerate()
            .filter(|(_, l)| !(l.is_finite() && **l >= 0.0))
            .map(|(i, _)| format!("loss.lambda{} must be ≥ 0", i + 1))
            .collect()
    }
}

/// Which adversarial formulation to train with.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdversarialMode {
    /// Cross-entropy discriminator, generator minimizes `-log D(G(x))`.
    #[default]
    NonSaturating,
    /// Cross-entropy discriminator, generator minimizes `log(1 - D(G(x)))`.
    Saturating,
    /// Squared-error targets 1 (real) / 0 (fake) on raw scores.
    LeastSquares,
}

/// The five generator-side terms.
#[derive(Clone, Debug, PartialEq)]
pub struct LossParts<T> {
    pub adv_a2b: T,
    pub adv_b2a: T,
    pub cycle_a: T,
    pub cycle_b: T,
    pub seg: T,
}

impl<T> LossParts<T> {
    pub fn named(&self) -> [(&'static str, &T); 5] {
        [
            ("adv_A2B", &self.adv_a2b),
            ("adv_B2A", &self.adv_b2a),
            ("cycle_A", &self.cycle_a),
            ("cycle_B", &self.cycle_b),
            ("seg", &self.seg),
        ]
    }
}

/// Scalar values of one training step.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub adv_a2b: f64,
    pub adv_b2a: f64,
    pub cycle_a: f64,
    pub cycle_b: f64,
    pub seg: f64,
    /// Weighted sum of the five parts, evaluated in f64.
    pub total: f64,
    pub d1_loss: f64,
    pub d2_loss: f64,
}

impl LossBreakdown {
    pub fn from_parts(parts: &LossParts<f64>, w: &LossWeights, d1_loss: f64, d2_loss: f64) -> Self {
        Self {
            adv_a2b: parts.adv_a2b,
            adv_b2a: parts.adv_b2a,
            cycle_a: parts.cycle_a,
            cycle_b: parts.cycle_b,
            seg: parts.seg,
            total: weighted_total(parts, w),
            d1_loss,
            d2_loss,
        }
    }
}

/// Plain-arithmetic weighted sum.
pub fn weighted_total(p: &LossParts<f64>, w: &LossWeights) -> f64 {
    w.lambda1 * p.adv_a2b
        + w.lambda2 * p.adv_b2a
        + w.lambda3 * p.cycle_a
        + w.lambda4 * p.cycle_b
        + w.lambda5 * p.seg
}

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::Shape(format!(
            "{what}: shapes {:?} and {:?} differ",
            a.dims(),
            b.dims()
        )));
    }
    Ok(())
}

/// `log σ(x) = -(max(-x, 0) + log(1 + e^{-|x|}))`, finite for any input.
pub fn log_sigmoid(x: &Tensor) -> Result<Tensor> {
    let soft = ((x.abs()?.neg()?.exp()? + 1.0)?.log()? + x.neg()?.relu()?)?;
    Ok(soft.neg()?)
}

/// Binary cross-entropy of the discriminator: target 1 on real patches,
/// 0 on fake patches, each term averaged over its map, the two summed.
pub fn discriminator_loss(d_real: &Tensor, d_fake: &Tensor) -> Result<Tensor> {
    discriminator_loss_with(AdversarialMode::NonSaturating, d_real, d_fake)
}

pub fn discriminator_loss_with(mode: AdversarialMode, d_real: &Tensor, d_fake: &Tensor) -> Result<Tensor> {
    same_shape(d_real, d_fake, "discriminator_loss")?;
    match mode {
        AdversarialMode::NonSaturating | AdversarialMode::Saturating => {
            let real = log_sigmoid(d_real)?.mean_all()?;
            let fake = log_sigmoid(&d_fake.neg()?)?.mean_all()?;
            Ok((real + fake)?.neg()?)
        }
        AdversarialMode::LeastSquares => {
            let real = (d_real - 1.0)?.sqr()?.mean_all()?;
            let fake = d_fake.sqr()?.mean_all()?;
            Ok((real + fake)?)
        }
    }
}

/// Non-saturating generator loss `-mean log σ(d_fake)`.
pub fn generator_adversarial_loss(d_fake: &Tensor) -> Result<Tensor> {
    generator_adversarial_loss_with(AdversarialMode::NonSaturating, d_fake)
}

pub fn generator_adversarial_loss_with(mode: AdversarialMode, d_fake: &Tensor) -> Result<Tensor> {
    match mode {
        AdversarialMode::NonSaturating => Ok(log_sigmoid(d_fake)?.mean_all()?.neg()?),
        AdversarialMode::Saturating => Ok(log_sigmoid(&d_fake.neg()?)?.mean_all()?),
        AdversarialMode::LeastSquares => Ok((d_fake - 1.0)?.sqr()?.mean_all()?),
    }
}

/// Mean absolute difference.
pub fn cycle_loss(real: &Tensor, reconstructed: &Tensor) -> Result<Tensor> {
    same_shape(real, reconstructed, "cycle_loss")?;
    Ok((real - reconstructed)?.abs()?.mean_all()?)
}

/// Pixel-mean two-class cross-entropy of `logits` (`N x 2 x H x W`) against
/// a binary mask (`N x H x W`, same float dtype, values 0 or 1).
pub fn segmentation_loss(logits: &Tensor, gt_mask: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = logits
        .dims4()
        .map_err(|_| Error::Shape(format!("segmentation logits must be 4-D, got {:?}", logits.dims())))?;
    if c != 2 {
        return Err(Error::Shape(format!("segmentation logits need 2 channels, got {c}")));
    }
    if gt_mask.dims() != [n, h, w] {
        return Err(Error::Shape(format!(
            "mask shape {:?} does not match logits {:?}",
            gt_mask.dims(),
            logits.dims()
        )));
    }
    let values = gt_mask.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
    if values.iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(Error::InvalidInput("segmentation mask must be binary".into()));
    }
    let gt = gt_mask.to_dtype(logits.dtype())?.unsqueeze(1)?;
    let onehot = Tensor::cat(&[&(gt.ones_like()? - &gt)?, &gt], 1)?;
    let shift = logits.max_keepdim(1)?.detach();
    let shifted = logits.broadcast_sub(&shift)?;
    let lse = shifted.exp()?.sum_keepdim(1)?.log()?;
    let log_p = shifted.broadcast_sub(&lse)?;
    let picked = (onehot * log_p)?.sum_all()?;
    Ok((picked.neg()? / (n * h * w) as f64)?)
}

/// Pixel-mean binary cross-entropy of raw logits against a 0/1 target of the
/// same shape.
pub fn bce_with_logits(logits: &Tensor, target: &Tensor) -> Result<Tensor> {
    same_shape(logits, target, "bce_with_logits")?;
    let pos = (target * log_sigmoid(logits)?)?;
    let neg = (target.ones_like()? - target)?.mul(&log_sigmoid(&logits.neg()?)?)?;
    Ok((pos + neg)?.mean_all()?.neg()?)
}

fn check_finite(name: &str, t: &Tensor) -> Result<()> {
    let v = t.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
    if v.len() != 1 {
        return Err(Error::Shape(format!("loss term `{name}` is not a scalar")));
    }
    if !v[0].is_finite() {
        return Err(Error::NonFinite { term: name.into() });
    }
    Ok(())
}

/// Weighted sum of the five scalar terms as a differentiable tensor.
pub fn total_loss(parts: &LossParts<Tensor>, w: &LossWeights) -> Result<Tensor> {
    for (name, t) in parts.named() {
        check_finite(name, t)?;
    }
    let terms = [
        (&parts.adv_a2b, w.lambda1),
        (&parts.adv_b2a, w.lambda2),
        (&parts.cycle_a, w.lambda3),
        (&parts.cycle_b, w.lambda4),
        (&parts.seg, w.lambda5),
    ];
    let mut total = (terms[0].0 * terms[0].1)?;
    for (t, l) in &terms[1..] {
        total = (total + (*t * *l)?)?;
    }
    Ok(total)
}

/// Total without a segmentation term (the plain cycle-GAN objective).
pub fn total_loss_without_seg(parts: &LossParts<Tensor>, w: &LossWeights) -> Result<Tensor> {
    for (name, t) in parts.named().into_iter().take(4) {
        check_finite(name, t)?;
    }
    let total = ((&parts.adv_a2b * w.lambda1)? + (&parts.adv_b2a * w.lambda2)?)?;
    let total = (total + (&parts.cycle_a * w.lambda3)?)?;
    Ok((total + (&parts.cycle_b * w.lambda4)?)?)
}

pub fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;
    use proptest::prelude::*;

    fn t(v: &[f64], shape: &[usize]) -> Tensor {
        Tensor::from_slice(v, shape, &Device::Cpu).unwrap()
    }

    #[test]
    fn half_probability_values() {
        let zeros = t(&[0.0; 8], &[1, 1, 2, 4]);
        let d = scalar(&discriminator_loss(&zeros, &zeros).unwrap()).unwrap();
        assert!((d - 2.0 * std::f64::consts::LN_2).abs() < 1e-12);
        assert!((d - 1.3863).abs() < 1e-4);
        let g = scalar(&generator_adversarial_loss(&zeros).unwrap()).unwrap();
        assert!((g - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn perfect_discriminator_and_fooled_discriminator_limits() {
        let hi = t(&[40.0; 4], &[1, 1, 2, 2]);
        let lo = t(&[-40.0; 4], &[1, 1, 2, 2]);
        assert!(scalar(&discriminator_loss(&hi, &lo).unwrap()).unwrap() < 1e-12);
        assert!(scalar(&generator_adversarial_loss(&hi).unwrap()).unwrap() < 1e-12);
    }

    #[test]
    fn constant_map_loss_independent_of_size() {
        let a = scalar(&discriminator_loss(&t(&[0.3; 4], &[1, 1, 2, 2]), &t(&[-0.7; 4], &[1, 1, 2, 2])).unwrap()).unwrap();
        let b = scalar(&discriminator_loss(&t(&[0.3; 900], &[1, 1, 30, 30]), &t(&[-0.7; 900], &[1, 1, 30, 30])).unwrap()).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn shape_mismatch_errors() {
        assert!(discriminator_loss(&t(&[0.0; 4], &[1, 1, 2, 2]), &t(&[0.0; 2], &[1, 1, 1, 2])).is_err());
        assert!(cycle_loss(&t(&[0.0; 4], &[1, 1, 2, 2]), &t(&[0.0; 2], &[1, 1, 1, 2])).is_err());
    }

    #[test]
    fn cycle_loss_hand_value() {
        let a = t(&[1., 2., 3., 4.], &[1, 1, 2, 2]);
        let b = t(&[1., 1., 3., 3.], &[1, 1, 2, 2]);
        assert!((scalar(&cycle_loss(&a, &b).unwrap()).unwrap() - 0.5).abs() < 1e-15);
        assert_eq!(scalar(&cycle_loss(&a, &a).unwrap()).unwrap(), 0.0);
    }

    #[test]
    fn uniform_logits_give_ln2() {
        let logits = t(&[0.37; 32], &[2, 2, 2, 4]);
        let mask = t(&[0., 1., 1., 0., 1., 1., 1., 0., 0., 0., 0., 1., 1., 0., 1., 0.], &[2, 2, 4]);
        let l = scalar(&segmentation_loss(&logits, &mask).unwrap()).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn confident_correct_segmentation_goes_to_zero() {
        // mask = [1, 0]; channel 1 favoured on pixel 0, channel 0 on pixel 1
        let logits = t(&[-30., 30., 30., -30.], &[1, 2, 1, 2]);
        let mask = t(&[1., 0.], &[1, 1, 2]);
        assert!(scalar(&segmentation_loss(&logits, &mask).unwrap()).unwrap() < 1e-12);
    }

    #[test]
    fn bce_hand_values() {
        let z = t(&[0.0, 0.0], &[1, 1, 1, 2]);
        let y = t(&[1.0, 0.0], &[1, 1, 1, 2]);
        assert!((scalar(&bce_with_logits(&z, &y).unwrap()).unwrap() - std::f64::consts::LN_2).abs() < 1e-12);
        let z = t(&[2.0], &[1, 1, 1, 1]);
        let y = t(&[1.0], &[1, 1, 1, 1]);
        let expect = (1.0 + (-2.0f64).exp()).ln();
        assert!((scalar(&bce_with_logits(&z, &y).unwrap()).unwrap() - expect).abs() < 1e-12);
    }

    #[test]
    fn non_binary_mask_rejected() {
        let logits = t(&[0.; 4], &[1, 2, 1, 2]);
        assert!(segmentation_loss(&logits, &t(&[0.5, 0.], &[1, 1, 2])).is_err());
    }

    #[test]
    fn total_with_default_weights() {
        let one = || Tensor::new(1f64, &Device::Cpu).unwrap();
        let parts = LossParts {
            adv_a2b: one(),
            adv_b2a: one(),
            cycle_a: one(),
            cycle_b: one(),
            seg: one(),
        };
        assert_eq!(scalar(&total_loss(&parts, &LossWeights::default()).unwrap()).unwrap(), 23.0);
        let zero = |_| Tensor::new(0f64, &Device::Cpu).unwrap();
        let zeros = LossParts {
            adv_a2b: zero(()),
            adv_b2a: zero(()),
            cycle_a: zero(()),
            cycle_b: zero(()),
            seg: zero(()),
        };
        assert_eq!(scalar(&total_loss(&zeros, &LossWeights::default()).unwrap()).unwrap(), 0.0);
    }

    #[test]
    fn non_finite_term_is_named() {
        let v = |x: f64| Tensor::new(x, &Device::Cpu).unwrap();
        let parts = LossParts {
            adv_a2b: v(1.0),
            adv_b2a: v(1.0),
            cycle_a: v(f64::NAN),
            cycle_b: v(1.0),
            seg: v(1.0),
        };
        match total_loss(&parts, &LossWeights::default()) {
            Err(Error::NonFinite { term }) => assert_eq!(term, "cycle_A"),
            other => panic!("expected NonFinite, got {other:?}"),
        }
    }

    #[test]
    fn negative_lambda_diagnostic() {
        let w = LossWeights {
            lambda3: -1.0,
            ..LossWeights::default()
        };
        assert_eq!(w.diagnostics(), vec!["loss.lambda3 must be ≥ 0".to_string()]);
    }

    proptest! {
        #[test]
        fn generator_loss_decreases_when_logits_rise(v in prop::collection::vec(-8.0f64..8.0, 4), d in 0.01f64..3.0) {
            let a = t(&v, &[1, 1, 2, 2]);
            let b = (&a + d).unwrap();
            let la = scalar(&generator_adversarial_loss(&a).unwrap()).unwrap();
            let lb = scalar(&generator_adversarial_loss(&b).unwrap()).unwrap();
            prop_assert!(lb < la);
            prop_assert!(la >= 0.0);
        }

        #[test]
        fn cycle_loss_symmetric_and_homogeneous(
            a in prop::collection::vec(-1.0f64..1.0, 8),
            b in prop::collection::vec(-1.0f64..1.0, 8),
            c in -3.0f64..3.0,
        ) {
            let ta = t(&a, &[1, 2, 2, 2]);
            let tb = t(&b, &[1, 2, 2, 2]);
            let ab = scalar(&cycle_loss(&ta, &tb).unwrap()).unwrap();
            let ba = scalar(&cycle_loss(&tb, &ta).unwrap()).unwrap();
            prop_assert_eq!(ab, ba);
            prop_assert!(ab >= 0.0);
            let scaled = scalar(&cycle_loss(&(&ta * c).unwrap(), &(&tb * c).unwrap()).unwrap()).unwrap();
            prop_assert!((scaled - c.abs() * ab).abs() < 1e-12);
        }

        #[test]
        fn segmentation_loss_permutation_invariant(seed in any::<u64>()) {
            let logits: Vec<f64> = (0..8).map(|i| (((seed >> i) & 0xff) as f64 / 40.0) - 3.0).collect();
            let mask: Vec<f64> = (0..4).map(|i| ((seed >> (i + 20)) & 1) as f64).collect();
            let l = scalar(&segmentation_loss(&t(&logits, &[1, 2, 1, 4]), &t(&mask, &[1, 1, 4])).unwrap()).unwrap();
            // reverse pixel order in both channels and the mask
            let mut rl = Vec::new();
            for ch in 0..2 {
                rl.extend(logits[ch * 4..ch * 4 + 4].iter().rev());
            }
            let rm: Vec<f64> = mask.iter().rev().copied().collect();
            let r = scalar(&segmentation_loss(&t(&rl, &[1, 2, 1, 4]), &t(&rm, &[1, 1, 4])).unwrap()).unwrap();
            prop_assert!((l - r).abs() < 1e-12);
            prop_assert!(l >= 0.0);
        }
    }
}
