//! Loss functions, mask-weighting of feature maps and mask manipulation.
//!
//! Everything here is a pure function over the domain types. The training
//! code uses fused differentiable versions of the two losses from
//! `cxr-tensor`; the functions here are the scalar reference forms used for
//! reporting and checked against those in tests.

mod types;

use cxr_tensor::{Element, Tensor};

pub use types::{BinaryMask, Disease, FeatureMap, LabelVector, ProbabilityMap, ProbabilityVector, NUM_CLASSES};

use crate::{Error, Result};

/// Clamp applied to probabilities before taking logarithms in BCE.
pub const BCE_EPS: f64 = 1e-7;

/// Smoothing term added to numerator and denominator of the soft dice.
pub const DICE_SMOOTH: f64 = 1.0;

/// Threshold used to binarize segmentation probabilities and pooled masks.
pub const MASK_THRESHOLD: f64 = 0.5;

/// Mean binary cross-entropy over the 14 classes.
pub fn bce_loss(truth: &LabelVector, pred: &ProbabilityVector) -> f64 {
    bce_loss_slices(&truth.values(), pred.values()).expect("fixed-size vectors always match")
}

/// Mean binary cross-entropy over equally long target/probability slices.
pub fn bce_loss_slices(truth: &[f64], pred: &[f64]) -> Result<f64> {
    if truth.len() != pred.len() || truth.is_empty() {
        return Err(Error::contract(format!(
            "bce: {} targets vs {} predictions",
            truth.len(),
            pred.len()
        )));
    }
    let total: f64 = truth
        .iter()
        .zip(pred)
        .map(|(&y, &p)| {
            let q = p.clamp(BCE_EPS, 1.0 - BCE_EPS);
            -(y * q.ln() + (1.0 - y) * (1.0 - q).ln())
        })
        .sum();
    Ok(total / truth.len() as f64)
}

/// Derivative of [`bce_loss_slices`] with respect to each prediction
/// (zero where the clamp is active).
pub fn bce_grad(truth: &[f64], pred: &[f64]) -> Vec<f64> {
    let c = truth.len() as f64;
    truth
        .iter()
        .zip(pred)
        .map(|(&y, &p)| {
            if !(BCE_EPS..=1.0 - BCE_EPS).contains(&p) {
                0.0
            } else {
                (p - y) / (p * (1.0 - p)) / c
            }
        })
        .collect()
}

/// Dice overlap `2|A∩B| / (|A| + |B|)` of two binary masks.
///
/// Two empty masks score 1.0, the limit of the smoothed form.
pub fn dice_coefficient(gt: &BinaryMask, pred: &BinaryMask) -> Result<f64> {
    if gt.dims() != pred.dims() {
        return Err(Error::contract(format!("dice: mask dims {:?} vs {:?}", gt.dims(), pred.dims())));
    }
    let inter: usize = gt.data().iter().zip(pred.data()).map(|(&a, &b)| (a & b) as usize).sum();
    let total = gt.count() + pred.count();
    if total == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / total as f64)
}

/// Soft dice loss `1 - (2·Σ gt·p + s) / (Σ gt + Σ p + s)` with `s = DICE_SMOOTH`.
pub fn dice_loss(gt: &ProbabilityMap, prob: &ProbabilityMap) -> Result<f64> {
    if gt.dims() != prob.dims() {
        return Err(Error::contract(format!("dice_loss: map dims {:?} vs {:?}", gt.dims(), prob.dims())));
    }
    let inter: f64 = gt.data().iter().zip(prob.data()).map(|(a, b)| a * b).sum();
    let sums: f64 = gt.data().iter().sum::<f64>() + prob.data().iter().sum::<f64>();
    Ok(1.0 - (2.0 * inter + DICE_SMOOTH) / (sums + DICE_SMOOTH))
}

/// Zeroes every feature position outside the mask:
/// `out[i,j,k] = F[i,j,k]` where `mask[j,k] = 1`, else exactly 0.
pub fn feature_weight<T: Element>(global: &FeatureMap<T>, mask: &BinaryMask) -> Result<FeatureMap<T>> {
    let (h, w) = (global.height(), global.width());
    if mask.dims() != (h, w) {
        return Err(Error::contract(format!(
            "feature_weight: mask is {:?}, feature map is {h}×{w}",
            mask.dims()
        )));
    }
    let hw = h * w;
    let data = global
        .tensor()
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| if mask.data()[i % hw] == 1 { v } else { T::zero() })
        .collect();
    FeatureMap::new(Tensor::new(global.tensor().shape(), data))
}

/// Multiplies every channel by fractional spatial weights (soft-mask ablation).
pub fn feature_weight_soft<T: Element>(global: &FeatureMap<T>, weights: &ProbabilityMap) -> Result<FeatureMap<T>> {
    let (h, w) = (global.height(), global.width());
    if weights.dims() != (h, w) {
        return Err(Error::contract(format!(
            "feature_weight_soft: weights are {:?}, feature map is {h}×{w}",
            weights.dims()
        )));
    }
    let hw = h * w;
    let data = global
        .tensor()
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| v * T::c(weights.data()[i % hw]))
        .collect();
    FeatureMap::new(Tensor::new(global.tensor().shape(), data))
}

/// Pixel-wise union of equally sized masks.
pub fn merge_masks(parts: &[BinaryMask]) -> Result<BinaryMask> {
    let first = parts.first().ok_or_else(|| Error::contract("merge_masks: no masks given"))?;
    let mut data = first.data().to_vec();
    for p in &parts[1..] {
        if p.dims() != first.dims() {
            return Err(Error::contract(format!("merge_masks: dims {:?} vs {:?}", p.dims(), first.dims())));
        }
        for (d, &v) in data.iter_mut().zip(p.data()) {
            *d |= v;
        }
    }
    BinaryMask::new(first.height(), first.width(), data)
}

/// Half-open source range of adaptive pooling window `i` of `out` windows
/// over `len` inputs.
fn pool_window(i: usize, out: usize, len: usize) -> (usize, usize) {
    ((i * len) / out, ((i + 1) * len).div_ceil(out))
}

/// Adaptive average pooling of a mask to `height×width`, producing window means.
pub fn pool_mask(mask: &BinaryMask, height: usize, width: usize) -> Result<ProbabilityMap> {
    let (sh, sw) = mask.dims();
    if height == 0 || width == 0 || height > sh || width > sw {
        return Err(Error::contract(format!(
            "downsample_mask: target {height}×{width} not within source {sh}×{sw}"
        )));
    }
    let mut data = Vec::with_capacity(height * width);
    for r in 0..height {
        let (r0, r1) = pool_window(r, height, sh);
        for c in 0..width {
            let (c0, c1) = pool_window(c, width, sw);
            let mut on = 0usize;
            for y in r0..r1 {
                on += mask.data()[y * sw + c0..y * sw + c1].iter().map(|&v| v as usize).sum::<usize>();
            }
            data.push(on as f64 / ((r1 - r0) * (c1 - c0)) as f64);
        }
    }
    ProbabilityMap::new(height, width, data)
}

/// Adaptive average pooling followed by re-binarization at [`MASK_THRESHOLD`].
pub fn downsample_mask(mask: &BinaryMask, height: usize, width: usize) -> Result<BinaryMask> {
    binarize(&pool_mask(mask, height, width)?, MASK_THRESHOLD)
}

/// `1` where `prob >= threshold`, else `0`.
pub fn binarize(prob: &ProbabilityMap, threshold: f64) -> Result<BinaryMask> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::contract(format!("binarize: threshold {threshold} outside (0, 1)")));
    }
    BinaryMask::new(
        prob.height(),
        prob.width(),
        prob.data().iter().map(|&p| u8::from(p >= threshold)).collect(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn e1() -> LabelVector {
        LabelVector::from_diseases([Disease::Atelectasis])
    }

    #[test]
    fn bce_uniform_half_is_ln2() {
        let pred = ProbabilityVector::new(&[0.5; 14]).unwrap();
        assert!((bce_loss(&e1(), &pred) - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn bce_perfect_prediction_is_clamp_floor() {
        let truth = e1();
        let pred = ProbabilityVector::new(&truth.values()).unwrap();
        let loss = bce_loss(&truth, &pred);
        assert!(loss >= 0.0);
        assert!(loss <= -(1.0 - BCE_EPS).ln() + 1e-15);
    }

    #[test]
    fn bce_confident_correct_prediction() {
        // -(1/14)·[ln 0.9 + 13·ln 0.9] = -ln 0.9
        let mut p = [0.1; 14];
        p[0] = 0.9;
        let hand = -(0.9f64.ln() + 13.0 * 0.9f64.ln()) / 14.0;
        let got = bce_loss(&e1(), &ProbabilityVector::new(&p).unwrap());
        assert!((got - hand).abs() < 1e-12);
        assert!((got - 0.10536).abs() < 1e-5);
    }

    #[test]
    fn bce_rejects_mismatched_lengths() {
        assert!(matches!(bce_loss_slices(&[1.0, 0.0], &[0.5]), Err(Error::Contract(_))));
    }

    #[test]
    fn dice_examples() {
        let ones = BinaryMask::ones(2, 2);
        assert_eq!(dice_coefficient(&ones, &ones).unwrap(), 1.0);
        let a = BinaryMask::new(2, 2, vec![1, 1, 0, 0]).unwrap();
        let b = BinaryMask::new(2, 2, vec![0, 0, 1, 1]).unwrap();
        assert_eq!(dice_coefficient(&a, &b).unwrap(), 0.0);
        let gt = BinaryMask::new(2, 2, vec![1, 1, 0, 0]).unwrap();
        let pr = BinaryMask::new(2, 2, vec![1, 0, 0, 0]).unwrap();
        assert!((dice_coefficient(&gt, &pr).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        let z = BinaryMask::zeros(3, 3);
        assert_eq!(dice_coefficient(&z, &z).unwrap(), 1.0);
    }

    #[test]
    fn dice_loss_examples() {
        let gt = BinaryMask::new(2, 2, vec![1, 1, 0, 0]).unwrap().to_prob_map();
        assert!(dice_loss(&gt, &gt).unwrap().abs() < 1e-15);
        // Σgp = 0.5+0.5 = 1, Σg + Σp = 2 + 2 → 1 - (2+1)/(4+1) = 0.4
        let half = ProbabilityMap::uniform(2, 2, 0.5).unwrap();
        assert!((dice_loss(&gt, &half).unwrap() - 0.4).abs() < 1e-15);
        let big = BinaryMask::from_fn(16, 16, |r, _| r < 8);
        let inv = big.complement().to_prob_map();
        // 1 - 1/(256 + 1)
        assert!((dice_loss(&big.to_prob_map(), &inv).unwrap() - 256.0 / 257.0).abs() < 1e-15);
        assert!(matches!(dice_loss(&gt, &ProbabilityMap::uniform(1, 4, 0.5).unwrap()), Err(Error::Contract(_))));
    }

    #[test]
    fn feature_weight_examples() {
        let f = FeatureMap::new(Tensor::new(&[1, 2, 2], vec![1.0f32, 2.0, 3.0, 4.0])).unwrap();
        let diag = BinaryMask::new(2, 2, vec![1, 0, 0, 1]).unwrap();
        assert_eq!(feature_weight(&f, &diag).unwrap().tensor().data(), &[1.0, 0.0, 0.0, 4.0]);
        assert_eq!(feature_weight(&f, &BinaryMask::ones(2, 2)).unwrap(), f);
        assert!(feature_weight(&f, &BinaryMask::zeros(2, 2)).unwrap().tensor().data().iter().all(|&v| v == 0.0));
        assert!(matches!(feature_weight(&f, &BinaryMask::ones(3, 2)), Err(Error::Contract(_))));
    }

    #[test]
    fn merge_examples() {
        let left = BinaryMask::from_fn(4, 4, |_, c| c == 0);
        let right = BinaryMask::from_fn(4, 4, |_, c| c == 3);
        assert_eq!(merge_masks(std::slice::from_ref(&left)).unwrap(), left);
        let u = merge_masks(&[left.clone(), right.clone()]).unwrap();
        assert_eq!(u.count(), left.count() + right.count());
        assert!(matches!(merge_masks(&[]), Err(Error::Contract(_))));
    }

    #[test]
    fn downsample_examples() {
        assert_eq!(downsample_mask(&BinaryMask::ones(224, 224), 7, 7).unwrap(), BinaryMask::ones(7, 7));
        assert_eq!(downsample_mask(&BinaryMask::zeros(224, 224), 7, 7).unwrap(), BinaryMask::zeros(7, 7));
        // Window means by hand: top-left quadrant 4/4 = 1, the others 0/4.
        let quad = BinaryMask::from_fn(4, 4, |r, c| r < 2 && c < 2);
        let pooled = pool_mask(&quad, 2, 2).unwrap();
        assert_eq!(pooled.data(), &[1.0, 0.0, 0.0, 0.0]);
        assert_eq!(downsample_mask(&quad, 2, 2).unwrap().data(), &[1, 0, 0, 0]);
        assert!(matches!(downsample_mask(&quad, 5, 2), Err(Error::Contract(_))));
    }

    #[test]
    fn adaptive_windows_match_torch_convention() {
        // 224 → 7 splits evenly; 10 → 4 overlaps: [0,3) [2,5) [5,8) [7,10)
        assert_eq!(pool_window(0, 7, 224), (0, 32));
        assert_eq!(pool_window(6, 7, 224), (192, 224));
        let w: Vec<_> = (0..4).map(|i| pool_window(i, 4, 10)).collect();
        assert_eq!(w, vec![(0, 3), (2, 5), (5, 8), (7, 10)]);
    }

    #[test]
    fn binarize_examples() {
        let hi = ProbabilityMap::uniform(2, 3, 0.9).unwrap();
        assert_eq!(binarize(&hi, 0.5).unwrap(), BinaryMask::ones(2, 3));
        let lo = ProbabilityMap::uniform(2, 3, 0.1).unwrap();
        assert_eq!(binarize(&lo, 0.5).unwrap(), BinaryMask::zeros(2, 3));
        let edge = ProbabilityMap::uniform(1, 1, 0.5).unwrap();
        assert_eq!(binarize(&edge, 0.5).unwrap(), BinaryMask::ones(1, 1));
        assert!(binarize(&edge, 1.0).is_err());
    }

    #[test]
    fn label_vector_parsing_rules() {
        assert!(LabelVector::from_values(&[0.0; 14]).unwrap().is_no_finding());
        assert!(LabelVector::from_values(&[0.0; 13]).is_err());
        let mut bad = [0.0; 14];
        bad[3] = 0.5;
        assert!(LabelVector::from_values(&bad).is_err());
        assert_eq!(Disease::parse("Infiltrate"), Some(Disease::Infiltration));
        assert_eq!(Disease::parse("Pleural_Thickening"), Some(Disease::PleuralThickening));
        assert_eq!(Disease::parse("Nodules"), None);
    }
}
