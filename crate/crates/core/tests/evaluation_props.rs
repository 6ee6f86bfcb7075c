use cxr_core::core_ops::{Disease, FeatureMap, ProbabilityMap};
use cxr_core::data_pipeline::Rect;
use cxr_core::evaluation::{
    auroc, cam_raw, heatmap_to_box, iou, roc_curve, select_threshold, trapezoid_area, MetricReport,
};
use cxr_tensor::Tensor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Probability that a random positive outscores a random negative, ties half.
fn pairwise_auroc(scores: &[f64], labels: &[bool]) -> Option<f64> {
    let (mut wins, mut pairs) = (0.0, 0usize);
    for (i, &li) in labels.iter().enumerate() {
        for (j, &lj) in labels.iter().enumerate() {
            if li && !lj {
                pairs += 1;
                wins += match scores[i].partial_cmp(&scores[j]).unwrap() {
                    std::cmp::Ordering::Greater => 1.0,
                    std::cmp::Ordering::Equal => 0.5,
                    std::cmp::Ordering::Less => 0.0,
                };
            }
        }
    }
    (pairs > 0).then(|| wins / pairs as f64)
}

fn scored_set() -> impl Strategy<Value = (Vec<f64>, Vec<bool>)> {
    (1usize..40).prop_flat_map(|n| {
        (
            proptest::collection::vec((0u32..=20).prop_map(|k| k as f64 / 20.0), n),
            proptest::collection::vec(any::<bool>(), n),
        )
    })
}

#[test]
fn auroc_matches_pairwise_count_on_a_thousand_random_sets() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..1000 {
        let n = rng.random_range(2..60);
        let levels = rng.random_range(2..30);
        let scores: Vec<f64> = (0..n).map(|_| rng.random_range(0..levels) as f64 / levels as f64).collect();
        let labels: Vec<bool> = (0..n).map(|_| rng.random_bool(0.4)).collect();
        match (auroc(&scores, &labels), pairwise_auroc(&scores, &labels)) {
            (Some(a), Some(b)) => assert!((a - b).abs() < 1e-12, "{a} vs {b}"),
            (a, b) => assert_eq!(a, b),
        }
    }
}

proptest! {
    #[test]
    fn auroc_ignores_strictly_increasing_transforms((s, l) in scored_set()) {
        let t: Vec<f64> = s.iter().map(|v| (3.0 * v).exp() - 7.0).collect();
        prop_assert_eq!(auroc(&s, &l), auroc(&t, &l));
    }

    #[test]
    fn reversing_scores_complements_auroc((s, l) in scored_set()) {
        let r: Vec<f64> = s.iter().map(|v| 1.0 - v).collect();
        if let (Some(a), Some(b)) = (auroc(&s, &l), auroc(&r, &l)) {
            prop_assert!((a + b - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn roc_curve_runs_corner_to_corner_and_integrates_to_auroc((s, l) in scored_set()) {
        let Some(curve) = roc_curve(&s, &l) else {
            prop_assert!(auroc(&s, &l).is_none());
            return Ok(());
        };
        let (first, last) = (curve.first().unwrap(), curve.last().unwrap());
        prop_assert!(first.threshold.is_infinite());
        prop_assert_eq!((first.sensitivity, first.specificity), (0.0, 1.0));
        prop_assert_eq!((last.sensitivity, last.specificity), (1.0, 0.0));
        for w in curve.windows(2) {
            prop_assert!(w[1].threshold < w[0].threshold);
            prop_assert!(w[1].sensitivity >= w[0].sensitivity);
            prop_assert!(w[1].specificity <= w[0].specificity);
        }
        let mut distinct = s.clone();
        distinct.sort_by(|a, b| a.partial_cmp(b).unwrap());
        distinct.dedup();
        prop_assert_eq!(curve.len(), distinct.len() + 1);
        prop_assert!((trapezoid_area(&curve) - auroc(&s, &l).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn chosen_threshold_maximises_youden((s, l) in scored_set()) {
        let Some(curve) = roc_curve(&s, &l) else { return Ok(()) };
        let t = select_threshold(&curve);
        let j = |th: f64| {
            let pos = l.iter().filter(|&&x| x).count() as f64;
            let neg = l.len() as f64 - pos;
            let tp = s.iter().zip(&l).filter(|(v, &y)| y && **v >= th).count() as f64;
            let tn = s.iter().zip(&l).filter(|(v, &y)| !y && **v < th).count() as f64;
            tp / pos + tn / neg - 1.0
        };
        let best = s.iter().map(|&th| j(th)).fold(j(f64::INFINITY), f64::max);
        prop_assert!((j(t) - best).abs() < 1e-12);
    }

    #[test]
    fn metric_report_mean_skips_single_valued_classes(n in 2usize..30, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scores: Vec<[f64; 14]> = (0..n).map(|_| std::array::from_fn(|_| rng.random::<f64>())).collect();
        let labels: Vec<[bool; 14]> = (0..n).map(|_| std::array::from_fn(|k| k < 3 && rng.random_bool(0.5))).collect();
        let r = MetricReport::compute(&scores, &labels).unwrap();
        let defined: Vec<f64> = r.auroc.iter().flatten().copied().collect();
        prop_assert!(r.undefined() >= 11);
        if defined.is_empty() {
            prop_assert_eq!(r.mean(), None);
        } else {
            prop_assert!((r.mean().unwrap() - defined.iter().sum::<f64>() / defined.len() as f64).abs() < 1e-15);
        }
    }

    #[test]
    fn cam_is_linear_in_the_head_weights(
        c in 1usize..6, h in 1usize..6, w in 1usize..6, seed in any::<u64>(), a in -4i32..4, b in -4i32..4
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let f = FeatureMap::new(Tensor::from_fn(&[c, h, w], |_| rng.random_range(-1.0f32..1.0))).unwrap();
        let w1 = Tensor::from_fn(&[2, c], |_| rng.random_range(-1.0f32..1.0));
        let w2 = Tensor::from_fn(&[2, c], |_| rng.random_range(-1.0f32..1.0));
        let (a, b) = (a as f32, b as f32);
        let mix = w1.zip_map(&w2, |x, y| a * x + b * y);
        let (_, _, m) = cam_raw(&f, &mix, 1).unwrap();
        let (_, _, m1) = cam_raw(&f, &w1, 1).unwrap();
        let (_, _, m2) = cam_raw(&f, &w2, 1).unwrap();
        for ((v, v1), v2) in m.iter().zip(&m1).zip(&m2) {
            prop_assert!((v - (a as f64 * v1 + b as f64 * v2)).abs() < 1e-5);
        }
    }

    #[test]
    fn extracted_box_lies_in_the_frame_and_covers_the_cut(
        h in 1usize..8, frame in 8usize..40, seed in any::<u64>(), fraction in 0.05f64..1.0
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let heat = ProbabilityMap::new(h, h, (0..h * h).map(|_| rng.random::<f64>()).collect()).unwrap();
        let b = heatmap_to_box(&heat, frame, fraction, Disease::Mass).unwrap();
        let f = frame as f64;
        prop_assert!(b.rect.x >= 0.0 && b.rect.y >= 0.0 && b.rect.right() <= f && b.rect.bottom() <= f);
        prop_assert!(b.rect.w >= 1.0 && b.rect.h >= 1.0);
        let full = heatmap_to_box(&heat, frame, 0.0, Disease::Mass).unwrap();
        prop_assert_eq!(full.rect, Rect::new(0.0, 0.0, f, f));
    }

    #[test]
    fn iou_is_symmetric_bounded_and_scale_free(
        v in proptest::collection::vec(0.0f64..50.0, 8), k in 0u32..4
    ) {
        let a = Rect::new(v[0], v[1], v[2] + 0.5, v[3] + 0.5);
        let b = Rect::new(v[4], v[5], v[6] + 0.5, v[7] + 0.5);
        let ab = iou(&a, &b);
        prop_assert_eq!(ab, iou(&b, &a));
        prop_assert!((0.0..=1.0).contains(&ab));
        prop_assert!((iou(&a, &a) - 1.0).abs() < 1e-12);
        let s = 2f64.powi(k as i32);
        let sc = |r: &Rect| Rect::new(r.x * s, r.y * s, r.w * s, r.h * s);
        prop_assert!((iou(&sc(&a), &sc(&b)) - ab).abs() < 1e-12);
    }
}
