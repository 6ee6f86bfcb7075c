use cxr_core::core_ops::{
    bce_grad, bce_loss_slices, dice_coefficient, dice_loss, downsample_mask, feature_weight, merge_masks, pool_mask,
    BinaryMask, FeatureMap, ProbabilityMap, BCE_EPS,
};
use cxr_tensor::Tensor;
use proptest::prelude::*;

fn mask_strategy(h: usize, w: usize) -> impl Strategy<Value = BinaryMask> {
    proptest::collection::vec(0u8..=1, h * w).prop_map(move |d| BinaryMask::new(h, w, d).unwrap())
}

fn sized_mask() -> impl Strategy<Value = BinaryMask> {
    (1usize..12, 1usize..12).prop_flat_map(|(h, w)| mask_strategy(h, w))
}

fn mask_pair() -> impl Strategy<Value = (BinaryMask, BinaryMask)> {
    (1usize..10, 1usize..10).prop_flat_map(|(h, w)| (mask_strategy(h, w), mask_strategy(h, w)))
}

fn probs(n: usize) -> impl Strategy<Value = Vec<f64>> {
    proptest::collection::vec(prop_oneof![Just(0.0), Just(1.0), 0.0f64..=1.0], n)
}

proptest! {
    #[test]
    fn bce_is_non_negative_and_bounded(
        (y, p) in (1usize..20).prop_flat_map(|n| (proptest::collection::vec(0u8..=1, n), probs(n)))
    ) {
        let y: Vec<f64> = y.into_iter().map(f64::from).collect();
        let l = bce_loss_slices(&y, &p).unwrap();
        prop_assert!(l >= 0.0);
        // 1 - (1 - eps) rounds slightly below eps
        prop_assert!(l <= -(BCE_EPS.ln()) * (1.0 + 1e-6));
    }

    #[test]
    fn bce_gradient_is_zero_exactly_where_clamped(
        (y, p) in (1usize..20).prop_flat_map(|n| (proptest::collection::vec(0u8..=1, n), probs(n)))
    ) {
        let y: Vec<f64> = y.into_iter().map(f64::from).collect();
        for (g, &pi) in bce_grad(&y, &p).iter().zip(&p) {
            let clamped = pi < BCE_EPS || pi > 1.0 - BCE_EPS;
            prop_assert_eq!(*g == 0.0, clamped);
        }
    }

    #[test]
    fn dice_is_symmetric_and_in_unit_interval((a, b) in mask_pair()) {
        let ab = dice_coefficient(&a, &b).unwrap();
        prop_assert_eq!(ab, dice_coefficient(&b, &a).unwrap());
        prop_assert!((0.0..=1.0).contains(&ab));
        prop_assert_eq!(dice_coefficient(&a, &a).unwrap(), 1.0);
    }

    #[test]
    fn dice_is_one_only_for_equal_masks((a, b) in mask_pair()) {
        prop_assert_eq!(dice_coefficient(&a, &b).unwrap() == 1.0, a == b);
    }

    #[test]
    fn soft_dice_loss_is_in_unit_interval_and_zero_at_identity((a, b) in mask_pair()) {
        let (pa, pb) = (a.to_prob_map(), b.to_prob_map());
        let l = dice_loss(&pa, &pb).unwrap();
        prop_assert!((0.0..1.0).contains(&l));
        prop_assert_eq!(dice_loss(&pa, &pa).unwrap(), 0.0);
    }

    #[test]
    fn feature_weight_keeps_or_zeroes_each_position(
        (m, values) in (1usize..8, 1usize..8, 1usize..5).prop_flat_map(|(h, w, c)| {
            (mask_strategy(h, w), proptest::collection::vec(-1e3f32..1e3, c * h * w))
        })
    ) {
        let (h, w) = m.dims();
        let c = values.len() / (h * w);
        let f = FeatureMap::new(Tensor::new(&[c, h, w], values)).unwrap();
        let out = feature_weight(&f, &m).unwrap();
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let v = out.at(ch, y, x);
                    if m.get(y, x) {
                        prop_assert_eq!(v.to_bits(), f.at(ch, y, x).to_bits());
                    } else {
                        prop_assert_eq!(v.to_bits(), 0.0f32.to_bits());
                    }
                }
            }
        }
        // idempotent
        prop_assert_eq!(feature_weight(&out, &m).unwrap(), out);
    }

    #[test]
    fn merge_is_a_commutative_idempotent_union((a, b) in mask_pair()) {
        let ab = merge_masks(&[a.clone(), b.clone()]).unwrap();
        prop_assert_eq!(&ab, &merge_masks(&[b.clone(), a.clone()]).unwrap());
        prop_assert_eq!(&merge_masks(&[a.clone(), a.clone()]).unwrap(), &a);
        prop_assert!(ab.count() >= a.count().max(b.count()));
        prop_assert!(ab.count() <= a.count() + b.count());
    }

    #[test]
    fn pooled_values_are_fractions_and_downsampling_respects_extremes(
        (m, th, tw) in sized_mask().prop_flat_map(|m| {
            let (h, w) = m.dims();
            (Just(m), 1..=h, 1..=w)
        })
    ) {
        let p = pool_mask(&m, th, tw).unwrap();
        prop_assert!(p.data().iter().all(|v| (0.0..=1.0).contains(v)));
        let (h, w) = m.dims();
        prop_assert!(downsample_mask(&BinaryMask::ones(h, w), th, tw).unwrap().count() == th * tw);
        prop_assert!(downsample_mask(&BinaryMask::zeros(h, w), th, tw).unwrap().is_empty());
        // identity size is a no-op
        prop_assert_eq!(downsample_mask(&m, h, w).unwrap(), m);
    }

    #[test]
    fn downsampling_is_monotone((a, b, th, tw) in mask_pair().prop_flat_map(|(a, b)| {
        let (h, w) = a.dims();
        (Just(a), Just(b), 1..=h, 1..=w)
    })) {
        // a ⊆ a ∪ b, so every kept cell of a stays kept
        let u = merge_masks(&[a.clone(), b]).unwrap();
        let (da, du) = (downsample_mask(&a, th, tw).unwrap(), downsample_mask(&u, th, tw).unwrap());
        for (x, y) in da.data().iter().zip(du.data()) {
            prop_assert!(x <= y);
        }
    }

    #[test]
    fn probability_map_rejects_out_of_range(v in prop_oneof![-10.0f64..-1e-9, 1.0f64 + 1e-9..10.0]) {
        prop_assert!(ProbabilityMap::new(1, 1, vec![v]).is_err());
    }
}
