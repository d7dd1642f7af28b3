mod common;

use adaseg_core::data::{apply_shift_with, ShiftLevel};
use adaseg_core::pipeline::{dice, postprocess, tpr, BinaryMask};
use adaseg_core::tensor::Tensor;
use common::oracle_postprocess;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn mask_strategy() -> impl Strategy<Value = BinaryMask> {
    (2usize..12, 2usize..12).prop_flat_map(|(h, w)| {
        prop::collection::vec(any::<bool>(), h * w)
            .prop_map(move |d| BinaryMask::new(h, w, d).unwrap())
    })
}

fn pair_strategy() -> impl Strategy<Value = (BinaryMask, BinaryMask)> {
    (2usize..12, 2usize..12).prop_flat_map(|(h, w)| {
        (
            prop::collection::vec(any::<bool>(), h * w),
            prop::collection::vec(any::<bool>(), h * w),
        )
            .prop_map(move |(a, b)| {
                (
                    BinaryMask::new(h, w, a).unwrap(),
                    BinaryMask::new(h, w, b).unwrap(),
                )
            })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn postprocess_is_idempotent(m in mask_strategy()) {
        let once = postprocess(&m);
        let twice = postprocess(&once);
        prop_assert_eq!(twice.data(), once.data());
    }

    #[test]
    fn postprocess_matches_oracle(m in mask_strategy()) {
        let out = postprocess(&m);
        prop_assert_eq!(out.data(), &oracle_postprocess(&m)[..]);
    }

    #[test]
    fn dice_is_symmetric_and_bounded((a, b) in pair_strategy()) {
        let ab = dice(&a, &b).unwrap();
        prop_assert_eq!(ab, dice(&b, &a).unwrap());
        prop_assert!((0.0..=1.0).contains(&ab));
        prop_assert_eq!(ab, common::oracle_dice(&a, &b));
    }

    #[test]
    fn tpr_is_bounded_counting((p, a) in pair_strategy()) {
        match tpr(&p, &a) {
            Ok(v) => {
                prop_assert_eq!(Some(v), common::oracle_tpr(&p, &a));
                prop_assert!((0.0..=1.0).contains(&v));
            }
            Err(_) => prop_assert_eq!(a.count(), 0),
        }
    }

    #[test]
    fn shift_factors_stay_in_range(seed in any::<u64>(), harsh in any::<bool>(), vals in prop::collection::vec(-1.0f32..1.0, 16)) {
        let level = if harsh { ShiftLevel::Harsh } else { ShiftLevel::Weak };
        let r = level.scale_range();
        let img = Tensor::new(&[1, 4, 4], vals).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let out = apply_shift_with(&img, r, level.noise_std(), &mut rng);
        prop_assert!(out.alpha >= 1.0 - r && out.alpha <= 1.0 + r);
        prop_assert!(out.beta >= 1.0 - r && out.beta <= 1.0 + r);
        prop_assert!(out.output.data().iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn no_shift_is_identity(seed in any::<u64>(), vals in prop::collection::vec(-1.0f32..1.0, 16)) {
        let img = Tensor::new(&[1, 4, 4], vals).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let out = apply_shift_with(&img, ShiftLevel::None.scale_range(), ShiftLevel::None.noise_std(), &mut rng);
        prop_assert_eq!(out.output, img);
    }
}
