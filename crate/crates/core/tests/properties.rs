use proptest::prelude::*;

use sfuda_core::eval::{brats_regions, dice};
use sfuda_core::losses::{binary_entropy, ensemble_entropy_loss_grad};
use sfuda_core::models::{build_model, forward, ArchSpec};
use sfuda_core::pseudolabel::{enhance, fn_mask, fuse_entropy, selective_mask};
use sfuda_core::tensor::{BinaryMask, ClassMap, Tensor};

fn field(v: Vec<f64>) -> Tensor<f64> {
    let n = v.len();
    Tensor::new(vec![1, 1, n], v).unwrap()
}

fn probs(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.0f64..=1.0, n)
}

fn bits(n: usize) -> impl Strategy<Value = Vec<u8>> {
    prop::collection::vec(0u8..=1, n)
}

fn mask(v: Vec<u8>) -> BinaryMask {
    let n = v.len();
    BinaryMask::new(vec![n], v).unwrap()
}

proptest! {
    #[test]
    fn dice_is_symmetric_and_permutation_invariant(
        (a, b, perm) in (1usize..64).prop_flat_map(|n| (bits(n), bits(n), Just((0..n).collect::<Vec<_>>()).prop_shuffle()))
    ) {
        let d = dice(&mask(a.clone()), &mask(b.clone())).unwrap();
        prop_assert_eq!(d, dice(&mask(b.clone()), &mask(a.clone())).unwrap());
        prop_assert!((0.0..=1.0).contains(&d));
        let pa: Vec<u8> = perm.iter().map(|&i| a[i]).collect();
        let pb: Vec<u8> = perm.iter().map(|&i| b[i]).collect();
        prop_assert!((d - dice(&mask(pa), &mask(pb)).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn tumour_regions_are_nested(classes in prop::collection::vec(0u8..4, 1..100)) {
        let n = classes.len();
        let [wt, tc, et] = brats_regions(&ClassMap::new(vec![n], classes, 4).unwrap()).unwrap();
        for i in 0..n {
            prop_assert!(et.data()[i] <= tc.data()[i]);
            prop_assert!(tc.data()[i] <= wt.data()[i]);
        }
    }

    #[test]
    fn masks_are_binary_and_idempotent((p, h) in (1usize..64).prop_flat_map(|n| (probs(n), probs(n)))) {
        let z = selective_mask(&field(h));
        let u = fn_mask(&field(p.clone()), 0.3, 0.5);
        prop_assert!(z.data().iter().chain(u.data()).all(|&v| v <= 1));
        let z_again = selective_mask(&field(z.data().iter().map(|&v| f64::from(v)).collect()));
        prop_assert_eq!(z_again.data(), z.data());

        let base = BinaryMask::threshold(&field(p), 0.5);
        let once = enhance(&base, &z, &u).unwrap();
        prop_assert_eq!(enhance(&once, &z, &u).unwrap(), once.clone());
        // Enhancement only ever adds foreground.
        prop_assert!(base.data().iter().zip(once.data()).all(|(&b, &e)| e >= b));
    }

    #[test]
    fn fused_entropy_is_normalised(
        (h, augs, alpha, delta) in (2usize..64).prop_flat_map(|n| (
            prop::collection::vec(0.0f64..0.7, n),
            prop::collection::vec(prop::collection::vec(0.0f64..0.7, n), 1..4),
            0.0f64..=1.0,
            0.0f64..0.5,
        ))
    ) {
        let augs: Vec<Tensor<f64>> = augs.into_iter().map(field).collect();
        let out = fuse_entropy(&field(h), &augs, alpha, delta).unwrap();
        prop_assert!(out.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn fusion_of_one_map_ignores_scale(h in prop::collection::vec(0.0f64..0.7, 2..64), scale in 0.1f64..10.0) {
        let a = fuse_entropy(&field(h.clone()), &[field(h.clone())], 1.0, 0.0).unwrap();
        let scaled: Vec<f64> = h.iter().map(|v| v * scale).collect();
        let b = fuse_entropy(&field(scaled.clone()), &[field(scaled)], 1.0, 0.0).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            prop_assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn ensemble_entropy_ignores_element_and_view_order(
        (p, augs, perm) in (1usize..48).prop_flat_map(|n| (
            probs(n),
            prop::collection::vec(probs(n), 1..4),
            Just((0..n).collect::<Vec<_>>()).prop_shuffle(),
        ))
    ) {
        let value = |p: &[f64], augs: &[Vec<f64>]| {
            let a: Vec<Tensor<f64>> = augs.iter().map(|a| field(a.clone())).collect();
            ensemble_entropy_loss_grad(&field(p.to_vec()), &a).unwrap().0
        };
        let base = value(&p, &augs);
        let shuffle = |v: &[f64]| perm.iter().map(|&i| v[i]).collect::<Vec<_>>();
        let permuted: Vec<Vec<f64>> = augs.iter().map(|a| shuffle(a)).collect();
        prop_assert!((base - value(&shuffle(&p), &permuted)).abs() < 1e-12);
        let mut reversed = augs.clone();
        reversed.reverse();
        prop_assert!((base - value(&p, &reversed)).abs() < 1e-12);
    }

    #[test]
    fn binary_entropy_is_symmetric(p in 0.0f64..=1.0) {
        prop_assert!((binary_entropy(p) - binary_entropy(1.0 - p)).abs() < 1e-12);
        prop_assert!(binary_entropy(p) <= std::f64::consts::LN_2 + 1e-15);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn output_matches_input_extent(h in 1usize..4, w in 1usize..4, classes in prop::sample::select(vec![1usize, 3])) {
        let arch = ArchSpec { levels: 5, base_width: 2, out_classes: classes, ..Default::default() };
        let model = build_model::<f32>(&arch, 1).unwrap();
        let (h, w) = (16 * h, 16 * w);
        let x = Tensor::from_fn(vec![1, 3, h, w], |i| ((i * 7) % 11) as f32 / 11.0);
        let out = forward(&model, &x).unwrap();
        prop_assert_eq!(out.probs.shape(), &[1, classes, h, w]);
        prop_assert_eq!(out.latent.shape(), &[1, 32, h / 16, w / 16]);
    }
}
