mod common;

use common::{ssim_pairs, PAIR_H, PAIR_W, SSIM_REFERENCE};
use fair_denoise::metrics::{psnr, ssim, ssim_plane};
use fair_denoise::tensor::Tensor;
use proptest::prelude::*;

#[test]
fn ssim_matches_the_reference_on_crafted_pairs() {
    for ((name, a, b), (ref_name, want)) in ssim_pairs().into_iter().zip(SSIM_REFERENCE) {
        assert_eq!(name, ref_name);
        let got = ssim_plane(&a, &b, PAIR_H, PAIR_W).unwrap();
        assert!((got - want).abs() < 1e-6, "{name}: {got} vs {want}");
    }
}

#[test]
fn tensor_ssim_agrees_with_plane_ssim() {
    for (name, a, b) in ssim_pairs() {
        let t = |p: &[f64]| {
            Tensor::new(
                vec![1, PAIR_H, PAIR_W],
                p.iter().map(|v| (v / 255.0) as f32).collect(),
            )
            .unwrap()
        };
        let via_tensor = ssim(&t(&a), &t(&b)).unwrap();
        let direct = ssim_plane(&a, &b, PAIR_H, PAIR_W).unwrap();
        assert!((via_tensor - direct).abs() < 1e-5, "{name}");
    }
}

#[test]
fn uniform_one_level_difference() {
    let a = Tensor::from_fn(&[3, 17, 23], |i| ((i * 7) % 250) as f32 / 255.0);
    let b = a.map(|v| v + 1.0 / 255.0);
    let want = 20.0 * 255f64.log10();
    assert!((psnr(&a, &b).unwrap() - want).abs() < 1e-3);
    assert!((want - 48.1308).abs() < 1e-4);
}

fn image() -> impl Strategy<Value = Tensor<f32>> {
    (1usize..3, 11usize..16, 11usize..16).prop_flat_map(|(c, h, w)| {
        proptest::collection::vec(0.0f32..=1.0, c * h * w)
            .prop_map(move |d| Tensor::new(vec![c, h, w], d).unwrap())
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn ssim_is_symmetric_bounded_and_one_on_identity(a in image(), seed in any::<u32>()) {
        let b = a.map(|v| ((v * 7.3 + seed as f32 * 1e-3) % 1.0).abs());
        let s = ssim(&a, &b).unwrap();
        prop_assert!((s - ssim(&b, &a).unwrap()).abs() < 1e-12);
        prop_assert!((-1.0..=1.0 + 1e-12).contains(&s));
        prop_assert_eq!(ssim(&a, &a).unwrap(), 1.0);
    }

    #[test]
    fn psnr_is_symmetric_and_capped(a in image(), shift in 0.0f32..0.3) {
        let b = a.map(|v| v + shift);
        let p = psnr(&a, &b).unwrap();
        prop_assert_eq!(p, psnr(&b, &a).unwrap());
        prop_assert!((0.0..=100.0).contains(&p));
    }
}
