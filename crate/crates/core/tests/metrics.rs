use std::path::PathBuf;

use imls_core::metrics::{
    chamfer_distance, composite_loss, dssim, l1, mse, one_sided_distance, psnr, ssim, ImageBuffer, PointIndex,
};
use imls_core::Vec3;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

/// Reference SSIM values from a float64 PyTorch conv2d implementation
/// (tests/fixtures/make_ssim_fixtures.py).
const SSIM_REFERENCE: [(&str, f64); 3] = [
    ("rgb8", 0.7241281449842365),
    ("gray8", 0.7538322294311516),
    ("rgb16", 0.5565417014376195),
];

fn load_pair(name: &str) -> (ImageBuffer, ImageBuffer) {
    let a = ImageBuffer::from_png(fixture(&format!("ssim_{name}_a.png"))).unwrap();
    let b = ImageBuffer::from_png(fixture(&format!("ssim_{name}_b.png"))).unwrap();
    (a, b)
}

fn random_points(rng: &mut ChaCha8Rng, n: usize) -> Vec<Vec3> {
    (0..n).map(|_| Vec3::new(rng.random(), rng.random(), rng.random())).collect()
}

fn brute_mean_nearest(from: &[Vec3], to: &[Vec3]) -> f64 {
    let total: f64 = from
        .iter()
        .map(|p| to.iter().map(|q| (p - q).norm()).fold(f64::INFINITY, f64::min))
        .sum();
    total / from.len() as f64
}

#[test]
fn ssim_matches_reference_fixtures() {
    for (name, expected) in SSIM_REFERENCE {
        let (a, b) = load_pair(name);
        let got = ssim(&a, &b).unwrap();
        assert!((got - expected).abs() < 1e-4, "{name}: {got} vs {expected}");
        assert!((ssim(&b, &a).unwrap() - got).abs() < 1e-12);
    }
}

#[test]
fn png_bit_depths_map_to_unit_range() {
    let (a, _) = load_pair("rgb8");
    assert_eq!((a.width(), a.height(), a.channels()), (32, 24, 3));
    let (g, _) = load_pair("gray8");
    assert_eq!(g.channels(), 1);
    let (w, _) = load_pair("rgb16");
    assert_eq!((w.width(), w.height(), w.channels()), (20, 20, 3));
    for img in [&a, &g, &w] {
        assert!(img.pixels().iter().all(|v| (0.0..=1.0).contains(v)));
    }
    // 8-bit values land exactly on multiples of 1/255.
    assert!(a.pixels().iter().all(|v| ((v * 255.0).round() - v * 255.0).abs() < 1e-9));
}

#[test]
fn single_pixel_ssim_by_hand() {
    // With zero padding only the centre tap of the window sees the pixel.
    let g: Vec<f64> = (0..11).map(|i| (-((i as f64 - 5.0).powi(2)) / 4.5).exp()).collect();
    let c = (g[5] / g.iter().sum::<f64>()).powi(2);
    let (x, y) = (0.2, 0.7);
    let (mx, my) = (c * x, c * y);
    let (vx, vy, cov) = (c * x * x - mx * mx, c * y * y - my * my, c * x * y - mx * my);
    let (c1, c2) = (1e-4, 9e-4);
    let expected = ((2.0 * mx * my + c1) * (2.0 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
    let a = ImageBuffer::new(1, 1, 1, vec![x]).unwrap();
    let b = ImageBuffer::new(1, 1, 1, vec![y]).unwrap();
    assert!((ssim(&a, &b).unwrap() - expected).abs() < 1e-12);
    let mix = 0.8 * 0.5 + 0.2 * (1.0 - expected) / 2.0;
    assert!((composite_loss(&a, &b, 0.2).unwrap() - mix).abs() < 1e-12);
}

#[test]
fn composite_mixes_l1_and_dssim_on_fixtures() {
    for (name, reference) in SSIM_REFERENCE {
        let (a, b) = load_pair(name);
        let l1_hand: f64 =
            a.pixels().iter().zip(b.pixels()).map(|(p, q)| (p - q).abs()).sum::<f64>() / a.pixels().len() as f64;
        assert!((l1(&a, &b).unwrap() - l1_hand).abs() < 1e-15);
        let expected = 0.8 * l1_hand + 0.2 * (1.0 - reference) / 2.0;
        assert!((composite_loss(&a, &b, 0.2).unwrap() - expected).abs() < 1e-5);
        let exact = 0.8 * l1_hand + 0.2 * dssim(&a, &b).unwrap();
        assert!((composite_loss(&a, &b, 0.2).unwrap() - exact).abs() < 1e-15);
    }
}

#[test]
fn psnr_is_consistent_with_mse() {
    for (name, _) in SSIM_REFERENCE {
        let (a, b) = load_pair(name);
        let e = mse(&a, &b).unwrap();
        assert!(e > 0.0);
        assert!((psnr(&a, &b).unwrap() + 10.0 * e.log10()).abs() < 1e-9);
        assert_eq!(psnr(&a, &a).unwrap(), f64::INFINITY);
    }
}

#[test]
fn chamfer_matches_brute_force_on_500_points() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..3 {
        let a = random_points(&mut rng, 500);
        let b = random_points(&mut rng, 500);
        let expected = 0.5 * (brute_mean_nearest(&a, &b) + brute_mean_nearest(&b, &a));
        assert!((chamfer_distance(&a, &b).unwrap() - expected).abs() < 1e-12);
        assert!((one_sided_distance(&a, &b).unwrap() - brute_mean_nearest(&a, &b)).abs() < 1e-12);
    }
}

#[test]
fn nearest_handles_clustered_and_distant_sets() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let cluster: Vec<Vec3> = (0..300)
        .map(|_| Vec3::new(0.5, 0.5, 0.5) + 1e-3 * Vec3::new(rng.random(), rng.random(), rng.random()))
        .collect();
    let far = vec![Vec3::new(-3.0, 4.0, 10.0), Vec3::new(2.0, 2.0, 2.0)];
    let index = PointIndex::new(&cluster).unwrap();
    for q in &far {
        let brute = cluster.iter().map(|p| (q - p).norm()).fold(f64::INFINITY, f64::min);
        assert_eq!(index.nearest_distance(q), brute);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn chamfer_is_symmetric_and_zero_on_itself(seed in 0u64..1000, na in 1usize..60, nb in 1usize..60) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random_points(&mut rng, na);
        let b = random_points(&mut rng, nb);
        prop_assert_eq!(chamfer_distance(&a, &b).unwrap(), chamfer_distance(&b, &a).unwrap());
        prop_assert_eq!(chamfer_distance(&a, &a).unwrap(), 0.0);
    }

    #[test]
    fn chamfer_of_translate_is_bounded(seed in 0u64..1000, n in 1usize..60, t in prop::array::uniform3(-0.3f64..0.3)) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random_points(&mut rng, n);
        let t = Vec3::from(t);
        let b: Vec<Vec3> = a.iter().map(|p| p + t).collect();
        prop_assert!(chamfer_distance(&a, &b).unwrap() <= t.norm() + 1e-12);
        let single = chamfer_distance(&a[..1], &b[..1]).unwrap();
        prop_assert!((single - t.norm()).abs() < 1e-12);
    }

    #[test]
    fn ssim_is_bounded_and_one_on_itself(
        seed in 0u64..1000, w in 1usize..20, h in 1usize..20, channels in prop::sample::select(vec![1usize, 3]),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut image = || {
            let px = (0..w * h * channels).map(|_| rng.random::<f64>()).collect();
            ImageBuffer::new(w, h, channels, px).unwrap()
        };
        let (a, b) = (image(), image());
        let s = ssim(&a, &b).unwrap();
        prop_assert!((-1.0..=1.0).contains(&s));
        prop_assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-9);
        let e = mse(&a, &b).unwrap();
        prop_assert!((psnr(&a, &b).unwrap() + 10.0 * e.log10()).abs() < 1e-9);
    }
}
