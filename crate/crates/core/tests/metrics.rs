use nerfvs_core::eval::{coverage_binned_psnr, depth_error, psnr, ssim, CoverageBin};
use nerfvs_core::io::Image;
use nerfvs_core::scaffold::CoverageMap;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn textured(w: u32, h: u32, seed: u64) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut img = Image::new(w, h);
    for (i, px) in img.data.iter_mut().enumerate() {
        let (x, y) = ((i as u32 % w) as f64, (i as u32 / w) as f64);
        let base = 0.5 + 0.3 * (x * 0.4).sin() * (y * 0.3).cos();
        *px = [base, base * 0.8 + 0.1 * rng.gen::<f64>(), 1.0 - base];
    }
    img
}

fn noisy(img: &Image, sigma: f64, seed: u64) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = img.clone();
    for px in &mut out.data {
        for c in px.iter_mut() {
            *c += sigma * (rng.gen::<f64>() - 0.5);
        }
    }
    out
}

#[test]
fn ssim_extremes() {
    let a = textured(40, 32, 1);
    assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
    let mut neg = a.clone();
    for px in &mut neg.data {
        *px = px.map(|c| 1.0 - c);
    }
    assert!(ssim(&a, &neg).unwrap() < 0.3);
}

#[test]
fn psnr_falls_as_noise_grows() {
    let a = textured(32, 32, 2);
    let mut last = f64::INFINITY;
    for (k, sigma) in [0.01, 0.03, 0.1, 0.3].into_iter().enumerate() {
        let p = psnr(&noisy(&a, sigma, k as u64), &a).unwrap();
        assert!(p < last);
        last = p;
    }
    // Uniform noise of width s has variance s^2 / 12.
    let p = psnr(&noisy(&a, 0.1, 9), &a).unwrap();
    let expect = -10.0 * (0.01f64 / 12.0).log10();
    assert!((p - expect).abs() < 0.2, "{p} vs {expect}");
}

proptest! {
    #[test]
    fn ssim_is_symmetric(seed in 0u64..1000, sigma in 0.0f64..0.5) {
        let a = textured(24, 20, seed);
        let b = noisy(&a, sigma, seed + 1);
        let (ab, ba) = (ssim(&a, &b).unwrap(), ssim(&b, &a).unwrap());
        prop_assert!((ab - ba).abs() < 1e-12);
        prop_assert!(ab <= 1.0 + 1e-12);
    }
}

#[test]
fn binned_psnr_partitions_observed_pixels() {
    let gt = textured(20, 20, 3);
    let pred = noisy(&gt, 0.2, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let cov = CoverageMap {
        width: 20,
        height: 20,
        values: (0..400).map(|_| rng.gen_range(0..14)).collect(),
    };
    let bins = coverage_binned_psnr(&[&pred], &[&gt], &[&cov]).unwrap();
    let observed = cov.values.iter().filter(|&&c| c > 0).count();
    assert_eq!(bins.iter().map(|b| b.pixels).sum::<usize>(), observed);
    for b in &bins {
        let n = cov.values.iter().filter(|&&c| CoverageBin::of(c) == Some(b.bin)).count();
        assert_eq!(b.pixels, n);
    }
}

#[test]
fn depth_error_uses_only_masked_pixels() {
    let pred = [1.0, 2.0, 10.0, 4.0];
    let gt = [1.5, 2.0, 0.0, 3.0];
    let (rmse, med) = depth_error(&pred, &gt, &[true, true, false, true]).unwrap();
    assert!((rmse - (1.25f64 / 3.0).sqrt()).abs() < 1e-12);
    assert_eq!(med, 0.5);
}
