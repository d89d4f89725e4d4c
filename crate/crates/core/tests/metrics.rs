//! Metrics against direct, unoptimized double-precision implementations.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use waterformer::metrics::{self, NrmseNorm, SsimMode};
use waterformer::ImageRgb;

fn random_pair(rng: &mut impl Rng, side: usize) -> (ImageRgb, ImageRgb) {
    let gt = ImageRgb::from_fn(side, side, |_, _| std::array::from_fn(|_| rng.random_range(0.0..1.0))).unwrap();
    let noise: f64 = rng.random_range(0.01..0.3);
    let (pred, _) = gt
        .map_pixels(|p| p.map(|v| (v + rng.random_range(-noise..noise)).clamp(0.0, 1.0)))
        .unwrap();
    (gt, pred)
}

fn naive_psnr(a: &ImageRgb, b: &ImageRgb) -> f64 {
    let mut se = 0.0;
    let mut n = 0usize;
    for y in 0..a.height() {
        for x in 0..a.width() {
            for c in 0..3 {
                se += (a.get(y, x)[c] - b.get(y, x)[c]).powi(2);
                n += 1;
            }
        }
    }
    10.0 * (1.0 / (se / n as f64)).log10()
}

fn naive_nrmse(a: &ImageRgb, b: &ImageRgb, minmax: bool) -> f64 {
    let (mut se, mut ss) = (0.0, 0.0);
    let (mut lo, mut hi) = (f64::MAX, f64::MIN);
    let mut n = 0.0;
    for y in 0..a.height() {
        for x in 0..a.width() {
            for c in 0..3 {
                let (g, p) = (a.get(y, x)[c], b.get(y, x)[c]);
                se += (g - p).powi(2);
                ss += g * g;
                lo = lo.min(g);
                hi = hi.max(g);
                n += 1.0;
            }
        }
    }
    let rmse = (se / n).sqrt();
    if minmax {
        rmse / (hi - lo)
    } else {
        rmse / (ss / n).sqrt()
    }
}

/// Windowed SSIM with an explicit 11x11 Gaussian weight matrix; every
/// window's weighted moments are summed directly.
fn naive_ssim_plane(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    let (h, w) = (a.len(), a[0].len());
    let mut weights = [[0.0f64; 11]; 11];
    let mut total = 0.0;
    for (i, row) in weights.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            let (di, dj) = (i as f64 - 5.0, j as f64 - 5.0);
            *v = (-(di * di + dj * dj) / (2.0 * 1.5 * 1.5)).exp();
            total += *v;
        }
    }
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let mut acc = 0.0;
    let mut count = 0.0;
    for y0 in 0..=h - 11 {
        for x0 in 0..=w - 11 {
            let (mut ma, mut mb) = (0.0, 0.0);
            for i in 0..11 {
                for j in 0..11 {
                    let k = weights[i][j] / total;
                    ma += k * a[y0 + i][x0 + j];
                    mb += k * b[y0 + i][x0 + j];
                }
            }
            let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
            for i in 0..11 {
                for j in 0..11 {
                    let k = weights[i][j] / total;
                    let (da, db) = (a[y0 + i][x0 + j] - ma, b[y0 + i][x0 + j] - mb);
                    va += k * da * da;
                    vb += k * db * db;
                    cov += k * da * db;
                }
            }
            acc += (2.0 * ma * mb + c1) * (2.0 * cov + c2) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            count += 1.0;
        }
    }
    acc / count
}

fn plane(img: &ImageRgb, f: impl Fn([f64; 3]) -> f64) -> Vec<Vec<f64>> {
    (0..img.height()).map(|y| (0..img.width()).map(|x| f(img.get(y, x))).collect()).collect()
}

fn luma(p: [f64; 3]) -> f64 {
    0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2]
}

#[test]
fn full_reference_metrics_match_naive_implementations() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for _ in 0..50 {
        let (gt, pred) = random_pair(&mut rng, 32);

        let p = metrics::psnr(&gt, &pred).unwrap();
        assert!((p - naive_psnr(&gt, &pred)).abs() <= 1e-6, "psnr {p}");

        let n = metrics::nrmse(&gt, &pred).unwrap();
        assert!((n - naive_nrmse(&gt, &pred, false)).abs() <= 1e-6);
        let n = metrics::nrmse_with(&gt, &pred, NrmseNorm::MinMax).unwrap();
        assert!((n - naive_nrmse(&gt, &pred, true)).abs() <= 1e-6);

        let s = metrics::ssim(&gt, &pred).unwrap();
        let oracle = naive_ssim_plane(&plane(&gt, luma), &plane(&pred, luma));
        assert!((s - oracle).abs() <= 1e-6, "ssim {s} vs {oracle}");

        let s = metrics::ssim_with(&gt, &pred, SsimMode::PerChannel).unwrap();
        let oracle =
            (0..3).map(|c| naive_ssim_plane(&plane(&gt, |p| p[c]), &plane(&pred, |p| p[c]))).sum::<f64>() / 3.0;
        assert!((s - oracle).abs() <= 1e-6, "per-channel ssim {s} vs {oracle}");
    }
}

#[test]
fn uniform_offset_of_a_tenth_is_twenty_decibels() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let gt = ImageRgb::from_fn(32, 32, |_, _| std::array::from_fn(|_| rng.random_range(0.0..0.9))).unwrap();
    let (pred, clamp) = gt.map_pixels(|p| p.map(|v| v + 0.1)).unwrap();
    assert!(!clamp.clipped());
    let p = metrics::psnr(&gt, &pred).unwrap();
    assert!((p - 20.0).abs() <= 1e-6, "{p}");
}

#[test]
fn identical_images_score_perfectly() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (gt, _) = random_pair(&mut rng, 24);
    assert_eq!(metrics::psnr(&gt, &gt).unwrap(), f64::INFINITY);
    assert!((metrics::ssim(&gt, &gt).unwrap() - 1.0).abs() < 1e-12);
    assert_eq!(metrics::nrmse(&gt, &gt).unwrap(), 0.0);
}

#[test]
fn metrics_reject_mismatched_or_tiny_inputs() {
    let a = ImageRgb::filled(16, 16, [0.5; 3]).unwrap();
    let b = ImageRgb::filled(16, 17, [0.5; 3]).unwrap();
    assert!(metrics::psnr(&a, &b).is_err());
    let small = ImageRgb::filled(8, 8, [0.5; 3]).unwrap();
    assert!(metrics::ssim(&small, &small).is_err());
    let black = ImageRgb::filled(16, 16, [0.0; 3]).unwrap();
    assert!(metrics::nrmse(&black, &a).is_err());
}

#[test]
fn no_reference_scores_prefer_vivid_contrast_over_flat_haze() {
    let vivid = ImageRgb::from_fn(64, 64, |y, x| {
        let checker = ((x / 8 + y / 8) % 2) as f64;
        [0.1 + 0.8 * checker, 0.5 - 0.3 * checker + 0.2 * (x as f64 / 64.0), 0.9 - 0.7 * (y as f64 / 64.0)]
    })
    .unwrap();
    let (haze, _) = vivid.map_pixels(|p| p.map(|v| 0.2 * v + 0.5)).unwrap();
    assert!(metrics::uciqe(&vivid) > metrics::uciqe(&haze));
    assert!(metrics::uiqm(&vivid) > metrics::uiqm(&haze));
    for img in [&vivid, &haze] {
        assert!(metrics::uciqe(img).is_finite() && metrics::uiqm(img).is_finite());
    }
}
