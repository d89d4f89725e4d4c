//! Shared inputs for the benchmarks.

use waterformer::ImageRgb;

/// A deterministic textured image, cheap to build and far from constant.
pub fn test_image(height: usize, width: usize) -> ImageRgb {
    ImageRgb::from_fn(height, width, |y, x| {
        let (u, v) = (x as f64 / width as f64, y as f64 / height as f64);
        [
            0.5 + 0.4 * (7.0 * u + 3.0 * v).sin(),
            0.5 + 0.4 * (5.0 * v).cos() * (2.0 * u).sin(),
            0.5 + 0.3 * ((x * 31 + y * 17) % 13) as f64 / 13.0 - 0.15,
        ]
    })
    .expect("valid size")
}

/// The same scene with a color cast and haze, as a degraded counterpart.
pub fn hazy(img: &ImageRgb) -> ImageRgb {
    img.map_pixels(|p| [0.55 * p[0] + 0.05, 0.8 * p[1] + 0.12, 0.85 * p[2] + 0.13]).expect("in range").0
}
