//! RGB <-> YIQ conversion and channel statistics.

use crate::image::{ClampReport, ImageRgb};
use crate::error::Result;

/// NTSC RGB -> YIQ matrix (rows Y, I, Q).
pub const RGB_TO_YIQ: [[f64; 3]; 3] = [
    [0.299, 0.587, 0.114],
    [0.596, -0.274, -0.322],
    [0.211, -0.523, 0.312],
];

/// Exact inverse of [`RGB_TO_YIQ`], evaluated once in extended precision.
pub const YIQ_TO_RGB: [[f64; 3]; 3] = [
    [1.0, 0.956_170_685_404_145_1, 0.621_432_566_346_585_6],
    [1.0, -0.272_688_602_330_106_3, -0.646_813_237_020_173_8],
    [1.0, -1.103_744_082_176_026_2, 1.700_623_094_677_306_3],
];

/// Planar YIQ image. `i` and `q` are chroma and may be negative.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageYiq {
    pub height: usize,
    pub width: usize,
    pub y: Vec<f64>,
    pub i: Vec<f64>,
    pub q: Vec<f64>,
}

#[inline]
pub fn rgb_to_yiq_pixel(p: [f64; 3]) -> [f64; 3] {
    let m = &RGB_TO_YIQ;
    [
        m[0][0] * p[0] + m[0][1] * p[1] + m[0][2] * p[2],
        m[1][0] * p[0] + m[1][1] * p[1] + m[1][2] * p[2],
        m[2][0] * p[0] + m[2][1] * p[1] + m[2][2] * p[2],
    ]
}

#[inline]
pub fn yiq_to_rgb_pixel(p: [f64; 3]) -> [f64; 3] {
    let m = &YIQ_TO_RGB;
    [
        m[0][0] * p[0] + m[0][1] * p[1] + m[0][2] * p[2],
        m[1][0] * p[0] + m[1][1] * p[1] + m[1][2] * p[2],
        m[2][0] * p[0] + m[2][1] * p[1] + m[2][2] * p[2],
    ]
}

/// No clamping: chroma keeps its sign.
pub fn rgb_to_yiq(img: &ImageRgb) -> ImageYiq {
    let n = img.height() * img.width();
    let (mut y, mut i, mut q) = (Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n));
    for px in img.pixels().chunks(3) {
        let [a, b, c] = rgb_to_yiq_pixel([px[0], px[1], px[2]]);
        y.push(a);
        i.push(b);
        q.push(c);
    }
    ImageYiq { height: img.height(), width: img.width(), y, i, q }
}

/// Converts back and clamps into `[0, 1]`; the report carries the excursion.
pub fn yiq_to_rgb(img: &ImageYiq) -> Result<(ImageRgb, ClampReport)> {
    let mut pixels = Vec::with_capacity(img.y.len() * 3);
    for k in 0..img.y.len() {
        pixels.extend_from_slice(&yiq_to_rgb_pixel([img.y[k], img.i[k], img.q[k]]));
    }
    ImageRgb::from_unclamped(img.height, img.width, pixels)
}

/// Population mean and variance. `None` for an empty channel.
pub fn channel_stats(channel: &[f64]) -> Option<(f64, f64)> {
    if channel.is_empty() {
        return None;
    }
    let n = channel.len() as f64;
    let mean = channel.iter().sum::<f64>() / n;
    let var = channel.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    Some((mean, var))
}

/// Population covariance of two equal-length channels.
pub fn covariance(a: &[f64], b: &[f64]) -> Option<f64> {
    if a.is_empty() || a.len() != b.len() {
        return None;
    }
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    Some(a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum::<f64>() / n)
}

/// sRGB (D65) -> CIELAB with `L` in `[0, 100]`.
pub fn rgb_to_lab_pixel(p: [f64; 3]) -> [f64; 3] {
    fn linear(c: f64) -> f64 {
        if c <= 0.04045 {
            c / 12.92
        } else {
            ((c + 0.055) / 1.055).powf(2.4)
        }
    }
    fn f(t: f64) -> f64 {
        const D: f64 = 6.0 / 29.0;
        if t > D * D * D {
            t.cbrt()
        } else {
            t / (3.0 * D * D) + 4.0 / 29.0
        }
    }
    let [r, g, b] = p.map(linear);
    let x = 0.412_456_4 * r + 0.357_576_1 * g + 0.180_437_5 * b;
    let y = 0.212_672_9 * r + 0.715_152_2 * g + 0.072_175_0 * b;
    let z = 0.019_333_9 * r + 0.119_192_0 * g + 0.950_304_1 * b;
    // D65 reference white
    let (fx, fy, fz) = (f(x / 0.950_47), f(y), f(z / 1.088_83));
    [116.0 * fy - 16.0, 500.0 * (fx - fy), 200.0 * (fy - fz)]
}
