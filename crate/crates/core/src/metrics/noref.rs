use super::coefficients::*;
use crate::color::rgb_to_lab_pixel;
use crate::image::ImageRgb;

/// Linear combination of chroma spread, luminance contrast and mean saturation
/// in CIELAB, with `L` and chroma scaled by 1/100.
pub fn uciqe(img: &ImageRgb) -> f64 {
    let n = img.height() * img.width();
    let mut lum = Vec::with_capacity(n);
    let mut chroma = Vec::with_capacity(n);
    let mut sat_sum = 0.0;
    for p in img.pixels().chunks_exact(3) {
        let [l, a, b] = rgb_to_lab_pixel([p[0], p[1], p[2]]);
        let l = l / 100.0;
        let c = a.hypot(b) / 100.0;
        // CIE saturation C / sqrt(C^2 + L^2); zero for black.
        let r = c.hypot(l);
        if r > 0.0 {
            sat_sum += c / r;
        }
        lum.push(l);
        chroma.push(c);
    }
    let mean_c = chroma.iter().sum::<f64>() / n as f64;
    let var_c = chroma.iter().map(|c| (c - mean_c) * (c - mean_c)).sum::<f64>() / n as f64;
    let sigma_c = var_c.sqrt();

    lum.sort_by(f64::total_cmp);
    let tail = ((UCIQE_CONTRAST_TAIL * n as f64).round() as usize).max(1);
    let low = lum[..tail].iter().sum::<f64>() / tail as f64;
    let high = lum[n - tail..].iter().sum::<f64>() / tail as f64;
    let contrast = high - low;

    UCIQE_C1 * sigma_c + UCIQE_C2 * contrast + UCIQE_C3 * (sat_sum / n as f64)
}

/// Weighted sum of colorfulness, sharpness and contrast on 8-bit code values.
pub fn uiqm(img: &ImageRgb) -> f64 {
    UIQM_C1 * uicm(img) + UIQM_C2 * uism(img) + UIQM_C3 * uiconm(img)
}

/// Mean of the values left after trimming `ceil(trim * n)` from the bottom and
/// `floor(trim * n)` from the top; the plain mean when nothing would be left.
fn trimmed_mean(sorted: &[f64], trim: f64) -> f64 {
    let n = sorted.len();
    let lo = (trim * n as f64).ceil() as usize;
    let hi = (trim * n as f64).floor() as usize;
    let kept = &sorted[lo.min(n)..n - hi.min(n - lo.min(n))];
    if kept.is_empty() {
        return sorted.iter().sum::<f64>() / n.max(1) as f64;
    }
    kept.iter().sum::<f64>() / kept.len() as f64
}

/// Colorfulness from the opponent planes `R - G` and `(R + G)/2 - B`.
pub fn uicm(img: &ImageRgb) -> f64 {
    let mut rg = Vec::with_capacity(img.height() * img.width());
    let mut yb = Vec::with_capacity(rg.capacity());
    for p in img.pixels().chunks_exact(3) {
        let [r, g, b] = [p[0] * 255.0, p[1] * 255.0, p[2] * 255.0];
        rg.push(r - g);
        yb.push((r + g) / 2.0 - b);
    }
    let stats = |v: &mut Vec<f64>| -> (f64, f64) {
        v.sort_by(f64::total_cmp);
        let mu = trimmed_mean(v, UICM_TRIM);
        let var = v.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / v.len() as f64;
        (mu, var)
    };
    let (mu_rg, var_rg) = stats(&mut rg);
    let (mu_yb, var_yb) = stats(&mut yb);
    UICM_MEAN * mu_rg.hypot(mu_yb) + UICM_SPREAD * (var_rg + var_yb).sqrt()
}

/// Sobel gradient magnitude with replicated borders, rescaled so its maximum
/// is 255. A flat plane has no edges and maps to zeros.
fn edge_magnitude(plane: &[f64], h: usize, w: usize) -> Vec<f64> {
    let at = |y: isize, x: isize| plane[(y.clamp(0, h as isize - 1) as usize) * w + x.clamp(0, w as isize - 1) as usize];
    let mut mag = vec![0.0; h * w];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let gx = (at(y - 1, x + 1) - at(y - 1, x - 1))
                + 2.0 * (at(y, x + 1) - at(y, x - 1))
                + (at(y + 1, x + 1) - at(y + 1, x - 1));
            let gy = (at(y + 1, x - 1) - at(y - 1, x - 1))
                + 2.0 * (at(y + 1, x) - at(y - 1, x))
                + (at(y + 1, x + 1) - at(y - 1, x + 1));
            mag[y as usize * w + x as usize] = gx.hypot(gy);
        }
    }
    let peak = mag.iter().copied().fold(0.0, f64::max);
    if peak > 0.0 {
        mag.iter_mut().for_each(|m| *m *= 255.0 / peak);
    }
    mag
}

/// Whole blocks of `UIQM_BLOCK` pixels; partial blocks at the border are dropped.
fn blocks(h: usize, w: usize) -> impl Iterator<Item = (usize, usize)> {
    let (by, bx) = (h / UIQM_BLOCK, w / UIQM_BLOCK);
    (0..by).flat_map(move |j| (0..bx).map(move |i| (j * UIQM_BLOCK, i * UIQM_BLOCK)))
}

/// Measure of enhancement: mean of `2 log(max / min)` over blocks, skipping
/// blocks whose minimum is zero.
fn eme(plane: &[f64], h: usize, w: usize) -> f64 {
    let count = (h / UIQM_BLOCK) * (w / UIQM_BLOCK);
    if count == 0 {
        return 0.0;
    }
    let mut acc = 0.0;
    for (y0, x0) in blocks(h, w) {
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for y in y0..y0 + UIQM_BLOCK {
            for &v in &plane[y * w + x0..y * w + x0 + UIQM_BLOCK] {
                lo = lo.min(v);
                hi = hi.max(v);
            }
        }
        if lo > 0.0 && hi > 0.0 {
            acc += (hi / lo).ln();
        }
    }
    2.0 * acc / count as f64
}

/// Sharpness: luma-weighted EME of each channel's edge map times the channel.
pub fn uism(img: &ImageRgb) -> f64 {
    let (h, w) = img.dims();
    (0..3)
        .map(|c| {
            let plane: Vec<f64> = img.channel(c).iter().map(|v| v * 255.0).collect();
            let edges = edge_magnitude(&plane, h, w);
            let weighted: Vec<f64> = edges.iter().zip(&plane).map(|(e, v)| e * v).collect();
            UISM_LAMBDA[c] * eme(&weighted, h, w)
        })
        .sum()
}

/// Contrast: negated mean over blocks of `r ln r` with
/// `r = (max - min) / (max + min)` taken across all three channels.
pub fn uiconm(img: &ImageRgb) -> f64 {
    let (h, w) = img.dims();
    let count = (h / UIQM_BLOCK) * (w / UIQM_BLOCK);
    if count == 0 {
        return 0.0;
    }
    let px = img.pixels();
    let mut acc = 0.0;
    for (y0, x0) in blocks(h, w) {
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for y in y0..y0 + UIQM_BLOCK {
            for &v in &px[(y * w + x0) * 3..(y * w + x0 + UIQM_BLOCK) * 3] {
                lo = lo.min(v * 255.0);
                hi = hi.max(v * 255.0);
            }
        }
        let (top, bot) = (hi - lo, hi + lo);
        if top > 0.0 && bot > 0.0 {
            let r = top / bot;
            acc += r * r.ln();
        }
    }
    -acc / count as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gray_image_scores_minimal_uciqe() {
        let g = ImageRgb::filled(20, 20, [0.5; 3]).unwrap();
        assert!(uciqe(&g).abs() < 1e-6, "{}", uciqe(&g));
        assert_eq!(uiconm(&g), 0.0);
        assert_eq!(uism(&g), 0.0);
        assert!(uicm(&g).abs() < 1e-12);
    }

    #[test]
    fn trimmed_mean_drops_tails() {
        let v: Vec<f64> = (0..10).map(f64::from).collect();
        // drop one from each end
        assert_eq!(trimmed_mean(&v, 0.1), 4.5);
        assert_eq!(trimmed_mean(&[3.0], 0.1), 3.0);
        assert_eq!(trimmed_mean(&[1.0, 2.0, 3.0], 0.0), 2.0);
    }
}
