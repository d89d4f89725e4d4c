//! Image quality metrics.
//!
//! Full-reference scores (SSIM, PSNR, NRMSE) compare a prediction with its
//! ground truth; no-reference scores (UCIQE, UIQM) rate a single image. All
//! work in `f64` on unit-range images.

pub mod coefficients;
mod noref;

use serde::{Deserialize, Serialize};

use crate::color::RGB_TO_YIQ;
use crate::error::{Error, Result};
use crate::image::ImageRgb;

pub use noref::{uciqe, uicm, uiconm, uiqm, uism};

/// Side of the SSIM Gaussian window.
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

/// Channels SSIM is computed on.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SsimMode {
    /// The luma (`Y` of YIQ) plane.
    #[default]
    Luma,
    /// Mean of the per-channel RGB scores.
    PerChannel,
}

/// Normalizer of the root-mean-square error.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NrmseNorm {
    /// Root-mean-square of the reference, i.e. `||pred - gt|| / ||gt||`.
    #[default]
    Euclidean,
    /// Value range `max - min` of the reference.
    MinMax,
}

/// Peak signal-to-noise ratio in dB with a peak of 1. Identical images give
/// `f64::INFINITY`.
pub fn psnr(gt: &ImageRgb, pred: &ImageRgb) -> Result<f64> {
    gt.same_dims(pred)?;
    let mse = mse(gt.pixels(), pred.pixels());
    Ok(if mse == 0.0 { f64::INFINITY } else { -10.0 * mse.log10() })
}

fn mse(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64
}

pub fn nrmse(gt: &ImageRgb, pred: &ImageRgb) -> Result<f64> {
    nrmse_with(gt, pred, NrmseNorm::Euclidean)
}

pub fn nrmse_with(gt: &ImageRgb, pred: &ImageRgb, norm: NrmseNorm) -> Result<f64> {
    gt.same_dims(pred)?;
    let rmse = mse(gt.pixels(), pred.pixels()).sqrt();
    let denom = match norm {
        NrmseNorm::Euclidean => (gt.pixels().iter().map(|v| v * v).sum::<f64>() / gt.pixels().len() as f64).sqrt(),
        NrmseNorm::MinMax => {
            let (lo, hi) = gt.pixels().iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
            hi - lo
        }
    };
    if denom == 0.0 {
        return Err(Error::Domain(format!("reference has zero {norm:?} norm")));
    }
    Ok(rmse / denom)
}

/// The normalized 1-D Gaussian whose outer product is the SSIM window.
pub fn gaussian_taps() -> [f64; SSIM_WINDOW] {
    let r = (SSIM_WINDOW / 2) as f64;
    let mut g = [0.0; SSIM_WINDOW];
    for (i, v) in g.iter_mut().enumerate() {
        let d = i as f64 - r;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = g.iter().sum();
    g.map(|v| v / s)
}

/// Single-scale SSIM on luma, averaged over every valid window position.
pub fn ssim(gt: &ImageRgb, pred: &ImageRgb) -> Result<f64> {
    ssim_with(gt, pred, SsimMode::Luma)
}

pub fn ssim_with(gt: &ImageRgb, pred: &ImageRgb, mode: SsimMode) -> Result<f64> {
    gt.same_dims(pred)?;
    let (h, w) = gt.dims();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Dimension(format!("SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {h}x{w}")));
    }
    match mode {
        SsimMode::Luma => Ok(ssim_plane(&luma(gt), &luma(pred), h, w)),
        SsimMode::PerChannel => {
            let s: f64 = (0..3).map(|c| ssim_plane(&gt.channel(c), &pred.channel(c), h, w)).sum();
            Ok(s / 3.0)
        }
    }
}

pub fn luma(img: &ImageRgb) -> Vec<f64> {
    let m = RGB_TO_YIQ[0];
    img.pixels().chunks_exact(3).map(|p| m[0] * p[0] + m[1] * p[1] + m[2] * p[2]).collect()
}

/// Valid separable Gaussian filtering of one plane.
fn filter_valid(x: &[f64], h: usize, w: usize, g: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (ho, wo) = (h - SSIM_WINDOW + 1, w - SSIM_WINDOW + 1);
    let mut rows = vec![0.0; h * wo];
    for y in 0..h {
        let src = &x[y * w..(y + 1) * w];
        for (xo, o) in rows[y * wo..(y + 1) * wo].iter_mut().enumerate() {
            *o = g.iter().zip(&src[xo..xo + SSIM_WINDOW]).map(|(a, b)| a * b).sum();
        }
    }
    let mut out = vec![0.0; ho * wo];
    for yo in 0..ho {
        for xo in 0..wo {
            out[yo * wo + xo] = g.iter().enumerate().map(|(k, a)| a * rows[(yo + k) * wo + xo]).sum();
        }
    }
    out
}

fn ssim_plane(a: &[f64], b: &[f64], h: usize, w: usize) -> f64 {
    let g = gaussian_taps();
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let prod = |p: &[f64], q: &[f64]| -> Vec<f64> { p.iter().zip(q).map(|(x, y)| x * y).collect() };
    let mu_a = filter_valid(a, h, w, &g);
    let mu_b = filter_valid(b, h, w, &g);
    let e_aa = filter_valid(&prod(a, a), h, w, &g);
    let e_bb = filter_valid(&prod(b, b), h, w, &g);
    let e_ab = filter_valid(&prod(a, b), h, w, &g);
    let n = mu_a.len();
    let mut acc = 0.0;
    for i in 0..n {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = e_aa[i] - ma * ma;
        let vb = e_bb[i] - mb * mb;
        let cov = e_ab[i] - ma * mb;
        acc += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
    }
    acc / n as f64
}

/// Options of a metric run.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricOptions {
    pub ssim_mode: SsimMode,
    pub nrmse_norm: NrmseNorm,
}

/// Scores of one image. Full-reference fields are absent without a reference.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub id: String,
    pub ssim: Option<f64>,
    pub psnr: Option<f64>,
    pub nrmse: Option<f64>,
    pub uciqe: Option<f64>,
    pub uiqm: Option<f64>,
}

impl MetricRow {
    fn values(&self) -> [Option<f64>; 5] {
        [self.ssim, self.psnr, self.nrmse, self.uciqe, self.uiqm]
    }
}

/// Which score families to compute.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MetricSelection {
    pub full_reference: bool,
    pub no_reference: bool,
}

impl Default for MetricSelection {
    fn default() -> Self {
        MetricSelection { full_reference: true, no_reference: true }
    }
}

/// Scores one prediction. Full-reference scores need `gt`.
pub fn score_image(
    id: impl Into<String>,
    gt: Option<&ImageRgb>,
    pred: &ImageRgb,
    select: MetricSelection,
    opts: MetricOptions,
) -> Result<MetricRow> {
    let mut row = MetricRow { id: id.into(), ssim: None, psnr: None, nrmse: None, uciqe: None, uiqm: None };
    if select.full_reference {
        if let Some(gt) = gt {
            row.ssim = Some(ssim_with(gt, pred, opts.ssim_mode)?);
            row.psnr = Some(psnr(gt, pred)?);
            row.nrmse = Some(nrmse_with(gt, pred, opts.nrmse_norm)?);
        }
    }
    if select.no_reference {
        row.uciqe = Some(uciqe(pred));
        row.uiqm = Some(uiqm(pred));
    }
    Ok(row)
}

pub const REPORT_COLUMNS: [&str; 6] = ["id", "ssim", "psnr", "nrmse", "uciqe", "uiqm"];

/// Per-image scores with their arithmetic means.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub per_image: Vec<MetricRow>,
    /// Mean of each metric over the rows where it is present.
    pub aggregate: [Option<f64>; 5],
    /// Number of rows contributing to each mean.
    pub counts: [usize; 5],
}

impl MetricReport {
    pub fn new(per_image: Vec<MetricRow>) -> Self {
        let mut sums = [0.0; 5];
        let mut counts = [0usize; 5];
        for row in &per_image {
            for (k, v) in row.values().into_iter().enumerate() {
                if let Some(v) = v {
                    sums[k] += v;
                    counts[k] += 1;
                }
            }
        }
        let mut aggregate = [None; 5];
        for k in 0..5 {
            if counts[k] > 0 {
                aggregate[k] = Some(sums[k] / counts[k] as f64);
            }
        }
        MetricReport { per_image, aggregate, counts }
    }

    pub fn mean_ssim(&self) -> Option<f64> {
        self.aggregate[0]
    }

    pub fn mean_psnr(&self) -> Option<f64> {
        self.aggregate[1]
    }

    /// Comma-separated table with a header row and a trailing `mean` row.
    /// Absent scores are empty fields; infinite PSNR prints as `inf`.
    pub fn to_csv(&self) -> String {
        let mut out = REPORT_COLUMNS.join(",");
        out.push('\n');
        for row in &self.per_image {
            out.push_str(&csv_line(&row.id, &row.values()));
        }
        out.push_str(&csv_line("mean", &self.aggregate));
        out
    }

    /// Short human-readable summary of the aggregate.
    pub fn summary(&self) -> String {
        let mut parts = vec![format!("{} images", self.per_image.len())];
        for (name, v) in REPORT_COLUMNS[1..].iter().zip(self.aggregate) {
            if let Some(v) = v {
                parts.push(format!("{name} {}", format_value(v)));
            }
        }
        parts.join(", ")
    }
}

fn format_value(v: f64) -> String {
    if v.is_infinite() {
        if v > 0.0 { "inf".into() } else { "-inf".into() }
    } else {
        format!("{v:.6}")
    }
}

fn csv_line(id: &str, values: &[Option<f64>]) -> String {
    let mut line = id.to_string();
    for v in values {
        line.push(',');
        if let Some(v) = v {
            line.push_str(&format_value(*v));
        }
    }
    line.push('\n');
    line
}
