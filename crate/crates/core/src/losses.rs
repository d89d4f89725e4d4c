//! Training objectives: pixel L1, windowed YIQ chroma consistency and a Sobel
//! edge term, combined with fixed weights.
//!
//! Every loss is written once against [`Backend`], so it can be evaluated
//! eagerly on images or recorded on the tape for training. Tensors are
//! `[n, 3, h, w]` RGB batches; all losses average over the batch.

use serde::{Deserialize, Serialize};

use crate::backend::{Backend, Eager};
use crate::color::RGB_TO_YIQ;
use crate::error::{Error, Result};
use crate::image::ImageRgb;
use crate::kernels::{ConvGeom, SobelDir};
use crate::tensor::{Real, Tensor};

/// Weights of the L1, chroma and Sobel terms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub l1: f64,
    pub chroma: f64,
    pub sobel: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { l1: 3.0, chroma: 1.0, sobel: 3.0 }
    }
}

impl LossWeights {
    pub fn l1_only() -> Self {
        LossWeights { l1: 1.0, chroma: 0.0, sobel: 0.0 }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("l1", self.l1), ("chroma", self.chroma), ("sobel", self.sobel)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("loss weight {name} = {v} must be finite and non-negative")));
            }
        }
        Ok(())
    }

    pub fn combine(&self, l1: f64, chroma: f64, sobel: f64) -> f64 {
        self.l1 * l1 + self.chroma * chroma + self.sobel * sobel
    }
}

/// Sliding-window settings of the chroma consistency loss.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChromaConfig {
    pub window: usize,
    pub stride: usize,
    /// Stabilizer of the I-channel similarity.
    pub c1: f64,
    /// Stabilizer of the Q-channel similarity.
    pub c2: f64,
    /// Clamp each similarity at zero before taking the product. The raw
    /// similarity is already bounded above by one, so this only removes the
    /// anti-correlated regime.
    pub clip: bool,
    /// Weight the covariance by two, so that identical windows score exactly
    /// one. Without it the similarity of a window with itself is
    /// `(v + c) / (2v + c)`, which is below one whenever the window varies.
    pub doubled_covariance: bool,
}

impl Default for ChromaConfig {
    fn default() -> Self {
        ChromaConfig { window: 15, stride: 1, c1: 1e-3, c2: 1e-3, clip: false, doubled_covariance: true }
    }
}

impl ChromaConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window < 3 || self.window % 2 == 0 {
            return Err(Error::Config(format!("chroma window {} must be odd and at least 3", self.window)));
        }
        if self.stride == 0 {
            return Err(Error::Config("chroma stride must be positive".into()));
        }
        if !(self.c1 > 0.0 && self.c2 > 0.0) {
            return Err(Error::Config(format!("chroma constants ({}, {}) must be positive", self.c1, self.c2)));
        }
        Ok(())
    }
}

/// Scalar values of one objective evaluation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub total: f64,
    pub l1: f64,
    pub chroma: f64,
    pub sobel: f64,
}

impl LossParts {
    pub fn is_finite(&self) -> bool {
        [self.total, self.l1, self.chroma, self.sobel].iter().all(|v| v.is_finite())
    }
}

fn check_pair<T: Real, B: Backend<T>>(b: &B, gt: &B::Value, pred: &B::Value) -> Result<[usize; 4]> {
    let (sg, sp) = (b.shape(gt), b.shape(pred));
    if sg != sp {
        return Err(Error::Dimension(format!("loss operands differ: {sg:?} vs {sp:?}")));
    }
    if sg[1] != 3 {
        return Err(Error::Dimension(format!("losses expect RGB tensors, got {} channels", sg[1])));
    }
    Ok(sg)
}

/// Mean absolute difference over every component.
pub fn l1<T: Real, B: Backend<T>>(b: &mut B, gt: &B::Value, pred: &B::Value) -> Result<B::Value> {
    check_pair(b, gt, pred)?;
    let d = b.sub(pred, gt)?;
    let a = b.unary(crate::kernels::UnaryOp::Abs, &d);
    Ok(b.mean_all(&a))
}

/// The chroma planes `[I, Q]` of an RGB batch, as a fixed 1x1 convolution.
fn chroma_planes<T: Real, B: Backend<T>>(b: &mut B, x: &B::Value) -> Result<B::Value> {
    let w: Vec<T> = RGB_TO_YIQ[1..].iter().flat_map(|row| row.map(T::lit)).collect();
    let w = b.constant(Tensor::from_vec([2, 3, 1, 1], w)?);
    b.conv2d(x, &w, None, ConvGeom::pointwise())
}

/// `1 - S_I * S_Q` averaged over every window position, where each `S` is the
/// stabilized ratio of (doubled) covariance to summed variances within the
/// window.
pub fn chroma<T: Real, B: Backend<T>>(
    b: &mut B,
    gt: &B::Value,
    pred: &B::Value,
    cfg: &ChromaConfig,
) -> Result<B::Value> {
    cfg.validate()?;
    let [_, _, h, w] = check_pair(b, gt, pred)?;
    if h < cfg.window || w < cfg.window {
        return Err(Error::Dimension(format!("{h}x{w} image smaller than the {0}x{0} chroma window", cfg.window)));
    }
    let g = chroma_planes(b, gt)?;
    let p = chroma_planes(b, pred)?;
    let gg = b.mul(&g, &g)?;
    let pp = b.mul(&p, &p)?;
    let gp = b.mul(&g, &p)?;

    let inv_n = 1.0 / (cfg.window * cfg.window) as f64;
    let window_mean = |b: &mut B, v: &B::Value| -> Result<B::Value> {
        let s = b.box_sum(v, cfg.window, cfg.stride)?;
        Ok(b.scale(&s, inv_n))
    };
    let mg = window_mean(b, &g)?;
    let mp = window_mean(b, &p)?;
    let mgg = window_mean(b, &gg)?;
    let mpp = window_mean(b, &pp)?;
    let mgp = window_mean(b, &gp)?;

    let mg2 = b.mul(&mg, &mg)?;
    let mp2 = b.mul(&mp, &mp)?;
    let mgmp = b.mul(&mg, &mp)?;
    let var_g = b.sub(&mgg, &mg2)?;
    let var_p = b.sub(&mpp, &mp2)?;
    let mut cov = b.sub(&mgp, &mgmp)?;
    if cfg.doubled_covariance {
        cov = b.scale(&cov, 2.0);
    }

    let c = b.constant(Tensor::from_vec([1, 2, 1, 1], vec![T::lit(cfg.c1), T::lit(cfg.c2)])?);
    let num = b.add(&cov, &c)?;
    let den = b.add(&var_g, &var_p)?;
    let den = b.add(&den, &c)?;
    let mut s = b.div(&num, &den)?;
    if cfg.clip {
        s = b.unary(crate::kernels::UnaryOp::Relu, &s);
    }
    let si = b.narrow_channels(&s, 0, 1)?;
    let sq = b.narrow_channels(&s, 1, 1)?;
    let prod = b.mul(&si, &sq)?;
    let m = b.mean_all(&prod);
    let neg = b.scale(&m, -1.0);
    Ok(b.shift(&neg, 1.0))
}

/// L1 distance between Sobel responses, x-term plus y-term, each averaged over
/// channels and interior pixels.
pub fn sobel_color<T: Real, B: Backend<T>>(b: &mut B, gt: &B::Value, pred: &B::Value) -> Result<B::Value> {
    let [_, _, h, w] = check_pair(b, gt, pred)?;
    if h < 3 || w < 3 {
        return Err(Error::Dimension(format!("sobel loss needs at least 3x3, got {h}x{w}")));
    }
    // Sobel is linear, so filter the difference once per direction.
    let d = b.sub(pred, gt)?;
    let mut total: Option<B::Value> = None;
    for dir in [SobelDir::X, SobelDir::Y] {
        let e = b.sobel(&d, dir)?;
        let a = b.unary(crate::kernels::UnaryOp::Abs, &e);
        let m = b.mean_all(&a);
        total = Some(match total {
            None => m,
            Some(t) => b.add(&t, &m)?,
        });
    }
    Ok(total.expect("two directions"))
}

/// The weighted training objective.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Objective {
    pub weights: LossWeights,
    pub chroma: ChromaConfig,
}

impl Objective {
    pub fn new(weights: LossWeights, chroma: ChromaConfig) -> Self {
        Objective { weights, chroma }
    }

    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        self.chroma.validate()
    }

    /// The total as a backend value plus every part as a scalar. All parts are
    /// computed for logging even when their weight is zero; zero-weight parts
    /// are evaluated off the tape.
    pub fn evaluate<T: Real, B: Backend<T>>(
        &self,
        b: &mut B,
        gt: &B::Value,
        pred: &B::Value,
    ) -> Result<(B::Value, LossParts)> {
        let w = self.weights;
        let l1v = l1(b, gt, pred)?;
        let mut parts = LossParts { l1: b.item(&l1v), ..LossParts::default() };
        let mut total = b.scale(&l1v, w.l1);

        if w.chroma > 0.0 {
            let v = chroma(b, gt, pred, &self.chroma)?;
            parts.chroma = b.item(&v);
            let s = b.scale(&v, w.chroma);
            total = b.add(&total, &s)?;
        } else {
            parts.chroma = detached(b, gt, pred, |e, g, p| chroma(e, g, p, &self.chroma))?;
        }

        if w.sobel > 0.0 {
            let v = sobel_color(b, gt, pred)?;
            parts.sobel = b.item(&v);
            let s = b.scale(&v, w.sobel);
            total = b.add(&total, &s)?;
        } else {
            parts.sobel = detached(b, gt, pred, |e, g, p| sobel_color(e, g, p))?;
        }

        parts.total = b.item(&total);
        Ok((total, parts))
    }
}

type EagerValue<T> = <Eager<'static, T> as Backend<T>>::Value;

fn detached<T: Real, B: Backend<T>>(
    b: &B,
    gt: &B::Value,
    pred: &B::Value,
    f: impl FnOnce(&mut Eager<'static, T>, &EagerValue<T>, &EagerValue<T>) -> Result<EagerValue<T>>,
) -> Result<f64> {
    let mut e = Eager::without_params();
    let g = e.constant(b.value(gt).clone());
    let p = e.constant(b.value(pred).clone());
    let v = f(&mut e, &g, &p)?;
    Ok(e.item(&v))
}

fn eager_pair(gt: &ImageRgb, pred: &ImageRgb) -> Result<(Eager<'static, f64>, EagerValue<f64>, EagerValue<f64>)> {
    gt.same_dims(pred)?;
    let mut e = Eager::without_params();
    let g = e.constant(gt.to_tensor());
    let p = e.constant(pred.to_tensor());
    Ok((e, g, p))
}

pub fn l1_loss(gt: &ImageRgb, pred: &ImageRgb) -> Result<f64> {
    let (mut e, g, p) = eager_pair(gt, pred)?;
    let v = l1(&mut e, &g, &p)?;
    Ok(e.item(&v))
}

pub fn chroma_loss(gt: &ImageRgb, pred: &ImageRgb, cfg: &ChromaConfig) -> Result<f64> {
    let (mut e, g, p) = eager_pair(gt, pred)?;
    let v = chroma(&mut e, &g, &p, cfg)?;
    Ok(e.item(&v))
}

pub fn sobel_color_loss(gt: &ImageRgb, pred: &ImageRgb) -> Result<f64> {
    let (mut e, g, p) = eager_pair(gt, pred)?;
    let v = sobel_color(&mut e, &g, &p)?;
    Ok(e.item(&v))
}

pub fn total_loss(gt: &ImageRgb, pred: &ImageRgb, objective: &Objective) -> Result<LossParts> {
    let (mut e, g, p) = eager_pair(gt, pred)?;
    Ok(objective.evaluate(&mut e, &g, &p)?.1)
}

/// Similarity of two equal-length windows of one chroma channel, using
/// population statistics. Not clipped: anti-correlated windows score below 0.
pub fn chroma_similarity(gt: &[f64], pred: &[f64], c: f64, doubled_covariance: bool) -> Result<f64> {
    if gt.is_empty() || gt.len() != pred.len() {
        return Err(Error::Dimension(format!("windows of {} and {} values", gt.len(), pred.len())));
    }
    let (_, vg) = crate::color::channel_stats(gt).expect("nonempty");
    let (_, vp) = crate::color::channel_stats(pred).expect("nonempty");
    let cov = crate::color::covariance(gt, pred).expect("equal nonempty");
    let k = if doubled_covariance { 2.0 } else { 1.0 };
    Ok((k * cov + c) / (vg + vp + c))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn img(h: usize, w: usize, f: impl FnMut(usize, usize) -> [f64; 3]) -> ImageRgb {
        ImageRgb::from_fn(h, w, f).unwrap()
    }

    #[test]
    fn l1_examples() {
        let a = ImageRgb::filled(4, 4, [1.0; 3]).unwrap();
        let b = ImageRgb::filled(4, 4, [0.5; 3]).unwrap();
        assert_eq!(l1_loss(&a, &a).unwrap(), 0.0);
        assert!((l1_loss(&a, &b).unwrap() - 0.5).abs() < 1e-15);
        assert_eq!(l1_loss(&a, &b).unwrap(), l1_loss(&b, &a).unwrap());
        let c = ImageRgb::filled(4, 5, [0.5; 3]).unwrap();
        assert!(matches!(l1_loss(&a, &c), Err(Error::Dimension(_))));
    }

    #[test]
    fn similarity_examples() {
        let w: Vec<f64> = (0..9).map(|k| (k as f64 * 0.37).sin()).collect();
        assert!((chroma_similarity(&w, &w, 1e-3, true).unwrap() - 1.0).abs() < 1e-15);
        for doubled in [true, false] {
            assert_eq!(chroma_similarity(&[0.3; 9], &[0.7; 9], 1e-3, doubled).unwrap(), 1.0);
        }
        // zero-mean window with variance 0.01 against its negation
        let g = [0.1, -0.1, 0.1, -0.1];
        let p = g.map(|v| -v);
        let s = chroma_similarity(&g, &p, 1e-3, false).unwrap();
        assert!((s - (-0.01 + 1e-3) / (0.02 + 1e-3)).abs() < 1e-15);
        assert!((s + 0.428_571_428_571).abs() < 1e-9);
        let s2 = chroma_similarity(&g, &p, 1e-3, true).unwrap();
        assert!((s2 - (-0.02 + 1e-3) / (0.02 + 1e-3)).abs() < 1e-15);
        // without doubling, a varying window is not fully similar to itself
        let v = chroma_similarity(&g, &g, 1e-3, false).unwrap();
        assert!((v - 0.011 / 0.021).abs() < 1e-12);
    }

    #[test]
    fn chroma_examples() {
        let cfg = ChromaConfig::default();
        let a = img(17, 17, |y, x| [(x as f64 / 16.0), (y as f64 / 16.0), 0.5]);
        assert!(chroma_loss(&a, &a, &cfg).unwrap().abs() < 1e-12);
        let small = img(14, 20, |_, _| [0.5; 3]);
        assert!(matches!(chroma_loss(&small, &small, &cfg), Err(Error::Dimension(_))));
        let even = ChromaConfig { window: 4, ..cfg };
        assert!(matches!(chroma_loss(&a, &a, &even), Err(Error::Config(_))));
    }

    #[test]
    fn chroma_averages_every_window_position() {
        // 17x17 with a 15 window gives 3x3 positions; compare to a direct mean.
        let cfg = ChromaConfig::default();
        let gt = img(17, 17, |y, x| [((x * 7 + y * 3) % 11) as f64 / 10.0, (y % 5) as f64 / 4.0, 0.2]);
        let pred = img(17, 17, |y, x| [((x + 2 * y) % 9) as f64 / 8.0, 0.3, (x % 4) as f64 / 3.0]);
        let gy = crate::color::rgb_to_yiq(&gt);
        let py = crate::color::rgb_to_yiq(&pred);
        let mut acc = 0.0;
        let mut count = 0;
        for oy in 0..3 {
            for ox in 0..3 {
                let pick = |v: &[f64]| -> Vec<f64> {
                    (oy..oy + 15).flat_map(|y| (ox..ox + 15).map(move |x| v[y * 17 + x])).collect()
                };
                let si = chroma_similarity(&pick(&gy.i), &pick(&py.i), cfg.c1, true).unwrap();
                let sq = chroma_similarity(&pick(&gy.q), &pick(&py.q), cfg.c2, true).unwrap();
                acc += 1.0 - si * sq;
                count += 1;
            }
        }
        assert_eq!(count, 9);
        let got = chroma_loss(&gt, &pred, &cfg).unwrap();
        assert!((got - acc / 9.0).abs() < 1e-10, "{got} vs {}", acc / 9.0);
    }

    #[test]
    fn sobel_examples() {
        let a = img(8, 8, |y, x| [(x as f64) / 10.0, 0.2, (y as f64) / 10.0]);
        assert_eq!(sobel_color_loss(&a, &a).unwrap(), 0.0);
        let c1 = ImageRgb::filled(8, 8, [0.1; 3]).unwrap();
        let c2 = ImageRgb::filled(8, 8, [0.9, 0.4, 0.0]).unwrap();
        assert_eq!(sobel_color_loss(&c1, &c2).unwrap(), 0.0);
        // ramp of slope s in every channel against a constant: x-term 8s, y-term 0
        let s = 0.05;
        let ramp = img(8, 8, |_, x| [s * x as f64; 3]);
        assert!((sobel_color_loss(&ramp, &c1).unwrap() - 8.0 * s).abs() < 1e-12);
    }

    #[test]
    fn total_recombines_parts() {
        let gt = img(16, 16, |y, x| [((x * y) % 7) as f64 / 7.0, (x % 3) as f64 / 3.0, 0.4]);
        let pred = img(16, 16, |y, x| [((x + y) % 5) as f64 / 5.0, 0.5, (y % 2) as f64]);
        let obj = Objective::default();
        let p = total_loss(&gt, &pred, &obj).unwrap();
        assert!((p.total - (3.0 * p.l1 + p.chroma + 3.0 * p.sobel)).abs() < 1e-12);
        let only = Objective { weights: LossWeights::l1_only(), ..obj };
        let q = total_loss(&gt, &pred, &only).unwrap();
        assert_eq!(q.total, l1_loss(&gt, &pred).unwrap());
        assert_eq!(q.chroma, p.chroma);
        assert_eq!(total_loss(&gt, &gt, &obj).unwrap(), LossParts::default());
    }

    #[test]
    fn weights_validate() {
        assert!(LossWeights { l1: -1.0, ..Default::default() }.validate().is_err());
        assert!(LossWeights { sobel: f64::NAN, ..Default::default() }.validate().is_err());
        assert!(LossWeights::default().validate().is_ok());
    }
}
