//! Published constants of the no-reference underwater quality scores.
//!
//! UCIQE: M. Yang and A. Sowmya, "An Underwater Color Image Quality
//! Evaluation Metric", IEEE Trans. Image Processing 24(12), 2015.
//! UIQM: K. Panetta, C. Gao and S. Agaian, "Human-Visual-System-Inspired
//! Underwater Image Quality Measures", IEEE J. Oceanic Eng. 41(3), 2016.
//!
//! The image scales (Lab normalized to unit range for UCIQE, 8-bit code
//! values for UIQM) follow the widely circulated reference scripts, so the
//! scores are comparable with published tables.

/// Weight of the chroma standard deviation.
pub const UCIQE_C1: f64 = 0.4680;
/// Weight of the luminance contrast.
pub const UCIQE_C2: f64 = 0.2745;
/// Weight of the mean saturation.
pub const UCIQE_C3: f64 = 0.2576;
/// Fraction of pixels forming each tail of the luminance contrast.
pub const UCIQE_CONTRAST_TAIL: f64 = 0.01;

/// Colorfulness weight.
pub const UIQM_C1: f64 = 0.0282;
/// Sharpness weight.
pub const UIQM_C2: f64 = 0.2953;
/// Contrast weight.
pub const UIQM_C3: f64 = 3.5753;

/// Weight of the trimmed-mean magnitude inside the colorfulness term.
pub const UICM_MEAN: f64 = -0.0268;
/// Weight of the spread inside the colorfulness term.
pub const UICM_SPREAD: f64 = 0.1586;
/// Fraction trimmed from each end before the colorfulness statistics.
pub const UICM_TRIM: f64 = 0.1;

/// Per-channel weights of the sharpness term (luma weights).
pub const UISM_LAMBDA: [f64; 3] = [0.299, 0.587, 0.114];

/// Side of the square blocks used by the sharpness and contrast measures.
pub const UIQM_BLOCK: usize = 10;
