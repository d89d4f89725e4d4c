//! Paired-image ingestion, augmentation and batching, plus synthetic corpus
//! generation.

mod manifest;
mod synth;

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::ImageRgb;
use crate::tensor::{Real, Tensor};

pub use manifest::{Manifest, ManifestEntry, Split, MANIFEST_FILE};
pub use synth::{build_synthetic_corpus, procedural_scene, write_procedural_scenes, CorpusSpec, GroundTruth, SideDepth};

/// Decodes a PNG or JPEG as 8-bit RGB, normalized to `[0, 1]`.
pub fn load_image(path: &Path) -> Result<ImageRgb> {
    let img = image::open(path).map_err(|e| Error::ingestion(path, e))?.to_rgb8();
    let (w, h) = img.dimensions();
    ImageRgb::from_rgb8(h as usize, w as usize, img.as_raw())
}

/// Writes an 8-bit RGB PNG.
pub fn save_png(path: &Path, img: &ImageRgb) -> Result<()> {
    let buf = image::RgbImage::from_raw(img.width() as u32, img.height() as u32, img.to_rgb8())
        .expect("buffer matches dimensions");
    buf.save_with_format(path, image::ImageFormat::Png).map_err(|e| Error::ingestion(path, e))
}

/// Whether a path looks like an image the loader accepts.
pub fn is_image_path(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg"))
}

/// Image files directly inside `dir`, sorted by name.
pub fn list_images(dir: &Path) -> Result<Vec<std::path::PathBuf>> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::ingestion(dir, e))? {
        let path = entry.map_err(|e| Error::ingestion(dir, e))?.path();
        if path.is_file() && is_image_path(&path) {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Interpolation {
    #[default]
    Bilinear,
    Nearest,
}

/// Resamples with pixel-center alignment. Resizing to the current size is the
/// identity.
pub fn resize(img: &ImageRgb, height: usize, width: usize, interp: Interpolation) -> Result<ImageRgb> {
    if height == 0 || width == 0 {
        return Err(Error::Dimension(format!("cannot resize to {height}x{width}")));
    }
    let (h, w) = img.dims();
    if (h, w) == (height, width) {
        return Ok(img.clone());
    }
    let src = |o: usize, from: usize, to: usize| -> f64 {
        ((o as f64 + 0.5) * from as f64 / to as f64 - 0.5).clamp(0.0, (from - 1) as f64)
    };
    let (sy, sx): (Vec<f64>, Vec<f64>) = ((0..height).map(|y| src(y, h, height)).collect(), (0..width).map(|x| src(x, w, width)).collect());
    ImageRgb::from_fn(height, width, |y, x| match interp {
        Interpolation::Nearest => img.get(sy[y].round() as usize, sx[x].round() as usize),
        Interpolation::Bilinear => {
            let (y0, x0) = (sy[y].floor() as usize, sx[x].floor() as usize);
            let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
            let (fy, fx) = (sy[y] - y0 as f64, sx[x] - x0 as f64);
            let (a, b, c, d) = (img.get(y0, x0), img.get(y0, x1), img.get(y1, x0), img.get(y1, x1));
            std::array::from_fn(|k| {
                let top = a[k] + (b[k] - a[k]) * fx;
                let bot = c[k] + (d[k] - c[k]) * fx;
                (top + (bot - top) * fy).clamp(0.0, 1.0)
            })
        }
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct PairedSample {
    pub id: String,
    pub degraded: ImageRgb,
    pub reference: ImageRgb,
}

/// Decodes both images of an entry and brings them to `size` (height, width).
/// Without a size, the reference is resized to the degraded image's size.
pub fn load_pair(entry: &ManifestEntry, size: Option<(usize, usize)>, interp: Interpolation) -> Result<PairedSample> {
    let degraded = load_image(&entry.degraded)?;
    let reference = load_image(&entry.reference)?;
    let (h, w) = size.unwrap_or(degraded.dims());
    Ok(PairedSample {
        id: entry.id.clone(),
        degraded: resize(&degraded, h, w, interp)?,
        reference: resize(&reference, h, w, interp)?,
    })
}

/// One draw of the paired augmentation: flips, then `rot` quarter turns
/// counter-clockwise.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct AugmentDraw {
    pub hflip: bool,
    pub vflip: bool,
    pub rot: u8,
}

impl AugmentDraw {
    /// Quarter turns are restricted to 0 or 2 for non-square images so that a
    /// batch keeps one shape.
    pub fn sample(rng: &mut impl Rng, square: bool) -> Self {
        let hflip = rng.random_bool(0.5);
        let vflip = rng.random_bool(0.5);
        let rot = if square { rng.random_range(0..4u8) } else { 2 * rng.random_range(0..2u8) };
        AugmentDraw { hflip, vflip, rot }
    }

    pub fn is_identity(&self) -> bool {
        !self.hflip && !self.vflip && self.rot % 4 == 0
    }

    pub fn apply(&self, img: &ImageRgb) -> ImageRgb {
        let (h, w) = img.dims();
        let mut out = img.clone();
        if self.hflip {
            out = ImageRgb::from_fn(h, w, |y, x| img.get(y, w - 1 - x)).expect("same dims");
        }
        if self.vflip {
            let src = out.clone();
            out = ImageRgb::from_fn(h, w, |y, x| src.get(h - 1 - y, x)).expect("same dims");
        }
        for _ in 0..self.rot % 4 {
            let src = out.clone();
            let (sh, sw) = src.dims();
            // counter-clockwise: new (y, x) takes old (x, sw - 1 - y)
            out = ImageRgb::from_fn(sw, sh, |y, x| src.get(x, sw - 1 - y)).expect("rotated dims");
        }
        out
    }
}

/// Applies one draw to both images of a pair.
pub fn augment_with(sample: &PairedSample, draw: AugmentDraw) -> PairedSample {
    PairedSample { id: sample.id.clone(), degraded: draw.apply(&sample.degraded), reference: draw.apply(&sample.reference) }
}

pub fn augment(sample: &PairedSample, rng: &mut impl Rng) -> PairedSample {
    let (h, w) = sample.degraded.dims();
    augment_with(sample, AugmentDraw::sample(rng, h == w))
}

/// Folds several integers into one seed (splitmix64 finalizer per part).
pub fn mix_seed(parts: &[u64]) -> u64 {
    let mut acc: u64 = 0x9E37_79B9_7F4A_7C15;
    for &p in parts {
        let mut z = acc ^ p.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        acc = z ^ (z >> 31);
    }
    acc
}

/// The order samples are visited in during `epoch`: a pure function of the
/// dataset length, epoch and seed.
pub fn epoch_order(len: usize, epoch: usize, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..len).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[seed, epoch as u64, 0x5EED]));
    order.shuffle(&mut rng);
    order
}

/// Decoded samples of one split, held in memory.
#[derive(Clone, Debug, Default)]
pub struct Dataset {
    pub samples: Vec<PairedSample>,
}

/// Stacked `[n, 3, h, w]` inputs and targets.
#[derive(Clone, Debug)]
pub struct Batch<T> {
    pub ids: Vec<String>,
    pub degraded: Tensor<T>,
    pub reference: Tensor<T>,
}

impl Dataset {
    pub fn new(samples: Vec<PairedSample>) -> Self {
        Dataset { samples }
    }

    pub fn load(manifest: &Manifest, split: Split, size: Option<(usize, usize)>, interp: Interpolation) -> Result<Self> {
        let samples = manifest.split(split).map(|e| load_pair(e, size, interp)).collect::<Result<Vec<_>>>()?;
        Ok(Dataset { samples })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Index groups of one epoch; the last batch may be short.
    pub fn epoch_batches(&self, epoch: usize, seed: u64, batch_size: usize) -> Vec<Vec<usize>> {
        epoch_order(self.len(), epoch, seed).chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
    }

    /// Stacks the given samples, augmenting each with a generator derived from
    /// `(seed, epoch, index)` so the result does not depend on visiting order.
    pub fn batch<T: Real>(&self, indices: &[usize], augment_seed: Option<(u64, usize)>) -> Result<Batch<T>> {
        let mut ids = Vec::with_capacity(indices.len());
        let mut xs = Vec::with_capacity(indices.len());
        let mut ys = Vec::with_capacity(indices.len());
        for &i in indices {
            let s = self.samples.get(i).ok_or_else(|| Error::Dimension(format!("sample {i} out of range")))?;
            let s = match augment_seed {
                Some((seed, epoch)) => {
                    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[seed, epoch as u64, i as u64]));
                    augment(s, &mut rng)
                }
                None => s.clone(),
            };
            ids.push(s.id);
            xs.push(s.degraded.to_tensor());
            ys.push(s.reference.to_tensor());
        }
        Ok(Batch { ids, degraded: Tensor::stack(&xs)?, reference: Tensor::stack(&ys)? })
    }
}
