use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::manifest::{Manifest, ManifestEntry, Split, MANIFEST_FILE};
use super::{list_images, load_image, mix_seed, save_png};
use crate::error::{Error, Result};
use crate::image::ImageRgb;
use crate::physics::{degrade, water_params, DegradationParams, Depth, WaterTable, WaterType};

/// How a synthetic corpus is drawn.
#[derive(Clone, Debug, PartialEq)]
pub struct CorpusSpec {
    /// Water type ids; every clean instance is degraded once per type.
    pub types: Vec<String>,
    pub depth_min: f64,
    pub depth_max: f64,
    /// Number of clean instances. Clean images are reused in name order when
    /// the directory holds fewer, each reuse with fresh depth draws.
    pub count: usize,
    pub seed: u64,
    /// Probability that an instance gets a top-to-bottom depth ramp instead of
    /// a constant depth.
    pub gradient_prob: f64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        CorpusSpec { types: vec!["3".into(), "7".into()], depth_min: 0.5, depth_max: 3.0, count: 10, seed: 0, gradient_prob: 0.5 }
    }
}

impl CorpusSpec {
    pub fn validate(&self, table: &WaterTable) -> Result<()> {
        if self.types.is_empty() {
            return Err(Error::Config("at least one water type is required".into()));
        }
        for t in &self.types {
            table.get(t)?;
        }
        if !(self.depth_min >= 0.0 && self.depth_min <= self.depth_max && self.depth_max.is_finite()) {
            return Err(Error::Config(format!("depth range [{}, {}] is invalid", self.depth_min, self.depth_max)));
        }
        if self.count == 0 {
            return Err(Error::Config("count must be positive".into()));
        }
        Ok(())
    }
}

/// Depth used for one synthetic pair, as stored beside it.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SideDepth {
    Constant { metres: f64 },
    Gradient { top: f64, bottom: f64 },
}

/// Everything needed to regenerate a synthetic pair's degradation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub water_type: String,
    pub transmittance: [f64; 3],
    pub background: [f64; 3],
    pub depth: SideDepth,
    pub height: usize,
    pub width: usize,
}

impl GroundTruth {
    pub fn params(&self) -> Result<DegradationParams> {
        let depth = match self.depth {
            SideDepth::Constant { metres } => Depth::Constant(metres),
            SideDepth::Gradient { top, bottom } => Depth::vertical_gradient(self.height, self.width, top, bottom),
        };
        let wt = WaterType {
            class: crate::physics::WaterClass::Coastal,
            transmittance: self.transmittance,
            background: self.background,
        };
        water_params(&wt, &depth, self.height, self.width)
    }

    /// Side file of a manifest entry: `truth/<id>.json` next to the
    /// `degraded/` directory.
    pub fn path_for(entry: &ManifestEntry) -> PathBuf {
        let base = entry.degraded.parent().and_then(Path::parent).unwrap_or(Path::new("."));
        base.join("truth").join(format!("{}.json", entry.id))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::ingestion(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::ingestion(path, e))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::ingestion(path, e))?;
        std::fs::write(path, text)?;
        Ok(())
    }
}

/// Sizes of the train/val/test groups for `n` instances: 80/10/10, rounded,
/// remainder to test.
fn split_sizes(n: usize) -> (usize, usize) {
    let train = ((n as f64) * 0.8).round() as usize;
    let val = (((n as f64) * 0.1).round() as usize).min(n - train);
    (train, val)
}

/// Degrades clean images from `clean_dir` under every requested water type,
/// writing `degraded/`, `reference/`, `truth/` and the manifest into `out_dir`.
/// All pairs made from one clean instance share a split.
pub fn build_synthetic_corpus(clean_dir: &Path, out_dir: &Path, spec: &CorpusSpec, table: &WaterTable) -> Result<Manifest> {
    spec.validate(table)?;
    let clean = list_images(clean_dir)?;
    if clean.is_empty() {
        return Err(Error::ingestion(clean_dir, "no PNG or JPEG images found"));
    }
    for sub in ["degraded", "reference", "truth"] {
        std::fs::create_dir_all(out_dir.join(sub))?;
    }

    let mut instances: Vec<usize> = (0..spec.count).collect();
    instances.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(&[spec.seed, 0x5917])));
    let (n_train, n_val) = split_sizes(spec.count);
    let mut split_of = vec![Split::Test; spec.count];
    for (rank, &k) in instances.iter().enumerate() {
        split_of[k] = if rank < n_train {
            Split::Train
        } else if rank < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        };
    }

    let mut entries = Vec::with_capacity(spec.count * spec.types.len());
    for k in 0..spec.count {
        let src = &clean[k % clean.len()];
        let image = load_image(src)?;
        let (h, w) = image.dims();
        let stem = src.file_stem().and_then(|s| s.to_str()).unwrap_or("clean");
        let base = format!("{k:04}_{stem}");
        let reference = out_dir.join("reference").join(format!("{base}.png"));
        save_png(&reference, &image)?;

        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[spec.seed, k as u64]));
        let depth = if rng.random_bool(spec.gradient_prob.clamp(0.0, 1.0)) {
            let a = rng.random_range(spec.depth_min..=spec.depth_max);
            let b = rng.random_range(spec.depth_min..=spec.depth_max);
            SideDepth::Gradient { top: a.min(b), bottom: a.max(b) }
        } else {
            SideDepth::Constant { metres: rng.random_range(spec.depth_min..=spec.depth_max) }
        };

        for type_id in &spec.types {
            let wt = table.get(type_id)?;
            let truth = GroundTruth {
                water_type: type_id.clone(),
                transmittance: wt.transmittance,
                background: wt.background,
                depth,
                height: h,
                width: w,
            };
            let (degraded, _) = degrade(&image, &truth.params()?)?;
            let id = format!("{base}_t{type_id}");
            let degraded_path = out_dir.join("degraded").join(format!("{id}.png"));
            save_png(&degraded_path, &degraded)?;
            let entry = ManifestEntry { id, degraded: degraded_path, reference: reference.clone(), split: split_of[k] };
            truth.save(&GroundTruth::path_for(&entry))?;
            entries.push(entry);
        }
    }

    let manifest = Manifest::new(out_dir, entries, spec.seed)?;
    manifest.save(&out_dir.join(MANIFEST_FILE))?;
    log::info!(
        "synthesized {} pairs ({} train, {} val, {} test) into {}",
        manifest.entries.len(),
        manifest.count(Split::Train),
        manifest.count(Split::Val),
        manifest.count(Split::Test),
        out_dir.display()
    );
    Ok(manifest)
}

/// A random clean scene: a two-color gradient with soft blobs, hard-edged
/// rectangles and a faint ripple texture.
pub fn procedural_scene(rng: &mut impl Rng, height: usize, width: usize) -> Result<ImageRgb> {
    fn color(rng: &mut impl Rng) -> [f64; 3] {
        std::array::from_fn(|_| rng.random_range(0.1..0.9))
    }
    let c0 = color(rng);
    let c1 = color(rng);
    let angle: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let (dx, dy) = (angle.cos(), angle.sin());

    struct Blob {
        cy: f64,
        cx: f64,
        r: f64,
        color: [f64; 3],
    }
    let blobs: Vec<Blob> = (0..rng.random_range(2..5))
        .map(|_| Blob {
            cy: rng.random_range(0.0..1.0),
            cx: rng.random_range(0.0..1.0),
            r: rng.random_range(0.08..0.3),
            color: color(rng),
        })
        .collect();
    let rects: Vec<([f64; 4], [f64; 3])> = (0..rng.random_range(1..4))
        .map(|_| {
            let (y0, x0) = (rng.random_range(0.0..0.8), rng.random_range(0.0..0.8));
            let (hh, ww) = (rng.random_range(0.1..0.4), rng.random_range(0.1..0.4));
            ([y0, x0, y0 + hh, x0 + ww], color(rng))
        })
        .collect();
    let freq = rng.random_range(4.0..12.0);
    let phase = rng.random_range(0.0..std::f64::consts::TAU);

    ImageRgb::from_fn(height, width, |y, x| {
        let (v, u) = ((y as f64 + 0.5) / height as f64, (x as f64 + 0.5) / width as f64);
        let t = ((u - 0.5) * dx + (v - 0.5) * dy + 0.5).clamp(0.0, 1.0);
        let mut p: [f64; 3] = std::array::from_fn(|k| c0[k] + (c1[k] - c0[k]) * t);
        for b in &blobs {
            let d2 = ((v - b.cy).powi(2) + (u - b.cx).powi(2)) / (b.r * b.r);
            let a = (-d2).exp() * 0.8;
            for k in 0..3 {
                p[k] += (b.color[k] - p[k]) * a;
            }
        }
        for (r, c) in &rects {
            if v >= r[0] && v < r[2] && u >= r[1] && u < r[3] {
                p = *c;
            }
        }
        let ripple = 0.04 * (freq * std::f64::consts::TAU * (u + 0.5 * v) + phase).sin();
        p.map(|c| (c + ripple).clamp(0.02, 0.98))
    })
}

/// Writes `count` procedural scenes as `scene_NNN.png` into `dir`.
pub fn write_procedural_scenes(dir: &Path, count: usize, height: usize, width: usize, seed: u64) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[seed, 0x5CE4E]));
    (0..count)
        .map(|k| {
            let path = dir.join(format!("scene_{k:03}.png"));
            save_png(&path, &procedural_scene(&mut rng, height, width)?)?;
            Ok(path)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_sizes_follow_80_10_10() {
        assert_eq!(split_sizes(10), (8, 1));
        assert_eq!(split_sizes(20), (16, 2));
        assert_eq!(split_sizes(1), (1, 0));
        assert_eq!(split_sizes(3), (2, 0));
    }

    #[test]
    fn procedural_scenes_are_deterministic_and_in_range() {
        let a = procedural_scene(&mut ChaCha8Rng::seed_from_u64(1), 16, 16).unwrap();
        let b = procedural_scene(&mut ChaCha8Rng::seed_from_u64(1), 16, 16).unwrap();
        assert_eq!(a, b);
        assert!(a.pixels().iter().all(|v| (0.02..=0.98).contains(v)));
    }

    #[test]
    fn ground_truth_regenerates_table_params() {
        let table = WaterTable::builtin();
        let wt = table.get("5").unwrap();
        let truth = GroundTruth {
            water_type: "5".into(),
            transmittance: wt.transmittance,
            background: wt.background,
            depth: SideDepth::Gradient { top: 0.5, bottom: 2.0 },
            height: 4,
            width: 3,
        };
        let direct = crate::physics::make_water_type(&table, "5", &Depth::vertical_gradient(4, 3, 0.5, 2.0), 4, 3).unwrap();
        assert_eq!(truth.params().unwrap(), direct);
    }
}
