//! Underwater image formation and its inversion.
//!
//! Per channel, a scene radiance `I` seen through water with transmission `T`
//! and veiling light `A` reaches the camera as `U = I*T + A*(1 - T)`.
//! Substituting `K = 1/T - 1` and `B = A*K` turns the inversion into the
//! bilinear form `I = U*K - B + U`, which is what the network predicts.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::backend::Backend;
use crate::error::{Error, Result};
use crate::image::{ClampReport, ImageRgb};
use crate::tensor::{Real, Tensor};

/// Smallest transmission [`recover_analytic`] accepts by default (`K <= 19`).
pub const DEFAULT_T_MIN: f64 = 0.05;

/// The ten built-in water types, in table order.
pub const WATER_TYPES: [&str; 10] = ["I", "IA", "IB", "II", "III", "1", "3", "5", "7", "9"];

const BUILTIN_TABLE: &str = include_str!("../assets/water_types.toml");

/// Per-channel background light and per-pixel transmission.
#[derive(Clone, Debug, PartialEq)]
pub struct DegradationParams {
    pub background: [f64; 3],
    height: usize,
    width: usize,
    /// Interleaved `h * w * 3`.
    transmission: Vec<f64>,
}

impl DegradationParams {
    pub fn new(background: [f64; 3], height: usize, width: usize, transmission: Vec<f64>) -> Result<Self> {
        if transmission.len() != height * width * 3 {
            return Err(Error::Dimension(format!(
                "transmission needs {} values for {height}x{width}, got {}",
                height * width * 3,
                transmission.len()
            )));
        }
        if let Some(t) = transmission.iter().find(|t| !(**t > 0.0 && **t <= 1.0)) {
            return Err(Error::Domain(format!("transmission {t} outside (0, 1]")));
        }
        if let Some(a) = background.iter().find(|a| !(0.0..=1.0).contains(*a)) {
            return Err(Error::Domain(format!("background light {a} outside [0, 1]")));
        }
        Ok(DegradationParams { background, height, width, transmission })
    }

    /// Spatially constant transmission.
    pub fn uniform(background: [f64; 3], height: usize, width: usize, t: [f64; 3]) -> Result<Self> {
        let transmission = (0..height * width).flat_map(|_| t).collect();
        Self::new(background, height, width, transmission)
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn transmission(&self) -> &[f64] {
        &self.transmission
    }

    pub fn min_transmission(&self) -> f64 {
        self.transmission.iter().copied().fold(f64::INFINITY, f64::min)
    }

    fn check(&self, img: &ImageRgb) -> Result<()> {
        if img.dims() != self.dims() {
            return Err(Error::Dimension(format!(
                "image {:?} vs degradation params {:?}",
                img.dims(),
                self.dims()
            )));
        }
        Ok(())
    }
}

/// `U = I*T + A*(1 - T)` per channel and pixel.
pub fn degrade(clean: &ImageRgb, params: &DegradationParams) -> Result<(ImageRgb, ClampReport)> {
    params.check(clean)?;
    let a = params.background;
    let out = clean
        .pixels()
        .iter()
        .zip(&params.transmission)
        .enumerate()
        .map(|(k, (&i, &t))| i * t + a[k % 3] * (1.0 - t))
        .collect();
    ImageRgb::from_unclamped(clean.height(), clean.width(), out)
}

/// `I = U*(1/T - 1) + A*(1 - 1/T) + U`. Fails when any `T < t_min`.
pub fn recover_analytic(degraded: &ImageRgb, params: &DegradationParams, t_min: f64) -> Result<(ImageRgb, ClampReport)> {
    params.check(degraded)?;
    let lowest = params.min_transmission();
    if lowest < t_min {
        return Err(Error::Domain(format!("transmission {lowest} below the {t_min} floor")));
    }
    let a = params.background;
    let out = degraded
        .pixels()
        .iter()
        .zip(&params.transmission)
        .enumerate()
        .map(|(k, (&u, &t))| u * (1.0 / t - 1.0) + a[k % 3] * (1.0 - 1.0 / t) + u)
        .collect();
    ImageRgb::from_unclamped(degraded.height(), degraded.width(), out)
}

/// The reconstruction variables `K`, `B` as a `[n, 6, h, w]` prediction, channel
/// order `[K_R, K_G, K_B, B_R, B_G, B_B]`.
pub fn recon_vars<T: Real>(params: &DegradationParams) -> Tensor<T> {
    let (h, w) = params.dims();
    Tensor::from_fn([1, 6, h, w], |[_, c, y, x]| {
        let t = params.transmission[(y * w + x) * 3 + c % 3];
        let k = 1.0 / t - 1.0;
        let v = if c < 3 { k } else { params.background[c - 3] * k };
        T::from_f64(v).unwrap()
    })
}

/// `out = input*K - B + input` with `K`, `B` the first and last three channels of `o`.
pub fn soft_reconstruct<T: Real, B: Backend<T>>(b: &mut B, input: &B::Value, o: &B::Value) -> Result<B::Value> {
    let [_, c, _, _] = b.shape(o);
    if c != 6 {
        return Err(Error::Dimension(format!("soft reconstruction needs 6 channels, got {c}")));
    }
    let k = b.narrow_channels(o, 0, 3)?;
    let bias = b.narrow_channels(o, 3, 3)?;
    let scaled = b.mul(input, &k)?;
    let shifted = b.sub(&scaled, &bias)?;
    b.add(&shifted, input)
}

/// Image-level [`soft_reconstruct`]: `o` is `[1, 6, h, w]`; the result is clamped.
pub fn soft_reconstruct_image(input: &ImageRgb, o: &Tensor<f64>) -> Result<(ImageRgb, ClampReport)> {
    let mut b = crate::backend::Eager::<f64>::without_params();
    let x = b.constant(input.to_tensor());
    let o = b.constant(o.clone());
    if b.shape(&x)[2..] != b.shape(&o)[2..] {
        return Err(Error::Dimension("prediction and input sizes differ".into()));
    }
    let out = soft_reconstruct(&mut b, &x, &o)?;
    ImageRgb::from_tensor(&out, 0)
}

/// Attenuation class of a water type.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WaterClass {
    OpenSea,
    Coastal,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WaterType {
    pub class: WaterClass,
    /// Fraction of light kept per metre, R, G, B.
    pub transmittance: [f64; 3],
    pub background: [f64; 3],
}

impl WaterType {
    /// Attenuation coefficients `beta = -ln(transmittance)`.
    pub fn beta(&self) -> [f64; 3] {
        self.transmittance.map(|n| -n.ln())
    }
}

/// Path length through water, in metres.
#[derive(Clone, Debug, PartialEq)]
pub enum Depth {
    Constant(f64),
    /// Row-major `h * w` map.
    Map(Vec<f64>),
}

impl Depth {
    /// Linear ramp from `top` (first row) to `bottom` (last row).
    pub fn vertical_gradient(height: usize, width: usize, top: f64, bottom: f64) -> Depth {
        let denom = (height.max(2) - 1) as f64;
        Depth::Map(
            (0..height)
                .flat_map(|y| std::iter::repeat_n(top + (bottom - top) * y as f64 / denom, width))
                .collect(),
        )
    }
}

#[derive(Deserialize)]
struct TableFile {
    types: BTreeMap<String, WaterType>,
}

/// Water types by id (`"I"`, `"IA"`, ..., `"9"`).
#[derive(Clone, Debug, PartialEq)]
pub struct WaterTable {
    types: BTreeMap<String, WaterType>,
}

impl WaterTable {
    /// The table shipped in `assets/water_types.toml`.
    pub fn builtin() -> Self {
        Self::from_toml(BUILTIN_TABLE).expect("built-in water table parses")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let file: TableFile = toml::from_str(text).map_err(|e| Error::Config(format!("water table: {e}")))?;
        for (id, t) in &file.types {
            if t.transmittance.iter().any(|n| !(*n > 0.0 && *n <= 1.0))
                || t.background.iter().any(|a| !(0.0..=1.0).contains(a))
            {
                return Err(Error::Config(format!("water type {id} has out-of-range coefficients")));
            }
        }
        Ok(WaterTable { types: file.types })
    }

    pub fn get(&self, id: &str) -> Result<&WaterType> {
        self.types.get(id).ok_or_else(|| {
            Error::Config(format!(
                "unknown water type `{id}` (known: {})",
                self.types.keys().cloned().collect::<Vec<_>>().join(", ")
            ))
        })
    }

    pub fn ids(&self) -> impl Iterator<Item = &String> {
        self.types.keys()
    }
}

/// `T = exp(-beta * d)` per channel for the given water type.
pub fn make_water_type(table: &WaterTable, type_id: &str, depth: &Depth, height: usize, width: usize) -> Result<DegradationParams> {
    water_params(table.get(type_id)?, depth, height, width)
}

/// As [`make_water_type`], for coefficients not taken from a table.
pub fn water_params(wt: &WaterType, depth: &Depth, height: usize, width: usize) -> Result<DegradationParams> {
    let beta = wt.beta();
    let depth_at = |k: usize| -> Result<f64> {
        let d = match depth {
            Depth::Constant(d) => *d,
            Depth::Map(m) => *m.get(k).ok_or_else(|| Error::Dimension("depth map smaller than image".into()))?,
        };
        if d < 0.0 || !d.is_finite() {
            return Err(Error::Domain(format!("depth {d} must be finite and non-negative")));
        }
        Ok(d)
    };
    if let Depth::Map(m) = depth {
        if m.len() != height * width {
            return Err(Error::Dimension(format!("depth map has {} entries for {height}x{width}", m.len())));
        }
    }
    let mut transmission = Vec::with_capacity(height * width * 3);
    for k in 0..height * width {
        let d = depth_at(k)?;
        for b in beta {
            // keep T strictly positive even for absurd depths
            transmission.push((-b * d).exp().max(f64::MIN_POSITIVE));
        }
    }
    DegradationParams::new(wt.background, height, width, transmission)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn img(h: usize, w: usize, seed: u64) -> ImageRgb {
        let mut s = seed;
        ImageRgb::from_fn(h, w, |_, _| {
            let mut next = || {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                (s >> 11) as f64 / (1u64 << 53) as f64
            };
            [next(), next(), next()]
        })
        .unwrap()
    }

    #[test]
    fn identity_transmission_is_lossless() {
        let x = img(4, 5, 1);
        let p = DegradationParams::uniform([0.2, 0.3, 0.4], 4, 5, [1.0; 3]).unwrap();
        assert_eq!(degrade(&x, &p).unwrap().0, x);
        assert_eq!(recover_analytic(&x, &p, DEFAULT_T_MIN).unwrap().0, x);
    }

    #[test]
    fn single_pixel_examples() {
        let x = ImageRgb::filled(1, 1, [0.8; 3]).unwrap();
        let p = DegradationParams::uniform([0.2; 3], 1, 1, [0.5; 3]).unwrap();
        let (u, _) = degrade(&x, &p).unwrap();
        assert!(u.pixels().iter().all(|v| (v - 0.5).abs() < 1e-15));
        let (back, _) = recover_analytic(&u, &p, DEFAULT_T_MIN).unwrap();
        assert!(back.pixels().iter().all(|v| (v - 0.8).abs() < 1e-15));

        let tiny = DegradationParams::uniform([0.3, 0.6, 0.9], 1, 1, [1e-12; 3]).unwrap();
        let (u, _) = degrade(&x, &tiny).unwrap();
        for (v, a) in u.pixels().iter().zip([0.3, 0.6, 0.9]) {
            assert!((v - a).abs() < 1e-11);
        }
    }

    #[test]
    fn recovery_refuses_tiny_transmission() {
        let x = img(2, 2, 3);
        let p = DegradationParams::uniform([0.2; 3], 2, 2, [0.5, 0.04, 0.5]).unwrap();
        let err = recover_analytic(&x, &p, DEFAULT_T_MIN).unwrap_err();
        assert!(matches!(err, Error::Domain(msg) if msg.contains("0.04")));
    }

    #[test]
    fn soft_reconstruction_examples() {
        let x = img(3, 4, 7);
        let zero = Tensor::zeros([1, 6, 3, 4]);
        assert_eq!(soft_reconstruct_image(&x, &zero).unwrap().0, x);

        let half = ImageRgb::filled(1, 1, [0.5; 3]).unwrap();
        let o = Tensor::from_fn([1, 6, 1, 1], |[_, c, _, _]| if c < 3 { 1.0 } else { 0.2 });
        let (out, _) = soft_reconstruct_image(&half, &o).unwrap();
        assert!(out.pixels().iter().all(|v| (v - 0.8).abs() < 1e-15));
    }

    #[test]
    fn soft_reconstruction_with_true_vars_matches_analytic_recovery() {
        let x = img(6, 5, 11);
        let table = WaterTable::builtin();
        let p = make_water_type(&table, "II", &Depth::vertical_gradient(6, 5, 0.5, 3.0), 6, 5).unwrap();
        let (u, _) = degrade(&x, &p).unwrap();
        let analytic = recover_analytic(&u, &p, DEFAULT_T_MIN).unwrap().0;
        let soft = soft_reconstruct_image(&u, &recon_vars(&p)).unwrap().0;
        for (a, b) in analytic.pixels().iter().zip(soft.pixels()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn water_table_self_check() {
        let table = WaterTable::builtin();
        assert_eq!(table.ids().count(), 10);
        for id in WATER_TYPES {
            let wt = table.get(id).unwrap();
            let [r, g, b] = wt.beta();
            if wt.class == WaterClass::OpenSea {
                assert!(r > g && r > b, "{id}: red must attenuate fastest");
            }
            let zero = make_water_type(&table, id, &Depth::Constant(0.0), 2, 2).unwrap();
            assert!(zero.transmission().iter().all(|&t| t == 1.0));
        }
        assert!(matches!(make_water_type(&table, "IV", &Depth::Constant(1.0), 1, 1), Err(Error::Config(_))));
    }

    #[test]
    fn transmission_decreases_with_depth() {
        let table = WaterTable::builtin();
        for id in WATER_TYPES {
            let near = make_water_type(&table, id, &Depth::Constant(1.0), 1, 1).unwrap();
            let far = make_water_type(&table, id, &Depth::Constant(2.5), 1, 1).unwrap();
            for (a, b) in near.transmission().iter().zip(far.transmission()) {
                assert!(a > b);
            }
        }
    }

    proptest! {
        #[test]
        fn degradation_is_a_convex_combination(
            i in 0.0f64..=1.0, a in 0.0f64..=1.0, t in 0.001f64..=1.0,
        ) {
            let x = ImageRgb::filled(1, 1, [i; 3]).unwrap();
            let p = DegradationParams::uniform([a; 3], 1, 1, [t; 3]).unwrap();
            let (u, report) = degrade(&x, &p).unwrap();
            prop_assert!(!report.clipped());
            let v = u.pixels()[0];
            prop_assert!(v >= i.min(a) - 1e-15 && v <= i.max(a) + 1e-15);
        }

        #[test]
        fn recovery_inverts_degradation(seed in 0u64..1000, t in proptest::array::uniform3(0.1f64..=1.0)) {
            let x = img(3, 3, seed);
            let p = DegradationParams::uniform([0.3, 0.5, 0.7], 3, 3, t).unwrap();
            let (u, _) = degrade(&x, &p).unwrap();
            let (back, _) = recover_analytic(&u, &p, DEFAULT_T_MIN).unwrap();
            for (a, b) in back.pixels().iter().zip(x.pixels()) {
                prop_assert!((a - b).abs() <= 1e-6);
            }
        }
    }
}
