use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::backend::{Backend, Eager};
use crate::error::{Error, Result};
use crate::image::{ClampReport, ImageRgb};
use crate::net::config::{CrbSite, ModelConfig, ReconKind};
use crate::net::layers::{AttnBlock, Conv, Crb, Fusion, Init, Layer, ParamSpec};
use crate::params::ParamStore;
use crate::physics;
use crate::tensor::{Real, Tensor};

/// Spatial dims must be a multiple of this (two 2x downsamples).
pub const SIZE_MULTIPLE: usize = 4;

#[derive(Clone, Debug)]
pub struct Stage {
    pub blocks: Vec<AttnBlock>,
    pub crb: Option<Crb>,
}

impl Stage {
    #[allow(clippy::too_many_arguments)]
    fn new(cfg: &ModelConfig, name: &str, channels: usize, heads: usize, depth: usize, crb: bool, gain: f64) -> Result<Self> {
        let hidden = cfg.hidden(channels);
        let blocks = (0..depth)
            .map(|i| AttnBlock::new(&format!("{name}.block{i}"), channels, heads, cfg.window_size, hidden, cfg.activation, gain))
            .collect();
        let crb = if crb {
            Some(Crb::new(
                &format!("{name}.crb"),
                channels,
                heads,
                hidden,
                cfg.activation,
                cfg.value_conv,
                cfg.qk_norm,
                cfg.learn_temperature,
                gain,
            )?)
        } else {
            None
        };
        Ok(Stage { blocks, crb })
    }

    fn forward<T: Real, B: Backend<T>>(&self, b: &mut B, x: &B::Value) -> Result<B::Value> {
        let mut x = x.clone();
        for blk in &self.blocks {
            x = blk.forward(b, &x)?;
        }
        if let Some(crb) = &self.crb {
            x = crb.forward(b, &x)?;
        }
        Ok(x)
    }
}

impl Layer for Stage {
    fn param_specs(&self, out: &mut Vec<ParamSpec>) {
        for blk in &self.blocks {
            blk.param_specs(out);
        }
        if let Some(c) = &self.crb {
            c.param_specs(out);
        }
    }

    fn macs(&self, h: usize, w: usize) -> u64 {
        self.blocks.iter().map(|b| b.macs(h, w)).sum::<u64>() + self.crb.as_ref().map_or(0, |c| c.macs(h, w))
    }
}

/// 1x1 expansion to `4 * cout` channels then a 2x pixel shuffle.
#[derive(Clone, Debug)]
pub struct Upsample {
    pub expand: Conv,
}

impl Upsample {
    fn forward<T: Real, B: Backend<T>>(&self, b: &mut B, x: &B::Value) -> Result<B::Value> {
        let y = self.expand.forward(b, x)?;
        b.pixel_shuffle(&y, 2)
    }
}

/// The three-stage U-shaped encoder-decoder with a reconstruction head.
#[derive(Clone, Debug)]
pub struct WaterFormer {
    pub config: ModelConfig,
    pub embed: Conv,
    pub encoder: [Stage; 3],
    pub down: [Conv; 2],
    pub up: [Upsample; 2],
    pub fusion: [Fusion; 2],
    pub decoder: [Stage; 2],
    pub head: Conv,
}

impl WaterFormer {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let cfg = &config;
        let [c0, c1, c2] = cfg.stage_widths;
        let gain = (8.0 * cfg.network_depth().max(1) as f64).powf(-0.25);
        let enc_sites = [CrbSite::Enc0, CrbSite::Enc1, CrbSite::Enc2];
        let mut encoder = Vec::with_capacity(3);
        for s in 0..3 {
            encoder.push(Stage::new(
                cfg,
                &format!("enc{s}"),
                cfg.stage_widths[s],
                cfg.heads[s],
                cfg.stage_depths[s],
                cfg.has_crb(enc_sites[s]),
                gain,
            )?);
        }
        let fusion_kind = cfg.effective_fusion();
        let net = WaterFormer {
            embed: Conv::new("embed", 3, c0, 3, 1, 1.0),
            encoder: encoder.try_into().expect("three stages"),
            down: [Conv::new("down0", c0, c1, 3, 2, 1.0), Conv::new("down1", c1, c2, 3, 2, 1.0)],
            up: [
                Upsample { expand: Conv::pointwise("up1", c2, 4 * c1, 1.0) },
                Upsample { expand: Conv::pointwise("up0", c1, 4 * c0, 1.0) },
            ],
            fusion: [Fusion::new(fusion_kind, "fuse1", c1, gain), Fusion::new(fusion_kind, "fuse0", c0, gain)],
            decoder: [
                Stage::new(cfg, "dec1", c1, cfg.heads[1], cfg.decoder_depths[0], cfg.has_crb(CrbSite::Dec1), gain)?,
                Stage::new(cfg, "dec0", c0, cfg.heads[0], cfg.decoder_depths[1], cfg.has_crb(CrbSite::Dec0), gain)?,
            ],
            head: Conv::new("head", c0, cfg.recon_kind.head_channels(), 3, 1, 1.0).zeroed(),
            config,
        };
        Ok(net)
    }

    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let mut out = Vec::new();
        Layer::param_specs(self, &mut out);
        out
    }

    /// Fresh parameters drawn from a seeded ChaCha stream, in spec order.
    pub fn init<T: Real>(&self, seed: u64) -> ParamStore<T> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        for spec in self.param_specs() {
            let t = match spec.init {
                Init::Zeros => Tensor::zeros(spec.shape),
                Init::Const(v) => Tensor::full(spec.shape, T::lit(v)),
                Init::TruncNormal { std } => {
                    let normal = Normal::new(0.0, 1.0).expect("unit normal");
                    Tensor::from_fn(spec.shape, |_| loop {
                        let z: f64 = normal.sample(&mut rng);
                        if z.abs() <= 2.0 {
                            break T::lit(z * std);
                        }
                    })
                }
            };
            store.insert(spec.name, t);
        }
        store
    }

    /// Checks that `store` holds exactly this network's parameters.
    pub fn check_params<T: Real>(&self, store: &ParamStore<T>) -> Result<()> {
        let specs = self.param_specs();
        if specs.len() != store.len() {
            return Err(Error::Incompatible(format!("expected {} parameter tensors, found {}", specs.len(), store.len())));
        }
        for s in specs {
            let t = store.get(&s.name).map_err(|_| Error::Incompatible(format!("missing parameter `{}`", s.name)))?;
            if t.shape() != s.shape {
                return Err(Error::Incompatible(format!("`{}` has shape {:?}, expected {:?}", s.name, t.shape(), s.shape)));
            }
        }
        Ok(())
    }

    /// Feature extractor up to (and including) the head: `[n, head_channels, h, w]`
    /// on a size already padded to a multiple of [`SIZE_MULTIPLE`].
    fn features<T: Real, B: Backend<T>>(&self, b: &mut B, x: &B::Value) -> Result<B::Value> {
        let e0 = self.embed.forward(b, x)?;
        let e0 = self.encoder[0].forward(b, &e0)?;
        check_finite(b, &e0, "encoder stage 0")?;
        let e1 = self.down[0].forward(b, &e0)?;
        let e1 = self.encoder[1].forward(b, &e1)?;
        check_finite(b, &e1, "encoder stage 1")?;
        let e2 = self.down[1].forward(b, &e1)?;
        let e2 = self.encoder[2].forward(b, &e2)?;
        check_finite(b, &e2, "encoder stage 2")?;
        let d1 = self.up[0].forward(b, &e2)?;
        let d1 = self.fusion[0].forward(b, &d1, &e1)?;
        let d1 = self.decoder[0].forward(b, &d1)?;
        check_finite(b, &d1, "decoder stage 1")?;
        let d0 = self.up[1].forward(b, &d1)?;
        let d0 = self.fusion[1].forward(b, &d0, &e0)?;
        let d0 = self.decoder[1].forward(b, &d0)?;
        check_finite(b, &d0, "decoder stage 0")?;
        self.head.forward(b, &d0)
    }

    /// Enhances a `[n, 3, h, w]` batch. Any size works: inputs are reflect-padded
    /// to a multiple of four and the result is cropped back. The output is left
    /// unclamped unless the config asks otherwise.
    pub fn forward<T: Real, B: Backend<T>>(&self, b: &mut B, x: &B::Value) -> Result<B::Value> {
        let [_, c, h, w] = b.shape(x);
        if c != 3 {
            return Err(Error::Dimension(format!("expected RGB input, got {c} channels")));
        }
        let (hp, wp) = padded_dims(h, w);
        if hp - h >= h || wp - w >= w {
            return Err(Error::Dimension(format!("{h}x{w} input too small to pad to a multiple of {SIZE_MULTIPLE}")));
        }
        let xp = b.reflect_pad(x, hp - h, wp - w)?;
        let o = self.features(b, &xp)?;
        let o = b.crop(&o, h, w)?;
        let out = match self.config.recon_kind {
            ReconKind::UwSoft => physics::soft_reconstruct(b, x, &o)?,
            ReconKind::Soft => {
                let k = b.narrow_channels(&o, 0, 1)?;
                let bias = b.narrow_channels(&o, 1, 3)?;
                let s = b.mul(x, &k)?;
                let s = b.sub(&s, &bias)?;
                b.add(&s, x)?
            }
            ReconKind::GlobalResidual => b.add(x, &o)?,
        };
        if self.config.clamp_output {
            // min(max(v, 0), 1) built from the available ops
            let zero = b.constant(Tensor::scalar(T::zero()));
            let lo = b.maximum(&out, &zero)?;
            let neg = b.scale(&lo, -1.0);
            let neg_one = b.constant(Tensor::scalar(-T::one()));
            let hi = b.maximum(&neg, &neg_one)?;
            return Ok(b.scale(&hi, -1.0));
        }
        Ok(out)
    }

    /// Image in, image out, with the result clamped to `[0, 1]`.
    pub fn enhance<T: Real>(&self, params: &ParamStore<T>, img: &ImageRgb) -> Result<(ImageRgb, ClampReport)> {
        let mut b = Eager::new(params);
        let x = b.constant(img.to_tensor());
        let y = self.forward(&mut b, &x)?;
        ImageRgb::from_tensor(&y, 0)
    }

    pub fn count_params(&self) -> usize {
        self.num_params()
    }

    /// Analytic multiply-accumulate count for one `h x w` image.
    pub fn count_macs(&self, h: usize, w: usize) -> u64 {
        self.macs(h, w)
    }
}

fn padded_dims(h: usize, w: usize) -> (usize, usize) {
    (h.div_ceil(SIZE_MULTIPLE) * SIZE_MULTIPLE, w.div_ceil(SIZE_MULTIPLE) * SIZE_MULTIPLE)
}

fn check_finite<T: Real, B: Backend<T>>(b: &B, v: &B::Value, at: &str) -> Result<()> {
    if cfg!(debug_assertions) && !b.value(v).all_finite() {
        return Err(Error::NonFinite(format!("activations after {at}")));
    }
    Ok(())
}

impl Layer for WaterFormer {
    fn param_specs(&self, out: &mut Vec<ParamSpec>) {
        self.embed.param_specs(out);
        self.encoder[0].param_specs(out);
        self.down[0].param_specs(out);
        self.encoder[1].param_specs(out);
        self.down[1].param_specs(out);
        self.encoder[2].param_specs(out);
        self.up[0].expand.param_specs(out);
        self.fusion[0].param_specs(out);
        self.decoder[0].param_specs(out);
        self.up[1].expand.param_specs(out);
        self.fusion[1].param_specs(out);
        self.decoder[1].param_specs(out);
        self.head.param_specs(out);
    }

    fn macs(&self, h: usize, w: usize) -> u64 {
        let (h0, w0) = padded_dims(h, w);
        let (h1, w1) = self.down[0].out_dims(h0, w0);
        let (h2, w2) = self.down[1].out_dims(h1, w1);
        self.embed.macs(h0, w0)
            + self.encoder[0].macs(h0, w0)
            + self.down[0].macs(h0, w0)
            + self.encoder[1].macs(h1, w1)
            + self.down[1].macs(h1, w1)
            + self.encoder[2].macs(h2, w2)
            + self.up[0].expand.macs(h2, w2)
            + self.fusion[0].macs(h1, w1)
            + self.decoder[0].macs(h1, w1)
            + self.up[1].expand.macs(h1, w1)
            + self.fusion[1].macs(h0, w0)
            + self.decoder[1].macs(h0, w0)
            + self.head.macs(h0, w0)
    }
}

/// Scalars held by a parameter store (counts what was actually allocated).
pub fn count_store_params<T: Real>(store: &ParamStore<T>) -> usize {
    store.num_scalars()
}
