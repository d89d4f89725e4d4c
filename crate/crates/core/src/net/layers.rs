//! Building blocks of the network.
//!
//! Every layer is a plain description (names, shapes, geometry). Weights live
//! in a [`ParamStore`](crate::params::ParamStore) under hierarchical names and
//! are fetched through the [`Backend`] during `forward`, so the same layer runs
//! eagerly or on the differentiation tape.

use crate::backend::Backend;
use crate::error::{Error, Result};
use crate::kernels::{ChannelAttnGeom, ConvGeom, UnaryOp, WindowGeom};
use crate::net::config::{Activation, FusionKind, ValueConv};
use crate::tensor::Real;

/// How a parameter is initialized.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Zeros,
    Const(f64),
    /// Normal truncated at two standard deviations.
    TruncNormal { std: f64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: [usize; 4],
    pub init: Init,
}

impl ParamSpec {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Static description shared by all layers.
pub trait Layer {
    fn param_specs(&self, out: &mut Vec<ParamSpec>);

    /// Multiply-accumulates for an `h x w` input (batch 1).
    fn macs(&self, h: usize, w: usize) -> u64;

    fn num_params(&self) -> usize {
        let mut specs = Vec::new();
        self.param_specs(&mut specs);
        specs.iter().map(ParamSpec::numel).sum()
    }
}

/// `gain * sqrt(2 / (fan_in + fan_out))`.
fn xavier_std(gain: f64, fan_in: usize, fan_out: usize) -> f64 {
    gain * (2.0 / (fan_in + fan_out) as f64).sqrt()
}

// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct Conv {
    pub name: String,
    pub cin: usize,
    pub cout: usize,
    pub geom: ConvGeom,
    pub bias: bool,
    pub weight_init: Init,
}

impl Conv {
    pub fn new(name: impl Into<String>, cin: usize, cout: usize, kernel: usize, stride: usize, gain: f64) -> Self {
        let geom = ConvGeom { kernel, stride, pad: kernel / 2, reflect: kernel > 1 };
        let std = xavier_std(gain, cin * kernel * kernel, cout * kernel * kernel);
        Conv { name: name.into(), cin, cout, geom, bias: true, weight_init: Init::TruncNormal { std } }
    }

    pub fn pointwise(name: impl Into<String>, cin: usize, cout: usize, gain: f64) -> Self {
        Self::new(name, cin, cout, 1, 1, gain)
    }

    /// Weights and bias start at zero.
    pub fn zeroed(mut self) -> Self {
        self.weight_init = Init::Zeros;
        self
    }

    pub fn weight_name(&self) -> String {
        format!("{}.weight", self.name)
    }

    pub fn bias_name(&self) -> String {
        format!("{}.bias", self.name)
    }

    pub fn forward<T: Real, B: Backend<T>>(&self, b: &mut B, x: &B::Value) -> Result<B::Value> {
        let w = b.param(&self.weight_name())?;
        let bias = if self.bias { Some(b.param(&self.bias_name())?) } else { None };
        b.conv2d(x, &w, bias.as_ref(), self.geom)
    }

    pub fn out_dims(&self, h: usize, w: usize) -> (usize, usize) {
        (self.geom.out_dim(h), self.geom.out_dim(w))
    }
}

impl Layer for Conv {
    fn param_specs(&self, out: &mut Vec<ParamSpec>) {
        let k = self.geom.kernel;
        out.push(ParamSpec { name: self.weight_name(), shape: [self.cout, self.cin, k, k], init: self.weight_init });
        if self.bias {
            out.push(ParamSpec { name: self.bias_name(), shape: [1, self.cout, 1, 1], init: Init::Zeros });
        }
    }

    fn macs(&self, h: usize, w: usize) -> u64 {
        let (ho, wo) = self.out_dims(h, w);
        let k = self.geom.kernel;
        (self.cout * self.cin * k * k * ho * wo) as u64
    }
}

// ---------------------------------------------------------------------------

/// Per-channel 3x3 convolution with zero padding.
#[derive(Clone, Debug)]
pub struct Depthwise {
    pub name: String,
    pub channels: usize,
    pub weight_init: Init,
}

impl Depthwise {
    pub fn new(name: impl Into<String>, channels: usize, gain: f64) -> Self {
        let std = xavier_std(gain, 9, channels * 9);
        Depthwise { name: name.into(), channels, weight_init: Init::TruncNormal { std } }
    }

    pub fn weight_name(&self) -> String {
        format!("{}.weight", self.name)
    }

    pub fn bias_name(&self) -> String {
        format!("{}.bias", self.name)
    }

    pub fn forward<T: Real, B: Backend<T>>(&self, b: &mut B, x: &B::Value) -> Result<B::Value> {
        let w = b.param(&self.weight_name())?;
        let bias = b.param(&self.bias_name())?;
        b.depthwise3x3(x, &w, Some(&bias))
    }
}

impl Layer for Depthwise {
    fn param_specs(&self, out: &mut Vec<ParamSpec>) {
        out.push(ParamSpec { name: self.weight_name(), shape: [self.channels, 1, 3, 3], init: self.weight_init });
        out.push(ParamSpec { name: self.bias_name(), shape: [1, self.channels, 1, 1], init: Init::Zeros });
    }

    fn macs(&self, h: usize, w: usize) -> u64 {
        (self.channels * 9 * h * w) as u64
    }
}

// ---------------------------------------------------------------------------

/// Rescale layer normalization.
///
/// Each pixel is normalized across channels; the block then gets a learned
/// rescale/rebias computed from the per-pixel std/mean so it can put the
/// original brightness statistics back after its residual branch.
#[derive(Clone, Debug)]
pub struct Rln {
    pub name: String,
    pub channels: usize,
    pub eps: f64,
    meta_scale: Conv,
    meta_shift: Conv,
}

/// Everything a normalization step produces.
pub struct RlnOutput<V> {
    /// Zero-mean, unit-variance features before the learned affine.
    pub normalized: V,
    /// `normalized * weight + bias`.
    pub out: V,
    pub mean: V,
    pub std: V,
    /// Learned restore factors, `[n, c, h, w]`.
    pub rescale: V,
    pub rebias: V,
}

impl Rln {
    pub fn new(name: impl Into<String>, channels: usize) -> Self {
        let name = name.into();
        let mut meta_scale = Conv::pointwise(format!("{name}.meta1"), 1, channels, 1.0);
        meta_scale.weight_init = Init::TruncNormal { std: 0.02 };
        let mut meta_shift = Conv::pointwise(format!("{name}.meta2"), 1, channels, 1.0);
        meta_shift.weight_init = Init::TruncNormal { std: 0.02 };
        Rln { name, channels, eps: 1e-5, meta_scale, meta_shift }
    }

    pub fn forward<T: Real, B: Backend<T>>(&self, b: &mut B, x: &B::Value) -> Result<RlnOutput<B::Value>> {
        let (normalized, mean, std) = rln_normalize(b, x, self.eps)?;
        let weight = b.param(&format!("{}.weight", self.name))?;
        let bias = b.param(&format!("{}.bias", self.name))?;
        let scaled = b.mul(&normalized, &weight)?;
        let out = b.add(&scaled, &bias)?;
        let rescale = self.meta_scale.forward(b, &std)?;
        let rebias = self.meta_shift.forward(b, &mean)?;
        Ok(RlnOutput { normalized, out, mean, std, rescale, rebias })
    }

    /// `y * rescale + rebias`.
    pub fn restore<T: Real, B: Backend<T>>(&self, b: &mut B, y: &B::Value, stats: &RlnOutput<B::Value>) -> Result<B::Value> {
        let scaled = b.mul(y, &stats.rescale)?;
        b.add(&scaled, &stats.rebias)
    }
}

impl Layer for Rln {
    fn param_specs(&self, out: &mut Vec<ParamSpec>) {
        let shape = [1, self.channels, 1, 1];
        out.push(ParamSpec { name: format!("{}.weight", self.name), shape, init: Init::Const(1.0) });
        out.push(ParamSpec { name: format!("{}.bias", self.name), shape, init: Init::Zeros });
        self.meta_scale.param_specs(out);
        if let Some(b) = out.last_mut() {
            b.init = Init::Const(1.0);
        }
        self.meta_shift.param_specs(out);
    }

    fn macs(&self, h: usize, w: usize) -> u64 {
        self.meta_scale.macs(h, w) + self.meta_shift.macs(h, w)
    }
}

/// Per-pixel normalization across channels: returns `(normalized, mean, std)`
/// with `std = sqrt(var + eps)`, mean and std shaped `[n, 1, h, w]`.
pub fn rln_normalize<T: Real, B: Backend<T>>(b: &mut B, x: &B::Value, eps: f64) -> Result<(B::Value, B::Value, B::Value)> {
    let over_c = [false, true, false, false];
    let mean = b.mean_over(x, over_c);
    let centered = b.sub(x, &mean)?;
    let sq = b.unary(UnaryOp::Square, &centered);
    let var = b.mean_over(&sq, over_c);
    let var = b.shift(&var, eps);
    let std = b.unary(UnaryOp::Sqrt, &var);
    let normalized = b.div(&centered, &std)?;
    Ok((normalized, mean, std))
}

/// Puts statistics back: `normalized * std + mean`.
pub fn rln_restore<T: Real, B: Backend<T>>(b: &mut B, normalized: &B::Value, mean: &B::Value, std: &B::Value) -> Result<B::Value> {
    let scaled = b.mul(normalized, std)?;
    b.add(&scaled, mean)
}

// ---------------------------------------------------------------------------

/// Pointwise expand, activation, pointwise project. No residual.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub fc1: Conv,
    pub funnel: Option<Depthwise>,
    pub fc2: Conv,
}

impl Mlp {
    pub fn new(name: &str, channels: usize, hidden: usize, act: Activation, gain: f64) -> Self {
        Mlp {
            fc1: Conv::pointwise(format!("{name}.fc1"), channels, hidden, gain),
            funnel: (act == Activation::Frelu).then(|| Depthwise::new(format!("{name}.funnel"), hidden, gain)),
            fc2: Conv::pointwise(format!("{name}.fc2"), hidden, channels, gain),
        }
    }

    pub fn forward<T: Real, B: Backend<T>>(&self, b: &mut B, x: &B::Value) -> Result<B::Value> {
        let h = self.fc1.forward(b, x)?;
        let h = self.activate(b, &h)?;
        self.fc2.forward(b, &h)
    }

    /// FReLU `max(x, dw3x3(x) + b)`, or ReLU when no funnel is configured.
    pub fn activate<T: Real, B: Backend<T>>(&self, b: &mut B, x: &B::Value) -> Result<B::Value> {
        match &self.funnel {
            Some(dw) => {
                let t = dw.forward(b, x)?;
                b.maximum(x, &t)
            }
            None => Ok(b.unary(UnaryOp::Relu, x)),
        }
    }
}

impl Layer for Mlp {
    fn param_specs(&self, out: &mut Vec<ParamSpec>) {
        self.fc1.param_specs(out);
        if let Some(f) = &self.funnel {
            f.param_specs(out);
        }
        self.fc2.param_specs(out);
    }

    fn macs(&self, h: usize, w: usize) -> u64 {
        self.fc1.macs(h, w) + self.funnel.as_ref().map_or(0, |f| f.macs(h, w)) + self.fc2.macs(h, w)
    }
}

// ---------------------------------------------------------------------------

/// Window self-attention block with an MLP, both residual.
#[derive(Clone, Debug)]
pub struct AttnBlock {
    pub channels: usize,
    pub heads: usize,
    pub window: usize,
    pub norm: Rln,
    pub qkv: Conv,
    pub proj: Conv,
    pub mlp: Mlp,
}

impl AttnBlock {
    pub fn new(name: &str, channels: usize, heads: usize, window: usize, hidden: usize, act: Activation, gain: f64) -> Self {
        AttnBlock {
            channels,
            heads,
            window,
            norm: Rln::new(format!("{name}.norm"), channels),
            qkv: Conv::pointwise(format!("{name}.qkv"), channels, 3 * channels, gain),
            proj: Conv::pointwise(format!("{name}.proj"), channels, channels, gain),
            mlp: Mlp::new(&format!("{name}.mlp"), channels, hidden, act, gain),
        }
    }

    /// Window side used at this resolution; never larger than the map.
    pub fn effective_window(&self, h: usize, w: usize) -> usize {
        self.window.min(h).min(w)
    }

    fn padded(&self, h: usize, w: usize) -> (usize, usize) {
        let ws = self.effective_window(h, w);
        (h.div_ceil(ws) * ws, w.div_ceil(ws) * ws)
    }

    pub fn forward<T: Real, B: Backend<T>>(&self, b: &mut B, x: &B::Value) -> Result<B::Value> {
        let [_, _, h, w] = b.shape(x);
        let ws = self.effective_window(h, w);
        let (hp, wp) = self.padded(h, w);
        let stats = self.norm.forward(b, x)?;
        let qkv = self.qkv.forward(b, &stats.out)?;
        let qkv = b.reflect_pad(&qkv, hp - h, wp - w)?;
        let att = b.window_attention(&qkv, WindowGeom { heads: self.heads, window: ws })?;
        let att = b.crop(&att, h, w)?;
        let att = self.proj.forward(b, &att)?;
        let att = self.norm.restore(b, &att, &stats)?;
        let x = b.add(x, &att)?;
        let m = self.mlp.forward(b, &x)?;
        b.add(&x, &m)
    }
}

impl Layer for AttnBlock {
    fn param_specs(&self, out: &mut Vec<ParamSpec>) {
        self.norm.param_specs(out);
        self.qkv.param_specs(out);
        self.proj.param_specs(out);
        self.mlp.param_specs(out);
    }

    fn macs(&self, h: usize, w: usize) -> u64 {
        let ws = self.effective_window(h, w);
        let (hp, wp) = self.padded(h, w);
        // QK^T and AV: each token meets `ws^2` others over `c` channels.
        let attn = 2 * hp * wp * ws * ws * self.channels;
        self.norm.macs(h, w) + self.qkv.macs(h, w) + attn as u64 + self.proj.macs(h, w) + self.mlp.macs(h, w)
    }
}

// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub enum ValueConvLayer {
    Depthwise(Depthwise),
    Dense(Conv),
}

impl ValueConvLayer {
    fn forward<T: Real, B: Backend<T>>(&self, b: &mut B, x: &B::Value) -> Result<B::Value> {
        match self {
            ValueConvLayer::Depthwise(d) => d.forward(b, x),
            ValueConvLayer::Dense(c) => c.forward(b, x),
        }
    }

    fn layer(&self) -> &dyn Layer {
        match self {
            ValueConvLayer::Depthwise(d) => d,
            ValueConvLayer::Dense(c) => c,
        }
    }
}

/// Color restoration block: channel cross-covariance attention between
/// normalization and affine restore, then an MLP, both residual.
#[derive(Clone, Debug)]
pub struct Crb {
    pub name: String,
    pub channels: usize,
    pub heads: usize,
    pub qk_norm: bool,
    pub learn_temperature: bool,
    pub norm: Rln,
    pub pw: Conv,
    pub dw: Depthwise,
    pub value_conv: ValueConvLayer,
    pub mlp: Mlp,
}

impl Crb {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        name: &str,
        channels: usize,
        heads: usize,
        hidden: usize,
        act: Activation,
        value_conv: ValueConv,
        qk_norm: bool,
        learn_temperature: bool,
        gain: f64,
    ) -> Result<Self> {
        if heads == 0 || channels % heads != 0 {
            return Err(Error::Config(format!("{channels} channels not divisible by {heads} heads")));
        }
        let vc = match value_conv {
            ValueConv::Depthwise => ValueConvLayer::Depthwise(Depthwise::new(format!("{name}.vconv"), channels, gain)),
            ValueConv::Dense => {
                let mut c = Conv::new(format!("{name}.vconv"), channels, channels, 3, 1, gain);
                c.geom.reflect = false;
                ValueConvLayer::Dense(c)
            }
        };
        Ok(Crb {
            name: name.to_string(),
            channels,
            heads,
            qk_norm,
            learn_temperature,
            norm: Rln::new(format!("{name}.norm"), channels),
            pw: Conv::pointwise(format!("{name}.pw"), channels, 3 * channels, gain),
            dw: Depthwise::new(format!("{name}.dw"), 3 * channels, gain),
            value_conv: vc,
            mlp: Mlp::new(&format!("{name}.mlp"), channels, hidden, act, gain),
        })
    }

    pub fn head_dim(&self) -> usize {
        self.channels / self.heads
    }

    fn temperature_name(&self) -> String {
        format!("{}.temperature", self.name)
    }

    /// The attention output before the affine restore (what the residual adds).
    pub fn attend<T: Real, B: Backend<T>>(&self, b: &mut B, x: &B::Value) -> Result<(B::Value, crate::net::layers::RlnOutput<B::Value>)> {
        let c = self.channels;
        let stats = self.norm.forward(b, x)?;
        let qkv = self.pw.forward(b, &stats.out)?;
        let qkv = self.dw.forward(b, &qkv)?;
        let q = b.narrow_channels(&qkv, 0, c)?;
        let k = b.narrow_channels(&qkv, c, c)?;
        let v = b.narrow_channels(&qkv, 2 * c, c)?;
        let v = self.value_conv.forward(b, &v)?;
        let gamma = if self.learn_temperature {
            b.param(&self.temperature_name())?
        } else {
            let d = self.head_dim() as f64;
            b.constant(crate::tensor::Tensor::full([1, self.heads, 1, 1], T::lit(d.sqrt())))
        };
        let att = b.channel_attention(&q, &k, &v, &gamma, ChannelAttnGeom { heads: self.heads, qk_norm: self.qk_norm })?;
        Ok((att, stats))
    }

    pub fn forward<T: Real, B: Backend<T>>(&self, b: &mut B, x: &B::Value) -> Result<B::Value> {
        let (att, stats) = self.attend(b, x)?;
        let att = self.norm.restore(b, &att, &stats)?;
        let x = b.add(x, &att)?;
        let m = self.mlp.forward(b, &x)?;
        b.add(&x, &m)
    }
}

impl Layer for Crb {
    fn param_specs(&self, out: &mut Vec<ParamSpec>) {
        self.norm.param_specs(out);
        self.pw.param_specs(out);
        self.dw.param_specs(out);
        self.value_conv.layer().param_specs(out);
        if self.learn_temperature {
            let d = self.head_dim() as f64;
            out.push(ParamSpec { name: self.temperature_name(), shape: [1, self.heads, 1, 1], init: Init::Const(d.sqrt()) });
        }
        self.mlp.param_specs(out);
    }

    fn macs(&self, h: usize, w: usize) -> u64 {
        let c = self.channels;
        let attn = 2 * c * self.head_dim() * h * w;
        self.norm.macs(h, w)
            + self.pw.macs(h, w)
            + self.dw.macs(h, w)
            + self.value_conv.layer().macs(h, w)
            + attn as u64
            + self.mlp.macs(h, w)
    }
}

// ---------------------------------------------------------------------------

/// Skip-connection fusion of a decoder feature `x1` and an encoder feature `x2`.
#[derive(Clone, Debug)]
pub enum Fusion {
    Add,
    Concat { proj: Conv },
    Sk { fc1: Conv, fc2: Conv, channels: usize },
    Cfb { pw: Conv, dw: Depthwise },
}

impl Fusion {
    pub fn new(kind: FusionKind, name: &str, channels: usize, gain: f64) -> Self {
        match kind {
            FusionKind::Add => Fusion::Add,
            FusionKind::Concat => Fusion::Concat { proj: Conv::pointwise(format!("{name}.proj"), 2 * channels, channels, gain) },
            FusionKind::Sk => {
                let d = (channels / 8).max(4);
                let mut fc1 = Conv::pointwise(format!("{name}.fc1"), channels, d, gain);
                fc1.bias = false;
                let mut fc2 = Conv::pointwise(format!("{name}.fc2"), d, 2 * channels, gain);
                fc2.bias = false;
                Fusion::Sk { fc1, fc2, channels }
            }
            FusionKind::Cfb => Fusion::Cfb {
                pw: Conv::pointwise(format!("{name}.pw"), channels, channels, gain),
                dw: Depthwise::new(format!("{name}.dw"), channels, gain),
            },
        }
    }

    pub fn forward<T: Real, B: Backend<T>>(&self, b: &mut B, x1: &B::Value, x2: &B::Value) -> Result<B::Value> {
        if b.shape(x1) != b.shape(x2) {
            return Err(Error::Dimension(format!("fusion inputs {:?} vs {:?}", b.shape(x1), b.shape(x2))));
        }
        match self {
            Fusion::Add => b.add(x1, x2),
            Fusion::Concat { proj } => {
                let cat = b.concat_channels(x1, x2)?;
                proj.forward(b, &cat)
            }
            Fusion::Sk { .. } | Fusion::Cfb { .. } => {
                let (a1, a2) = self.weights(b, x1, x2)?;
                let y1 = b.mul(x1, &a1)?;
                let y2 = b.mul(x2, &a2)?;
                let y = b.add(&y1, &y2)?;
                match self {
                    Fusion::Cfb { pw, dw } => {
                        let r = pw.forward(b, &y)?;
                        let r = dw.forward(b, &r)?;
                        b.add(&y, &r)
                    }
                    _ => Ok(y),
                }
            }
        }
    }

    /// Per-channel branch weights `(alpha1, alpha2)`, each `[n, c, 1, 1]`,
    /// a two-way softmax so `alpha1 + alpha2 = 1`. Only for CFB and SK.
    pub fn weights<T: Real, B: Backend<T>>(&self, b: &mut B, x1: &B::Value, x2: &B::Value) -> Result<(B::Value, B::Value)> {
        let gap = [false, false, true, true];
        let logit_diff = match self {
            Fusion::Cfb { .. } => {
                let g1 = b.mean_over(x1, gap);
                let g2 = b.mean_over(x2, gap);
                b.sub(&g1, &g2)?
            }
            Fusion::Sk { fc1, fc2, channels } => {
                let s = b.add(x1, x2)?;
                let g = b.mean_over(&s, gap);
                let z = fc1.forward(b, &g)?;
                let z = b.unary(UnaryOp::Relu, &z);
                let logits = fc2.forward(b, &z)?;
                let l1 = b.narrow_channels(&logits, 0, *channels)?;
                let l2 = b.narrow_channels(&logits, *channels, *channels)?;
                b.sub(&l1, &l2)?
            }
            _ => return Err(Error::Config("only CFB and SK fusion compute branch weights".into())),
        };
        // softmax over two logits == sigmoid of their difference
        let a1 = b.unary(UnaryOp::Sigmoid, &logit_diff);
        let neg = b.scale(&a1, -1.0);
        let a2 = b.shift(&neg, 1.0);
        Ok((a1, a2))
    }
}

impl Layer for Fusion {
    fn param_specs(&self, out: &mut Vec<ParamSpec>) {
        match self {
            Fusion::Add => {}
            Fusion::Concat { proj } => proj.param_specs(out),
            Fusion::Sk { fc1, fc2, .. } => {
                fc1.param_specs(out);
                fc2.param_specs(out);
            }
            Fusion::Cfb { pw, dw } => {
                pw.param_specs(out);
                dw.param_specs(out);
            }
        }
    }

    fn macs(&self, h: usize, w: usize) -> u64 {
        match self {
            Fusion::Add => 0,
            Fusion::Concat { proj } => proj.macs(h, w),
            Fusion::Sk { fc1, fc2, .. } => fc1.macs(1, 1) + fc2.macs(1, 1),
            Fusion::Cfb { pw, dw } => pw.macs(h, w) + dw.macs(h, w),
        }
    }
}
