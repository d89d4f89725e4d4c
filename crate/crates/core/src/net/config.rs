use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How two same-shaped feature maps are merged at a skip connection.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionKind {
    /// Importance-weighted per-channel fusion with a conv refinement residual.
    Cfb,
    /// Selective-kernel fusion: GAP -> bottleneck MLP -> per-branch softmax.
    Sk,
    /// Channel concatenation followed by a 1x1 projection.
    Concat,
    Add,
}

/// What the 3x3 head predicts and how it is turned into an image.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReconKind {
    /// Six channels `[K_R, K_G, K_B, B_R, B_G, B_B]`; `out = x*K - B + x`.
    UwSoft,
    /// Four channels `[K, B_R, B_G, B_B]` with one shared `K`.
    Soft,
    /// Three channels added to the input.
    GlobalResidual,
}

impl ReconKind {
    pub fn head_channels(self) -> usize {
        match self {
            ReconKind::UwSoft => 6,
            ReconKind::Soft => 4,
            ReconKind::GlobalResidual => 3,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    /// `max(x, dw3x3(x))`.
    Frelu,
    Relu,
}

/// The 3x3 convolution applied to `V` inside the color restoration block.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValueConv {
    Depthwise,
    Dense,
}

/// Where a color restoration block may sit: after an encoder or decoder stage.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CrbSite {
    Enc0,
    Enc1,
    Enc2,
    Dec1,
    Dec0,
}

impl CrbSite {
    pub const ALL: [CrbSite; 5] = [CrbSite::Enc0, CrbSite::Enc1, CrbSite::Enc2, CrbSite::Dec1, CrbSite::Dec0];
}

/// Architecture of one network instance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Channels of the three encoder stages, strictly increasing.
    pub stage_widths: [usize; 3],
    pub stage_depths: [usize; 3],
    /// Blocks in the two decoder stages, listed from the deepest up.
    pub decoder_depths: [usize; 2],
    /// Attention heads per stage (shared by spatial and channel attention).
    pub heads: [usize; 3],
    pub window_size: usize,
    pub mlp_ratio: f64,
    pub use_crb: bool,
    pub crb_sites: Vec<CrbSite>,
    /// Forces CFB skip fusion; when off, `fusion_kind` decides.
    pub use_cfb: bool,
    pub fusion_kind: FusionKind,
    pub recon_kind: ReconKind,
    pub activation: Activation,
    pub value_conv: ValueConv,
    /// L2-normalize queries and keys before the channel attention product.
    pub qk_norm: bool,
    /// Learn the channel attention temperature (initialized to `sqrt(d)`).
    pub learn_temperature: bool,
    /// Clamp the reconstruction to `[0, 1]` before it reaches the loss.
    pub clamp_output: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::reference()
    }
}

impl ModelConfig {
    /// The full network at its reference size.
    pub fn reference() -> Self {
        ModelConfig {
            stage_widths: [24, 48, 96],
            stage_depths: [2, 2, 2],
            decoder_depths: [2, 2],
            heads: [2, 4, 8],
            window_size: 8,
            mlp_ratio: 2.0,
            use_crb: true,
            crb_sites: CrbSite::ALL.to_vec(),
            use_cfb: true,
            fusion_kind: FusionKind::Add,
            recon_kind: ReconKind::UwSoft,
            activation: Activation::Frelu,
            value_conv: ValueConv::Depthwise,
            qk_norm: true,
            learn_temperature: true,
            clamp_output: false,
        }
    }

    /// A narrow, shallow instance for tests and quick experiments.
    pub fn tiny() -> Self {
        ModelConfig {
            stage_widths: [8, 16, 32],
            stage_depths: [1, 1, 1],
            decoder_depths: [1, 1],
            heads: [2, 2, 4],
            window_size: 4,
            ..Self::reference()
        }
    }

    /// The skip fusion actually built.
    pub fn effective_fusion(&self) -> FusionKind {
        if self.use_cfb {
            FusionKind::Cfb
        } else {
            self.fusion_kind
        }
    }

    pub fn has_crb(&self, site: CrbSite) -> bool {
        self.use_crb && self.crb_sites.contains(&site)
    }

    /// Total number of transformer blocks, used to scale initialization.
    pub fn network_depth(&self) -> usize {
        self.stage_depths.iter().sum::<usize>() + self.decoder_depths.iter().sum::<usize>()
    }

    pub fn hidden(&self, c: usize) -> usize {
        ((c as f64) * self.mlp_ratio).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        let [w0, w1, w2] = self.stage_widths;
        if w0 == 0 || !(w0 < w1 && w1 < w2) {
            return Err(Error::Config(format!("stage widths {:?} must be positive and strictly increasing", self.stage_widths)));
        }
        for (c, h) in self.stage_widths.iter().zip(self.heads) {
            if h == 0 || c % h != 0 {
                return Err(Error::Config(format!("width {c} not divisible by {h} heads")));
            }
        }
        if self.window_size == 0 {
            return Err(Error::Config("window size must be positive".into()));
        }
        if !(self.mlp_ratio >= 1.0) {
            return Err(Error::Config(format!("mlp ratio {} below 1", self.mlp_ratio)));
        }
        Ok(())
    }
}
