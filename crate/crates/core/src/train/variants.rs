use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::net::{Activation, FusionKind, ModelConfig, ReconKind};

/// Ablation variants: the cumulative component study (`Base` .. `V5`) and
/// single swaps applied to the full model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// No CRB, plain additive skips, L1 only.
    Base,
    /// + CRB.
    V1,
    /// + CRB + CFB.
    V2,
    /// V2 + chroma loss.
    V3,
    /// V2 + Sobel loss.
    V4,
    /// Everything.
    V5,
    /// V5 with ReLU instead of FReLU in the MLP.
    ReluMlp,
    /// V5 with a plain global residual instead of the soft reconstruction.
    ReconPlain,
    /// V5 with the single-K soft reconstruction.
    ReconSoft,
    /// V5 with selective-kernel fusion instead of CFB.
    Skfusion,
}

/// Which components a variant switches on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct ComponentFlags {
    pub crb: bool,
    pub cfb: bool,
    pub chroma: bool,
    pub sobel: bool,
}

impl Variant {
    pub const ALL: [Variant; 10] = [
        Variant::Base,
        Variant::V1,
        Variant::V2,
        Variant::V3,
        Variant::V4,
        Variant::V5,
        Variant::ReluMlp,
        Variant::ReconPlain,
        Variant::ReconSoft,
        Variant::Skfusion,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Base => "base",
            Variant::V1 => "v1",
            Variant::V2 => "v2",
            Variant::V3 => "v3",
            Variant::V4 => "v4",
            Variant::V5 => "v5",
            Variant::ReluMlp => "relu_mlp",
            Variant::ReconPlain => "recon_plain",
            Variant::ReconSoft => "recon_soft",
            Variant::Skfusion => "skfusion",
        }
    }

    pub fn flags(self) -> ComponentFlags {
        let (crb, cfb, chroma, sobel) = match self {
            Variant::Base => (false, false, false, false),
            Variant::V1 => (true, false, false, false),
            Variant::V2 => (true, true, false, false),
            Variant::V3 => (true, true, true, false),
            Variant::V4 => (true, true, false, true),
            Variant::Skfusion => (true, false, true, true),
            Variant::V5 | Variant::ReluMlp | Variant::ReconPlain | Variant::ReconSoft => (true, true, true, true),
        };
        ComponentFlags { crb, cfb, chroma, sobel }
    }

    /// Short description of a single-component swap, `-` for the cumulative
    /// variants.
    pub fn swap_label(self) -> &'static str {
        match self {
            Variant::ReluMlp => "FReLU->ReLU",
            Variant::ReconPlain => "soft recon->residual",
            Variant::ReconSoft => "uw soft->soft recon",
            Variant::Skfusion => "CFB->SK fusion",
            _ => "-",
        }
    }

    /// The architecture and loss weights of this variant, derived from the
    /// full-model settings. Disabled loss terms get weight zero; enabled ones
    /// keep the configured weight.
    pub fn apply(self, model: &ModelConfig, weights: &LossWeights) -> (ModelConfig, LossWeights) {
        let f = self.flags();
        let mut m = model.clone();
        m.use_crb = f.crb;
        m.use_cfb = f.cfb;
        match self {
            Variant::ReluMlp => m.activation = Activation::Relu,
            Variant::ReconPlain => m.recon_kind = ReconKind::GlobalResidual,
            Variant::ReconSoft => m.recon_kind = ReconKind::Soft,
            Variant::Skfusion => m.fusion_kind = FusionKind::Sk,
            _ => {}
        }
        let w = LossWeights {
            l1: weights.l1,
            chroma: if f.chroma { weights.chroma } else { 0.0 },
            sobel: if f.sobel { weights.sobel } else { 0.0 },
        };
        (m, w)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL.into_iter().find(|v| v.name() == s).ok_or_else(|| {
            Error::Config(format!(
                "unknown variant `{s}` (known: {})",
                Variant::ALL.map(Variant::name).join(", ")
            ))
        })
    }
}

/// Parses a comma-separated variant list.
pub fn parse_variants(list: &str) -> Result<Vec<Variant>> {
    list.split(',').map(str::trim).filter(|s| !s.is_empty()).map(str::parse).collect()
}
