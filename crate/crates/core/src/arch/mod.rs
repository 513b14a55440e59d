//! Denoiser assembly: a shared 3×3 head, one of seven bodies, and a shared
//! convolutional tail whose residual is added to the noisy input.

mod blocks;
mod body;
mod checkpoint;
mod model;
pub mod presets;
mod suite;

use serde::{Deserialize, Serialize};

use crate::attention::AttentionConfig;
use crate::error::{Error, Result};

pub use blocks::{Block, Ffn, Stage};
pub use body::{DenseConnect, FlatBody, Scdp, UBody};
pub use checkpoint::{
    load_checkpoint, read_params, save_checkpoint, write_params, CHECKPOINT_MAGIC,
};
pub use model::{build_model, count_params, forward_denoise, Model};
pub use suite::{body_suite, small_attention};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BodyKind {
    Swinir,
    Elan,
    Ngswin,
    Restormer,
    Uformer,
    Cat,
    Art,
}

impl BodyKind {
    pub const ALL: [BodyKind; 7] = [
        BodyKind::Swinir,
        BodyKind::Elan,
        BodyKind::Ngswin,
        BodyKind::Restormer,
        BodyKind::Uformer,
        BodyKind::Cat,
        BodyKind::Art,
    ];

    pub fn name(self) -> &'static str {
        match self {
            BodyKind::Swinir => "swinir",
            BodyKind::Elan => "elan",
            BodyKind::Ngswin => "ngswin",
            BodyKind::Restormer => "restormer",
            BodyKind::Uformer => "uformer",
            BodyKind::Cat => "cat",
            BodyKind::Art => "art",
        }
    }

    pub fn default_ffn(self) -> FfnKind {
        match self {
            BodyKind::Swinir | BodyKind::Ngswin | BodyKind::Cat | BodyKind::Art => FfnKind::Mlp,
            BodyKind::Elan => FfnKind::Shift,
            BodyKind::Restormer => FfnKind::GatedDw,
            BodyKind::Uformer => FfnKind::DwMlp,
        }
    }

    pub fn default_norm(self) -> NormPlacement {
        match self {
            BodyKind::Ngswin => NormPlacement::Post,
            BodyKind::Elan => NormPlacement::ShiftFirst,
            _ => NormPlacement::Pre,
        }
    }
}

/// Feed-forward network variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FfnKind {
    /// 1×1, GELU, 1×1.
    Mlp,
    /// 1×1, GELU, depthwise 3×3, GELU, 1×1.
    DwMlp,
    /// 1×1 to twice the hidden width, depthwise 3×3, GELU-gated halves, 1×1.
    GatedDw,
    /// Shift convolution, ReLU, shift convolution.
    Shift,
}

/// Where layer norms sit inside a block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormPlacement {
    /// `x + attn(LN(x))`, then `x + ffn(LN(x))`.
    Pre,
    /// `x + LN(attn(x))`, then `x + LN(ffn(x))` (residual post-norm).
    Post,
    /// `x + ffn(x)`, then `x + attn(LN(x))`.
    ShiftFirst,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Hierarchy {
    #[default]
    None,
    Symmetric,
    Asymmetric,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderConnection {
    #[default]
    None,
    Dense,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Bottleneck {
    #[default]
    Plain,
    Scdp,
}

fn default_tail_layers() -> usize {
    2
}

fn default_tail_kernel() -> usize {
    3
}

fn default_in_channels() -> usize {
    3
}

/// Architecture description; also the on-disk JSON config format.
///
/// `depths` lists blocks per residual group for flat bodies. For symmetric
/// hierarchies it is `[enc_0 .. enc_{L-1}, bottleneck, dec_{L-1} .. dec_0]`,
/// optionally followed by a full-resolution refinement stage; asymmetric
/// hierarchies use `[enc_0 .. enc_{L-1}, bottleneck, decoder]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub body: BodyKind,
    pub depths: Vec<usize>,
    pub channels: usize,
    pub ffn_hidden: usize,
    pub attention: AttentionConfig,
    #[serde(default)]
    pub hierarchy: Hierarchy,
    #[serde(default)]
    pub encoder_connection: EncoderConnection,
    #[serde(default)]
    pub bottleneck: Bottleneck,
    #[serde(default = "default_tail_layers")]
    pub tail_layers: usize,
    #[serde(default = "default_tail_kernel")]
    pub tail_kernel: usize,
    #[serde(default = "default_in_channels")]
    pub in_channels: usize,
    /// Overrides the body's feed-forward variant.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ffn: Option<FfnKind>,
    /// Overrides the body's norm placement.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub norm: Option<NormPlacement>,
}

impl ModelConfig {
    pub fn ffn_kind(&self) -> FfnKind {
        self.ffn.unwrap_or(self.body.default_ffn())
    }

    pub fn norm_placement(&self) -> NormPlacement {
        self.norm.unwrap_or(self.body.default_norm())
    }

    /// Number of encoder levels of a hierarchical body (0 for flat ones).
    pub fn levels(&self) -> usize {
        match self.hierarchy {
            Hierarchy::None => 0,
            Hierarchy::Symmetric => (self.depths.len() - 1) / 2,
            Hierarchy::Asymmetric => self.depths.len().saturating_sub(2),
        }
    }

    /// Whether a symmetric depth list ends with a refinement stage.
    pub fn has_refinement(&self) -> bool {
        self.hierarchy == Hierarchy::Symmetric && self.depths.len().is_multiple_of(2)
    }

    /// Input sides must be multiples of this before entering the body.
    pub fn size_multiple(&self) -> usize {
        match (self.hierarchy, self.bottleneck) {
            (Hierarchy::None, _) => 1,
            (_, Bottleneck::Plain) => 1 << self.levels(),
            (_, Bottleneck::Scdp) => 1 << (self.levels() - 1),
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ModelConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        if self.depths.is_empty() || self.depths.contains(&0) {
            return err(format!(
                "depths must be non-empty and positive, got {:?}",
                self.depths
            ));
        }
        if self.tail_kernel.is_multiple_of(2) {
            return err(format!("tail_kernel must be odd, got {}", self.tail_kernel));
        }
        if self.tail_layers == 0 {
            return err("tail_layers must be at least 1".into());
        }
        if !matches!(self.in_channels, 1 | 3) {
            return err(format!(
                "in_channels must be 1 or 3, got {}",
                self.in_channels
            ));
        }
        if self.channels == 0 || self.ffn_hidden < self.channels {
            return err(format!(
                "ffn_hidden {} must be at least channels {}",
                self.ffn_hidden, self.channels
            ));
        }
        if self.ffn_kind() == FfnKind::Shift && self.channels < 5 {
            return err("shift feed-forward needs at least 5 channels".into());
        }
        match self.hierarchy {
            Hierarchy::None => {
                if self.encoder_connection != EncoderConnection::None
                    || self.bottleneck != Bottleneck::Plain
                {
                    return err("dense connections and SCDP need a hierarchical body".into());
                }
            }
            Hierarchy::Symmetric => {
                if self.depths.len() < 3 {
                    return err(format!(
                        "symmetric hierarchy needs at least 3 depth entries, got {:?}",
                        self.depths
                    ));
                }
            }
            Hierarchy::Asymmetric => {
                if self.depths.len() < 3 {
                    return err(format!(
                        "asymmetric hierarchy needs at least 3 depth entries, got {:?}",
                        self.depths
                    ));
                }
            }
        }
        let levels = self.levels();
        if self.bottleneck == Bottleneck::Scdp && !self.channels.is_multiple_of(1 << (levels - 1)) {
            return err(format!(
                "SCDP needs channels divisible by {}",
                1 << (levels - 1)
            ));
        }
        for i in 0..=levels {
            self.attention
                .validate(self.channels << i, self.attention.heads << i)?;
        }
        Ok(())
    }
}

/// Folds the decoder of a symmetric U-body into one full-resolution level:
/// the decoder depth becomes the sum of all decoder (and refinement)
/// entries, and the finest decoder depth is added to the first encoder
/// level, e.g. `[2, 4, 2, 2, 2, 4, 2]` becomes `[4, 4, 2, 2, 8]`.
pub fn asymmetric_variant(cfg: &ModelConfig) -> Result<ModelConfig> {
    if cfg.hierarchy != Hierarchy::Symmetric {
        return Err(Error::Config(format!(
            "asymmetric variant needs a symmetric hierarchy, got {:?}",
            cfg.hierarchy
        )));
    }
    cfg.validate()?;
    let levels = cfg.levels();
    let decoder = &cfg.depths[levels + 1..];
    let mut depths = cfg.depths[..=levels].to_vec();
    depths[0] += decoder.last().copied().unwrap_or(0);
    depths.push(decoder.iter().sum());
    let out = ModelConfig {
        depths,
        hierarchy: Hierarchy::Asymmetric,
        ..cfg.clone()
    };
    out.validate()?;
    Ok(out)
}

/// Cumulative hierarchy ablation arms: baseline, `+dense`, `+scdp`, `+asymmetric`.
pub fn hierarchy_ablation_arms(base: &ModelConfig) -> Result<Vec<(&'static str, ModelConfig)>> {
    if base.hierarchy != Hierarchy::Symmetric {
        return Err(Error::Config(
            "hierarchy ablation needs a symmetric base".into(),
        ));
    }
    let baseline = ModelConfig {
        encoder_connection: EncoderConnection::None,
        bottleneck: Bottleneck::Plain,
        ..base.clone()
    };
    let dense = ModelConfig {
        encoder_connection: EncoderConnection::Dense,
        ..baseline.clone()
    };
    let scdp = ModelConfig {
        bottleneck: Bottleneck::Scdp,
        ..dense.clone()
    };
    let asym = asymmetric_variant(&scdp)?;
    let arms = vec![
        ("baseline", baseline),
        ("+dense", dense),
        ("+scdp", scdp),
        ("+asymmetric", asym),
    ];
    for (_, c) in &arms {
        c.validate()?;
    }
    Ok(arms)
}
