//! Self-attention cores for the seven body kinds, shift convolution, and the
//! closed-form cost model for local-window versus channel attention.

mod channel;
mod shift;
mod window;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::nn::{Ctx, ParamBuilder};
use crate::tensor::{Real, Var};

pub use channel::ChannelAttention;
pub use shift::{shift_channels, ShiftConv};
pub use window::{
    window_partition, window_reverse, MultiScaleAttention, WindowAttention, WindowGeom,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionKind {
    PlainWindow,
    MultiscaleWindow,
    NgramWindow,
    Channel,
    RectWindow,
    SparseDenseWindow,
}

fn default_window() -> usize {
    8
}

fn default_dilation() -> usize {
    1
}

/// Attention hyper-parameters shared by every block of a body. Channel and
/// head counts given here apply to the first level; hierarchical bodies
/// double both per level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionConfig {
    pub kind: AttentionKind,
    pub heads: usize,
    #[serde(default = "default_window")]
    pub window: usize,
    /// `(Mh, Mw)` for rectangle windows; alternate blocks use `(Mw, Mh)`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rect: Option<[usize; 2]>,
    /// Window sizes of the channel groups of multi-scale attention.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub scales: Vec<usize>,
    /// Pixel stride of the sparse windows used by odd blocks.
    #[serde(default = "default_dilation")]
    pub dilation: usize,
    /// Neighbourhood radius (in windows) of the n-gram context; 0 disables it.
    #[serde(default)]
    pub ngram: usize,
    #[serde(default)]
    pub qk_shared: bool,
    #[serde(default)]
    pub score_shared: bool,
    /// Depthwise 3×3 after each of the channel-attention Q/K/V projections.
    #[serde(default)]
    pub qkv_dwconv: bool,
}

impl AttentionConfig {
    pub fn new(kind: AttentionKind, heads: usize, window: usize) -> Self {
        AttentionConfig {
            kind,
            heads,
            window,
            rect: None,
            scales: Vec::new(),
            dilation: 1,
            ngram: 0,
            qk_shared: false,
            score_shared: false,
            qkv_dwconv: false,
        }
    }

    /// Checks the config against a block width `channels` with `heads` heads.
    pub fn validate(&self, channels: usize, heads: usize) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        if heads == 0 || !channels.is_multiple_of(heads) {
            return err(format!(
                "{channels} channels not divisible by {heads} heads"
            ));
        }
        if self.window == 0 || self.dilation == 0 {
            return err("window and dilation must be at least 1".into());
        }
        match self.kind {
            AttentionKind::RectWindow => match self.rect {
                Some([a, b]) if a > 0 && b > 0 => {}
                _ => return err("rect_window needs a positive `rect` pair".into()),
            },
            AttentionKind::MultiscaleWindow => {
                if self.scales.is_empty() || self.scales.contains(&0) {
                    return err("multiscale_window needs non-empty positive `scales`".into());
                }
                if !channels.is_multiple_of(self.scales.len()) {
                    return err(format!(
                        "{channels} channels not divisible into {} scale groups",
                        self.scales.len()
                    ));
                }
            }
            _ => {}
        }
        if self.score_shared && self.kind != AttentionKind::MultiscaleWindow {
            return err("score sharing is only defined for multiscale_window".into());
        }
        Ok(())
    }
}

/// One attention layer of any kind.
#[derive(Debug, Clone)]
pub enum Attention {
    Window(WindowAttention),
    Channel(ChannelAttention),
    MultiScale(MultiScaleAttention),
}

/// Attention maps handed from a provider block to a score-sharing consumer.
pub type SharedMaps<'t, T> = Vec<Var<'t, T>>;

impl Attention {
    /// Builds the attention of block `block_index` (which decides the
    /// rectangle orientation, sparse/dense alternation and score sharing role).
    pub fn build(
        pb: &mut ParamBuilder,
        cfg: &AttentionConfig,
        channels: usize,
        heads: usize,
        block_index: usize,
    ) -> Result<Self> {
        cfg.validate(channels, heads)?;
        let odd = block_index % 2 == 1;
        Ok(match cfg.kind {
            AttentionKind::PlainWindow => Attention::Window(WindowAttention::new(
                pb,
                channels,
                heads,
                (cfg.window, cfg.window),
                1,
                0,
                cfg.qk_shared,
            )?),
            AttentionKind::NgramWindow => Attention::Window(WindowAttention::new(
                pb,
                channels,
                heads,
                (cfg.window, cfg.window),
                1,
                cfg.ngram,
                cfg.qk_shared,
            )?),
            AttentionKind::RectWindow => {
                let [a, b] = cfg
                    .rect
                    .ok_or_else(|| invalid!("rect window size missing"))?;
                let win = if odd { (b, a) } else { (a, b) };
                Attention::Window(WindowAttention::new(
                    pb,
                    channels,
                    heads,
                    win,
                    1,
                    0,
                    cfg.qk_shared,
                )?)
            }
            AttentionKind::SparseDenseWindow => {
                let d = if odd { cfg.dilation } else { 1 };
                Attention::Window(WindowAttention::new(
                    pb,
                    channels,
                    heads,
                    (cfg.window, cfg.window),
                    d,
                    0,
                    cfg.qk_shared,
                )?)
            }
            AttentionKind::Channel => Attention::Channel(ChannelAttention::new(
                pb,
                channels,
                heads,
                cfg.qkv_dwconv,
                cfg.qk_shared,
            )?),
            AttentionKind::MultiscaleWindow => {
                let consumer = cfg.score_shared && odd;
                Attention::MultiScale(MultiScaleAttention::new(
                    pb,
                    channels,
                    &cfg.scales,
                    cfg.qk_shared,
                    consumer,
                )?)
            }
        })
    }

    /// Whether this layer expects maps from the previous block.
    pub fn consumes_maps(&self) -> bool {
        matches!(self, Attention::MultiScale(m) if m.is_consumer())
    }

    pub fn forward<'t, T: Real>(
        &self,
        cx: &Ctx<'_, 't, T>,
        x: Var<'t, T>,
        incoming: Option<&SharedMaps<'t, T>>,
        label: &str,
    ) -> Result<(Var<'t, T>, Option<SharedMaps<'t, T>>)> {
        match self {
            Attention::Window(a) => Ok((a.forward(cx, x, label)?, None)),
            Attention::Channel(a) => Ok((a.forward(cx, x, label)?, None)),
            Attention::MultiScale(a) => {
                let (y, maps) = a.forward(cx, x, incoming, label)?;
                Ok((y, Some(maps)))
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ComplexityKind {
    LocalSpatial,
    Channel,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct ComplexityBreakdown {
    pub projection_flops: u64,
    pub attention_flops: u64,
    pub total: u64,
}

/// Cost of one attention layer: `4HWC²` for the projections plus `2M²HWC`
/// (local windows) or `2HWC²/L` (channel attention). Softmax and FFN costs
/// are not modelled.
pub fn sa_complexity(
    kind: ComplexityKind,
    h: u64,
    w: u64,
    c: u64,
    m: u64,
    l: u64,
) -> Result<ComplexityBreakdown> {
    if [h, w, c, m, l].contains(&0) {
        return Err(invalid!("sa_complexity arguments must be positive"));
    }
    if kind == ComplexityKind::Channel && !c.is_multiple_of(l) {
        return Err(invalid!("{c} channels not divisible by {l} heads"));
    }
    let product = |factors: &[u64]| {
        factors
            .iter()
            .try_fold(1u128, |acc, &f| acc.checked_mul(f as u128))
            .and_then(|v| u64::try_from(v).ok())
            .ok_or_else(|| invalid!("complexity overflows u64"))
    };
    let projection_flops = product(&[4, h, w, c, c])?;
    let attention_flops = match kind {
        ComplexityKind::LocalSpatial => product(&[2, m, m, h, w, c])?,
        ComplexityKind::Channel => product(&[2, h, w, c, c / l])?,
    };
    Ok(ComplexityBreakdown {
        projection_flops,
        attention_flops,
        total: projection_flops
            .checked_add(attention_flops)
            .ok_or_else(|| invalid!("complexity overflows u64"))?,
    })
}
