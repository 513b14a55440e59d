use super::{FfnKind, NormPlacement};
use crate::attention::{Attention, AttentionConfig, SharedMaps, ShiftConv};
use crate::error::Result;
use crate::nn::{ChannelNorm, Conv, Ctx, ParamBuilder};
use crate::tensor::{Real, Var};

#[derive(Debug, Clone)]
pub enum Ffn {
    Mlp {
        fc1: Conv,
        fc2: Conv,
    },
    DwMlp {
        fc1: Conv,
        dw: Conv,
        fc2: Conv,
    },
    GatedDw {
        fc1: Conv,
        dw: Conv,
        fc2: Conv,
        hidden: usize,
    },
    Shift {
        fc1: ShiftConv,
        fc2: ShiftConv,
    },
}

impl Ffn {
    pub fn new(pb: &mut ParamBuilder, kind: FfnKind, c: usize, hidden: usize) -> Result<Self> {
        Ok(match kind {
            FfnKind::Mlp => Ffn::Mlp {
                fc1: Conv::pointwise(pb, "fc1", c, hidden)?,
                fc2: Conv::pointwise(pb, "fc2", hidden, c)?,
            },
            FfnKind::DwMlp => Ffn::DwMlp {
                fc1: Conv::pointwise(pb, "fc1", c, hidden)?,
                dw: Conv::depthwise(pb, "dw", hidden, 3)?,
                fc2: Conv::pointwise(pb, "fc2", hidden, c)?,
            },
            FfnKind::GatedDw => Ffn::GatedDw {
                fc1: Conv::pointwise(pb, "fc1", c, 2 * hidden)?,
                dw: Conv::depthwise(pb, "dw", 2 * hidden, 3)?,
                fc2: Conv::pointwise(pb, "fc2", hidden, c)?,
                hidden,
            },
            FfnKind::Shift => Ffn::Shift {
                fc1: ShiftConv::new(pb, "fc1", c, hidden)?,
                fc2: ShiftConv::new(pb, "fc2", hidden, c)?,
            },
        })
    }

    pub fn forward<'t, T: Real>(&self, cx: &Ctx<'_, 't, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        match self {
            Ffn::Mlp { fc1, fc2 } => fc2.forward(cx, fc1.forward(cx, x)?.gelu()),
            Ffn::DwMlp { fc1, dw, fc2 } => {
                let h = fc1.forward(cx, x)?.gelu();
                fc2.forward(cx, dw.forward(cx, h)?.gelu())
            }
            Ffn::GatedDw {
                fc1,
                dw,
                fc2,
                hidden,
            } => {
                let h = dw.forward(cx, fc1.forward(cx, x)?)?;
                let gate = h.narrow(0, 0, *hidden)?.gelu();
                let value = h.narrow(0, *hidden, *hidden)?;
                fc2.forward(cx, gate.mul(value)?)
            }
            Ffn::Shift { fc1, fc2 } => fc2.forward(cx, fc1.forward(cx, x)?.relu()),
        }
    }
}

/// One transformer block: attention and feed-forward sub-layers with
/// residual connections.
#[derive(Debug, Clone)]
pub struct Block {
    pub norm1: ChannelNorm,
    pub attn: Attention,
    pub norm2: Option<ChannelNorm>,
    pub ffn: Ffn,
    pub placement: NormPlacement,
}

impl Block {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        pb: &mut ParamBuilder,
        cfg: &AttentionConfig,
        ffn: FfnKind,
        placement: NormPlacement,
        channels: usize,
        heads: usize,
        hidden: usize,
        index: usize,
    ) -> Result<Self> {
        let norm1 = ChannelNorm::new(pb, "norm1", channels)?;
        let attn = pb.scope("attn", |pb| {
            Attention::build(pb, cfg, channels, heads, index)
        })?;
        let norm2 = match placement {
            NormPlacement::ShiftFirst => None,
            _ => Some(ChannelNorm::new(pb, "norm2", channels)?),
        };
        let ffn = pb.scope("ffn", |pb| Ffn::new(pb, ffn, channels, hidden))?;
        Ok(Block {
            norm1,
            attn,
            norm2,
            ffn,
            placement,
        })
    }

    pub fn forward<'t, T: Real>(
        &self,
        cx: &Ctx<'_, 't, T>,
        x: Var<'t, T>,
        incoming: Option<&SharedMaps<'t, T>>,
        label: &str,
    ) -> Result<(Var<'t, T>, Option<SharedMaps<'t, T>>)> {
        let incoming = if self.attn.consumes_maps() {
            incoming
        } else {
            None
        };
        match self.placement {
            NormPlacement::Pre => {
                let (a, maps) =
                    self.attn
                        .forward(cx, self.norm1.forward(cx, x)?, incoming, label)?;
                let x = x.add(a)?;
                let n2 = self
                    .norm2
                    .as_ref()
                    .expect("pre-norm block has a second norm");
                Ok((x.add(self.ffn.forward(cx, n2.forward(cx, x)?)?)?, maps))
            }
            NormPlacement::Post => {
                let (a, maps) = self.attn.forward(cx, x, incoming, label)?;
                let x = x.add(self.norm1.forward(cx, a)?)?;
                let n2 = self
                    .norm2
                    .as_ref()
                    .expect("post-norm block has a second norm");
                Ok((x.add(n2.forward(cx, self.ffn.forward(cx, x)?)?)?, maps))
            }
            NormPlacement::ShiftFirst => {
                let x = x.add(self.ffn.forward(cx, x)?)?;
                let (a, maps) =
                    self.attn
                        .forward(cx, self.norm1.forward(cx, x)?, incoming, label)?;
                Ok((x.add(a)?, maps))
            }
        }
    }
}

/// Consecutive blocks at one resolution. Attention maps flow from each
/// block to the next so score-sharing consumers can reuse them.
#[derive(Debug, Clone)]
pub struct Stage {
    pub blocks: Vec<Block>,
}

impl Stage {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        pb: &mut ParamBuilder,
        cfg: &AttentionConfig,
        ffn: FfnKind,
        placement: NormPlacement,
        depth: usize,
        channels: usize,
        heads: usize,
        hidden: usize,
    ) -> Result<Self> {
        let blocks = (0..depth)
            .map(|i| {
                pb.scope(format!("{i}"), |pb| {
                    Block::new(pb, cfg, ffn, placement, channels, heads, hidden, i)
                })
            })
            .collect::<Result<_>>()?;
        Ok(Stage { blocks })
    }

    pub fn forward<'t, T: Real>(
        &self,
        cx: &Ctx<'_, 't, T>,
        mut x: Var<'t, T>,
        label: &str,
    ) -> Result<Var<'t, T>> {
        let mut maps = None;
        for (i, b) in self.blocks.iter().enumerate() {
            let (y, m) = b.forward(cx, x, maps.as_ref(), &format!("{label}.{i}"))?;
            x = y;
            maps = m;
        }
        Ok(x)
    }
}
