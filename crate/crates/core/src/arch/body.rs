use super::{Bottleneck, EncoderConnection, Hierarchy, ModelConfig, Stage};
use crate::error::{invalid, Error, Result};
use crate::nn::{Conv, ConvInit, Ctx, ParamBuilder};
use crate::tensor::{Real, Var};

fn dims<T: Real>(x: &Var<'_, T>, op: &str) -> Result<(usize, usize, usize)> {
    match x.shape()[..] {
        [c, h, w] => Ok((c, h, w)),
        ref s => Err(invalid!("{op} expects [C, H, W], got {s:?}")),
    }
}

fn stage(
    pb: &mut ParamBuilder,
    name: &str,
    cfg: &ModelConfig,
    depth: usize,
    level: usize,
) -> Result<Stage> {
    pb.scope(name, |pb| {
        Stage::new(
            pb,
            &cfg.attention,
            cfg.ffn_kind(),
            cfg.norm_placement(),
            depth,
            cfg.channels << level,
            cfg.attention.heads << level,
            cfg.ffn_hidden << level,
        )
    })
}

/// Residual groups (blocks, then a 3×3 conv) followed by a 3×3 conv and a
/// long skip from the shallow features.
#[derive(Debug, Clone)]
pub struct FlatBody {
    pub groups: Vec<(Stage, Conv)>,
    pub conv_after: Conv,
}

impl FlatBody {
    pub fn new(pb: &mut ParamBuilder, cfg: &ModelConfig) -> Result<Self> {
        let c = cfg.channels;
        let groups = cfg
            .depths
            .iter()
            .enumerate()
            .map(|(g, &d)| {
                pb.scope(format!("group{g}"), |pb| {
                    Ok((
                        stage(pb, "blocks", cfg, d, 0)?,
                        Conv::spatial(pb, "conv", c, c, 3)?,
                    ))
                })
            })
            .collect::<Result<_>>()?;
        Ok(FlatBody {
            groups,
            conv_after: Conv::spatial(pb, "conv_after", c, c, 3)?,
        })
    }

    pub fn forward<'t, T: Real>(&self, cx: &Ctx<'_, 't, T>, z: Var<'t, T>) -> Result<Var<'t, T>> {
        let mut x = z;
        for (g, (blocks, conv)) in self.groups.iter().enumerate() {
            x = x.add(conv.forward(cx, blocks.forward(cx, x, &format!("group{g}"))?)?)?;
        }
        self.conv_after.forward(cx, x)?.add(z)
    }
}

/// Pixel-shuffles encoder outputs at strides `1, 2, 4, ..` (ordered fine to
/// coarse, channels `C, 2C, 4C, ..`) to full resolution, concatenates them,
/// and applies a depthwise 3×3 then a pointwise projection.
#[derive(Debug, Clone)]
pub struct Scdp {
    pub depthwise: Conv,
    pub pointwise: Conv,
    pub base_channels: usize,
    pub levels: usize,
}

impl Scdp {
    /// Channels after shuffling and concatenation: `Σ C·2^j / 4^j`.
    pub fn merged_channels(base: usize, levels: usize) -> usize {
        (0..levels).map(|j| (base << j) >> (2 * j)).sum()
    }

    pub fn new(
        pb: &mut ParamBuilder,
        name: &str,
        base: usize,
        levels: usize,
        target: usize,
    ) -> Result<Self> {
        if levels == 0 || (1..levels).any(|j| !(base << j).is_multiple_of(1 << (2 * j))) {
            return Err(Error::Config(format!(
                "SCDP cannot shuffle {levels} levels of base width {base}"
            )));
        }
        let merged = Self::merged_channels(base, levels);
        pb.scope(name, |pb| {
            Ok(Scdp {
                depthwise: Conv::depthwise(pb, "dw", merged, 3)?,
                pointwise: Conv::pointwise(pb, "pw", merged, target)?,
                base_channels: base,
                levels,
            })
        })
    }

    pub fn forward<'t, T: Real>(
        &self,
        cx: &Ctx<'_, 't, T>,
        features: &[Var<'t, T>],
    ) -> Result<Var<'t, T>> {
        if features.len() != self.levels {
            return Err(invalid!(
                "SCDP expects {} features, got {}",
                self.levels,
                features.len()
            ));
        }
        let (_, h, w) = dims(&features[0], "scdp")?;
        let mut parts = Vec::with_capacity(features.len());
        for (j, &f) in features.iter().enumerate() {
            let (c, hj, wj) = dims(&f, "scdp")?;
            if c != self.base_channels << j || hj << j != h || wj << j != w {
                return Err(Error::shape(
                    "scdp",
                    &[c, hj, wj],
                    &[self.base_channels << j, h >> j, w >> j],
                ));
            }
            parts.push(if j == 0 { f } else { f.pixel_shuffle(1 << j)? });
        }
        let merged = Var::concat(&parts, 0)?;
        self.pointwise
            .forward(cx, self.depthwise.forward(cx, merged)?)
    }
}

/// Concatenates prior features (already resampled to the current
/// resolution) with the current one and projects back to its width.
#[derive(Debug, Clone)]
pub struct DenseConnect {
    pub proj: Conv,
}

impl DenseConnect {
    pub fn new(
        pb: &mut ParamBuilder,
        name: &str,
        prior_channels: usize,
        channels: usize,
    ) -> Result<Self> {
        Ok(DenseConnect {
            proj: Conv::pointwise(pb, name, prior_channels + channels, channels)?,
        })
    }

    pub fn forward<'t, T: Real>(
        &self,
        cx: &Ctx<'_, 't, T>,
        priors: &[Var<'t, T>],
        current: Var<'t, T>,
    ) -> Result<Var<'t, T>> {
        let (_, h, w) = dims(&current, "dense_connect")?;
        for p in priors {
            let (c, ph, pw) = dims(p, "dense_connect")?;
            if (ph, pw) != (h, w) {
                return Err(Error::shape("dense_connect", &[c, ph, pw], &[c, h, w]));
            }
        }
        let mut parts = priors.to_vec();
        parts.push(current);
        self.proj.forward(cx, Var::concat(&parts, 0)?)
    }
}

#[derive(Debug, Clone)]
pub struct DecoderLevel {
    /// 3×3 convs doubling channels, each followed by a ×2 pixel shuffle.
    pub ups: Vec<Conv>,
    /// Pointwise channel adapter when upsampling alone does not reach the width.
    pub bridge: Option<Conv>,
    pub skip_level: usize,
    /// Pixel-shuffle factor bringing the skip feature to this level's stride.
    pub skip_shuffle: usize,
    pub fuse: Conv,
    pub blocks: Stage,
}

/// U-shaped body: encoder levels at widths `C·2^i` joined by strided 3×3
/// convs, a bottleneck stage, and a symmetric or single-level decoder.
#[derive(Debug, Clone)]
pub struct UBody {
    pub levels: usize,
    pub encoders: Vec<Stage>,
    pub dense: Vec<Option<DenseConnect>>,
    pub downs: Vec<Conv>,
    pub scdp: Option<Scdp>,
    pub bottleneck: Stage,
    pub decoders: Vec<DecoderLevel>,
    pub refinement: Option<Stage>,
}

impl UBody {
    pub fn new(pb: &mut ParamBuilder, cfg: &ModelConfig) -> Result<Self> {
        let levels = cfg.levels();
        let width = |i: usize| cfg.channels << i;
        let scdp = cfg.bottleneck == Bottleneck::Scdp;
        let dense_on = cfg.encoder_connection == EncoderConnection::Dense;

        let mut encoders = Vec::with_capacity(levels);
        let mut dense = Vec::with_capacity(levels);
        for i in 0..levels {
            pb.scope(format!("enc{i}"), |pb| {
                dense.push(if dense_on && i > 0 {
                    let priors = cfg.channels + (0..i).map(width).sum::<usize>();
                    Some(DenseConnect::new(pb, "dense", priors, width(i))?)
                } else {
                    None
                });
                encoders.push(stage(pb, "blocks", cfg, cfg.depths[i], i)?);
                Ok(())
            })?;
        }
        let n_downs = if scdp { levels - 1 } else { levels };
        let downs = (0..n_downs)
            .map(|i| {
                Conv::new(
                    pb,
                    &format!("down{i}"),
                    width(i),
                    width(i + 1),
                    3,
                    2,
                    1,
                    true,
                    ConvInit::Kaiming,
                )
            })
            .collect::<Result<_>>()?;
        let scdp_layer = if scdp {
            Some(Scdp::new(pb, "scdp", cfg.channels, levels, width(levels))?)
        } else {
            None
        };
        let bottleneck = stage(pb, "bottleneck", cfg, cfg.depths[levels], levels)?;

        let targets: Vec<(usize, usize)> = match cfg.hierarchy {
            Hierarchy::Asymmetric => vec![(0, cfg.depths[levels + 1])],
            _ => (0..levels)
                .rev()
                .map(|i| (i, cfg.depths[levels + 1 + (levels - 1 - i)]))
                .collect(),
        };
        let mut prev_stride = if scdp { 1 } else { 1 << levels };
        let mut prev_width = width(levels);
        let mut decoders = Vec::with_capacity(targets.len());
        for (i, depth) in targets {
            let stride = prev_stride.min(1 << i);
            let level = pb.scope(format!("dec{i}"), |pb| {
                let mut ups = Vec::new();
                let mut c = prev_width;
                let mut s = prev_stride;
                while s > stride {
                    ups.push(Conv::new(
                        pb,
                        &format!("up{}", ups.len()),
                        c,
                        2 * c,
                        3,
                        1,
                        1,
                        true,
                        ConvInit::Kaiming,
                    )?);
                    c /= 2;
                    s /= 2;
                }
                let bridge = if c != width(i) {
                    Some(Conv::pointwise(pb, "bridge", c, width(i))?)
                } else {
                    None
                };
                let skip_shuffle = (1 << i) / stride;
                let skip_channels = width(i) / (skip_shuffle * skip_shuffle);
                Ok(DecoderLevel {
                    ups,
                    bridge,
                    skip_level: i,
                    skip_shuffle,
                    fuse: Conv::pointwise(pb, "fuse", width(i) + skip_channels, width(i))?,
                    blocks: stage(pb, "blocks", cfg, depth, i)?,
                })
            })?;
            decoders.push(level);
            prev_stride = stride;
            prev_width = width(i);
        }
        let refinement = if cfg.has_refinement() {
            Some(stage(
                pb,
                "refinement",
                cfg,
                *cfg.depths.last().expect("non-empty depths"),
                0,
            )?)
        } else {
            None
        };
        Ok(UBody {
            levels,
            encoders,
            dense,
            downs,
            scdp: scdp_layer,
            bottleneck,
            decoders,
            refinement,
        })
    }

    pub fn forward<'t, T: Real>(&self, cx: &Ctx<'_, 't, T>, z: Var<'t, T>) -> Result<Var<'t, T>> {
        let mut enc_out: Vec<Var<'t, T>> = Vec::with_capacity(self.levels);
        let mut x = z;
        for i in 0..self.levels {
            if i > 0 {
                x = self.downs[i - 1].forward(cx, enc_out[i - 1])?;
            }
            if let Some(d) = &self.dense[i] {
                let f = 1 << i;
                let mut priors = vec![z.avg_pool2d(f, f, 0)?];
                for (j, &e) in enc_out.iter().enumerate() {
                    let r = 1 << (i - j);
                    priors.push(e.avg_pool2d(r, r, 0)?);
                }
                x = d.forward(cx, &priors, x)?;
            }
            x = self.encoders[i].forward(cx, x, &format!("enc{i}"))?;
            enc_out.push(x);
        }
        x = match &self.scdp {
            Some(s) => s.forward(cx, &enc_out)?,
            None => self.downs[self.levels - 1].forward(cx, x)?,
        };
        x = self.bottleneck.forward(cx, x, "bottleneck")?;
        for dec in &self.decoders {
            for up in &dec.ups {
                x = up.forward(cx, x)?.pixel_shuffle(2)?;
            }
            if let Some(b) = &dec.bridge {
                x = b.forward(cx, x)?;
            }
            let mut skip = enc_out[dec.skip_level];
            if dec.skip_shuffle > 1 {
                skip = skip.pixel_shuffle(dec.skip_shuffle)?;
            }
            x = dec.fuse.forward(cx, Var::concat(&[x, skip], 0)?)?;
            x = dec
                .blocks
                .forward(cx, x, &format!("dec{}", dec.skip_level))?;
        }
        match &self.refinement {
            Some(r) => r.forward(cx, x, "refinement"),
            None => Ok(x),
        }
    }
}
