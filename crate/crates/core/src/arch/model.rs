use super::{Bottleneck, FlatBody, Hierarchy, ModelConfig, UBody};
use crate::attention::AttentionKind;
use crate::error::{Error, Result};
use crate::metrics::Denoiser;
use crate::nn::{Conv, ConvInit, Ctx, ParamBuilder, ParamStore};
use crate::tensor::{Real, Tape, Tensor, Var};

#[derive(Debug, Clone)]
#[allow(clippy::large_enum_variant)]
pub enum Body {
    Flat(FlatBody),
    U(UBody),
}

/// A built denoiser: architecture plus its named parameters.
#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore<f32>,
    pub init_seed: u64,
    head: Conv,
    body: Body,
    tail: Vec<Conv>,
}

/// Builds the model, drawing every initial value from one stream seeded by
/// `init_seed` in parameter registration order.
pub fn build_model(config: &ModelConfig, init_seed: u64) -> Result<Model> {
    config.validate()?;
    let c = config.channels;
    let mut pb = ParamBuilder::new(init_seed);
    let head = Conv::spatial(&mut pb, "head", config.in_channels, c, 3)?;
    let body = pb.scope("body", |pb| {
        Ok(match config.hierarchy {
            Hierarchy::None => Body::Flat(FlatBody::new(pb, config)?),
            _ => Body::U(UBody::new(pb, config)?),
        })
    })?;
    let k = config.tail_kernel;
    let tail = pb.scope("tail", |pb| {
        let mut convs = (0..config.tail_layers - 1)
            .map(|i| Conv::new(pb, &format!("{i}"), c, c, k, 1, 1, true, ConvInit::Kaiming))
            .collect::<Result<Vec<_>>>()?;
        let last = config.tail_layers - 1;
        convs.push(Conv::new(
            pb,
            &format!("{last}"),
            c,
            config.in_channels,
            k,
            1,
            1,
            true,
            ConvInit::Zero,
        )?);
        Ok(convs)
    })?;
    Ok(Model {
        config: config.clone(),
        params: pb.finish(),
        init_seed,
        head,
        body,
        tail,
    })
}

/// Total number of learnable scalars.
pub fn count_params(model: &Model) -> usize {
    model.params.count()
}

/// Runs the model on one `[C_in, H, W]` image without recording gradients.
pub fn forward_denoise(model: &Model, lq: &Tensor<f32>) -> Result<Tensor<f32>> {
    let tape = Tape::new();
    let params = model.params.bind(&tape, false);
    let cx = Ctx::new(&params);
    let out = model.forward(&cx, tape.constant(lq.clone()))?;
    Ok(out.value().as_ref().clone())
}

impl Model {
    /// `lq + tail(body(head(lq)))`, padding the input to the body's size
    /// multiple by reflection and cropping the residual back.
    pub fn forward<'t, T: Real>(&self, cx: &Ctx<'_, 't, T>, lq: Var<'t, T>) -> Result<Var<'t, T>> {
        let shape = lq.shape();
        let (c, h, w) = match shape[..] {
            [c, h, w] => (c, h, w),
            _ => {
                return Err(Error::shape(
                    "forward_denoise",
                    &shape,
                    &[self.config.in_channels, 0, 0],
                ))
            }
        };
        if c != self.config.in_channels {
            return Err(Error::shape(
                "forward_denoise",
                &shape,
                &[self.config.in_channels, h, w],
            ));
        }
        let m = self.config.size_multiple();
        let (hp, wp) = (h.div_ceil(m) * m, w.div_ceil(m) * m);
        let x = if (hp, wp) != (h, w) {
            lq.reflect_pad(hp - h, wp - w)?
        } else {
            lq
        };
        let z = self.head.forward(cx, x)?;
        let mut y = match &self.body {
            Body::Flat(b) => b.forward(cx, z)?,
            Body::U(b) => b.forward(cx, z)?,
        };
        for conv in &self.tail {
            y = conv.forward(cx, y)?;
        }
        lq.add(y.crop(h, w)?)
    }

    pub fn body(&self) -> &Body {
        &self.body
    }

    /// Copy of this model carrying `params` (names and shapes must match).
    pub fn with_params(&self, params: &ParamStore<f32>) -> Result<Model> {
        let mut m = self.clone();
        m.params.load_from(params)?;
        Ok(m)
    }

    /// Sets the final tail convolution to zero, making the model an identity.
    pub fn zero_final_tail(&mut self) {
        let last = self.tail.last().expect("tail has at least one conv");
        for id in std::iter::once(last.weight).chain(last.bias) {
            self.params.get_mut(id).data_mut().fill(0.0);
        }
    }

    /// Rough peak bytes of one taped forward pass on an `h × w` image.
    pub fn activation_bytes(&self, h: usize, w: usize) -> usize {
        let cfg = &self.config;
        let m = cfg.size_multiple();
        let hw = h.div_ceil(m) * m * w.div_ceil(m) * m;
        let tokens = match cfg.attention.kind {
            AttentionKind::Channel => 0,
            AttentionKind::RectWindow => cfg.attention.rect.map_or(0, |[a, b]| a * b),
            AttentionKind::MultiscaleWindow => cfg
                .attention
                .scales
                .iter()
                .map(|s| s * s)
                .max()
                .unwrap_or(0),
            _ => cfg.attention.window * cfg.attention.window,
        };
        // (depth, width shift, resolution shift) per stage
        let levels = cfg.levels();
        let stages: Vec<(usize, usize, usize)> = match cfg.hierarchy {
            Hierarchy::None => cfg.depths.iter().map(|&d| (d, 0, 0)).collect(),
            _ => {
                let res = |i: usize| {
                    if cfg.bottleneck == Bottleneck::Scdp && i == levels {
                        0
                    } else {
                        i
                    }
                };
                (0..=levels)
                    .map(|i| (cfg.depths[i], i, res(i)))
                    .chain(cfg.depths[levels + 1..].iter().map(|&d| (d, 0, 0)))
                    .collect()
            }
        };
        let floats: usize = stages
            .iter()
            .map(|&(d, wi, ri)| {
                let pix = hw >> (2 * ri);
                d * (40 * (cfg.channels << wi) + 3 * tokens * (cfg.attention.heads << wi)) * pix
            })
            .sum();
        floats * std::mem::size_of::<f32>() + 64 * cfg.channels * hw
    }
}

impl Denoiser for Model {
    fn in_channels(&self) -> usize {
        self.config.in_channels
    }

    fn param_count(&self) -> usize {
        count_params(self)
    }

    fn denoise(&self, lq: &Tensor<f32>) -> Result<Tensor<f32>> {
        forward_denoise(self, lq)
    }

    fn memory_estimate(&self, h: usize, w: usize) -> usize {
        self.activation_bytes(h, w)
    }
}
