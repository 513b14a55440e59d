use crate::error::{invalid, Error, Result};
use crate::nn::{Conv, Ctx, Init, ParamBuilder, ParamId};
use crate::tensor::{Real, Var};

const NORM_EPS: f64 = 1e-12;

/// Q/K/V projection, optionally followed by a depthwise 3×3.
#[derive(Debug, Clone)]
pub struct Projection {
    pub point: Conv,
    pub depth: Option<Conv>,
}

impl Projection {
    fn new(pb: &mut ParamBuilder, name: &str, c: usize, dw: bool) -> Result<Self> {
        Ok(Projection {
            point: Conv::pointwise(pb, name, c, c)?,
            depth: if dw {
                Some(Conv::depthwise(pb, &format!("{name}_dw"), c, 3)?)
            } else {
                None
            },
        })
    }

    fn forward<'t, T: Real>(&self, cx: &Ctx<'_, 't, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let y = self.point.forward(cx, x)?;
        match &self.depth {
            Some(d) => d.forward(cx, y),
            None => Ok(y),
        }
    }
}

/// Transposed attention: each head mixes its `D = C/L` channels with a
/// `D × D` map built from L2-normalized, pixel-flattened queries and keys
/// scaled by a learned per-head temperature.
#[derive(Debug, Clone)]
pub struct ChannelAttention {
    pub q: Projection,
    pub k: Option<Projection>,
    pub v: Projection,
    pub proj: Conv,
    pub temperature: ParamId,
    pub channels: usize,
    pub heads: usize,
}

impl ChannelAttention {
    pub fn new(
        pb: &mut ParamBuilder,
        channels: usize,
        heads: usize,
        dwconv: bool,
        qk_shared: bool,
    ) -> Result<Self> {
        if heads == 0 || !channels.is_multiple_of(heads) {
            return Err(Error::Config(format!(
                "{channels} channels not divisible by {heads} heads"
            )));
        }
        Ok(ChannelAttention {
            q: Projection::new(pb, "q", channels, dwconv)?,
            k: if qk_shared {
                None
            } else {
                Some(Projection::new(pb, "k", channels, dwconv)?)
            },
            v: Projection::new(pb, "v", channels, dwconv)?,
            proj: Conv::pointwise(pb, "proj", channels, channels)?,
            temperature: pb.add("temperature", &[heads], Init::Ones)?,
            channels,
            heads,
        })
    }

    pub fn forward<'t, T: Real>(
        &self,
        cx: &Ctx<'_, 't, T>,
        x: Var<'t, T>,
        label: &str,
    ) -> Result<Var<'t, T>> {
        let shape = x.shape();
        let [c, h, w] = shape[..] else {
            return Err(invalid!(
                "channel attention expects [C, H, W], got {shape:?}"
            ));
        };
        if c != self.channels {
            return Err(Error::shape(
                "channel_attention",
                &shape,
                &[self.channels, h, w],
            ));
        }
        let (l, d) = (self.heads, c / self.heads);
        let heads = |t: Var<'t, T>| t.reshape(&[l, d, h * w]);
        let q = heads(self.q.forward(cx, x)?)?.l2_normalize(NORM_EPS);
        let k = match &self.k {
            Some(k) => heads(k.forward(cx, x)?)?.l2_normalize(NORM_EPS),
            None => q,
        };
        let v = heads(self.v.forward(cx, x)?)?;
        let temp_index: Vec<usize> = (0..l).flat_map(|i| std::iter::repeat_n(i, d * d)).collect();
        let temp = cx.p(self.temperature).gather(temp_index, &[l, d, d])?;
        let s = q.bmm(k, true)?.mul(temp)?;
        let a = s.softmax(2)?;
        cx.record(label, Some(s), a);
        let y = a.bmm(v, false)?.reshape(&[c, h, w])?;
        self.proj.forward(cx, y)
    }
}
