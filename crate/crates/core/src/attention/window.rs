use std::rc::Rc;

use crate::error::{invalid, Error, Result};
use crate::nn::{Conv, Ctx, Init, ParamBuilder, ParamId};
use crate::tensor::{Real, Var};

/// Window tiling of a `[C, H, W]` map padded up to multiples of
/// `(Mh·d, Mw·d)`. With dilation `d > 1` a window collects every `d`-th pixel
/// of a `(Mh·d) × (Mw·d)` block, and the `d²` phases of a block become
/// separate windows.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WindowGeom {
    pub mh: usize,
    pub mw: usize,
    pub dilation: usize,
    pub h: usize,
    pub w: usize,
    pub hp: usize,
    pub wp: usize,
}

fn round_up(v: usize, m: usize) -> usize {
    v.div_ceil(m) * m
}

impl WindowGeom {
    pub fn new(h: usize, w: usize, mh: usize, mw: usize, dilation: usize) -> Result<Self> {
        if [h, w, mh, mw, dilation].contains(&0) {
            return Err(invalid!(
                "window geometry needs positive sizes, got {h}x{w} / {mh}x{mw} / d={dilation}"
            ));
        }
        Ok(WindowGeom {
            mh,
            mw,
            dilation,
            h,
            w,
            hp: round_up(h, mh * dilation),
            wp: round_up(w, mw * dilation),
        })
    }

    pub fn windows_y(&self) -> usize {
        self.hp / self.mh
    }

    pub fn windows_x(&self) -> usize {
        self.wp / self.mw
    }

    pub fn n_windows(&self) -> usize {
        self.windows_y() * self.windows_x()
    }

    pub fn tokens(&self) -> usize {
        self.mh * self.mw
    }

    pub fn is_padded(&self) -> bool {
        (self.hp, self.wp) != (self.h, self.w)
    }

    /// Padded-image coordinates of token `tok` of window `win`.
    pub fn pixel(&self, win: usize, tok: usize) -> (usize, usize) {
        let d = self.dilation;
        let (wy, wx) = (win / self.windows_x(), win % self.windows_x());
        let (my, mx) = (tok / self.mw, tok % self.mw);
        (
            (wy / d) * self.mh * d + my * d + wy % d,
            (wx / d) * self.mw * d + mx * d + wx % d,
        )
    }

    fn pad<'t, T: Real>(&self, x: Var<'t, T>) -> Result<Var<'t, T>> {
        if self.is_padded() {
            x.reflect_pad(self.hp - self.h, self.wp - self.w)
        } else {
            Ok(x)
        }
    }

    /// Gather map from a padded `[c, hp, wp]` map to `[nW·L, N, c/L]`, and
    /// its inverse.
    fn head_layout(&self, c: usize, heads: usize) -> (Rc<[usize]>, Rc<[usize]>, [usize; 3]) {
        let (nw, n, d) = (self.n_windows(), self.tokens(), c / heads);
        let plane = self.hp * self.wp;
        let mut fwd = vec![0usize; c * plane];
        let mut inv = vec![0usize; c * plane];
        let mut p = 0;
        for win in 0..nw {
            for h in 0..heads {
                for tok in 0..n {
                    let (y, x) = self.pixel(win, tok);
                    for dd in 0..d {
                        let src = (h * d + dd) * plane + y * self.wp + x;
                        fwd[p] = src;
                        inv[src] = p;
                        p += 1;
                    }
                }
            }
        }
        (fwd.into(), inv.into(), [nw * heads, n, d])
    }

    /// Index into a `[(2Mh-1)(2Mw-1), L]` bias table for every entry of the
    /// `[nW·L, N, N]` score tensor.
    fn bias_index(&self, heads: usize) -> Vec<usize> {
        let n = self.tokens();
        let span = 2 * self.mw - 1;
        let mut rel = Vec::with_capacity(n * n);
        for i in 0..n {
            let (yi, xi) = (i / self.mw, i % self.mw);
            for j in 0..n {
                let (yj, xj) = (j / self.mw, j % self.mw);
                rel.push((yi + self.mh - 1 - yj) * span + (xi + self.mw - 1 - xj));
            }
        }
        let mut index = Vec::with_capacity(self.n_windows() * heads * n * n);
        for _ in 0..self.n_windows() {
            for h in 0..heads {
                index.extend(rel.iter().map(|r| r * heads + h));
            }
        }
        index
    }
}

/// Splits `[C, H, W]` into `[nW, C, Mh, Mw]` windows in row-major window
/// order, reflect-padding the bottom/right edges first when needed.
pub fn window_partition<'t, T: Real>(x: Var<'t, T>, mh: usize, mw: usize) -> Result<Var<'t, T>> {
    let shape = x.shape();
    let [c, h, w] = shape[..] else {
        return Err(invalid!(
            "window_partition expects [C, H, W], got {shape:?}"
        ));
    };
    let g = WindowGeom::new(h, w, mh, mw, 1)?;
    let x = g.pad(x)?;
    let mut index = Vec::with_capacity(c * g.hp * g.wp);
    for win in 0..g.n_windows() {
        for ch in 0..c {
            for tok in 0..g.tokens() {
                let (y, xx) = g.pixel(win, tok);
                index.push((ch * g.hp + y) * g.wp + xx);
            }
        }
    }
    x.gather(index, &[g.n_windows(), c, mh, mw])
}

/// Inverse of [`window_partition`] for an original `h × w` image.
pub fn window_reverse<'t, T: Real>(windows: Var<'t, T>, h: usize, w: usize) -> Result<Var<'t, T>> {
    let shape = windows.shape();
    let [nw, c, mh, mw] = shape[..] else {
        return Err(invalid!(
            "window_reverse expects [nW, C, Mh, Mw], got {shape:?}"
        ));
    };
    let g = WindowGeom::new(h, w, mh, mw, 1)?;
    if g.n_windows() != nw {
        return Err(invalid!("{nw} windows cannot tile {h}x{w} with {mh}x{mw}"));
    }
    let mut index = vec![0usize; c * g.hp * g.wp];
    for win in 0..nw {
        for ch in 0..c {
            for tok in 0..g.tokens() {
                let (y, x) = g.pixel(win, tok);
                index[(ch * g.hp + y) * g.wp + x] = (win * c + ch) * g.tokens() + tok;
            }
        }
    }
    windows.gather(index, &[c, g.hp, g.wp])?.crop(h, w)
}

/// Scores, softmax and value mixing on head-major window tensors.
/// Returns the mixed values `[nW·L, N, D]` and the attention maps.
#[allow(clippy::too_many_arguments)]
fn attend<'t, T: Real>(
    cx: &Ctx<'_, 't, T>,
    label: &str,
    q: Var<'t, T>,
    k: Option<Var<'t, T>>,
    v: Var<'t, T>,
    bias: Option<Var<'t, T>>,
    head_dim: usize,
) -> Result<(Var<'t, T>, Var<'t, T>)> {
    let k = k.unwrap_or(q);
    let mut s = q
        .bmm(k, true)?
        .scale(T::from_f64(1.0 / (head_dim as f64).sqrt()));
    if let Some(b) = bias {
        s = s.add(b)?;
    }
    let a = s.softmax(2)?;
    cx.record(label, Some(s), a);
    Ok((a.bmm(v, false)?, a))
}

/// Multi-head self-attention inside (optionally dilated, rectangular)
/// windows with a learned relative position bias.
#[derive(Debug, Clone)]
pub struct WindowAttention {
    pub q: Conv,
    pub k: Option<Conv>,
    pub v: Conv,
    pub proj: Conv,
    pub bias_table: ParamId,
    pub channels: usize,
    pub heads: usize,
    pub window: (usize, usize),
    pub dilation: usize,
    pub ngram: usize,
}

impl WindowAttention {
    pub fn new(
        pb: &mut ParamBuilder,
        channels: usize,
        heads: usize,
        window: (usize, usize),
        dilation: usize,
        ngram: usize,
        qk_shared: bool,
    ) -> Result<Self> {
        if heads == 0 || !channels.is_multiple_of(heads) {
            return Err(Error::Config(format!(
                "{channels} channels not divisible by {heads} heads"
            )));
        }
        if ngram > 0 && (window.0 != window.1 || dilation != 1) {
            return Err(Error::Config(
                "n-gram context needs square dense windows".into(),
            ));
        }
        let (mh, mw) = window;
        if mh == 0 || mw == 0 || dilation == 0 {
            return Err(Error::Config(
                "window and dilation must be at least 1".into(),
            ));
        }
        Ok(WindowAttention {
            q: Conv::pointwise(pb, "q", channels, channels)?,
            k: if qk_shared {
                None
            } else {
                Some(Conv::pointwise(pb, "k", channels, channels)?)
            },
            v: Conv::pointwise(pb, "v", channels, channels)?,
            proj: Conv::pointwise(pb, "proj", channels, channels)?,
            bias_table: pb.add(
                "rpb",
                &[(2 * mh - 1) * (2 * mw - 1), heads],
                Init::TruncNormal(0.02),
            )?,
            channels,
            heads,
            window,
            dilation,
            ngram,
        })
    }

    /// Per-window mean of `x`, averaged over the `(2r+1)²` neighbouring
    /// windows (zeros beyond the border), broadcast back to every pixel.
    fn ngram_context<'t, T: Real>(&self, x: Var<'t, T>, g: &WindowGeom) -> Result<Var<'t, T>> {
        let r = self.ngram;
        let m = self.window.0;
        let means = x.avg_pool2d(m, m, 0)?;
        let ctx = means.avg_pool2d(2 * r + 1, 1, r)?;
        let (ny, nx) = (g.windows_y(), g.windows_x());
        let mut index = Vec::with_capacity(self.channels * g.hp * g.wp);
        for c in 0..self.channels {
            for y in 0..g.hp {
                for xx in 0..g.wp {
                    index.push((c * ny + y / m) * nx + xx / m);
                }
            }
        }
        ctx.gather(index, &[self.channels, g.hp, g.wp])
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
                "window attention expects [C, H, W], got {shape:?}"
            ));
        };
        if c != self.channels {
            return Err(Error::shape(
                "window_attention",
                &shape,
                &[self.channels, h, w],
            ));
        }
        let g = WindowGeom::new(h, w, self.window.0, self.window.1, self.dilation)?;
        let xp = g.pad(x)?;
        let xqk = if self.ngram > 0 {
            xp.add(self.ngram_context(xp, &g)?)?
        } else {
            xp
        };
        let (fwd, inv, layout) = g.head_layout(c, self.heads);
        let to_windows = |t: Var<'t, T>| t.gather(fwd.clone(), &layout);
        let q = to_windows(self.q.forward(cx, xqk)?)?;
        let k = match &self.k {
            Some(k) => Some(to_windows(k.forward(cx, xqk)?)?),
            None => None,
        };
        let v = to_windows(self.v.forward(cx, xp)?)?;
        let [b, n, _] = layout;
        let bias = cx
            .p(self.bias_table)
            .gather(g.bias_index(self.heads), &[b, n, n])?;
        let (out, _) = attend(cx, label, q, k, v, Some(bias), c / self.heads)?;
        let img = out.gather(inv, &[c, g.hp, g.wp])?.crop(h, w)?;
        self.proj.forward(cx, img)
    }
}

/// Channel groups attending in square windows of different sizes, one head
/// per group, optionally sharing one Q/K projection and reusing the
/// attention maps of the preceding block.
#[derive(Debug, Clone)]
pub struct MultiScaleAttention {
    /// Query projection, or the shared query/key projection.
    pub q: Option<Conv>,
    pub k: Option<Conv>,
    pub v: Conv,
    pub proj: Conv,
    pub channels: usize,
    pub scales: Vec<usize>,
}

impl MultiScaleAttention {
    /// A `consumer` computes no queries or keys and must be fed maps.
    pub fn new(
        pb: &mut ParamBuilder,
        channels: usize,
        scales: &[usize],
        qk_shared: bool,
        consumer: bool,
    ) -> Result<Self> {
        if scales.is_empty() || scales.contains(&0) || !channels.is_multiple_of(scales.len()) {
            return Err(Error::Config(format!(
                "{channels} channels cannot form groups for scales {scales:?}"
            )));
        }
        let (q, k) = if consumer {
            (None, None)
        } else if qk_shared {
            (Some(Conv::pointwise(pb, "qk", channels, channels)?), None)
        } else {
            (
                Some(Conv::pointwise(pb, "q", channels, channels)?),
                Some(Conv::pointwise(pb, "k", channels, channels)?),
            )
        };
        Ok(MultiScaleAttention {
            q,
            k,
            v: Conv::pointwise(pb, "v", channels, channels)?,
            proj: Conv::pointwise(pb, "proj", channels, channels)?,
            channels,
            scales: scales.to_vec(),
        })
    }

    pub fn is_consumer(&self) -> bool {
        self.q.is_none()
    }

    pub fn group_channels(&self) -> usize {
        self.channels / self.scales.len()
    }

    /// Returns the output and the per-group attention maps `[nW, N, N]`.
    pub fn forward<'t, T: Real>(
        &self,
        cx: &Ctx<'_, 't, T>,
        x: Var<'t, T>,
        incoming: Option<&Vec<Var<'t, T>>>,
        label: &str,
    ) -> Result<(Var<'t, T>, Vec<Var<'t, T>>)> {
        let shape = x.shape();
        let [c, h, w] = shape[..] else {
            return Err(invalid!(
                "multiscale attention expects [C, H, W], got {shape:?}"
            ));
        };
        if c != self.channels {
            return Err(Error::shape(
                "multiscale_attention",
                &shape,
                &[self.channels, h, w],
            ));
        }
        let incoming = match (self.is_consumer(), incoming) {
            (true, Some(maps)) if maps.len() == self.scales.len() => Some(maps),
            (true, Some(maps)) => {
                return Err(invalid!(
                    "{} incoming maps for {} scale groups",
                    maps.len(),
                    self.scales.len()
                ))
            }
            (true, None) => {
                return Err(invalid!("score-sharing block needs maps from its provider"))
            }
            (false, _) => None,
        };
        let q = self.q.as_ref().map(|p| p.forward(cx, x)).transpose()?;
        let k = self.k.as_ref().map(|p| p.forward(cx, x)).transpose()?;
        let v = self.v.forward(cx, x)?;
        let cg = self.group_channels();
        let mut outs = Vec::with_capacity(self.scales.len());
        let mut maps = Vec::with_capacity(self.scales.len());
        for (gi, &m) in self.scales.iter().enumerate() {
            let g = WindowGeom::new(h, w, m, m, 1)?;
            let (fwd, inv, layout) = g.head_layout(cg, 1);
            let group = |t: Var<'t, T>| -> Result<Var<'t, T>> {
                g.pad(t.narrow(0, gi * cg, cg)?)?
                    .gather(fwd.clone(), &layout)
            };
            let vw = group(v)?;
            let glabel = format!("{label}.g{gi}");
            let (out, a) = match incoming {
                Some(shared) => {
                    let a = shared[gi];
                    let want = [layout[0], layout[1], layout[1]];
                    if a.shape() != want {
                        return Err(Error::shape("shared attention maps", &a.shape(), &want));
                    }
                    cx.record(&glabel, None, a);
                    (a.bmm(vw, false)?, a)
                }
                None => {
                    let qw = group(q.expect("provider has a query projection"))?;
                    let kw = k.map(group).transpose()?;
                    attend(cx, &glabel, qw, kw, vw, None, cg)?
                }
            };
            outs.push(out.gather(inv, &[cg, g.hp, g.wp])?.crop(h, w)?);
            maps.push(a);
        }
        let y = Var::concat(&outs, 0)?;
        Ok((self.proj.forward(cx, y)?, maps))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Tape, Tensor};

    fn img(c: usize, h: usize, w: usize) -> Tensor<f64> {
        Tensor::from_fn(&[c, h, w], |i| ((i * 37) % 101) as f64 / 101.0 - 0.5)
    }

    #[test]
    fn partition_top_left_window_and_round_trip() {
        let tape = Tape::new();
        let x = tape.constant(img(2, 4, 4));
        let wins = window_partition(x, 2, 2).unwrap();
        assert_eq!(wins.shape(), vec![4, 2, 2, 2]);
        let xv = x.value();
        let wv = wins.value();
        for c in 0..2 {
            for y in 0..2 {
                for xx in 0..2 {
                    assert_eq!(wv.at(&[0, c, y, xx]), xv.at(&[c, y, xx]));
                }
            }
        }
        let x8 = tape.constant(img(3, 8, 8));
        let back = window_reverse(window_partition(x8, 4, 4).unwrap(), 8, 8).unwrap();
        assert!(back.value().bit_eq(&x8.value()));
        let whole = window_partition(x8, 8, 8).unwrap();
        assert_eq!(whole.value().data(), x8.value().data());
    }

    #[test]
    fn padded_partition_round_trip() {
        let tape = Tape::new();
        let x = tape.constant(img(1, 7, 5));
        let wins = window_partition(x, 4, 4).unwrap();
        assert_eq!(wins.shape(), vec![4, 1, 4, 4]);
        assert!(window_reverse(wins, 7, 5)
            .unwrap()
            .value()
            .bit_eq(&x.value()));
    }

    #[test]
    fn rect_partition_bounds() {
        let g = WindowGeom::new(8, 8, 2, 8, 1).unwrap();
        assert_eq!(g.n_windows(), 4);
        for win in 0..4 {
            let ys: Vec<usize> = (0..16).map(|t| g.pixel(win, t).0).collect();
            assert_eq!(*ys.iter().min().unwrap(), 2 * win);
            assert_eq!(*ys.iter().max().unwrap(), 2 * win + 1);
            assert!((0..16).all(|t| g.pixel(win, t).1 == t % 8));
        }
    }

    #[test]
    fn dilated_windows_interleave() {
        let g = WindowGeom::new(8, 8, 4, 4, 2).unwrap();
        assert_eq!(g.n_windows(), 4);
        for win in 0..4 {
            let (py, px) = (win / 2, win % 2);
            let mut seen: Vec<(usize, usize)> = (0..16).map(|t| g.pixel(win, t)).collect();
            seen.sort();
            let want: Vec<(usize, usize)> = [0, 2, 4, 6]
                .iter()
                .flat_map(|&y| [0, 2, 4, 6].map(move |x| (y + py, x + px)))
                .collect();
            assert_eq!(seen, want);
        }
        let dense = WindowGeom::new(8, 8, 4, 4, 1).unwrap();
        let d1 = WindowGeom { dilation: 1, ..g };
        assert_eq!(dense, d1);
    }

    #[test]
    fn head_layout_is_a_bijection() {
        for d in [1, 2] {
            let g = WindowGeom::new(8, 8, 2, 4, d).unwrap();
            let (fwd, inv, _) = g.head_layout(4, 2);
            let mut sorted = fwd.to_vec();
            sorted.sort();
            assert!(sorted.iter().enumerate().all(|(i, &v)| i == v));
            assert!(fwd.iter().enumerate().all(|(p, &s)| inv[s] == p));
        }
    }
}
