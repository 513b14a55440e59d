//! Slice-level forward and backward kernels used by the tape.

use super::Real;

/// Splits `shape` around `axis` into `(outer, axis_len, inner)`.
pub(crate) fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// For every output flat index, the input flat index under an axis permutation.
pub(crate) fn permute_index(shape: &[usize], perm: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let rank = shape.len();
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let total: usize = shape.iter().product();
    let mut index = Vec::with_capacity(total);
    let mut counter = vec![0usize; rank];
    let mut offset = 0usize;
    for _ in 0..total {
        index.push(offset);
        for d in (0..rank).rev() {
            counter[d] += 1;
            offset += strides[d];
            if counter[d] < out_shape[d] {
                break;
            }
            offset -= strides[d] * out_shape[d];
            counter[d] = 0;
        }
    }
    (out_shape, index)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl ConvGeom {
    fn cin_g(&self) -> usize {
        self.c_in / self.groups
    }

    fn cout_g(&self) -> usize {
        self.c_out / self.groups
    }

    fn cols_rows(&self) -> usize {
        self.cin_g() * self.k * self.k
    }

    fn out_pixels(&self) -> usize {
        self.h_out * self.w_out
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.padding == 0
    }
}

/// Unfolds group `g` of `x` into a `[cin_g*k*k, h_out*w_out]` matrix.
fn im2col<T: Real>(x: &[T], g: &ConvGeom, group: usize, cols: &mut [T]) {
    let (k, s, p) = (g.k, g.stride, g.padding);
    let npix = g.out_pixels();
    let c0 = group * g.cin_g();
    for ci in 0..g.cin_g() {
        let plane = &x[(c0 + ci) * g.h * g.w..(c0 + ci + 1) * g.h * g.w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut cols[row * npix..(row + 1) * npix];
                for oy in 0..g.h_out {
                    let iy = (oy * s + ky) as isize - p as isize;
                    let line = &mut dst[oy * g.w_out..(oy + 1) * g.w_out];
                    if iy < 0 || iy >= g.h as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    if s == 1 {
                        // valid ox satisfies 0 <= ox + kx - p < w
                        let lo = p.saturating_sub(kx).min(g.w_out);
                        let hi = (g.w + p).saturating_sub(kx).min(g.w_out).max(lo);
                        line[..lo].fill(T::zero());
                        line[hi..].fill(T::zero());
                        if hi > lo {
                            let start = lo + kx - p;
                            line[lo..hi].copy_from_slice(&src[start..start + (hi - lo)]);
                        }
                    } else {
                        for (ox, v) in line.iter_mut().enumerate() {
                            let ix = (ox * s + kx) as isize - p as isize;
                            *v = if ix < 0 || ix >= g.w as isize {
                                T::zero()
                            } else {
                                src[ix as usize]
                            };
                        }
                    }
                }
            }
        }
    }
}

/// Folds a column matrix back, accumulating into `dx`.
fn col2im<T: Real>(cols: &[T], g: &ConvGeom, group: usize, dx: &mut [T]) {
    let (k, s, p) = (g.k, g.stride, g.padding);
    let npix = g.out_pixels();
    let c0 = group * g.cin_g();
    for ci in 0..g.cin_g() {
        let plane = &mut dx[(c0 + ci) * g.h * g.w..(c0 + ci + 1) * g.h * g.w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &cols[row * npix..(row + 1) * npix];
                for oy in 0..g.h_out {
                    let iy = (oy * s + ky) as isize - p as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let line = &src[oy * g.w_out..(oy + 1) * g.w_out];
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, &v) in line.iter().enumerate() {
                        let ix = (ox * s + kx) as isize - p as isize;
                        if ix >= 0 && (ix as usize) < g.w {
                            dst[ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward<T: Real>(x: &[T], w: &[T], b: Option<&[T]>, g: &ConvGeom) -> Vec<T> {
    let npix = g.out_pixels();
    let kk = g.cols_rows();
    let mut out = vec![T::zero(); g.c_out * npix];
    let mut cols = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); kk * npix]
    };
    for group in 0..g.groups {
        let colref: &[T] = if g.is_pointwise() {
            &x[group * g.cin_g() * npix..(group + 1) * g.cin_g() * npix]
        } else {
            im2col(x, g, group, &mut cols);
            &cols
        };
        let wg = &w[group * g.cout_g() * kk..(group + 1) * g.cout_g() * kk];
        let og = &mut out[group * g.cout_g() * npix..(group + 1) * g.cout_g() * npix];
        T::gemm(
            g.cout_g(),
            kk,
            npix,
            T::one(),
            (wg, kk as isize, 1),
            (colref, npix as isize, 1),
            T::zero(),
            (og, npix as isize, 1),
        );
    }
    if let Some(b) = b {
        for (co, row) in out.chunks_mut(npix).enumerate() {
            for v in row {
                *v += b[co];
            }
        }
    }
    out
}

type ConvGrads<T> = (Option<Vec<T>>, Option<Vec<T>>, Option<Vec<T>>);

/// Returns `(dx, dw, db)` for the requested operands.
pub(crate) fn conv2d_backward<T: Real>(
    x: &[T],
    w: &[T],
    dy: &[T],
    g: &ConvGeom,
    need_dx: bool,
    need_dw: bool,
    need_db: bool,
) -> ConvGrads<T> {
    let npix = g.out_pixels();
    let kk = g.cols_rows();
    let mut dx = need_dx.then(|| vec![T::zero(); g.c_in * g.h * g.w]);
    let mut dw = need_dw.then(|| vec![T::zero(); w.len()]);
    let db = need_db.then(|| {
        dy.chunks(npix)
            .map(|row| row.iter().fold(T::zero(), |a, &v| a + v))
            .collect()
    });
    let mut cols = vec![T::zero(); kk * npix];
    for group in 0..g.groups {
        let dyg = &dy[group * g.cout_g() * npix..(group + 1) * g.cout_g() * npix];
        let wg = &w[group * g.cout_g() * kk..(group + 1) * g.cout_g() * kk];
        if let Some(dw) = dw.as_mut() {
            let colref: &[T] = if g.is_pointwise() {
                &x[group * g.cin_g() * npix..(group + 1) * g.cin_g() * npix]
            } else {
                im2col(x, g, group, &mut cols);
                &cols
            };
            let dwg = &mut dw[group * g.cout_g() * kk..(group + 1) * g.cout_g() * kk];
            // dW = dY · colsᵀ
            T::gemm(
                g.cout_g(),
                npix,
                kk,
                T::one(),
                (dyg, npix as isize, 1),
                (colref, 1, npix as isize),
                T::zero(),
                (dwg, kk as isize, 1),
            );
        }
        if let Some(dx) = dx.as_mut() {
            // dcols = Wᵀ · dY
            if g.is_pointwise() {
                let dxg = &mut dx[group * g.cin_g() * npix..(group + 1) * g.cin_g() * npix];
                T::gemm(
                    kk,
                    g.cout_g(),
                    npix,
                    T::one(),
                    (wg, 1, kk as isize),
                    (dyg, npix as isize, 1),
                    T::one(),
                    (dxg, npix as isize, 1),
                );
            } else {
                T::gemm(
                    kk,
                    g.cout_g(),
                    npix,
                    T::one(),
                    (wg, 1, kk as isize),
                    (dyg, npix as isize, 1),
                    T::zero(),
                    (&mut cols, npix as isize, 1),
                );
                col2im(&cols, g, group, dx);
            }
        }
    }
    (dx, dw, db)
}

/// Normalizes over `axis` (decomposed as outer/n/inner). Returns output and per-position `(mean, rstd)`.
pub(crate) fn layer_norm_forward<T: Real>(
    x: &[T],
    gamma: &[T],
    beta: &[T],
    (outer, n, inner): (usize, usize, usize),
    eps: T,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let mut out = vec![T::zero(); x.len()];
    let mut means = vec![T::zero(); outer * inner];
    let mut rstds = vec![T::zero(); outer * inner];
    let nf = T::from_f64(n as f64);
    for o in 0..outer {
        let base = o * n * inner;
        let mean = &mut means[o * inner..(o + 1) * inner];
        for j in 0..n {
            for (m, &v) in mean
                .iter_mut()
                .zip(&x[base + j * inner..base + (j + 1) * inner])
            {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m = *m / nf);
        let rstd = &mut rstds[o * inner..(o + 1) * inner];
        for j in 0..n {
            for ((r, &m), &v) in rstd
                .iter_mut()
                .zip(mean.iter())
                .zip(&x[base + j * inner..base + (j + 1) * inner])
            {
                let d = v - m;
                *r += d * d;
            }
        }
        rstd.iter_mut()
            .for_each(|r| *r = T::one() / (*r / nf + eps).sqrt());
        for j in 0..n {
            let row = base + j * inner..base + (j + 1) * inner;
            for (i, (o_v, &v)) in out[row.clone()].iter_mut().zip(&x[row]).enumerate() {
                *o_v = (v - mean[i]) * rstd[i] * gamma[j] + beta[j];
            }
        }
    }
    (out, means, rstds)
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn layer_norm_backward<T: Real>(
    x: &[T],
    gamma: &[T],
    dy: &[T],
    means: &[T],
    rstds: &[T],
    (outer, n, inner): (usize, usize, usize),
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let mut dx = vec![T::zero(); x.len()];
    let mut dgamma = vec![T::zero(); n];
    let mut dbeta = vec![T::zero(); n];
    let nf = T::from_f64(n as f64);
    let mut sum_d = vec![T::zero(); inner];
    let mut sum_dx = vec![T::zero(); inner];
    for o in 0..outer {
        let base = o * n * inner;
        let mean = &means[o * inner..(o + 1) * inner];
        let rstd = &rstds[o * inner..(o + 1) * inner];
        sum_d.fill(T::zero());
        sum_dx.fill(T::zero());
        for j in 0..n {
            for i in 0..inner {
                let idx = base + j * inner + i;
                let xhat = (x[idx] - mean[i]) * rstd[i];
                dgamma[j] += dy[idx] * xhat;
                dbeta[j] += dy[idx];
                let dxhat = dy[idx] * gamma[j];
                sum_d[i] += dxhat;
                sum_dx[i] += dxhat * xhat;
            }
        }
        for (j, &gj) in gamma.iter().enumerate().take(n) {
            for i in 0..inner {
                let idx = base + j * inner + i;
                let xhat = (x[idx] - mean[i]) * rstd[i];
                let dxhat = dy[idx] * gj;
                dx[idx] = rstd[i] * (dxhat - sum_d[i] / nf - xhat * sum_dx[i] / nf);
            }
        }
    }
    (dx, dgamma, dbeta)
}

pub(crate) fn softmax_forward<T: Real>(
    x: &[T],
    (outer, n, inner): (usize, usize, usize),
) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    if inner == 1 {
        for (src, dst) in x.chunks(n).zip(out.chunks_mut(n)) {
            let max = src.iter().fold(T::neg_infinity(), |a, &v| a.max(v));
            let mut sum = T::zero();
            for (d, &s) in dst.iter_mut().zip(src) {
                *d = (s - max).exp();
                sum += *d;
            }
            dst.iter_mut().for_each(|d| *d = *d / sum);
        }
        return out;
    }
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| o * n * inner + j * inner + i;
            let max = (0..n).fold(T::neg_infinity(), |a, j| a.max(x[at(j)]));
            let mut sum = T::zero();
            for j in 0..n {
                let e = (x[at(j)] - max).exp();
                out[at(j)] = e;
                sum += e;
            }
            for j in 0..n {
                out[at(j)] = out[at(j)] / sum;
            }
        }
    }
    out
}

pub(crate) fn softmax_backward<T: Real>(
    y: &[T],
    dy: &[T],
    (outer, n, inner): (usize, usize, usize),
) -> Vec<T> {
    let mut dx = vec![T::zero(); y.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| o * n * inner + j * inner + i;
            let dot = (0..n).fold(T::zero(), |a, j| a + y[at(j)] * dy[at(j)]);
            for j in 0..n {
                dx[at(j)] = y[at(j)] * (dy[at(j)] - dot);
            }
        }
    }
    dx
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

pub(crate) fn gelu<T: Real>(x: T) -> T {
    let c = T::from_f64(GELU_C);
    let a = T::from_f64(GELU_A);
    let half = T::from_f64(0.5);
    half * x * (T::one() + (c * (x + a * x * x * x)).tanh())
}

pub(crate) fn gelu_grad<T: Real>(x: T) -> T {
    let c = T::from_f64(GELU_C);
    let a = T::from_f64(GELU_A);
    let half = T::from_f64(0.5);
    let t = (c * (x + a * x * x * x)).tanh();
    half * (T::one() + t)
        + half * x * (T::one() - t * t) * c * (T::one() + T::from_f64(3.0) * a * x * x)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct PoolGeom {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub padding: usize,
    pub h_out: usize,
    pub w_out: usize,
}

/// Average pooling with zero padding counted in the divisor.
pub(crate) fn avg_pool_forward<T: Real>(x: &[T], g: &PoolGeom) -> Vec<T> {
    let mut out = vec![T::zero(); g.c * g.h_out * g.w_out];
    let div = T::from_f64((g.k * g.k) as f64);
    for c in 0..g.c {
        for oy in 0..g.h_out {
            for ox in 0..g.w_out {
                let mut acc = T::zero();
                for ky in 0..g.k {
                    let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    for kx in 0..g.k {
                        let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                        if ix >= 0 && (ix as usize) < g.w {
                            acc += x[(c * g.h + iy as usize) * g.w + ix as usize];
                        }
                    }
                }
                out[(c * g.h_out + oy) * g.w_out + ox] = acc / div;
            }
        }
    }
    out
}

pub(crate) fn avg_pool_backward<T: Real>(dy: &[T], g: &PoolGeom) -> Vec<T> {
    let mut dx = vec![T::zero(); g.c * g.h * g.w];
    let div = T::from_f64((g.k * g.k) as f64);
    for c in 0..g.c {
        for oy in 0..g.h_out {
            for ox in 0..g.w_out {
                let d = dy[(c * g.h_out + oy) * g.w_out + ox] / div;
                for ky in 0..g.k {
                    let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    for kx in 0..g.k {
                        let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                        if ix >= 0 && (ix as usize) < g.w {
                            dx[(c * g.h + iy as usize) * g.w + ix as usize] += d;
                        }
                    }
                }
            }
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn permute_index_transposes() {
        let (shape, idx) = permute_index(&[2, 3], &[1, 0]);
        assert_eq!(shape, vec![3, 2]);
        assert_eq!(idx, vec![0, 3, 1, 4, 2, 5]);
    }

    #[test]
    fn permute_index_identity_rank3() {
        let (_, idx) = permute_index(&[2, 3, 4], &[0, 1, 2]);
        assert_eq!(idx, (0..24).collect::<Vec<_>>());
    }

    #[test]
    fn strided_conv_matches_direct_loop() {
        let g = ConvGeom {
            c_in: 2,
            h: 5,
            w: 6,
            c_out: 3,
            k: 3,
            stride: 2,
            padding: 1,
            groups: 1,
            h_out: 3,
            w_out: 3,
        };
        let x: Vec<f64> = (0..60).map(|i| ((i * 7) % 11) as f64 - 5.0).collect();
        let w: Vec<f64> = (0..54).map(|i| ((i * 5) % 13) as f64 * 0.1 - 0.6).collect();
        let out = conv2d_forward(&x, &w, None, &g);
        for co in 0..3 {
            for oy in 0..3 {
                for ox in 0..3 {
                    let mut acc = 0.0;
                    for ci in 0..2 {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let iy = (oy * 2 + ky) as isize - 1;
                                let ix = (ox * 2 + kx) as isize - 1;
                                if (0..5).contains(&iy) && (0..6).contains(&ix) {
                                    acc += w[((co * 2 + ci) * 3 + ky) * 3 + kx]
                                        * x[(ci * 5 + iy as usize) * 6 + ix as usize];
                                }
                            }
                        }
                    }
                    assert!((out[(co * 3 + oy) * 3 + ox] - acc).abs() < 1e-12);
                }
            }
        }
    }
}
