use crate::error::{invalid, Result};
use crate::nn::{Conv, Ctx, ParamBuilder};
use crate::tensor::{Real, Var, ZERO_FILL};

/// Source offsets `(dy, dx)` of the four shifted channel groups.
const OFFSETS: [(isize, isize); 4] = [(-1, 0), (1, 0), (0, -1), (0, 1)];

/// Splits channels into five groups of `C/5`; group `g < 4` reads the pixel
/// at `(y + dy_g, x + dx_g)` (zero outside the image), the remainder is left
/// in place.
pub fn shift_channels<'t, T: Real>(x: Var<'t, T>) -> Result<Var<'t, T>> {
    let shape = x.shape();
    let [c, h, w] = shape[..] else {
        return Err(invalid!("shift expects [C, H, W], got {shape:?}"));
    };
    if c < 5 {
        return Err(invalid!(
            "shift convolution needs at least 5 channels, got {c}"
        ));
    }
    let g = c / 5;
    let mut index = Vec::with_capacity(c * h * w);
    for ch in 0..c {
        let (dy, dx) = OFFSETS.get(ch / g).copied().unwrap_or((0, 0));
        for y in 0..h {
            for xx in 0..w {
                let (sy, sx) = (y as isize + dy, xx as isize + dx);
                index.push(
                    if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                        ZERO_FILL
                    } else {
                        (ch * h + sy as usize) * w + sx as usize
                    },
                );
            }
        }
    }
    x.gather(index, &[c, h, w])
}

/// Channel shift followed by a 1×1 projection; same parameters as the 1×1.
#[derive(Debug, Clone)]
pub struct ShiftConv {
    pub proj: Conv,
}

impl ShiftConv {
    pub fn new(pb: &mut ParamBuilder, name: &str, c_in: usize, c_out: usize) -> Result<Self> {
        if c_in < 5 {
            return Err(invalid!(
                "shift convolution needs at least 5 channels, got {c_in}"
            ));
        }
        Ok(ShiftConv {
            proj: Conv::pointwise(pb, name, c_in, c_out)?,
        })
    }

    pub fn forward<'t, T: Real>(&self, cx: &Ctx<'_, 't, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        self.proj.forward(cx, shift_channels(x)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Tape, Tensor};

    #[test]
    fn groups_read_their_neighbours() {
        let (h, w) = (4, 5);
        let tape = Tape::new();
        let x = tape.constant(Tensor::from_fn(&[5, h, w], |i| (i % (h * w)) as f64));
        let y = shift_channels(x).unwrap().value();
        let at = |c: usize, y0: usize, x0: usize| y.at(&[c, y0, x0]);
        let src = |y0: usize, x0: usize| (y0 * w + x0) as f64;
        for yy in 1..h - 1 {
            for xx in 1..w - 1 {
                assert_eq!(at(0, yy, xx), src(yy - 1, xx));
                assert_eq!(at(1, yy, xx), src(yy + 1, xx));
                assert_eq!(at(2, yy, xx), src(yy, xx - 1));
                assert_eq!(at(3, yy, xx), src(yy, xx + 1));
                assert_eq!(at(4, yy, xx), src(yy, xx));
            }
        }
        assert_eq!(at(0, 0, 2), 0.0);
        assert_eq!(at(3, 1, w - 1), 0.0);
    }

    #[test]
    fn rejects_narrow_inputs_and_counts_params() {
        let tape = Tape::new();
        assert!(shift_channels(tape.constant(Tensor::<f64>::zeros(&[4, 2, 2]))).is_err());
        let mut pb = ParamBuilder::new(0);
        assert!(ShiftConv::new(&mut pb, "s", 4, 4).is_err());
        ShiftConv::new(&mut pb, "s", 10, 10).unwrap();
        assert_eq!(pb.count(), 10 * 10 + 10);
    }
}
