use super::ScheduleEntry;
use crate::error::{invalid, Error, Result};
use crate::rng::Gaussian;
use crate::tensor::Tensor;

fn dims(x: &Tensor<f32>, op: &str) -> Result<(usize, usize, usize)> {
    match x.shape()[..] {
        [c, h, w] => Ok((c, h, w)),
        ref s => Err(invalid!("{op} expects [C, H, W], got {s:?}")),
    }
}

/// Square crop of side `size` with top-left corner `(y, x)`.
pub fn crop(img: &Tensor<f32>, y: usize, x: usize, size: usize) -> Result<Tensor<f32>> {
    let (c, h, w) = dims(img, "crop")?;
    if size == 0 || y + size > h || x + size > w {
        return Err(invalid!("crop {size}x{size} at ({y}, {x}) exceeds {h}x{w}"));
    }
    let mut data = Vec::with_capacity(c * size * size);
    for ch in 0..c {
        for row in y..y + size {
            let base = (ch * h + row) * w + x;
            data.extend_from_slice(&img.data()[base..base + size]);
        }
    }
    Tensor::new(vec![c, size, size], data)
}

/// Mirrors columns: `out[.., i, j] = in[.., i, W-1-j]`.
pub fn hflip(img: &Tensor<f32>) -> Result<Tensor<f32>> {
    let (_, _, w) = dims(img, "hflip")?;
    let mut out = img.clone();
    for row in out.data_mut().chunks_mut(w) {
        row.reverse();
    }
    Ok(out)
}

/// Rotates a square patch counter-clockwise by `degrees` (a multiple of 90):
/// one quarter turn maps `out[i][j] = in[j][n-1-i]`.
pub fn rotate_ccw(img: &Tensor<f32>, degrees: u16) -> Result<Tensor<f32>> {
    let (c, h, w) = dims(img, "rotate")?;
    if !degrees.is_multiple_of(90) || degrees >= 360 {
        return Err(invalid!("rotation {degrees} is not one of 0, 90, 180, 270"));
    }
    if h != w && !degrees.is_multiple_of(180) {
        return Err(invalid!(
            "quarter-turn rotation needs a square patch, got {h}x{w}"
        ));
    }
    let n = h;
    let src = img.data();
    let mut out = vec![0.0f32; src.len()];
    for ch in 0..c {
        let plane = &src[ch * h * w..(ch + 1) * h * w];
        let dst = &mut out[ch * h * w..(ch + 1) * h * w];
        for i in 0..h {
            for j in 0..w {
                dst[i * w + j] = match degrees {
                    0 => plane[i * w + j],
                    90 => plane[j * n + (n - 1 - i)],
                    180 => plane[(h - 1 - i) * w + (w - 1 - j)],
                    _ => plane[(n - 1 - j) * n + i],
                };
            }
        }
    }
    Tensor::new(vec![c, h, w], out)
}

/// Adds Gaussian noise with std `sigma / 255` drawn from a Box–Muller stream
/// seeded by `noise_seed`, one draw per element in row-major order. The
/// result is not clipped.
pub fn add_awgn(hq: &Tensor<f32>, sigma: f32, noise_seed: u64) -> Result<Tensor<f32>> {
    if !(0.0..=50.0).contains(&sigma) {
        return Err(Error::SigmaOutOfRange(sigma));
    }
    if sigma == 0.0 {
        return Ok(hq.clone());
    }
    let std = sigma as f64 / 255.0;
    let mut g = Gaussian::new(noise_seed);
    let data = hq
        .data()
        .iter()
        .map(|&v| (v as f64 + std * g.next()) as f32)
        .collect();
    Tensor::new(hq.shape().to_vec(), data)
}

/// Crop, then flip, then rotate, then noise. Returns `(lq, hq)`.
pub fn materialize_sample(
    entry: &ScheduleEntry,
    image: &Tensor<f32>,
) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let mut hq = crop(image, entry.crop_y, entry.crop_x, entry.patch_size)?;
    if entry.hflip {
        hq = hflip(&hq)?;
    }
    hq = rotate_ccw(&hq, entry.rotation)?;
    let lq = add_awgn(&hq, entry.sigma, entry.noise_seed)?;
    Ok((lq, hq))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn patch(c: usize, n: usize) -> Tensor<f32> {
        Tensor::from_fn(&[c, n, n], |i| i as f32)
    }

    #[test]
    fn hflip_swaps_columns() {
        let x = Tensor::new(vec![1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(hflip(&x).unwrap().data(), &[2.0, 1.0, 4.0, 3.0]);
    }

    #[test]
    fn quarter_turn_is_counter_clockwise() {
        // [[1,2],[3,4]] turned left becomes [[2,4],[1,3]]
        let x = Tensor::new(vec![1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(rotate_ccw(&x, 90).unwrap().data(), &[2.0, 4.0, 1.0, 3.0]);
        assert_eq!(rotate_ccw(&x, 270).unwrap().data(), &[3.0, 1.0, 4.0, 2.0]);
    }

    #[test]
    fn rotations_compose() {
        let x = patch(2, 5);
        let twice = rotate_ccw(&rotate_ccw(&x, 180).unwrap(), 180).unwrap();
        assert!(twice.bit_eq(&x));
        let q = rotate_ccw(&rotate_ccw(&x, 90).unwrap(), 90).unwrap();
        assert!(q.bit_eq(&rotate_ccw(&x, 180).unwrap()));
        assert!(rotate_ccw(&x, 45).is_err());
    }

    #[test]
    fn flip_and_rotate_do_not_commute() {
        let x = patch(1, 3);
        let a = rotate_ccw(&hflip(&x).unwrap(), 90).unwrap();
        let b = hflip(&rotate_ccw(&x, 90).unwrap()).unwrap();
        assert!(!a.bit_eq(&b));
    }

    #[test]
    fn crop_extracts_region() {
        let img = Tensor::from_fn(&[1, 4, 5], |i| i as f32);
        let c = crop(&img, 1, 2, 2).unwrap();
        assert_eq!(c.data(), &[7.0, 8.0, 12.0, 13.0]);
        assert!(crop(&img, 3, 0, 2).is_err());
    }

    #[test]
    fn zero_sigma_is_identity_and_noise_is_deterministic() {
        let x = Tensor::from_fn(&[3, 8, 8], |i| (i % 7) as f32 / 7.0);
        assert!(add_awgn(&x, 0.0, 123).unwrap().bit_eq(&x));
        let a = add_awgn(&x, 25.0, 9).unwrap();
        assert!(a.bit_eq(&add_awgn(&x, 25.0, 9).unwrap()));
        assert!(!a.bit_eq(&add_awgn(&x, 25.0, 10).unwrap()));
        assert!(matches!(
            add_awgn(&x, 50.5, 1),
            Err(Error::SigmaOutOfRange(_))
        ));
        assert!(add_awgn(&x, f32::NAN, 1).is_err());
    }

    #[test]
    fn identity_pipeline() {
        let img = Tensor::from_fn(&[3, 10, 12], |i| (i % 13) as f32 / 13.0);
        let e = ScheduleEntry {
            epoch: 0,
            sample_index: 0,
            image_id: "x".into(),
            crop_y: 2,
            crop_x: 3,
            patch_size: 6,
            hflip: false,
            rotation: 0,
            sigma: 0.0,
            noise_seed: 5,
        };
        let (lq, hq) = materialize_sample(&e, &img).unwrap();
        let raw = crop(&img, 2, 3, 6).unwrap();
        assert!(lq.bit_eq(&raw) && hq.bit_eq(&raw));
    }
}
