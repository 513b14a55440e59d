//! 8-bit PNG reading and writing for `[C, H, W]` tensors in `[0, 1]`.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use png::{BitDepth, ColorType, Decoder, Encoder, Transformations};

use crate::error::{invalid, Error, Result};
use crate::tensor::Tensor;

/// Decodes a grayscale or RGB PNG. Palettes are expanded, 16-bit samples
/// reduced to 8 bits, and an alpha channel, if present, is dropped.
pub fn load_png(path: impl AsRef<Path>) -> Result<Tensor<f32>> {
    let path = path.as_ref();
    let png_err = |e: png::DecodingError| Error::format("png", format!("{}: {e}", path.display()));
    let mut decoder = Decoder::new(BufReader::new(File::open(path)?));
    decoder.set_transformations(Transformations::normalize_to_color8());
    let mut reader = decoder.read_info().map_err(png_err)?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::format("png", format!("{}: image too large", path.display())))?;
    let mut buf = vec![0u8; size];
    let info = reader.next_frame(&mut buf).map_err(png_err)?;
    let (h, w) = (info.height as usize, info.width as usize);
    let (stride, channels) = match info.color_type {
        ColorType::Grayscale => (1, 1),
        ColorType::GrayscaleAlpha => (2, 1),
        ColorType::Rgb => (3, 3),
        ColorType::Rgba => (4, 3),
        ColorType::Indexed => return Err(Error::format("png", "palette was not expanded")),
    };
    let mut data = vec![0.0f32; channels * h * w];
    for y in 0..h {
        let row = &buf[y * info.line_size..y * info.line_size + w * stride];
        for x in 0..w {
            for c in 0..channels {
                data[(c * h + y) * w + x] = row[x * stride + c] as f32 / 255.0;
            }
        }
    }
    Tensor::new(vec![channels, h, w], data)
}

/// Rounds `[0, 1]` values (clipped) to 8-bit, interleaved channel order.
pub fn tensor_to_u8(img: &Tensor<f32>) -> Result<Vec<u8>> {
    let [c, h, w] = img.shape()[..] else {
        return Err(invalid!("expected [C, H, W], got {:?}", img.shape()));
    };
    let mut out = vec![0u8; c * h * w];
    for ch in 0..c {
        for i in 0..h * w {
            let v = img.data()[ch * h * w + i].clamp(0.0, 1.0);
            out[i * c + ch] = (v * 255.0).round() as u8;
        }
    }
    Ok(out)
}

pub fn save_png(img: &Tensor<f32>, path: impl AsRef<Path>) -> Result<()> {
    let [c, h, w] = img.shape()[..] else {
        return Err(invalid!("expected [C, H, W], got {:?}", img.shape()));
    };
    let color = match c {
        1 => ColorType::Grayscale,
        3 => ColorType::Rgb,
        _ => return Err(invalid!("cannot save {c}-channel image as PNG")),
    };
    let enc_err = |e: png::EncodingError| Error::format("png", e.to_string());
    let file = BufWriter::new(File::create(path)?);
    let mut encoder = Encoder::new(file, w as u32, h as u32);
    encoder.set_color(color);
    encoder.set_depth(BitDepth::Eight);
    let mut writer = encoder.write_header().map_err(enc_err)?;
    writer
        .write_image_data(&tensor_to_u8(img)?)
        .map_err(enc_err)?;
    writer.finish().map_err(enc_err)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_round_trip_is_exact_on_8bit_values() {
        let dir = tempfile::tempdir().unwrap();
        for c in [1, 3] {
            let img = Tensor::from_fn(&[c, 5, 7], |i| ((i * 37) % 256) as f32 / 255.0);
            let path = dir.path().join(format!("x{c}.png"));
            save_png(&img, &path).unwrap();
            let back = load_png(&path).unwrap();
            assert!(back.bit_eq(&img));
        }
    }
}
