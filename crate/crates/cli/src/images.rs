//! PNG ↔ tensor conversion with pixel values mapped to `[-1, 1]`.

use std::path::Path;

use anyhow::{bail, Context, Result};
use image::imageops::FilterType;
use image::{DynamicImage, GrayImage, RgbImage};
use ssgan_core::tensor::{Scalar, Tensor};

pub fn to_unit(byte: u8) -> f64 {
    byte as f64 / 127.5 - 1.0
}

pub fn to_byte(v: f64) -> u8 {
    ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8
}

/// Decodes `path` into `[C×H×W]`, optionally resizing (bilinear) to
/// `size×size` first.
pub fn load_png<T: Scalar>(path: &Path, channels: usize, resize: Option<usize>) -> Result<Tensor<T>> {
    let img = image::open(path).with_context(|| format!("decoding {}", path.display()))?;
    let img = match resize {
        Some(s) if img.width() as usize != s || img.height() as usize != s => {
            img.resize_exact(s as u32, s as u32, FilterType::Triangle)
        }
        _ => img,
    };
    from_dynamic(&img, channels)
}

pub fn from_dynamic<T: Scalar>(img: &DynamicImage, channels: usize) -> Result<Tensor<T>> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let planes: Vec<u8> = match channels {
        1 => img.to_luma8().into_raw(),
        3 => {
            let rgb = img.to_rgb8().into_raw();
            (0..3).flat_map(|c| rgb.iter().skip(c).step_by(3).copied().collect::<Vec<_>>()).collect()
        }
        c => bail!("unsupported channel count {c} (1 or 3)"),
    };
    Ok(Tensor::new(vec![channels, h, w], planes.into_iter().map(|b| T::from_f64(to_unit(b))).collect())?)
}

/// Encodes `[C×H×W]` (C = 1 or 3) as an 8-bit PNG.
pub fn save_png<T: Scalar>(path: &Path, x: &Tensor<T>) -> Result<()> {
    let [c, h, w]: [usize; 3] = x.shape().try_into().context("expected a [C×H×W] image")?;
    let bytes: Vec<u8> = x.data().iter().map(|v| to_byte(v.as_f64())).collect();
    let plane = h * w;
    let result = match c {
        1 => GrayImage::from_raw(w as u32, h as u32, bytes).context("buffer size")?.save(path),
        3 => {
            let interleaved = (0..plane).flat_map(|i| (0..3).map(move |k| (i, k))).map(|(i, k)| bytes[k * plane + i]).collect();
            RgbImage::from_raw(w as u32, h as u32, interleaved).context("buffer size")?.save(path)
        }
        _ => bail!("unsupported channel count {c}"),
    };
    result.with_context(|| format!("writing {}", path.display()))
}

/// Lays `[C×h×w]` tiles into a grid with a `gap`-pixel border of value −1.
pub fn tile<T: Scalar>(tiles: &[Tensor<T>], cols: usize, gap: usize) -> Result<Tensor<T>> {
    let first = tiles.first().context("no tiles")?;
    let [c, h, w]: [usize; 3] = first.shape().try_into().context("tiles must be [C×H×W]")?;
    let cols = cols.max(1);
    let rows = tiles.len().div_ceil(cols);
    let (oh, ow) = (rows * (h + gap) + gap, cols * (w + gap) + gap);
    let mut out = Tensor::full(&[c, oh, ow], T::from_f64(-1.0));
    for (i, t) in tiles.iter().enumerate() {
        if t.shape() != first.shape() {
            bail!("tile {i} has shape {:?}, expected {:?}", t.shape(), first.shape());
        }
        let (y0, x0) = (gap + (i / cols) * (h + gap), gap + (i % cols) * (w + gap));
        for ch in 0..c {
            for y in 0..h {
                let src = &t.data()[(ch * h + y) * w..][..w];
                let dst = (ch * oh + y0 + y) * ow + x0;
                out.data_mut()[dst..dst + w].copy_from_slice(src);
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn byte_mapping_round_trips() {
        for b in 0..=255u8 {
            assert_eq!(to_byte(to_unit(b)), b);
        }
        assert_eq!((to_unit(0), to_unit(255)), (-1.0, 1.0));
        assert_eq!((to_byte(-3.0), to_byte(3.0)), (0, 255));
    }

    #[test]
    fn png_round_trip_gray_and_rgb() {
        let dir = tempfile::tempdir().unwrap();
        for c in [1, 3] {
            let x = Tensor::<f32>::from_fn(&[c, 5, 7], |i| to_unit((i * 37 % 256) as u8) as f32);
            let p = dir.path().join(format!("x{c}.png"));
            save_png(&p, &x).unwrap();
            let y: Tensor<f32> = load_png(&p, c, None).unwrap();
            assert_eq!(x, y);
        }
    }

    #[test]
    fn tiles_are_placed_in_rows() {
        let a = Tensor::<f32>::full(&[1, 2, 2], 0.5);
        let b = Tensor::<f32>::full(&[1, 2, 2], 1.0);
        let t = tile(&[a, b.clone(), b], 2, 1).unwrap();
        assert_eq!(t.shape(), &[1, 7, 7]);
        assert_eq!(t.data()[7 + 1], 0.5);
        assert_eq!(t.data()[7 + 4], 1.0);
        assert_eq!(t.data()[4 * 7 + 1], 1.0);
        assert_eq!(t.data()[4 * 7 + 4], -1.0);
    }
}
