//! In-memory image representation and lossless PNG round-tripping.
//!
//! Images are `(3, h, w)` arrays of f64 intensities in `[0, 1]`. Binary masks
//! are `(h, w)` arrays of `{0, 1}`. All disk formats are 8-bit PNG, which is
//! lossless for the quantized values we write, so re-encoding a loaded file
//! is byte-stable.

use crate::error::{Error, Result};
use ndarray::{Array2, Array3};
use std::path::Path;

/// RGB image, shape `(3, h, w)`, values in `[0, 1]`.
pub type RgbArray = Array3<f64>;

/// Binary mask, shape `(h, w)`, values in `{0, 1}`.
pub type MaskArray = Array2<u8>;

pub fn image_hw(img: &RgbArray) -> (usize, usize) {
    (img.shape()[1], img.shape()[2])
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn save_rgb(img: &RgbArray, path: &Path) -> Result<()> {
    let (h, w) = image_hw(img);
    let mut buf = vec![0u8; h * w * 3];
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                buf[(y * w + x) * 3 + c] = quantize(img[[c, y, x]]);
            }
        }
    }
    let out = image::RgbImage::from_raw(w as u32, h as u32, buf)
        .expect("buffer size matches dimensions");
    out.save(path)
        .map_err(|e| Error::io(path, std::io::Error::other(e)))
}

pub fn load_rgb(path: &Path) -> Result<RgbArray> {
    let img = image::open(path)
        .map_err(|e| Error::io(path, std::io::Error::other(e)))?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut out = Array3::zeros((3, h, w));
    for y in 0..h {
        for x in 0..w {
            let p = img.get_pixel(x as u32, y as u32);
            for c in 0..3 {
                out[[c, y, x]] = p.0[c] as f64 / 255.0;
            }
        }
    }
    Ok(out)
}

pub fn save_mask(mask: &MaskArray, path: &Path) -> Result<()> {
    let (h, w) = mask.dim();
    let mut buf = vec![0u8; h * w];
    for y in 0..h {
        for x in 0..w {
            buf[y * w + x] = if mask[[y, x]] > 0 { 255 } else { 0 };
        }
    }
    let out = image::GrayImage::from_raw(w as u32, h as u32, buf)
        .expect("buffer size matches dimensions");
    out.save(path)
        .map_err(|e| Error::io(path, std::io::Error::other(e)))
}

pub fn load_mask(path: &Path) -> Result<MaskArray> {
    let img = image::open(path)
        .map_err(|e| Error::io(path, std::io::Error::other(e)))?
        .to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut out = Array2::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            out[[y, x]] = if img.get_pixel(x as u32, y as u32).0[0] >= 128 {
                1
            } else {
                0
            };
        }
    }
    Ok(out)
}

/// Per-channel mean intensities, used for style statistics.
pub fn channel_means(img: &RgbArray) -> [f64; 3] {
    let (h, w) = image_hw(img);
    let n = (h * w) as f64;
    let mut m = [0.0; 3];
    for (c, item) in m.iter_mut().enumerate() {
        *item = img.index_axis(ndarray::Axis(0), c).sum() / n;
    }
    m
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    #[test]
    fn rgb_png_round_trip_is_lossless_after_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.png");
        let mut img: RgbArray = Array3::zeros((3, 8, 6));
        for c in 0..3 {
            for y in 0..8 {
                for x in 0..6 {
                    img[[c, y, x]] = ((c + 2 * y + 3 * x) % 256) as f64 / 255.0;
                }
            }
        }
        save_rgb(&img, &path).unwrap();
        let back = load_rgb(&path).unwrap();
        for (a, b) in img.iter().zip(back.iter()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn mask_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.png");
        let mut mask: MaskArray = Array2::zeros((5, 7));
        mask[[0, 0]] = 1;
        mask[[4, 6]] = 1;
        save_mask(&mask, &path).unwrap();
        assert_eq!(load_mask(&path).unwrap(), mask);
    }
}
