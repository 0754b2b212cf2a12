//! PNG and text file I/O for masks, images, heatmaps and the manifest.

use std::path::Path;

use image::{GrayImage, ImageReader, Luma, Rgb, RgbImage};

use crate::data::Mask;
use crate::error::{Error, Result};

fn image_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Image { path: path.to_path_buf(), detail: e.to_string() }
}

/// 8-bit grayscale PNG, 0 = background, 255 = foreground.
pub fn save_mask(path: &Path, mask: &Mask) -> Result<()> {
    let img = GrayImage::from_fn(mask.width() as u32, mask.height() as u32, |x, y| {
        Luma([if mask.bits()[y as usize * mask.width() + x as usize] { 255 } else { 0 }])
    });
    img.save(path).map_err(|e| image_err(path, e))
}

/// Inverse of [`save_mask`]; any gray level other than 0 or 255 is rejected.
pub fn load_mask(path: &Path) -> Result<Mask> {
    let img = ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .decode()
        .map_err(|e| image_err(path, e))?
        .into_luma8();
    let (w, h) = img.dimensions();
    let bits = img
        .pixels()
        .map(|p| match p.0[0] {
            0 => Ok(false),
            255 => Ok(true),
            v => Err(Error::Validation(format!("{}: gray level {v} in a binary mask", path.display()))),
        })
        .collect::<Result<Vec<_>>>()?;
    Mask::from_bits(h as usize, w as usize, bits)
}

/// Channel-major 3×H×W floats in [0, 1] to an RGB PNG.
pub fn save_rgb(path: &Path, pixels: &[f32], height: usize, width: usize) -> Result<()> {
    let plane = height * width;
    if pixels.len() != 3 * plane {
        return Err(Error::Validation(format!("{} values for a 3×{height}×{width} image", pixels.len())));
    }
    let q = |v: f32| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    let img = RgbImage::from_fn(width as u32, height as u32, |x, y| {
        let i = y as usize * width + x as usize;
        Rgb([q(pixels[i]), q(pixels[plane + i]), q(pixels[2 * plane + i])])
    });
    img.save(path).map_err(|e| image_err(path, e))
}

/// RGB PNG to channel-major floats in [0, 1]. Returns (pixels, height, width).
pub fn load_rgb(path: &Path) -> Result<(Vec<f32>, usize, usize)> {
    let img = ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .decode()
        .map_err(|e| image_err(path, e))?
        .into_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let plane = w * h;
    let mut pixels = vec![0.0f32; 3 * plane];
    for (i, p) in img.pixels().enumerate() {
        for c in 0..3 {
            pixels[c * plane + i] = p.0[c] as f32 / 255.0;
        }
    }
    Ok((pixels, h, w))
}

/// Min-max scale a map to 0..=255 and write it as grayscale. A constant map
/// becomes mid-gray.
pub fn save_heatmap(path: &Path, values: &[f32], height: usize, width: usize) -> Result<()> {
    if values.len() != height * width {
        return Err(Error::Validation(format!("{} values for a {height}×{width} heatmap", values.len())));
    }
    let lo = values.iter().copied().fold(f32::INFINITY, f32::min);
    let hi = values.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let range = hi - lo;
    let img = GrayImage::from_fn(width as u32, height as u32, |x, y| {
        let v = values[y as usize * width + x as usize];
        let t = if range > 0.0 { (v - lo) / range } else { 0.5 };
        Luma([(t * 255.0).round() as u8])
    });
    img.save(path).map_err(|e| image_err(path, e))
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}
