//! PNG and checkpoint files.

use std::fs;
use std::path::Path;

use gmbinet_core::checkpoint::Checkpoint;
use gmbinet_core::{Shape, Tensor};
use image::{GrayImage, Luma};

use crate::error::{Error, Result};

fn image_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Image { path: path.to_path_buf(), reason: e.to_string() }
}

/// 8-bit PNG as a `(1, 3, H, W)` tensor in `[0, 1]`; grayscale is replicated.
pub fn read_image(path: &Path) -> Result<Tensor> {
    let img = image::open(path).map_err(|e| image_err(path, e))?;
    let rgb = img.to_rgb8();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    if w == 0 || h == 0 {
        return Err(image_err(path, "empty image"));
    }
    let mut t = Tensor::zeros(Shape::new(1, 3, h, w));
    for (x, y, px) in rgb.enumerate_pixels() {
        for c in 0..3 {
            t.set(0, c, y as usize, x as usize, px[c] as f32 / 255.0);
        }
    }
    Ok(t)
}

/// Mask PNG as a `(1, 1, H, W)` binary tensor: luma ≥ 128 is foreground.
pub fn read_mask(path: &Path) -> Result<Tensor> {
    let img = image::open(path).map_err(|e| image_err(path, e))?.to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut t = Tensor::zeros(Shape::new(1, 1, h, w));
    for (x, y, px) in img.enumerate_pixels() {
        t.set(0, 0, y as usize, x as usize, if px[0] >= 128 { 1.0 } else { 0.0 });
    }
    Ok(t)
}

/// Single-channel map in `[0, 1]` as an 8-bit grayscale PNG, `round(255 p)`.
pub fn write_gray_png(map: &Tensor, path: &Path) -> Result<()> {
    let s = map.shape();
    if s.n != 1 || s.c != 1 {
        return Err(Error::usage(format!("expected a single-channel map, got {s}")));
    }
    let img = GrayImage::from_fn(s.w as u32, s.h as u32, |x, y| {
        let p = map.at(0, 0, y as usize, x as usize).clamp(0.0, 1.0);
        Luma([(p * 255.0).round() as u8])
    });
    img.save(path).map_err(|e| image_err(path, e))
}

/// `(1, 3, H, W)` image in `[0, 1]` as an RGB PNG.
pub fn write_rgb_png(img: &Tensor, path: &Path) -> Result<()> {
    let s = img.shape();
    let out = image::RgbImage::from_fn(s.w as u32, s.h as u32, |x, y| {
        let px = |c| (img.at(0, c, y as usize, x as usize).clamp(0.0, 1.0) * 255.0).round() as u8;
        image::Rgb([px(0), px(1), px(2)])
    });
    out.save(path).map_err(|e| image_err(path, e))
}

pub fn save_checkpoint(ck: &Checkpoint, path: &Path) -> Result<()> {
    fs::write(path, ck.encode()).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(Checkpoint::decode(&bytes)?)
}

pub fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}
