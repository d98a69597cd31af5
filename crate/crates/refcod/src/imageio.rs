//! Image/mask file handling and array-level resize helpers.
//!
//! Images are 8-bit RGB (JPEG); masks are 8-bit single-channel PNG with
//! foreground = 255. In-memory values are f64 in [0,1], channel-first.

use crate::autodiff::kernels::resize_bilinear;
use crate::error::{Error, Result};
use ndarray::{Array3, Array4};
use std::path::Path;

pub fn load_image_rgb(path: &Path) -> Result<Array3<f64>> {
    let img = image::open(path)
        .map_err(|e| Error::Data(format!("cannot read image {}: {e}", path.display())))?
        .to_rgb8();
    let (w, h) = img.dimensions();
    let mut out = Array3::<f64>::zeros((3, h as usize, w as usize));
    for (x, y, p) in img.enumerate_pixels() {
        for c in 0..3 {
            out[[c, y as usize, x as usize]] = p.0[c] as f64 / 255.0;
        }
    }
    Ok(out)
}

/// Grayscale mask as continuous [0,1] values (no thresholding).
pub fn load_mask_soft(path: &Path) -> Result<Array3<f64>> {
    let img = image::open(path)
        .map_err(|e| Error::Data(format!("cannot read mask {}: {e}", path.display())))?
        .to_luma8();
    let (w, h) = img.dimensions();
    let mut out = Array3::<f64>::zeros((1, h as usize, w as usize));
    for (x, y, p) in img.enumerate_pixels() {
        out[[0, y as usize, x as usize]] = p.0[0] as f64 / 255.0;
    }
    Ok(out)
}

/// Mask binarized at 0.5 on load.
pub fn load_mask(path: &Path) -> Result<Array3<f64>> {
    Ok(binarize(&load_mask_soft(path)?, 0.5))
}

pub fn binarize(m: &Array3<f64>, threshold: f64) -> Array3<f64> {
    m.mapv(|v| if v >= threshold { 1.0 } else { 0.0 })
}

/// Bilinear resize of a (C,H,W) array.
pub fn resize_chw(x: &Array3<f64>, oh: usize, ow: usize) -> Array3<f64> {
    let (c, h, w) = x.dim();
    let x4 = x
        .view()
        .into_shape_with_order((1, c, h, w))
        .expect("contiguous chw array");
    let y = resize_bilinear(&x4, oh, ow);
    y.into_shape_with_order((c, oh, ow)).expect("resize shape")
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn save_image_rgb(path: &Path, img: &Array3<f64>) -> Result<()> {
    let (c, h, w) = img.dim();
    assert_eq!(c, 3, "save_image_rgb expects 3 channels");
    let mut buf = image::RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            buf.put_pixel(
                x as u32,
                y as u32,
                image::Rgb([
                    to_u8(img[[0, y, x]]),
                    to_u8(img[[1, y, x]]),
                    to_u8(img[[2, y, x]]),
                ]),
            );
        }
    }
    buf.save(path).map_err(|e| Error::WriteFailure {
        path: path.display().to_string(),
        source: std::io::Error::other(e),
    })
}

/// RGB JPEG with an explicit quality setting.
pub fn save_jpeg(path: &Path, img: &Array3<f64>, quality: u8) -> Result<()> {
    let (c, h, w) = img.dim();
    assert_eq!(c, 3, "save_jpeg expects 3 channels");
    let mut buf = image::RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            buf.put_pixel(
                x as u32,
                y as u32,
                image::Rgb([
                    to_u8(img[[0, y, x]]),
                    to_u8(img[[1, y, x]]),
                    to_u8(img[[2, y, x]]),
                ]),
            );
        }
    }
    let file = std::fs::File::create(path).map_err(|e| Error::WriteFailure {
        path: path.display().to_string(),
        source: e,
    })?;
    let mut writer = std::io::BufWriter::new(file);
    let encoder = image::codecs::jpeg::JpegEncoder::new_with_quality(&mut writer, quality);
    buf.write_with_encoder(encoder)
        .map_err(|e| Error::WriteFailure {
            path: path.display().to_string(),
            source: std::io::Error::other(e),
        })
}

/// Grayscale PNG from a (1,H,W) array in [0,1].
pub fn save_gray_png(path: &Path, m: &Array3<f64>) -> Result<()> {
    let (c, h, w) = m.dim();
    assert_eq!(c, 1, "save_gray_png expects 1 channel");
    let mut buf = image::GrayImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            buf.put_pixel(x as u32, y as u32, image::Luma([to_u8(m[[0, y, x]])]));
        }
    }
    buf.save(path).map_err(|e| Error::WriteFailure {
        path: path.display().to_string(),
        source: std::io::Error::other(e),
    })
}

/// Batch a list of (C,H,W) arrays into (N,C,H,W).
pub fn stack_batch(items: &[Array3<f64>]) -> Array4<f64> {
    assert!(!items.is_empty());
    let (c, h, w) = items[0].dim();
    let mut out = Array4::<f64>::zeros((items.len(), c, h, w));
    for (i, item) in items.iter().enumerate() {
        assert_eq!(item.dim(), (c, h, w), "batch items must share shape");
        out.index_axis_mut(ndarray::Axis(0), i).assign(item);
    }
    out
}
