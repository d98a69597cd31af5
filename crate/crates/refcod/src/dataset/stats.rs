//! Per-object attribute statistics: area, ratio, center distance, contrast.

use crate::error::{Error, Result};
use ndarray::Array3;
use serde::Serialize;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ObjectStats {
    /// Foreground pixel count.
    pub area: usize,
    /// area / (H*W).
    pub ratio: f64,
    /// Distance from the mask centroid to the image center, normalized by
    /// half the image diagonal. Pixel (i,j) sits at (i+0.5, j+0.5).
    pub distance: f64,
    /// L2 distance between mean foreground RGB and mean background RGB
    /// (0 when either region is empty).
    pub global_contrast: f64,
}

pub fn compute_object_stats(image: &Array3<f64>, mask: &Array3<f64>) -> Result<ObjectStats> {
    let (ci, h, w) = image.dim();
    let (cm, mh, mw) = mask.dim();
    if ci != 3 || cm != 1 || (h, w) != (mh, mw) {
        return Err(Error::ShapeMismatch(format!(
            "stats expect image (3,H,W) and mask (1,H,W); got {:?} and {:?}",
            image.dim(),
            mask.dim()
        )));
    }

    let mut area = 0usize;
    let mut cy = 0.0;
    let mut cx = 0.0;
    let mut fg_sum = [0.0f64; 3];
    let mut bg_sum = [0.0f64; 3];
    for i in 0..h {
        for j in 0..w {
            if mask[[0, i, j]] >= 0.5 {
                area += 1;
                cy += i as f64 + 0.5;
                cx += j as f64 + 0.5;
                for c in 0..3 {
                    fg_sum[c] += image[[c, i, j]];
                }
            } else {
                for c in 0..3 {
                    bg_sum[c] += image[[c, i, j]];
                }
            }
        }
    }
    if area == 0 {
        return Err(Error::EmptyMask);
    }

    let total = h * w;
    let ratio = area as f64 / total as f64;
    cy /= area as f64;
    cx /= area as f64;
    let center_y = h as f64 / 2.0;
    let center_x = w as f64 / 2.0;
    let half_diag = 0.5 * ((h * h + w * w) as f64).sqrt();
    let distance = ((cy - center_y).powi(2) + (cx - center_x).powi(2)).sqrt() / half_diag;

    let bg_area = total - area;
    let global_contrast = if bg_area == 0 {
        0.0
    } else {
        let mut acc = 0.0;
        for c in 0..3 {
            let d = fg_sum[c] / area as f64 - bg_sum[c] / bg_area as f64;
            acc += d * d;
        }
        acc.sqrt()
    };

    Ok(ObjectStats {
        area,
        ratio,
        distance,
        global_contrast,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;

    #[test]
    fn full_mask_is_centered() {
        let image = Array3::from_elem((3, 6, 8), 0.5);
        let mask = Array3::from_elem((1, 6, 8), 1.0);
        let s = compute_object_stats(&image, &mask).unwrap();
        assert_eq!(s.area, 48);
        assert_eq!(s.ratio, 1.0);
        assert!(s.distance.abs() < 1e-12);
        assert_eq!(s.global_contrast, 0.0);
    }

    #[test]
    fn single_corner_pixel_distance() {
        // 4x4 image, one foreground pixel at (0,0): centroid (0.5, 0.5),
        // center (2,2), half-diagonal 0.5*sqrt(32).
        let image = Array3::zeros((3, 4, 4));
        let mut mask = Array3::zeros((1, 4, 4));
        mask[[0, 0, 0]] = 1.0;
        let s = compute_object_stats(&image, &mask).unwrap();
        assert_eq!(s.area, 1);
        assert!((s.ratio - 1.0 / 16.0).abs() < 1e-15);
        let expect = (1.5f64.powi(2) * 2.0).sqrt() / (0.5 * 32f64.sqrt());
        assert!((s.distance - expect).abs() < 1e-12);
    }

    #[test]
    fn contrast_of_pure_black_and_white() {
        let mut image = Array3::zeros((3, 4, 4));
        let mut mask = Array3::zeros((1, 4, 4));
        for i in 0..2 {
            for j in 0..4 {
                mask[[0, i, j]] = 1.0;
                for c in 0..3 {
                    image[[c, i, j]] = 1.0;
                }
            }
        }
        let s = compute_object_stats(&image, &mask).unwrap();
        assert!((s.global_contrast - 3f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn empty_mask_is_an_error() {
        let image = Array3::zeros((3, 4, 4));
        let mask = Array3::zeros((1, 4, 4));
        assert!(matches!(
            compute_object_stats(&image, &mask),
            Err(Error::EmptyMask)
        ));
    }

    #[test]
    fn ratio_matches_brute_force_on_random_masks() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            let h = rng.random_range(4..20);
            let w = rng.random_range(4..20);
            let image = Array3::from_shape_fn((3, h, w), |_| rng.random_range(0.0..1.0));
            let mut mask = Array3::zeros((1, h, w));
            let mut fg = 0;
            for i in 0..h {
                for j in 0..w {
                    if rng.random::<bool>() {
                        mask[[0, i, j]] = 1.0;
                        fg += 1;
                    }
                }
            }
            if fg == 0 {
                mask[[0, 0, 0]] = 1.0;
                fg = 1;
            }
            let s = compute_object_stats(&image, &mask).unwrap();
            assert_eq!(s.area, fg);
            assert!((s.ratio - fg as f64 / (h * w) as f64).abs() < 1e-15);
        }
    }
}
