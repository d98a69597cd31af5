//! The four segmentation metrics (MAE, S-measure, adaptive E-measure,
//! weighted F-measure) and threshold sweeps for PR / F-beta curves.
//!
//! Conventions, pinned for reproducibility:
//! - S-measure: object term uses sample (N-1) standard deviation (0 for a
//!   single element); the region split cuts at the ground-truth centroid
//!   rounded on the half-pixel grid (mirror-consistent); block SSIM
//!   normalizes variances by N-1+eps; empty blocks carry zero weight.
//!   Degenerate ground truth: all-zero -> 1 - mean(p), all-one -> mean(p).
//!   The result is clamped to [0,1].
//! - Adaptive E-measure: binarize at min(2*mean(p), 1) with `>=`; the
//!   enhanced alignment is averaged over all pixels (divide by N). Degenerate
//!   ground truth: all-zero -> mean(1-binarized), all-one -> mean(binarized).
//! - Weighted F-measure: exact Euclidean distance transform, 7x7 Gaussian
//!   (sigma 5, zero-padded correlation), background decay 2 - 0.5^(D/5),
//!   beta^2 = 1. All-zero ground truth is an error (callers skip and count).
//! - All computation in f64.

use crate::error::{Error, Result};
use ndarray::{Array2, ArrayView2};

const EPS: f64 = f64::EPSILON;

fn check_pair(p: &ArrayView2<f64>, g: &ArrayView2<f64>) -> Result<()> {
    if p.dim() != g.dim() {
        return Err(Error::ShapeMismatch(format!(
            "prediction {:?} vs ground truth {:?}",
            p.dim(),
            g.dim()
        )));
    }
    Ok(())
}

fn mean(a: &ArrayView2<f64>) -> f64 {
    a.sum() / a.len() as f64
}

/// Mean absolute error.
pub fn mae(p: &ArrayView2<f64>, g: &ArrayView2<f64>) -> Result<f64> {
    check_pair(p, g)?;
    let mut acc = 0.0;
    for (a, b) in p.iter().zip(g.iter()) {
        acc += (a - b).abs();
    }
    Ok(acc / p.len() as f64)
}

fn object_score(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let n = values.len() as f64;
    let x = values.iter().sum::<f64>() / n;
    let sigma = if values.len() > 1 {
        let var = values.iter().map(|v| (v - x) * (v - x)).sum::<f64>() / (n - 1.0);
        var.sqrt()
    } else {
        0.0
    };
     2.0 * x / (x * x + 1.0 + sigma + EPS)
}

fn s_object(p: &ArrayView2<f64>, g: &ArrayView2<f64>) -> f64 {
    let mut fg = Vec::new();
    let mut bg = Vec::new();
    for (pv, gv) in p.iter().zip(g.iter()) {
        if *gv >= 0.5 {
            fg.push(*pv);
        } else {
            bg.push(1.0 - *pv);
        }
    }
    let u = fg.len() as f64 / p.len() as f64;
    u * object_score(&fg) + (1.0 - u) * object_score(&bg)
}

/// Region cut point: the centroid of the ground-truth mass, rounded on the
/// half-pixel grid so mirrored inputs split into mirrored blocks. Returns
/// (top block height, left block width), each at least 1.
fn region_cut(g: &ArrayView2<f64>) -> (usize, usize) {
    let (h, w) = g.dim();
    let total = g.sum();
    if total == 0.0 {
        return (((h as f64) / 2.0).round() as usize, ((w as f64) / 2.0).round() as usize);
    }
    let mut ysum = 0.0;
    let mut xsum = 0.0;
    for i in 0..h {
        for j in 0..w {
            let v = g[[i, j]];
            ysum += v * i as f64;
            xsum += v * j as f64;
        }
    }
    let yc = ysum / total;
    let xc = xsum / total;
    let top = ((yc + 0.5).round() as usize).clamp(1, h);
    let left = ((xc + 0.5).round() as usize).clamp(1, w);
    (top, left)
}

fn block_ssim(p: &ArrayView2<f64>, g: &ArrayView2<f64>) -> f64 {
    let n = p.len() as f64;
    let x = mean(p);
    let y = mean(g);
    let mut sx = 0.0;
    let mut sy = 0.0;
    let mut sxy = 0.0;
    for (pv, gv) in p.iter().zip(g.iter()) {
        sx += (pv - x) * (pv - x);
        sy += (gv - y) * (gv - y);
        sxy += (pv - x) * (gv - y);
    }
    let sigma_x2 = sx / (n - 1.0 + EPS);
    let sigma_y2 = sy / (n - 1.0 + EPS);
    let sigma_xy = sxy / (n - 1.0 + EPS);
    let alpha = 4.0 * x * y * sigma_xy;
    let beta = (x * x + y * y) * (sigma_x2 + sigma_y2);
    if alpha != 0.0 {
        alpha / (beta + EPS)
    } else if beta == 0.0 {
        1.0
    } else {
        0.0
    }
}

fn s_region(p: &ArrayView2<f64>, g: &ArrayView2<f64>) -> f64 {
    let (h, w) = g.dim();
    let (y, x) = region_cut(g);
    let area = (h * w) as f64;
    // Row/col cut points in 0-based exclusive form.
    let cuts = [
        (0..y, 0..x),
        (0..y, x..w),
        (y..h, 0..x),
        (y..h, x..w),
    ];
    let mut score = 0.0;
    for (rows, cols) in cuts {
        let bh = rows.end - rows.start;
        let bw = cols.end - cols.start;
        if bh == 0 || bw == 0 {
            continue;
        }
        let pb = p.slice(ndarray::s![rows.clone(), cols.clone()]);
        let gb = g.slice(ndarray::s![rows, cols]);
        let weight = (bh * bw) as f64 / area;
        score += weight * block_ssim(&pb, &gb);
    }
    score
}

/// Structure measure: 0.5 * object term + 0.5 * region term.
pub fn s_measure(p: &ArrayView2<f64>, g: &ArrayView2<f64>) -> Result<f64> {
    check_pair(p, g)?;
    let fg = g.sum();
    let n = g.len() as f64;
    let s = if fg == 0.0 {
        1.0 - mean(p)
    } else if fg == n {
        mean(p)
    } else {
        0.5 * s_object(p, g) + 0.5 * s_region(p, g)
    };
    Ok(s.clamp(0.0, 1.0))
}

/// Adaptive E-measure: enhanced alignment after mean-based binarization.
pub fn e_measure_adaptive(p: &ArrayView2<f64>, g: &ArrayView2<f64>) -> Result<f64> {
    check_pair(p, g)?;
    let threshold = (2.0 * mean(p)).min(1.0);
    let bin: Array2<f64> = p.mapv(|v| if v >= threshold { 1.0 } else { 0.0 });
    Ok(e_measure_binary(&bin.view(), g))
}

/// Enhanced-alignment measure for an already binarized prediction.
pub fn e_measure_binary(bin: &ArrayView2<f64>, g: &ArrayView2<f64>) -> f64 {
    let n = g.len() as f64;
    let fg = g.sum();
    if fg == 0.0 {
        return bin.mapv(|v| 1.0 - v).sum() / n;
    }
    if fg == n {
        return bin.sum() / n;
    }
    let mu_f = mean(bin);
    let mu_g = fg / n;
    let mut acc = 0.0;
    for (fv, gv) in bin.iter().zip(g.iter()) {
        let af = fv - mu_f;
        let ag = gv - mu_g;
        let align = 2.0 * ag * af / (ag * ag + af * af + EPS);
        let enhanced = (align + 1.0) * (align + 1.0) / 4.0;
        acc += enhanced;
    }
    acc / n
}

const BIG: f64 = 1e20;

/// 1-D squared distance transform (lower envelope of parabolas), returning
/// distances and argmin positions.
fn dt_1d(f: &[f64], d: &mut [f64], arg: &mut [usize]) {
    // Finite BIG instead of infinity keeps the intersection arithmetic
    // well-defined, so the envelope loop never underflows at k = 0.
    let n = f.len();
    let mut v = vec![0usize; n];
    let mut z = vec![0.0f64; n + 1];
    let mut k = 0usize;
    v[0] = 0;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    let intersect = |q: usize, p: usize| -> f64 {
        ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * q as f64 - 2.0 * p as f64)
    };
    for q in 1..n {
        let mut s = intersect(q, v[k]);
        while s <= z[k] {
            k -= 1;
            s = intersect(q, v[k]);
        }
        k += 1;
        v[k] = q;
        z[k] = s;
        z[k + 1] = f64::INFINITY;
    }
    let mut k = 0usize;
    for q in 0..n {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let vk = v[k];
        d[q] = ((q as isize - vk as isize) * (q as isize - vk as isize)) as f64 + f[vk];
        arg[q] = vk;
    }
}

/// Exact Euclidean distance transform of a binary mask, with the coordinates
/// of the nearest foreground pixel for every position.
pub fn distance_transform(g: &ArrayView2<f64>) -> (Array2<f64>, Array2<(usize, usize)>) {
    let (h, w) = g.dim();
    // Phase 1: per column over rows.
    let mut col_d = Array2::<f64>::zeros((h, w));
    let mut col_src = Array2::<usize>::zeros((h, w));
    let mut f = vec![0.0; h];
    let mut d = vec![0.0; h];
    let mut arg = vec![0usize; h];
    for j in 0..w {
        for i in 0..h {
            f[i] = if g[[i, j]] >= 0.5 { 0.0 } else { BIG };
        }
        dt_1d(&f, &mut d, &mut arg);
        for i in 0..h {
            col_d[[i, j]] = d[i];
            col_src[[i, j]] = arg[i];
        }
    }
    // Phase 2: per row over columns.
    let mut dist = Array2::<f64>::zeros((h, w));
    let mut nearest = Array2::<(usize, usize)>::from_elem((h, w), (0, 0));
    let mut f = vec![0.0; w];
    let mut d = vec![0.0; w];
    let mut arg = vec![0usize; w];
    for i in 0..h {
        for j in 0..w {
            f[j] = col_d[[i, j]];
        }
        dt_1d(&f, &mut d, &mut arg);
        for j in 0..w {
            dist[[i, j]] = d[j].max(0.0).sqrt();
            let jsrc = arg[j];
            nearest[[i, j]] = (col_src[[i, jsrc]], jsrc);
        }
    }
    (dist, nearest)
}

/// 7x7 Gaussian kernel with sigma 5, normalized to sum 1.
fn gaussian7() -> [[f64; 7]; 7] {
    let mut k = [[0.0; 7]; 7];
    let mut total = 0.0;
    for (i, row) in k.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            let di = i as f64 - 3.0;
            let dj = j as f64 - 3.0;
            *v = (-(di * di + dj * dj) / (2.0 * 25.0)).exp();
            total += *v;
        }
    }
    for row in k.iter_mut() {
        for v in row.iter_mut() {
            *v /= total;
        }
    }
    k
}

/// Zero-padded 7x7 correlation.
fn filter7(x: &Array2<f64>, k: &[[f64; 7]; 7]) -> Array2<f64> {
    let (h, w) = x.dim();
    let mut out = Array2::<f64>::zeros((h, w));
    for i in 0..h {
        for j in 0..w {
            let mut acc = 0.0;
            for (ki, row) in k.iter().enumerate() {
                let ii = i as isize + ki as isize - 3;
                if ii < 0 || ii >= h as isize {
                    continue;
                }
                for (kj, kv) in row.iter().enumerate() {
                    let jj = j as isize + kj as isize - 3;
                    if jj < 0 || jj >= w as isize {
                        continue;
                    }
                    acc += kv * x[[ii as usize, jj as usize]];
                }
            }
            out[[i, j]] = acc;
        }
    }
    out
}

/// Weighted F-measure. Errors with `EmptyMask` when the ground truth has no
/// foreground (callers treat that image as skipped).
pub fn weighted_f_measure(p: &ArrayView2<f64>, g: &ArrayView2<f64>) -> Result<f64> {
    check_pair(p, g)?;
    let (h, w) = g.dim();
    let fg_count = g.iter().filter(|&&v| v >= 0.5).count();
    if fg_count == 0 {
        return Err(Error::EmptyMask);
    }

    let mut error = Array2::<f64>::zeros((h, w));
    for i in 0..h {
        for j in 0..w {
            error[[i, j]] = (p[[i, j]] - g[[i, j]]).abs();
        }
    }

    let (dist, nearest) = distance_transform(g);
    // Background errors take the value of the nearest foreground pixel before
    // smoothing.
    let mut et = error.clone();
    for i in 0..h {
        for j in 0..w {
            if g[[i, j]] < 0.5 {
                let (si, sj) = nearest[[i, j]];
                et[[i, j]] = error[[si, sj]];
            }
        }
    }
    let ea = filter7(&et, &gaussian7());

    let decay = f64::ln(0.5) / 5.0;
    let mut tp_w = fg_count as f64;
    let mut fp_w = 0.0;
    let mut fg_err_sum = 0.0;
    for i in 0..h {
        for j in 0..w {
            if g[[i, j]] >= 0.5 {
                // Smoothed error replaces the raw one only where it is smaller.
                let ew = error[[i, j]].min(ea[[i, j]]);
                tp_w -= ew;
                fg_err_sum += ew;
            } else {
                let b = 2.0 - (decay * dist[[i, j]]).exp();
                fp_w += error[[i, j]] * b;
            }
        }
    }
    let recall = 1.0 - fg_err_sum / fg_count as f64;
    let precision = tp_w / (EPS + tp_w + fp_w);
    let q = 2.0 * recall * precision / (EPS + recall + precision);
    Ok(q.clamp(0.0, 1.0))
}

#[derive(Debug, Clone)]
pub struct CurveData {
    pub thresholds: Vec<f64>,
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
    pub f_beta: Vec<f64>,
}

impl CurveData {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("threshold,precision,recall,fbeta\n");
        for i in 0..self.thresholds.len() {
            out.push_str(&format!(
                "{:.10},{:.10},{:.10},{:.10}\n",
                self.thresholds[i], self.precision[i], self.recall[i], self.f_beta[i]
            ));
        }
        out
    }
}

pub const F_BETA_SQ: f64 = 0.3;

/// PR and F-beta sweeps over 256 thresholds i/255, with counts accumulated
/// across the whole set. Precision at zero positives is 1; recall over an
/// empty foreground is 1.
pub fn compute_curves(preds: &[Array2<f64>], gts: &[Array2<f64>]) -> Result<CurveData> {
    if preds.is_empty() || preds.len() != gts.len() {
        return Err(Error::EmptyList(format!(
            "curves need matching non-empty lists, got {} and {}",
            preds.len(),
            gts.len()
        )));
    }
    let mut pos_fg = [0u64; 256];
    let mut pos_bg = [0u64; 256];
    let mut total_fg = 0u64;
    let mut total_px = 0u64;
    for (p, g) in preds.iter().zip(gts.iter()) {
        check_pair(&p.view(), &g.view())?;
        for (pv, gv) in p.iter().zip(g.iter()) {
            // Highest threshold index at which this pixel stays positive.
            let idx = ((pv * 255.0) + 1e-9).floor().clamp(-1.0, 255.0);
            total_px += 1;
            let is_fg = *gv >= 0.5;
            if is_fg {
                total_fg += 1;
            }
            if idx >= 0.0 {
                if is_fg {
                    pos_fg[idx as usize] += 1;
                } else {
                    pos_bg[idx as usize] += 1;
                }
            }
        }
    }
    let _ = total_px;
    let mut thresholds = Vec::with_capacity(256);
    let mut precision = Vec::with_capacity(256);
    let mut recall = Vec::with_capacity(256);
    let mut f_beta = Vec::with_capacity(256);
    // Suffix sums: pixels with idx >= t are positive at threshold t.
    let mut tp_cum = 0u64;
    let mut fp_cum = 0u64;
    let mut tp_at = [0u64; 256];
    let mut fp_at = [0u64; 256];
    for t in (0..256).rev() {
        tp_cum += pos_fg[t];
        fp_cum += pos_bg[t];
        tp_at[t] = tp_cum;
        fp_at[t] = fp_cum;
    }
    for t in 0..256 {
        let tp = tp_at[t] as f64;
        let fp = fp_at[t] as f64;
        let pr = if tp + fp == 0.0 { 1.0 } else { tp / (tp + fp) };
        let rc = if total_fg == 0 {
            1.0
        } else {
            tp / total_fg as f64
        };
        let fb = if F_BETA_SQ * pr + rc == 0.0 {
            0.0
        } else {
            (1.0 + F_BETA_SQ) * pr * rc / (F_BETA_SQ * pr + rc)
        };
        thresholds.push(t as f64 / 255.0);
        precision.push(pr);
        recall.push(rc);
        f_beta.push(fb);
    }
    Ok(CurveData {
        thresholds,
        precision,
        recall,
        f_beta,
    })
}
