//! Definition-level metric oracles: direct loop transcriptions of the pinned
//! measure definitions, independent of the library implementations.

use ndarray::Array2;

const EPS: f64 = f64::EPSILON;

pub fn mae(p: &Array2<f64>, g: &Array2<f64>) -> f64 {
    let mut acc = 0.0;
    let mut n = 0.0;
    for (a, b) in p.iter().zip(g.iter()) {
        acc += (a - b).abs();
        n += 1.0;
    }
    acc / n
}

fn mean_of(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

fn sample_std(values: &[f64]) -> f64 {
    if values.len() < 2 {
        return 0.0;
    }
    let m = mean_of(values);
    let var = values.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (values.len() as f64 - 1.0);
    var.sqrt()
}

fn object_term(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let x = mean_of(values);
    2.0 * x / (x * x + 1.0 + sample_std(values) + EPS)
}

fn ssim_block(p: &[f64], g: &[f64]) -> f64 {
    let n = p.len() as f64;
    let mx = mean_of(p);
    let my = mean_of(g);
    let mut vx = 0.0;
    let mut vy = 0.0;
    let mut cxy = 0.0;
    for (a, b) in p.iter().zip(g.iter()) {
        vx += (a - mx) * (a - mx);
        vy += (b - my) * (b - my);
        cxy += (a - mx) * (b - my);
    }
    vx /= n - 1.0 + EPS;
    vy /= n - 1.0 + EPS;
    cxy /= n - 1.0 + EPS;
    let alpha = 4.0 * mx * my * cxy;
    let beta = (mx * mx + my * my) * (vx + vy);
    if alpha != 0.0 {
        alpha / (beta + EPS)
    } else if beta == 0.0 {
        1.0
    } else {
        0.0
    }
}

pub fn s_measure(p: &Array2<f64>, g: &Array2<f64>) -> f64 {
    let (h, w) = g.dim();
    let total: f64 = g.sum();
    if total == 0.0 {
        return (1.0 - p.sum() / p.len() as f64).clamp(0.0, 1.0);
    }
    if total == (h * w) as f64 {
        return (p.sum() / p.len() as f64).clamp(0.0, 1.0);
    }

    // Object part.
    let mut fg = Vec::new();
    let mut bg = Vec::new();
    for i in 0..h {
        for j in 0..w {
            if g[[i, j]] >= 0.5 {
                fg.push(p[[i, j]]);
            } else {
                bg.push(1.0 - p[[i, j]]);
            }
        }
    }
    let u = fg.len() as f64 / (h * w) as f64;
    let s_obj = u * object_term(&fg) + (1.0 - u) * object_term(&bg);

    // Region part: centroid rounded on the half-pixel grid.
    let mut ci = 0.0;
    let mut cj = 0.0;
    for i in 0..h {
        for j in 0..w {
            ci += g[[i, j]] * i as f64;
            cj += g[[i, j]] * j as f64;
        }
    }
    let cut_i = (((ci / total) + 0.5).round() as usize).clamp(1, h);
    let cut_j = (((cj / total) + 0.5).round() as usize).clamp(1, w);
    let mut s_reg = 0.0;
    for (r0, r1, c0, c1) in [
        (0, cut_i, 0, cut_j),
        (0, cut_i, cut_j, w),
        (cut_i, h, 0, cut_j),
        (cut_i, h, cut_j, w),
    ] {
        if r1 == r0 || c1 == c0 {
            continue;
        }
        let mut pb = Vec::new();
        let mut gb = Vec::new();
        for i in r0..r1 {
            for j in c0..c1 {
                pb.push(p[[i, j]]);
                gb.push(g[[i, j]]);
            }
        }
        let weight = pb.len() as f64 / (h * w) as f64;
        s_reg += weight * ssim_block(&pb, &gb);
    }

    (0.5 * s_obj + 0.5 * s_reg).clamp(0.0, 1.0)
}

pub fn e_measure_adaptive(p: &Array2<f64>, g: &Array2<f64>) -> f64 {
    let (h, w) = g.dim();
    let n = (h * w) as f64;
    let threshold = (2.0 * p.sum() / n).min(1.0);
    let bin: Vec<f64> = p.iter().map(|&v| (v >= threshold) as u8 as f64).collect();
    let gt: Vec<f64> = g.iter().copied().collect();
    let fg: f64 = gt.iter().sum();
    if fg == 0.0 {
        return bin.iter().map(|b| 1.0 - b).sum::<f64>() / n;
    }
    if fg == n {
        return bin.iter().sum::<f64>() / n;
    }
    let mu_f = bin.iter().sum::<f64>() / n;
    let mu_g = fg / n;
    let mut acc = 0.0;
    for (b, t) in bin.iter().zip(gt.iter()) {
        let af = b - mu_f;
        let ag = t - mu_g;
        let align = 2.0 * ag * af / (ag * ag + af * af + EPS);
        acc += (align + 1.0) * (align + 1.0) / 4.0;
    }
    acc / n
}

/// Weighted F-measure with a brute-force distance transform and direct
/// filtering. Returns None for an all-background ground truth.
pub fn weighted_f(p: &Array2<f64>, g: &Array2<f64>) -> Option<f64> {
    let (h, w) = g.dim();
    let sites: Vec<(usize, usize)> = (0..h)
        .flat_map(|i| (0..w).map(move |j| (i, j)))
        .filter(|&(i, j)| g[[i, j]] >= 0.5)
        .collect();
    if sites.is_empty() {
        return None;
    }

    let mut error = Array2::<f64>::zeros((h, w));
    for i in 0..h {
        for j in 0..w {
            error[[i, j]] = (p[[i, j]] - g[[i, j]]).abs();
        }
    }

    // Brute-force nearest foreground site and distance.
    let mut dist = Array2::<f64>::zeros((h, w));
    let mut et = error.clone();
    for i in 0..h {
        for j in 0..w {
            if g[[i, j]] >= 0.5 {
                continue;
            }
            let mut best = f64::INFINITY;
            let mut arg = sites[0];
            for &(si, sj) in &sites {
                let d = (i as f64 - si as f64).powi(2) + (j as f64 - sj as f64).powi(2);
                if d < best {
                    best = d;
                    arg = (si, sj);
                }
            }
            dist[[i, j]] = best.sqrt();
            et[[i, j]] = error[[arg.0, arg.1]];
        }
    }

    // 7x7 Gaussian (sigma 5), zero padding, direct correlation.
    let mut kernel = [[0.0f64; 7]; 7];
    let mut ksum = 0.0;
    for (a, row) in kernel.iter_mut().enumerate() {
        for (b, v) in row.iter_mut().enumerate() {
            *v = (-(((a as f64 - 3.0).powi(2) + (b as f64 - 3.0).powi(2)) / 50.0)).exp();
            ksum += *v;
        }
    }
    let mut ea = Array2::<f64>::zeros((h, w));
    for i in 0..h {
        for j in 0..w {
            let mut acc = 0.0;
            for (a, row) in kernel.iter().enumerate() {
                for (b, v) in row.iter().enumerate() {
                    let ii = i as isize + a as isize - 3;
                    let jj = j as isize + b as isize - 3;
                    if ii >= 0 && jj >= 0 && (ii as usize) < h && (jj as usize) < w {
                        acc += v / ksum * et[[ii as usize, jj as usize]];
                    }
                }
            }
            ea[[i, j]] = acc;
        }
    }

    let fg_n = sites.len() as f64;
    let mut tp_w = fg_n;
    let mut fp_w = 0.0;
    let mut fg_err = 0.0;
    for i in 0..h {
        for j in 0..w {
            if g[[i, j]] >= 0.5 {
                let e = if ea[[i, j]] < error[[i, j]] {
                    ea[[i, j]]
                } else {
                    error[[i, j]]
                };
                tp_w -= e;
                fg_err += e;
            } else {
                let b = 2.0 - (f64::ln(0.5) / 5.0 * dist[[i, j]]).exp();
                fp_w += error[[i, j]] * b;
            }
        }
    }
    let recall = 1.0 - fg_err / fg_n;
    let precision = tp_w / (EPS + tp_w + fp_w);
    Some((2.0 * recall * precision / (EPS + recall + precision)).clamp(0.0, 1.0))
}

/// Brute-force masked average pooling for maps already at the feature size:
/// per-channel weighted mean over pixels.
pub fn masked_pool(features: &ndarray::Array4<f64>, map: &Array2<f64>) -> Array2<f64> {
    let (n, c, h, w) = features.dim();
    let mut out = Array2::<f64>::zeros((n, c));
    for ni in 0..n {
        for ci in 0..c {
            let mut num = 0.0;
            let mut den = 0.0;
            for i in 0..h {
                for j in 0..w {
                    num += map[[i, j]] * features[[ni, ci, i, j]];
                    den += map[[i, j]];
                }
            }
            out[[ni, ci]] = num / den;
        }
    }
    out
}

/// Exact block-mean downsampling for integer factors (independent of the
/// library's resize kernels).
pub fn block_mean(map: &Array2<f64>, oh: usize, ow: usize) -> Array2<f64> {
    let (h, w) = map.dim();
    assert!(h % oh == 0 && w % ow == 0);
    let fy = h / oh;
    let fx = w / ow;
    let mut out = Array2::<f64>::zeros((oh, ow));
    for i in 0..oh {
        for j in 0..ow {
            let mut acc = 0.0;
            for a in 0..fy {
                for b in 0..fx {
                    acc += map[[i * fy + a, j * fx + b]];
                }
            }
            out[[i, j]] = acc / (fy * fx) as f64;
        }
    }
    out
}
