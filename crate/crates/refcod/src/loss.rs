//! BCE + IoU supervision over the four prediction maps, in two forms: plain
//! f64 functions for reporting/tests and tape builders for training. An
//! optional pixel-weighted variant (border-emphasizing weights) sits behind
//! `loss.weighted`.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use ndarray::{Array4, ArrayD, ArrayViewD, Ix4};

pub const BCE_EPSILON: f64 = 1e-7;
pub const IOU_SMOOTHING: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossReport {
    pub total: f64,
    /// (bce, iou) per supervised map: scale2, scale3, scale4, seg.
    pub per_term: [(f64, f64); 4],
}

impl LossReport {
    pub fn term_sum(&self) -> f64 {
        self.per_term.iter().map(|(b, i)| b + i).sum()
    }
}

fn check_shapes(p: &ArrayViewD<f64>, g: &ArrayViewD<f64>) -> Result<()> {
    if p.shape() != g.shape() {
        return Err(Error::ShapeMismatch(format!(
            "prediction {:?} vs ground truth {:?}",
            p.shape(),
            g.shape()
        )));
    }
    Ok(())
}

/// Mean binary cross entropy with predictions clamped to
/// [epsilon, 1-epsilon].
pub fn bce_loss(p: &ArrayViewD<f64>, g: &ArrayViewD<f64>) -> Result<f64> {
    check_shapes(p, g)?;
    let mut acc = 0.0;
    for (pv, gv) in p.iter().zip(g.iter()) {
        let pc = pv.clamp(BCE_EPSILON, 1.0 - BCE_EPSILON);
        acc -= gv * pc.ln() + (1.0 - gv) * (1.0 - pc).ln();
    }
    Ok(acc / p.len() as f64)
}

/// Smoothed IoU loss: 1 - (sum(p*g)+s) / (sum(p)+sum(g)-sum(p*g)+s).
pub fn iou_loss(p: &ArrayViewD<f64>, g: &ArrayViewD<f64>) -> Result<f64> {
    check_shapes(p, g)?;
    let mut inter = 0.0;
    let mut sp = 0.0;
    let mut sg = 0.0;
    for (pv, gv) in p.iter().zip(g.iter()) {
        inter += pv * gv;
        sp += pv;
        sg += gv;
    }
    Ok(1.0 - (inter + IOU_SMOOTHING) / (sp + sg - inter + IOU_SMOOTHING))
}

/// Sum of BCE + IoU over the four supervised maps, itemized.
pub fn structure_loss(preds: &[ArrayD<f64>; 4], g: &ArrayD<f64>) -> Result<LossReport> {
    let mut per_term = [(0.0, 0.0); 4];
    let mut total = 0.0;
    for (i, p) in preds.iter().enumerate() {
        let b = bce_loss(&p.view(), &g.view())?;
        let u = iou_loss(&p.view(), &g.view())?;
        per_term[i] = (b, u);
        total += b + u;
    }
    Ok(LossReport { total, per_term })
}

/// 31x31 box filter with zero padding, divisor fixed at 31^2 (padding counts
/// toward the average). Used for the pixel-weight map.
fn box31(g: &Array4<f64>) -> Array4<f64> {
    let (n, c, h, w) = g.dim();
    let r = 15isize;
    let mut out = Array4::<f64>::zeros((n, c, h, w));
    for ni in 0..n {
        for ci in 0..c {
            // Integral image with one row/col of zeros at the front.
            let mut integral = ndarray::Array2::<f64>::zeros((h + 1, w + 1));
            for i in 0..h {
                for j in 0..w {
                    integral[[i + 1, j + 1]] = g[[ni, ci, i, j]] + integral[[i, j + 1]]
                        + integral[[i + 1, j]]
                        - integral[[i, j]];
                }
            }
            let sum_rect = |i0: isize, j0: isize, i1: isize, j1: isize| -> f64 {
                let i0 = i0.clamp(0, h as isize) as usize;
                let j0 = j0.clamp(0, w as isize) as usize;
                let i1 = i1.clamp(0, h as isize) as usize;
                let j1 = j1.clamp(0, w as isize) as usize;
                integral[[i1, j1]] - integral[[i0, j1]] - integral[[i1, j0]] + integral[[i0, j0]]
            };
            for i in 0..h {
                for j in 0..w {
                    let ii = i as isize;
                    let jj = j as isize;
                    out[[ni, ci, i, j]] =
                        sum_rect(ii - r, jj - r, ii + r + 1, jj + r + 1) / (31.0 * 31.0);
                }
            }
        }
    }
    out
}

/// Border-emphasizing weights: 1 + 5*|box31(g) - g|.
pub fn pixel_weights(g: &Array4<f64>) -> Array4<f64> {
    let blurred = box31(g);
    let mut w = blurred;
    ndarray::Zip::from(&mut w).and(g).for_each(|wv, gv| {
        *wv = 1.0 + 5.0 * (*wv - gv).abs();
    });
    w
}

/// Element-wise BCE map on the tape (no reduction).
fn bce_pixels(t: &mut Tape, p: Var, g: Var) -> Var {
    let shape = t.shape(p).to_vec();
    let ones = t.constant(ArrayD::from_elem(ndarray::IxDyn(&shape), 1.0));
    let pc = t.clamp(p, BCE_EPSILON, 1.0 - BCE_EPSILON);
    let ln_p = t.ln(pc);
    let one_minus_p = t.sub(ones, pc);
    let ln_omp = t.ln(one_minus_p);
    let one_minus_g = t.sub(ones, g);
    let pos = t.mul(g, ln_p);
    let neg = t.mul(one_minus_g, ln_omp);
    let s = t.add(pos, neg);
    t.scale(s, -1.0)
}

/// Mean BCE on the tape.
pub fn bce_graph(t: &mut Tape, p: Var, g: Var) -> Var {
    let px = bce_pixels(t, p, g);
    t.mean_all(px)
}

/// Per-image smoothed IoU loss on the tape, averaged over the batch.
pub fn iou_graph(t: &mut Tape, p: Var, g: Var) -> Var {
    let pg = t.mul(p, g);
    let inter = t.spatial_sum(pg);
    let sp = t.spatial_sum(p);
    let sg = t.spatial_sum(g);
    let sum = t.add(sp, sg);
    let union = t.sub(sum, inter);
    let numer = t.add_scalar(inter, IOU_SMOOTHING);
    let denom = t.add_scalar(union, IOU_SMOOTHING);
    let ratio = t.div(numer, denom);
    let neg = t.scale(ratio, -1.0);
    let loss = t.add_scalar(neg, 1.0);
    t.mean_all(loss)
}

/// Weighted BCE: per-image weighted mean of the BCE map, averaged over the
/// batch. Weights are constants derived from the ground truth.
fn weighted_bce_graph(t: &mut Tape, p: Var, g: Var, w: Var) -> Var {
    let px = bce_pixels(t, p, g);
    let wpx = t.mul(px, w);
    let num = t.spatial_sum(wpx);
    let den = t.spatial_sum(w);
    let ratio = t.div(num, den);
    t.mean_all(ratio)
}

/// Weighted IoU in the border-emphasizing style: intersection and union are
/// weight-scaled per image.
fn weighted_iou_graph(t: &mut Tape, p: Var, g: Var, w: Var) -> Var {
    let pg = t.mul(p, g);
    let pgw = t.mul(pg, w);
    let inter = t.spatial_sum(pgw);
    let s = t.add(p, g);
    let sw = t.mul(s, w);
    let union_all = t.spatial_sum(sw);
    let union = t.sub(union_all, inter);
    let numer = t.add_scalar(inter, IOU_SMOOTHING);
    let denom = t.add_scalar(union, IOU_SMOOTHING);
    let ratio = t.div(numer, denom);
    let neg = t.scale(ratio, -1.0);
    let loss = t.add_scalar(neg, 1.0);
    t.mean_all(loss)
}

pub struct LossVars {
    pub total: Var,
    pub terms: [(Var, Var); 4],
}

/// Structure loss over the four maps on the tape. `gt` must be a constant
/// (N,1,H,W) tensor.
pub fn structure_loss_graph(
    t: &mut Tape,
    preds: [Var; 4],
    gt: Var,
    weighted: bool,
) -> LossVars {
    let weight_var = weighted.then(|| {
        let g4 = t
            .value(gt)
            .clone()
            .into_dimensionality::<Ix4>()
            .expect("gt is 4-d");
        let w = pixel_weights(&g4);
        t.constant(w)
    });
    let mut terms = Vec::with_capacity(4);
    let mut total: Option<Var> = None;
    for p in preds {
        let (b, u) = match weight_var {
            Some(w) => (
                weighted_bce_graph(t, p, gt, w),
                weighted_iou_graph(t, p, gt, w),
            ),
            None => (bce_graph(t, p, gt), iou_graph(t, p, gt)),
        };
        let pair = t.add(b, u);
        total = Some(match total {
            Some(acc) => t.add(acc, pair),
            None => pair,
        });
        terms.push((b, u));
    }
    LossVars {
        total: total.unwrap(),
        terms: [terms[0], terms[1], terms[2], terms[3]],
    }
}

impl LossVars {
    pub fn report(&self, t: &Tape) -> LossReport {
        LossReport {
            total: t.scalar(self.total),
            per_term: self.terms.map(|(b, u)| (t.scalar(b), t.scalar(u))),
        }
    }
}
