//! Dataset-level evaluation: per-episode inference, metric averaging,
//! single/multi-object splits, curve accumulation, and report emission.

use crate::autodiff::Tape;
use crate::config::RunConfig;
use crate::dataset::{sample_episode, DatasetIndex, Episode};
use crate::error::{Error, Result};
use crate::imageio;
use crate::metrics::{self, CurveData};
use crate::model::{R2CNet, ReferenceInput};
use crate::reference::ForegroundProvider;
use ndarray::{Array2, Array3, Array4, Ix4};
use serde::Serialize;
use std::collections::BTreeMap;

#[derive(Debug, Clone, Copy, Default, Serialize, PartialEq)]
pub struct MetricsBundle {
    pub sm: f64,
    pub ae: f64,
    pub wf: f64,
    pub mae: f64,
    pub n: usize,
    pub wf_skipped: usize,
}

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct MetricsReport {
    #[serde(flatten)]
    pub overall: MetricsBundle,
    pub splits: BTreeMap<String, MetricsBundle>,
}

#[derive(Debug, Clone, Copy)]
pub struct PerImageMetrics {
    pub record_id: usize,
    pub sm: f64,
    pub ae: f64,
    pub wf: Option<f64>,
    pub mae: f64,
    pub n_objects: Option<u32>,
}

#[derive(Default)]
struct Accumulator {
    sm: f64,
    ae: f64,
    wf: f64,
    mae: f64,
    n: usize,
    wf_n: usize,
    wf_skipped: usize,
}

impl Accumulator {
    fn push(&mut self, m: &PerImageMetrics) {
        self.sm += m.sm;
        self.ae += m.ae;
        self.mae += m.mae;
        self.n += 1;
        match m.wf {
            Some(v) => {
                self.wf += v;
                self.wf_n += 1;
            }
            None => self.wf_skipped += 1,
        }
    }

    fn bundle(&self) -> MetricsBundle {
        let d = self.n.max(1) as f64;
        MetricsBundle {
            sm: self.sm / d,
            ae: self.ae / d,
            wf: self.wf / self.wf_n.max(1) as f64,
            mae: self.mae / d,
            n: self.n,
            wf_skipped: self.wf_skipped,
        }
    }
}

/// Run one episode through the model and return the final probability map
/// as (H,W).
pub fn infer_episode(
    model: &R2CNet,
    provider: &ForegroundProvider,
    episode: &Episode,
    k: usize,
) -> Result<Array2<f64>> {
    let camo = imageio::stack_batch(std::slice::from_ref(&episode.camo_image));
    let mut tape = Tape::new();
    let out = if k == 0 {
        model.forward(&mut tape, &camo, &ReferenceInput::Baseline)?
    } else {
        let images = imageio::stack_batch(&episode.ref_images);
        let maps = provider.maps(&images, &episode.ref_masks)?;
        model.forward(
            &mut tape,
            &camo,
            &ReferenceInput::Refs {
                images: &images,
                maps: &maps,
                k,
            },
        )?
    };
    let m = tape
        .value(out.m_seg)
        .clone()
        .into_dimensionality::<Ix4>()
        .expect("m_seg is 4-d");
    let (_, _, h, w) = m.dim();
    Ok(m.into_shape_with_order((h, w)).expect("single map"))
}

fn mask_hw(m: &Array3<f64>) -> Array2<f64> {
    let (_, h, w) = m.dim();
    m.clone()
        .into_shape_with_order((h, w))
        .expect("single-channel mask")
}

pub struct EvaluationOutcome {
    pub report: MetricsReport,
    pub curves: CurveData,
    pub per_image: Vec<PerImageMetrics>,
}

/// Evaluate every camo record of the index with `k` references
/// (`k = 0` bypasses the reference branch and uses the learned constant).
/// Deterministic given `eval_seed`.
pub fn evaluate_dataset(
    model: &R2CNet,
    provider: &ForegroundProvider,
    index: &DatasetIndex,
    k: usize,
    image_size: usize,
    eval_seed: u64,
) -> Result<EvaluationOutcome> {
    if index.camo_records.is_empty() {
        return Err(Error::Data("no camo records to evaluate".into()));
    }
    let mut per_image = Vec::with_capacity(index.camo_records.len());
    let mut preds = Vec::with_capacity(index.camo_records.len());
    let mut gts = Vec::with_capacity(index.camo_records.len());
    for record_id in 0..index.camo_records.len() {
        let episode = sample_episode(index, record_id, k, eval_seed, image_size)?;
        let pred = infer_episode(model, provider, &episode, k)?;
        let gt = mask_hw(&episode.gt_mask);
        let sm = metrics::s_measure(&pred.view(), &gt.view())?;
        let ae = metrics::e_measure_adaptive(&pred.view(), &gt.view())?;
        let mae = metrics::mae(&pred.view(), &gt.view())?;
        let wf = match metrics::weighted_f_measure(&pred.view(), &gt.view()) {
            Ok(v) => Some(v),
            Err(Error::EmptyMask) => None,
            Err(e) => return Err(e),
        };
        per_image.push(PerImageMetrics {
            record_id,
            sm,
            ae,
            wf,
            mae,
            n_objects: index.camo_records[record_id].n_objects,
        });
        preds.push(pred);
        gts.push(gt);
    }

    let mut overall = Accumulator::default();
    let mut single = Accumulator::default();
    let mut multi = Accumulator::default();
    let mut have_labels = false;
    for m in &per_image {
        overall.push(m);
        match m.n_objects {
            Some(n) => {
                have_labels = true;
                if n <= 1 {
                    single.push(m);
                } else {
                    multi.push(m);
                }
            }
            None => {}
        }
    }
    let mut splits = BTreeMap::new();
    if have_labels {
        splits.insert("single_obj".to_string(), single.bundle());
        splits.insert("multi_obj".to_string(), multi.bundle());
    }
    let curves = metrics::compute_curves(&preds, &gts)?;
    Ok(EvaluationOutcome {
        report: MetricsReport {
            overall: overall.bundle(),
            splits,
        },
        curves,
        per_image,
    })
}

impl MetricsReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Aligned plain-text table.
    pub fn to_table(&self) -> String {
        let mut rows = vec![("overall".to_string(), self.overall)];
        for (name, b) in &self.splits {
            rows.push((name.clone(), *b));
        }
        let mut out = String::new();
        out.push_str(&format!(
            "{:<12} {:>8} {:>8} {:>8} {:>8} {:>6} {:>11}\n",
            "subset", "sm", "ae", "wf", "mae", "n", "wf_skipped"
        ));
        for (name, b) in rows {
            out.push_str(&format!(
                "{:<12} {:>8.4} {:>8.4} {:>8.4} {:>8.4} {:>6} {:>11}\n",
                name, b.sm, b.ae, b.wf, b.mae, b.n, b.wf_skipped
            ));
        }
        out
    }
}

/// Predict a mask for one image at its native resolution: stretch to the
/// model size, run inference, stretch the probability map back.
pub fn predict_image(
    model: &R2CNet,
    provider: &ForegroundProvider,
    cfg: &RunConfig,
    camo: &Array3<f64>,
    refs: &[Array3<f64>],
    ref_masks: &[Option<Array3<f64>>],
) -> Result<Array3<f64>> {
    let (_, h0, w0) = camo.dim();
    let size = cfg.data.image_size;
    let episode = Episode {
        camo_image: imageio::resize_chw(camo, size, size),
        gt_mask: Array3::zeros((1, size, size)),
        ref_images: refs.iter().map(|r| imageio::resize_chw(r, size, size)).collect(),
        ref_masks: ref_masks
            .iter()
            .map(|m| m.as_ref().map(|m| imageio::resize_chw(m, size, size)))
            .collect(),
        category_id: 0,
        category_name: String::new(),
        record_id: 0,
    };
    let pred = infer_episode(model, provider, &episode, refs.len())?;
    let (h, w) = pred.dim();
    let pred3 = pred.into_shape_with_order((1, h, w)).expect("hw map");
    Ok(imageio::resize_chw(&pred3, h0, w0))
}

/// Evaluation on externally supplied (prediction, ground-truth) pairs;
/// used for metric plumbing tests and the stats command.
pub fn metrics_on_pairs(pairs: &[(Array2<f64>, Array2<f64>)]) -> Result<MetricsBundle> {
    let mut acc = Accumulator::default();
    for (i, (p, g)) in pairs.iter().enumerate() {
        let wf = match metrics::weighted_f_measure(&p.view(), &g.view()) {
            Ok(v) => Some(v),
            Err(Error::EmptyMask) => None,
            Err(e) => return Err(e),
        };
        acc.push(&PerImageMetrics {
            record_id: i,
            sm: metrics::s_measure(&p.view(), &g.view())?,
            ae: metrics::e_measure_adaptive(&p.view(), &g.view())?,
            wf,
            mae: metrics::mae(&p.view(), &g.view())?,
            n_objects: None,
        });
    }
    Ok(acc.bundle())
}

// Keep Array4 in the public signature space for downstream callers.
pub type Batch = Array4<f64>;
