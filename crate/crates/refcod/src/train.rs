//! Training loop: Adam with cosine-annealed learning rate, episode batching,
//! the single training step, and checkpoint save/restore.

use crate::checkpoint::Container;
use crate::config::RunConfig;
use crate::dataset::{sample_episode, DatasetIndex, Episode, Split};
use crate::error::{Error, Result};
use crate::imageio::stack_batch;
use crate::loss::{structure_loss_graph, LossReport};
use crate::model::{R2CNet, ReferenceInput};
use crate::nn::{splitmix64, ParamId, ParamStore};
use crate::reference::ForegroundProvider;
use ndarray::{Array3, Array4, ArrayD};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::HashMap;

pub struct Adam {
    pub lr0: f64,
    pub floor: f64,
    pub total_steps: u64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    pub step: u64,
    m: HashMap<usize, ArrayD<f64>>,
    v: HashMap<usize, ArrayD<f64>>,
}

impl Adam {
    pub fn new(lr0: f64, floor: f64, total_steps: u64) -> Self {
        Self {
            lr0,
            floor,
            total_steps,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: HashMap::new(),
            v: HashMap::new(),
        }
    }

    /// Cosine annealing from lr0 at step 0 to the floor at the final
    /// scheduled step.
    pub fn lr_at(&self, step: u64) -> f64 {
        if self.total_steps <= 1 {
            return self.lr0;
        }
        let t = step.min(self.total_steps - 1) as f64;
        let horizon = (self.total_steps - 1) as f64;
        self.floor
            + 0.5 * (self.lr0 - self.floor) * (1.0 + (std::f64::consts::PI * t / horizon).cos())
    }

    /// One update over the gradients of this step (ascending parameter-id
    /// order for determinism). Advances the step counter.
    pub fn apply(&mut self, store: &mut ParamStore, grads: &[(ParamId, ArrayD<f64>)]) {
        let lr = self.lr_at(self.step);
        let t = (self.step + 1) as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (id, g) in grads {
            if !store.trainable(*id) {
                continue;
            }
            let m = self
                .m
                .entry(id.index())
                .or_insert_with(|| ArrayD::zeros(g.raw_dim()));
            let v = self
                .v
                .entry(id.index())
                .or_insert_with(|| ArrayD::zeros(g.raw_dim()));
            ndarray::Zip::from(&mut *m).and(g).for_each(|mv, gv| {
                *mv = self.beta1 * *mv + (1.0 - self.beta1) * gv;
            });
            ndarray::Zip::from(&mut *v).and(g).for_each(|vv, gv| {
                *vv = self.beta2 * *vv + (1.0 - self.beta2) * gv * gv;
            });
            let value = store.value_mut(*id);
            ndarray::Zip::from(value)
                .and(&*m)
                .and(&*v)
                .for_each(|p, mv, vv| {
                    let mh = mv / bc1;
                    let vh = vv / bc2;
                    *p -= lr * mh / (vh.sqrt() + self.eps);
                });
        }
        self.step += 1;
    }
}

/// One optimizer update on a batch of episodes. The foreground provider runs
/// outside the graph, so its parameters can never receive gradients.
pub fn training_step(
    model: &mut R2CNet,
    provider: &ForegroundProvider,
    opt: &mut Adam,
    cfg: &RunConfig,
    episodes: &[Episode],
) -> Result<LossReport> {
    if episodes.is_empty() {
        return Err(Error::EmptyList("training batch is empty".into()));
    }
    let camo: Vec<Array3<f64>> = episodes.iter().map(|e| e.camo_image.clone()).collect();
    let gt: Vec<Array3<f64>> = episodes.iter().map(|e| e.gt_mask.clone()).collect();
    let camo = stack_batch(&camo);
    let gt = stack_batch(&gt);

    let k = cfg.data.k;
    let mut ref_storage: Option<(Array4<f64>, Array4<f64>)> = None;
    if k > 0 {
        let mut images = Vec::with_capacity(episodes.len() * k);
        let mut masks = Vec::with_capacity(episodes.len() * k);
        for e in episodes {
            if e.ref_images.len() != k {
                return Err(Error::ShapeMismatch(format!(
                    "episode has {} references, config wants {k}",
                    e.ref_images.len()
                )));
            }
            for (img, m) in e.ref_images.iter().zip(&e.ref_masks) {
                images.push(img.clone());
                masks.push(m.clone());
            }
        }
        let images = stack_batch(&images);
        let maps = provider.maps(&images, &masks)?;
        ref_storage = Some((images, maps));
    }

    let refin = match &ref_storage {
        Some((images, maps)) => ReferenceInput::Refs { images, maps, k },
        None => ReferenceInput::Baseline,
    };

    let mut tape = crate::autodiff::Tape::new();
    let out = model.forward(&mut tape, &camo, &refin)?;
    let gt_var = tape.constant(gt);
    let loss = structure_loss_graph(&mut tape, out.predictions(), gt_var, cfg.loss.weighted);
    let report = loss.report(&tape);
    if !report.total.is_finite() {
        return Err(Error::NonFiniteLoss {
            step: opt.step,
            detail: format!("total={}, terms={:?}", report.total, report.per_term),
        });
    }
    tape.backward(loss.total);
    let grads = tape.param_grads();
    opt.apply(&mut model.store, &grads);
    Ok(report)
}

/// A row of the per-step loss log.
#[derive(Debug, Clone)]
pub struct LossRow {
    pub step: u64,
    pub lr: f64,
    pub report: LossReport,
}

pub fn loss_csv_header() -> &'static str {
    "step,lr,total,bce_scale2,iou_scale2,bce_scale3,iou_scale3,bce_scale4,iou_scale4,bce_seg,iou_seg"
}

impl LossRow {
    pub fn to_csv(&self) -> String {
        let t = &self.report.per_term;
        format!(
            "{},{:.10},{:.10},{:.10},{:.10},{:.10},{:.10},{:.10},{:.10},{:.10},{:.10}",
            self.step,
            self.lr,
            self.report.total,
            t[0].0,
            t[0].1,
            t[1].0,
            t[1].1,
            t[2].0,
            t[2].1,
            t[3].0,
            t[3].1
        )
    }
}

/// Deterministic episode scheduler plus the glue between config, model,
/// provider and optimizer.
pub struct Trainer {
    pub model: R2CNet,
    pub provider: ForegroundProvider,
    pub opt: Adam,
    pub cfg: RunConfig,
    pub index: DatasetIndex,
    order: Vec<usize>,
    cursor: usize,
    epoch: u64,
}

impl Trainer {
    pub fn new(cfg: &RunConfig) -> Result<Self> {
        let index = crate::dataset::load_index(std::path::Path::new(&cfg.data.root), Split::Train)?;
        Self::with_index(cfg, index)
    }

    pub fn with_index(cfg: &RunConfig, index: DatasetIndex) -> Result<Self> {
        cfg.validate()?;
        if index.camo_records.is_empty() {
            return Err(Error::Data("no camouflage records in the train split".into()));
        }
        let model = R2CNet::new(cfg, cfg.train.seed)?;
        let provider = ForegroundProvider::from_config(&cfg.reference.provider)?;
        let opt = Adam::new(cfg.train.lr, cfg.train.lr_floor, cfg.train.steps);
        Ok(Self {
            model,
            provider,
            opt,
            cfg: cfg.clone(),
            index,
            order: Vec::new(),
            cursor: 0,
            epoch: 0,
        })
    }

    fn refill_order(&mut self) {
        let mut order: Vec<usize> = (0..self.index.camo_records.len()).collect();
        let mut rng =
            ChaCha8Rng::seed_from_u64(splitmix64(self.cfg.train.seed ^ (0xE0C0 + self.epoch)));
        order.shuffle(&mut rng);
        self.order = order;
        self.cursor = 0;
        self.epoch += 1;
    }

    /// Next deterministic batch of episodes.
    pub fn next_batch(&mut self) -> Result<Vec<Episode>> {
        let n = self.cfg.train.batch_size.min(self.index.camo_records.len());
        let mut episodes = Vec::with_capacity(n);
        for slot in 0..n {
            if self.cursor >= self.order.len() {
                self.refill_order();
            }
            let record = self.order[self.cursor];
            self.cursor += 1;
            let seed = splitmix64(
                self.cfg.train.seed ^ (self.opt.step << 16) ^ (slot as u64) << 4 ^ 0xBA7C,
            );
            episodes.push(sample_episode(
                &self.index,
                record,
                self.cfg.data.k,
                seed,
                self.cfg.data.image_size,
            )?);
        }
        Ok(episodes)
    }

    pub fn step(&mut self, episodes: &[Episode]) -> Result<LossReport> {
        training_step(
            &mut self.model,
            &self.provider,
            &mut self.opt,
            &self.cfg,
            episodes,
        )
    }

    /// Run the configured number of steps, invoking `on_step` after each.
    pub fn run(&mut self, mut on_step: impl FnMut(&LossRow)) -> Result<()> {
        while self.opt.step < self.cfg.train.steps {
            let lr = self.opt.lr_at(self.opt.step);
            let step = self.opt.step;
            let episodes = self.next_batch()?;
            let report = self.step(&episodes)?;
            on_step(&LossRow { step, lr, report });
        }
        Ok(())
    }

    pub fn save_checkpoint(&self, path: &std::path::Path) -> Result<String> {
        let mut c = Container::new(self.opt.step, Some(self.cfg.to_toml()));
        for id in self.model.store.ids() {
            let name = self.model.store.name(id);
            c.insert(&format!("param/{name}"), self.model.store.value(id).clone());
            if let Some(m) = self.opt.m.get(&id.index()) {
                c.insert(&format!("adam/m/{name}"), m.clone());
            }
            if let Some(v) = self.opt.v.get(&id.index()) {
                c.insert(&format!("adam/v/{name}"), v.clone());
            }
        }
        c.save(path)?;
        Ok(c.manifest_json())
    }

    /// Rebuild a trainer from a checkpoint: the architecture comes from the
    /// stored config snapshot; `cfg_overrides`, when given, replaces
    /// run-level settings (data root, output paths) but must agree on the
    /// architecture.
    pub fn load_checkpoint(path: &std::path::Path, index: DatasetIndex) -> Result<Self> {
        let (model, cfg, opt) = load_model_and_state(path)?;
        let provider = ForegroundProvider::from_config(&cfg.reference.provider)?;
        Ok(Self {
            model,
            provider,
            opt,
            cfg,
            index,
            order: Vec::new(),
            cursor: 0,
            epoch: 0,
        })
    }
}

/// Restore a model (and optimizer state) from a training checkpoint.
pub fn load_model_and_state(path: &std::path::Path) -> Result<(R2CNet, RunConfig, Adam)> {
    let c = Container::load(path)?;
    let cfg_text = c
        .header
        .config
        .as_ref()
        .ok_or_else(|| Error::Checkpoint("checkpoint has no config snapshot".into()))?;
    let cfg = RunConfig::from_toml(cfg_text)?;
    let mut model = R2CNet::new(&cfg, cfg.train.seed)?;
    for key in c.keys_with_prefix("param/").map(String::from).collect::<Vec<_>>() {
        let name = key.trim_start_matches("param/").to_string();
        model.store.set_value(&name, c.get(&key).unwrap().clone())?;
    }
    let mut opt = Adam::new(cfg.train.lr, cfg.train.lr_floor, cfg.train.steps);
    opt.step = c.header.step;
    for id in model.store.ids() {
        let name = model.store.name(id).to_string();
        if let Some(m) = c.get(&format!("adam/m/{name}")) {
            opt.m.insert(id.index(), m.clone());
        }
        if let Some(v) = c.get(&format!("adam/v/{name}")) {
            opt.v.insert(id.index(), v.clone());
        }
    }
    Ok((model, cfg, opt))
}
