//! The full dual-branch model: shared encoder, reference branch, referring
//! mask generation, feature enrichment, and the segmentation decoder.

use crate::autodiff::{Tape, Var};
use crate::backbone::{Encoder, FeaturePyramid, PyramidProjection, ResnetEncoder, ToyEncoder};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::head::DecodeHead;
use crate::nn::ParamStore;
use crate::reference::ReferenceHead;
use crate::rfe::Rfe;
use crate::rmg::{KernelMode, Rmg};
use ndarray::Array4;

/// How the common representation is produced for a forward pass.
pub enum ReferenceInput<'a> {
    /// K referring images per episode, flattened to (N*K,3,H,W), with
    /// foreground maps (N*K,1,H,W) from the configured provider.
    Refs {
        images: &'a Array4<f64>,
        maps: &'a Array4<f64>,
        k: usize,
    },
    /// Reference-free mode: the learned constant representation.
    Baseline,
}

pub struct ForwardOut {
    pub pyramid: FeaturePyramid,
    pub representation: Var,
    pub fused: Var,
    pub heatmap: Var,
    pub enriched: Var,
    pub scales: [Var; 3],
    pub m_scale: [Var; 3],
    pub m_seg: Var,
}

impl ForwardOut {
    pub fn predictions(&self) -> [Var; 4] {
        [self.m_scale[0], self.m_scale[1], self.m_scale[2], self.m_seg]
    }
}

pub struct R2CNet {
    pub store: ParamStore,
    pub encoder: Encoder,
    pub projection: PyramidProjection,
    pub reference: ReferenceHead,
    pub rmg: Rmg,
    pub rfe: Rfe,
    pub decoder: DecodeHead,
    pub c_d: usize,
}

impl R2CNet {
    pub fn new(cfg: &RunConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let c_d = cfg.model.c_d;
        let mut store = ParamStore::new();

        let encoder = if cfg.model.encoder == "toy" {
            Encoder::Toy(ToyEncoder::new(&mut store, seed))
        } else if let Some(path) = cfg.model.encoder.strip_prefix("resnet50:") {
            let enc = Encoder::Resnet50(ResnetEncoder::new(&mut store, seed));
            if path.is_empty() {
                return Err(Error::Config(
                    "resnet50 encoder needs a weights path: resnet50:<path>".into(),
                ));
            }
            crate::checkpoint::load_params_only(std::path::Path::new(path), &mut store)
                .map_err(|e| Error::Data(format!("cannot load encoder weights: {e}")))?;
            enc
        } else {
            return Err(Error::Config(format!(
                "unknown encoder '{}'",
                cfg.model.encoder
            )));
        };

        let channels = encoder.channels();
        let projection = PyramidProjection::new(&mut store, seed, channels, c_d);
        let reference = ReferenceHead::new(&mut store, seed, channels[2], c_d);
        let kernel_mode = if cfg.rmg.kernel_from_e == "identity" {
            KernelMode::Identity
        } else {
            KernelMode::Linear
        };
        let rmg = Rmg::new(&mut store, seed, c_d, cfg.rmg.lstm_kernel, kernel_mode);
        let rfe = Rfe::new(&mut store, seed, c_d, cfg.cross_scale_path());
        let decoder = DecodeHead::new(&mut store, seed, c_d);

        Ok(Self {
            store,
            encoder,
            projection,
            reference,
            rmg,
            rfe,
            decoder,
            c_d,
        })
    }

    /// Total scalar parameter count.
    pub fn param_count(&self) -> usize {
        self.store.scalar_count()
    }

    /// Common representation (N,c_d): masked-average-pooled deepest features
    /// of the referring images, projected and averaged per episode; or the
    /// learned constant in reference-free mode.
    pub fn compute_representation(
        &self,
        t: &mut Tape,
        refin: &ReferenceInput,
        n: usize,
    ) -> Result<Var> {
        match refin {
            ReferenceInput::Baseline => Ok(self.reference.baseline(t, &self.store, n)),
            ReferenceInput::Refs { images, maps, k } => {
                if *k == 0 || images.dim().0 != n * k {
                    return Err(Error::ShapeMismatch(format!(
                        "expected {n}*{k} referring images, got {}",
                        images.dim().0
                    )));
                }
                let imgs = t.constant((*images).clone());
                let maps = t.constant((*maps).clone());
                let raw = self.encoder.extract_pyramid(t, &self.store, imgs)?;
                let pooled = self
                    .reference
                    .masked_average_pool(t, &self.store, raw.f4, maps)?;
                self.reference.aggregate(t, pooled, *k)
            }
        }
    }

    pub fn forward(
        &self,
        t: &mut Tape,
        camo: &Array4<f64>,
        refin: &ReferenceInput,
    ) -> Result<ForwardOut> {
        let (n, _c, h, w) = camo.dim();
        let image = t.constant(camo.clone());
        let raw = self.encoder.extract_pyramid(t, &self.store, image)?;
        let pyramid = self.projection.project(t, &self.store, raw);
        let representation = self.compute_representation(t, refin, n)?;
        let (fused, heatmap) = self.rmg.forward(t, &self.store, &pyramid, representation);
        let (enriched, scales, m_scale) = self.rfe.forward(t, &self.store, fused, heatmap, (h, w));
        let m_seg = self.decoder.forward(t, &self.store, enriched, (h, w));
        Ok(ForwardOut {
            pyramid,
            representation,
            fused,
            heatmap,
            enriched,
            scales,
            m_scale,
            m_seg,
        })
    }
}
