//! Reference branch: foreground providers, masked average pooling, and the
//! common representation.
//!
//! Provider outputs never receive gradients: gt/constant providers have no
//! parameters, and the model provider runs on its own frozen store outside
//! the training graph.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{Conv2d, Linear, ParamId, ParamStore};
use ndarray::{Array3, Array4};

pub const MASK_SUM_EPSILON: f64 = 1e-6;

/// Small fixed-architecture foreground network loadable from the native
/// checkpoint container. Stands in for an external saliency model.
pub struct FgNet {
    pub store: ParamStore,
    conv1: Conv2d,
    conv2: Conv2d,
    head: Conv2d,
}

impl FgNet {
    pub fn random(seed: u64) -> Self {
        let mut store = ParamStore::new();
        let conv1 = Conv2d::new(&mut store, seed, "fg.conv1", 3, 8, 3, 1, 1);
        let conv2 = Conv2d::new(&mut store, seed, "fg.conv2", 8, 8, 3, 1, 1);
        let head = Conv2d::new(&mut store, seed, "fg.head", 8, 1, 1, 1, 0);
        // Frozen by contract.
        let mut net = Self {
            store,
            conv1,
            conv2,
            head,
        };
        net.freeze();
        net
    }

    fn freeze(&mut self) {
        // Parameters live outside the model store and are never handed to an
        // optimizer; mark them non-trainable so no graph ever tracks them.
        let ids: Vec<ParamId> = self.store.ids().collect();
        for id in ids {
            self.store.set_trainable(id, false);
        }
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        crate::checkpoint::save_params_only(path, &self.store)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        if !path.is_file() {
            return Err(Error::ProviderUnavailable(format!(
                "provider weights not found at {}",
                path.display()
            )));
        }
        let mut net = Self::random(0);
        crate::checkpoint::load_params_only(path, &mut net.store)
            .map_err(|e| Error::ProviderUnavailable(format!("bad provider weights: {e}")))?;
        Ok(net)
    }

    pub fn predict(&self, images: &Array4<f64>) -> Array4<f64> {
        let mut t = Tape::new();
        let x = t.constant(images.clone());
        let x = self.conv1.forward(&mut t, &self.store, x);
        let x = t.relu(x);
        let x = self.conv2.forward(&mut t, &self.store, x);
        let x = t.relu(x);
        let x = self.head.forward(&mut t, &self.store, x);
        let y = t.sigmoid(x);
        t.value(y)
            .clone()
            .into_dimensionality::<ndarray::Ix4>()
            .expect("fg map is 4-d")
    }

    /// Snapshot of all parameter values, for frozen-ness assertions.
    pub fn parameter_snapshot(&self) -> Vec<Vec<f64>> {
        self.store
            .ids()
            .map(|id| self.store.value(id).iter().copied().collect())
            .collect()
    }
}

pub enum ForegroundProvider {
    /// Pass the referring ground-truth masks through.
    Gt,
    /// All-ones maps.
    Constant,
    /// A frozen foreground network.
    Model(Box<FgNet>),
}

impl ForegroundProvider {
    pub fn from_config(spec: &str) -> Result<Self> {
        if spec == "gt" {
            Ok(Self::Gt)
        } else if spec == "constant" {
            Ok(Self::Constant)
        } else if let Some(path) = spec.strip_prefix("model:") {
            Ok(Self::Model(Box::new(FgNet::load(std::path::Path::new(
                path,
            ))?)))
        } else {
            Err(Error::Config(format!("unknown provider '{spec}'")))
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Gt => "gt",
            Self::Constant => "constant",
            Self::Model(_) => "model",
        }
    }

    /// Foreground maps for a batch of referring images (values in [0,1]).
    /// `masks[i]` must be present for every image under the gt provider.
    pub fn maps(
        &self,
        images: &Array4<f64>,
        masks: &[Option<Array3<f64>>],
    ) -> Result<Array4<f64>> {
        let (n, _c, h, w) = images.dim();
        match self {
            Self::Constant => Ok(Array4::from_elem((n, 1, h, w), 1.0)),
            Self::Gt => {
                if masks.len() != n {
                    return Err(Error::Data(format!(
                        "gt provider got {} masks for {} images",
                        masks.len(),
                        n
                    )));
                }
                let mut out = Array4::<f64>::zeros((n, 1, h, w));
                for (i, m) in masks.iter().enumerate() {
                    let m = m.as_ref().ok_or_else(|| {
                        Error::Data(
                            "gt provider requires a mask for every referring image".into(),
                        )
                    })?;
                    if m.dim() != (1, h, w) {
                        return Err(Error::ShapeMismatch(format!(
                            "ref mask {:?} vs image {h}x{w}",
                            m.dim()
                        )));
                    }
                    out.index_axis_mut(ndarray::Axis(0), i).assign(m);
                }
                Ok(out)
            }
            Self::Model(net) => Ok(net.predict(images)),
        }
    }
}

/// Learned parts of the reference branch: the 1x1 projection applied to each
/// pooled object representation (shared across the K references) and the
/// constant representation used in reference-free mode.
pub struct ReferenceHead {
    pub proj: Linear,
    pub e_baseline: ParamId,
    pub c_d: usize,
}

impl ReferenceHead {
    pub fn new(ps: &mut ParamStore, seed: u64, backbone_channels: usize, c_d: usize) -> Self {
        let proj = Linear::new(ps, seed, "reference.proj", backbone_channels, c_d);
        let e_baseline = ps.add(
            "reference.e_baseline",
            crate::nn::zeros1(c_d).into_dyn(),
            true,
        );
        Self {
            proj,
            e_baseline,
            c_d,
        }
    }

    /// Masked average pooling (per reference) followed by the learned
    /// projection: features (K,c_b,h,w) and maps (K,1,H,W) -> (K,c_d).
    ///
    /// The map is bilinearly downsampled to the feature size; pooling divides
    /// the map-weighted feature sum by the map sum.
    pub fn masked_average_pool(
        &self,
        t: &mut Tape,
        ps: &ParamStore,
        features: Var,
        maps: Var,
    ) -> Result<Var> {
        let pooled = masked_pool_raw(t, features, maps)?;
        Ok(self.proj.forward(t, ps, pooled))
    }

    /// The common representation: per-reference pooled projections averaged
    /// over each episode's group of `k` references. (N*K,c_d) -> (N,c_d).
    pub fn aggregate(&self, t: &mut Tape, pooled: Var, k: usize) -> Result<Var> {
        if k == 0 {
            return Err(Error::EmptyList("no object representations to average".into()));
        }
        Ok(t.mean_groups(pooled, k))
    }

    /// Reference-free mode: the learned constant representation, one row per
    /// episode.
    pub fn baseline(&self, t: &mut Tape, ps: &ParamStore, n: usize) -> Var {
        let e = t.param(ps, self.e_baseline);
        t.broadcast_rows(e, n)
    }
}

/// Mask-weighted spatial average without the projection: the pooled vector
/// per sample. The map is downsampled by exact area averaging, which
/// preserves mass (large-factor point sampling would drop small regions
/// entirely). Errors with `EmptyMask` if any downsampled map sums below
/// epsilon.
pub fn masked_pool_raw(t: &mut Tape, features: Var, maps: Var) -> Result<Var> {
    let fshape = t.shape(features).to_vec();
    let mshape = t.shape(maps).to_vec();
    if fshape.len() != 4 || mshape.len() != 4 || mshape[1] != 1 || fshape[0] != mshape[0] {
        return Err(Error::ShapeMismatch(format!(
            "masked pool expects (K,C,h,w) features and (K,1,H,W) maps, got {fshape:?} and {mshape:?}"
        )));
    }
    let down = t.resize_area(maps, fshape[2], fshape[3]);
    let denom = t.spatial_sum(down); // (K,1)
    for &s in t.value(denom).iter() {
        if s <= MASK_SUM_EPSILON {
            return Err(Error::EmptyMask);
        }
    }
    let weighted = t.mul_spatial_map(features, down);
    let sums = t.spatial_sum(weighted); // (K,C)
    Ok(t.div_by_col(sums, denom))
}
