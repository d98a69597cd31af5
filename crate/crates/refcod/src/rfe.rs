//! Referring feature enrichment: mask-guided per-scale conv blocks, a
//! finer-to-coarser cross-scale path, per-scale supervision heads, and the
//! final multi-scale reduction.

use crate::autodiff::{Tape, Var};
use crate::nn::{Conv2d, ParamStore};

/// Two 3x3 convolutions with a ReLU after each.
pub struct ConvBlock {
    pub conv1: Conv2d,
    pub conv2: Conv2d,
}

impl ConvBlock {
    pub fn new(ps: &mut ParamStore, seed: u64, name: &str, cin: usize, c_d: usize) -> Self {
        Self {
            conv1: Conv2d::new(ps, seed, &format!("{name}.conv1"), cin, c_d, 3, 1, 1),
            conv2: Conv2d::new(ps, seed, &format!("{name}.conv2"), c_d, c_d, 3, 1, 1),
        }
    }

    pub fn forward(&self, t: &mut Tape, ps: &ParamStore, x: Var) -> Var {
        let x = self.conv1.forward(t, ps, x);
        let x = t.relu(x);
        let x = self.conv2.forward(t, ps, x);
        t.relu(x)
    }

    pub fn set_zero(&self, ps: &mut ParamStore) {
        self.conv1.set_zero(ps);
        self.conv2.set_zero(ps);
    }
}

pub struct Rfe {
    pub blocks: [ConvBlock; 3],
    pub heads: [Conv2d; 3],
    pub reduce: Conv2d,
    pub cross_scale: bool,
    pub c_d: usize,
}

impl Rfe {
    pub fn new(ps: &mut ParamStore, seed: u64, c_d: usize, cross_scale: bool) -> Self {
        // The finest level always sees (mask, fused); with the cross-scale
        // path on, the two coarser levels additionally receive the finest
        // scale's features.
        let coarse_in = if cross_scale { 2 * c_d + 1 } else { c_d + 1 };
        let blocks = [
            ConvBlock::new(ps, seed, "rfe.block.level2", c_d + 1, c_d),
            ConvBlock::new(ps, seed, "rfe.block.level3", coarse_in, c_d),
            ConvBlock::new(ps, seed, "rfe.block.level4", coarse_in, c_d),
        ];
        let heads = [
            Conv2d::new(ps, seed, "rfe.head.level2", c_d, 1, 1, 1, 0),
            Conv2d::new(ps, seed, "rfe.head.level3", c_d, 1, 1, 1, 0),
            Conv2d::new(ps, seed, "rfe.head.level4", c_d, 1, 1, 1, 0),
        ];
        let reduce = Conv2d::new(ps, seed, "rfe.reduce", 3 * c_d, c_d, 1, 1, 0);
        Self {
            blocks,
            heads,
            reduce,
            cross_scale,
            c_d,
        }
    }

    /// One scale: resize the squashed mask and the fused features to the
    /// level size, concatenate (plus the optional finer-scale features), and
    /// run the level's conv block.
    pub fn enrich_at_scale(
        &self,
        t: &mut Tape,
        ps: &ParamStore,
        fused: Var,
        sig_mask: Var,
        level_idx: usize,
        size: (usize, usize),
        finest: Option<Var>,
    ) -> Var {
        let f = t.resize_bilinear(fused, size.0, size.1);
        let m = t.resize_bilinear(sig_mask, size.0, size.1);
        let mut parts = vec![f, m];
        if let Some(s2) = finest {
            let s2r = t.resize_bilinear(s2, size.0, size.1);
            parts.push(s2r);
        }
        let x = t.concat_channels(&parts);
        self.blocks[level_idx].forward(t, ps, x)
    }

    /// All three enriched scales. The referring heatmap is squashed by a
    /// sigmoid before use. Scale sizes derive from the stride-8 fused size.
    pub fn enrich(&self, t: &mut Tape, ps: &ParamStore, fused: Var, heatmap: Var) -> [Var; 3] {
        let sig = t.sigmoid(heatmap);
        let base = t.shape(fused).to_vec();
        let (h8, w8) = (base[2], base[3]);
        let s2 = self.enrich_at_scale(t, ps, fused, sig, 0, (h8, w8), None);
        let finest = self.cross_scale.then_some(s2);
        let s3 = self.enrich_at_scale(t, ps, fused, sig, 1, (h8 / 2, w8 / 2), finest);
        let s4 = self.enrich_at_scale(t, ps, fused, sig, 2, (h8 / 4, w8 / 4), finest);
        [s2, s3, s4]
    }

    /// Upsample the coarser scales to stride 8, concatenate, and reduce back
    /// to c_d with a 1x1 convolution + ReLU.
    pub fn fuse_scales(&self, t: &mut Tape, ps: &ParamStore, scales: [Var; 3]) -> Var {
        let base = t.shape(scales[0]).to_vec();
        let s3u = t.resize_bilinear(scales[1], base[2], base[3]);
        let s4u = t.resize_bilinear(scales[2], base[2], base[3]);
        let cat = t.concat_channels(&[scales[0], s3u, s4u]);
        let red = self.reduce.forward(t, ps, cat);
        t.relu(red)
    }

    /// Per-scale supervision maps at full resolution: 1x1 head, bilinear
    /// upsample, sigmoid.
    pub fn scale_predictions(
        &self,
        t: &mut Tape,
        ps: &ParamStore,
        scales: [Var; 3],
        full: (usize, usize),
    ) -> [Var; 3] {
        let mut out = [scales[0]; 3];
        for (i, s) in scales.into_iter().enumerate() {
            let logits = self.heads[i].forward(t, ps, s);
            let up = t.resize_bilinear(logits, full.0, full.1);
            out[i] = t.sigmoid(up);
        }
        out
    }

    /// Enrichment, scale maps, and the reduced feature in one pass.
    pub fn forward(
        &self,
        t: &mut Tape,
        ps: &ParamStore,
        fused: Var,
        heatmap: Var,
        full: (usize, usize),
    ) -> (Var, [Var; 3], [Var; 3]) {
        let scales = self.enrich(t, ps, fused, heatmap);
        let enriched = self.fuse_scales(t, ps, scales);
        let maps = self.scale_predictions(t, ps, scales, full);
        (enriched, scales, maps)
    }
}
