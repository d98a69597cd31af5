//! Final segmentation decoder: two convolutions, upsample, sigmoid.

use crate::autodiff::{Tape, Var};
use crate::nn::{Conv2d, ParamStore};

pub struct DecodeHead {
    pub conv: Conv2d,
    pub out: Conv2d,
}

impl DecodeHead {
    pub fn new(ps: &mut ParamStore, seed: u64, c_d: usize) -> Self {
        Self {
            conv: Conv2d::new(ps, seed, "decoder.conv", c_d, c_d, 3, 1, 1),
            out: Conv2d::new(ps, seed, "decoder.out", c_d, 1, 1, 1, 0),
        }
    }

    /// (N,c_d,H/8,W/8) enriched features -> (N,1,H,W) probability map.
    pub fn forward(&self, t: &mut Tape, ps: &ParamStore, enriched: Var, full: (usize, usize)) -> Var {
        let x = self.conv.forward(t, ps, enriched);
        let x = t.relu(x);
        let x = self.out.forward(t, ps, x);
        let x = t.resize_bilinear(x, full.0, full.1);
        t.sigmoid(x)
    }
}
