//! Referring mask generation: coordinate embedding, affine modulation of the
//! pyramid by the common representation, coarse-to-fine ConvLSTM fusion, and
//! dynamic-kernel target matching.

use crate::autodiff::{Tape, Var};
use crate::backbone::FeaturePyramid;
use crate::nn::{Conv2d, Linear, ParamStore};
use ndarray::Array4;

pub const COORD_CHANNELS: usize = 8;

/// Per-cell spatial embedding: normalized center, min corner, max corner,
/// and the reciprocal grid size. Channel order
/// [cx, cy, x0, y0, x1, y1, 1/w, 1/h]; a pure function of (h, w).
pub fn coord_channels(n: usize, h: usize, w: usize) -> Array4<f64> {
    let mut out = Array4::<f64>::zeros((n, COORD_CHANNELS, h, w));
    for i in 0..h {
        for j in 0..w {
            let wf = w as f64;
            let hf = h as f64;
            let cx = 2.0 * (j as f64 + 0.5) / wf - 1.0;
            let cy = 2.0 * (i as f64 + 0.5) / hf - 1.0;
            let x0 = 2.0 * j as f64 / wf - 1.0;
            let y0 = 2.0 * i as f64 / hf - 1.0;
            let x1 = 2.0 * (j as f64 + 1.0) / wf - 1.0;
            let y1 = 2.0 * (i as f64 + 1.0) / hf - 1.0;
            let vals = [cx, cy, x0, y0, x1, y1, 1.0 / wf, 1.0 / hf];
            for ni in 0..n {
                for (c, v) in vals.iter().enumerate() {
                    out[[ni, c, i, j]] = *v;
                }
            }
        }
    }
    out
}

/// Append the 8 coordinate channels to a (N,C,h,w) feature level.
pub fn append_coord_embedding(t: &mut Tape, level: Var) -> Var {
    let shape = t.shape(level).to_vec();
    let coords = coord_channels(shape[0], shape[2], shape[3]);
    let cv = t.constant(coords);
    t.concat_channels(&[level, cv])
}

/// One ConvLSTM cell: all four gates come from a single 3x3 convolution over
/// the concatenated input and hidden state, split as [i, f, g, o].
pub struct ConvLstmCell {
    pub gates: Conv2d,
    c_d: usize,
}

impl ConvLstmCell {
    pub fn new(ps: &mut ParamStore, seed: u64, name: &str, c_d: usize, kernel: usize) -> Self {
        let gates = Conv2d::new(ps, seed, name, 2 * c_d, 4 * c_d, kernel, 1, kernel / 2);
        Self { gates, c_d }
    }

    pub fn forward(&self, t: &mut Tape, ps: &ParamStore, x: Var, h: Var, c: Var) -> (Var, Var) {
        let stacked = t.concat_channels(&[x, h]);
        let z = self.gates.forward(t, ps, stacked);
        let cd = self.c_d;
        let zi = t.slice_channels(z, 0, cd);
        let zf = t.slice_channels(z, cd, 2 * cd);
        let zg = t.slice_channels(z, 2 * cd, 3 * cd);
        let zo = t.slice_channels(z, 3 * cd, 4 * cd);
        let i = t.sigmoid(zi);
        let f = t.sigmoid(zf);
        let g = t.tanh(zg);
        let o = t.sigmoid(zo);
        let fc = t.mul(f, c);
        let ig = t.mul(i, g);
        let c_next = t.add(fc, ig);
        let tc = t.tanh(c_next);
        let h_next = t.mul(o, tc);
        (h_next, c_next)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KernelMode {
    /// Learned linear map from the common representation to the 1x1 kernel.
    Linear,
    /// Use the common representation directly as the kernel.
    Identity,
}

pub struct Rmg {
    pub gamma: [Linear; 3],
    pub beta: [Linear; 3],
    pub recover: [Conv2d; 3],
    pub cell: ConvLstmCell,
    pub kernel_head: Option<Linear>,
    pub c_d: usize,
}

impl Rmg {
    pub fn new(
        ps: &mut ParamStore,
        seed: u64,
        c_d: usize,
        lstm_kernel: usize,
        kernel_mode: KernelMode,
    ) -> Self {
        let aug = c_d + COORD_CHANNELS;
        let mk_lin = |ps: &mut ParamStore, label: &str, level: usize| {
            Linear::new(ps, seed, &format!("rmg.{label}.level{level}"), c_d, aug)
        };
        let gamma = [
            mk_lin(ps, "gamma", 2),
            mk_lin(ps, "gamma", 3),
            mk_lin(ps, "gamma", 4),
        ];
        let beta = [
            mk_lin(ps, "beta", 2),
            mk_lin(ps, "beta", 3),
            mk_lin(ps, "beta", 4),
        ];
        let recover = [
            Conv2d::new(ps, seed, "rmg.recover.level2", aug, c_d, 3, 1, 1),
            Conv2d::new(ps, seed, "rmg.recover.level3", aug, c_d, 3, 1, 1),
            Conv2d::new(ps, seed, "rmg.recover.level4", aug, c_d, 3, 1, 1),
        ];
        let cell = ConvLstmCell::new(ps, seed, "rmg.clstm", c_d, lstm_kernel);
        let kernel_head = match kernel_mode {
            KernelMode::Linear => Some(Linear::new(ps, seed, "rmg.kernel", c_d, c_d)),
            KernelMode::Identity => None,
        };
        Self {
            gamma,
            beta,
            recover,
            cell,
            kernel_head,
            c_d,
        }
    }

    /// Feature-wise affine modulation of one coordinate-augmented level by
    /// the common representation, then 3x3 channel recovery:
    /// relu(conv(relu(gamma .* x .+ beta))).
    pub fn affine_modulate(
        &self,
        t: &mut Tape,
        ps: &ParamStore,
        x_aug: Var,
        e: Var,
        level_idx: usize,
    ) -> Var {
        let gamma = self.gamma[level_idx].forward(t, ps, e);
        let beta = self.beta[level_idx].forward(t, ps, e);
        let scaled = t.mul_chan_vec(x_aug, gamma);
        let shifted = t.add_chan_vec(scaled, beta);
        let activated = t.relu(shifted);
        let recovered = self.recover[level_idx].forward(t, ps, activated);
        t.relu(recovered)
    }

    /// Coarse-to-fine fusion: start from the deepest modulated level as both
    /// hidden and cell state, then run the shared cell at each finer level on
    /// bilinearly upsampled states. Returns the final hidden state.
    pub fn multiscale_fuse(&self, t: &mut Tape, ps: &ParamStore, y2: Var, y3: Var, y4: Var) -> Var {
        let mut h = y4;
        let mut c = y4;
        for y in [y3, y2] {
            let target = t.shape(y).to_vec();
            let hu = t.resize_bilinear(h, target[2], target[3]);
            let cu = t.resize_bilinear(c, target[2], target[3]);
            let (hn, cn) = self.cell.forward(t, ps, y, hu, cu);
            h = hn;
            c = cn;
        }
        h
    }

    /// Dynamic 1x1 convolution: derive a kernel from the common
    /// representation and correlate it with every spatial position.
    pub fn target_match(&self, t: &mut Tape, ps: &ParamStore, fused: Var, e: Var) -> Var {
        let kernel = match &self.kernel_head {
            Some(lin) => lin.forward(t, ps, e),
            None => e,
        };
        let prod = t.mul_chan_vec(fused, kernel);
        t.sum_channels(prod)
    }

    /// Full pass: coordinates -> per-level modulation -> fusion -> matching.
    pub fn forward(
        &self,
        t: &mut Tape,
        ps: &ParamStore,
        pyramid: &FeaturePyramid,
        e: Var,
    ) -> (Var, Var) {
        let mut modulated = Vec::with_capacity(3);
        for (idx, level) in pyramid.levels().into_iter().enumerate() {
            let aug = append_coord_embedding(t, level);
            modulated.push(self.affine_modulate(t, ps, aug, e, idx));
        }
        let fused = self.multiscale_fuse(t, ps, modulated[0], modulated[1], modulated[2]);
        let heat = self.target_match(t, ps, fused, e);
        (fused, heat)
    }
}
