//! Encoders producing the stride-8/16/32 feature pyramid, plus the 1x1
//! channel projections onto the model dimension.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{Conv2d, ParamStore};

/// Raw (un-projected) pyramid at strides 8, 16, 32 with the encoder's
/// native channel counts.
#[derive(Debug, Clone, Copy)]
pub struct RawPyramid {
    pub f2: Var,
    pub f3: Var,
    pub f4: Var,
}

/// Projected pyramid: every level has `c_d` channels.
#[derive(Debug, Clone, Copy)]
pub struct FeaturePyramid {
    pub f2: Var,
    pub f3: Var,
    pub f4: Var,
}

impl FeaturePyramid {
    pub fn levels(&self) -> [Var; 3] {
        [self.f2, self.f3, self.f4]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EncoderKind {
    Toy,
    Resnet50,
}

/// Small fully convolutional encoder: stride-4 stem, then one stage per
/// remaining stride. Runs without pretrained weights.
pub struct ToyEncoder {
    stem1: Conv2d,
    stem2: Conv2d,
    stem3: Conv2d,
    stage2a: Conv2d,
    stage2b: Conv2d,
    stage3: Conv2d,
    stage4: Conv2d,
}

pub const TOY_CHANNELS: [usize; 3] = [32, 48, 64];

impl ToyEncoder {
    pub fn new(ps: &mut ParamStore, seed: u64) -> Self {
        Self {
            stem1: Conv2d::new(ps, seed, "encoder.stem1", 3, 16, 3, 2, 1),
            stem2: Conv2d::new(ps, seed, "encoder.stem2", 16, 16, 3, 1, 1),
            stem3: Conv2d::new(ps, seed, "encoder.stem3", 16, 24, 3, 2, 1),
            stage2a: Conv2d::new(ps, seed, "encoder.stage2a", 24, 32, 3, 2, 1),
            stage2b: Conv2d::new(ps, seed, "encoder.stage2b", 32, 32, 3, 1, 1),
            stage3: Conv2d::new(ps, seed, "encoder.stage3", 32, 48, 3, 2, 1),
            stage4: Conv2d::new(ps, seed, "encoder.stage4", 48, 64, 3, 2, 1),
        }
    }

    fn forward(&self, t: &mut Tape, ps: &ParamStore, image: Var) -> RawPyramid {
        let x = self.stem1.forward(t, ps, image);
        let x = t.relu(x);
        let x = self.stem2.forward(t, ps, x);
        let x = t.relu(x);
        let x = self.stem3.forward(t, ps, x);
        let x = t.relu(x);
        let x = self.stage2a.forward(t, ps, x);
        let x = t.relu(x);
        let x = self.stage2b.forward(t, ps, x);
        let f2 = t.relu(x);
        let x = self.stage3.forward(t, ps, f2);
        let f3 = t.relu(x);
        let x = self.stage4.forward(t, ps, f3);
        let f4 = t.relu(x);
        RawPyramid { f2, f3, f4 }
    }
}

/// ResNet-50 bottleneck trunk with batch norm folded into conv weights
/// (inference-style frozen BN), so external weights must be exported in
/// folded form. The last three stages feed the pyramid.
pub struct ResnetEncoder {
    conv1: Conv2d,
    layers: [Vec<Bottleneck>; 4],
}

struct Bottleneck {
    reduce: Conv2d,
    conv: Conv2d,
    expand: Conv2d,
    downsample: Option<Conv2d>,
}

pub const RESNET50_CHANNELS: [usize; 3] = [512, 1024, 2048];

impl ResnetEncoder {
    pub fn new(ps: &mut ParamStore, seed: u64) -> Self {
        let blocks = [3usize, 4, 6, 3];
        let widths = [64usize, 128, 256, 512];
        let mut layers: [Vec<Bottleneck>; 4] = [vec![], vec![], vec![], vec![]];
        let mut cin = 64;
        for l in 0..4 {
            let mid = widths[l];
            let cout = mid * 4;
            for b in 0..blocks[l] {
                let stride = if l > 0 && b == 0 { 2 } else { 1 };
                let name = format!("encoder.layer{}.{}", l + 1, b);
                let needs_down = stride != 1 || cin != cout;
                layers[l].push(Bottleneck {
                    reduce: Conv2d::new(ps, seed, &format!("{name}.reduce"), cin, mid, 1, 1, 0),
                    conv: Conv2d::new(ps, seed, &format!("{name}.conv"), mid, mid, 3, stride, 1),
                    expand: Conv2d::new(ps, seed, &format!("{name}.expand"), mid, cout, 1, 1, 0),
                    downsample: needs_down.then(|| {
                        Conv2d::new(ps, seed, &format!("{name}.downsample"), cin, cout, 1, stride, 0)
                    }),
                });
                cin = cout;
            }
        }
        Self {
            conv1: Conv2d::new(ps, seed, "encoder.conv1", 3, 64, 7, 2, 3),
            layers,
        }
    }

    fn forward(&self, t: &mut Tape, ps: &ParamStore, image: Var) -> RawPyramid {
        let x = self.conv1.forward(t, ps, image);
        let x = t.relu(x);
        let mut x = t.max_pool2d(x, 3, 2, 1);
        let mut outputs = Vec::with_capacity(4);
        for layer in &self.layers {
            for block in layer {
                let main = block.reduce.forward(t, ps, x);
                let main = t.relu(main);
                let main = block.conv.forward(t, ps, main);
                let main = t.relu(main);
                let main = block.expand.forward(t, ps, main);
                let skip = match &block.downsample {
                    Some(d) => d.forward(t, ps, x),
                    None => x,
                };
                let sum = t.add(main, skip);
                x = t.relu(sum);
            }
            outputs.push(x);
        }
        RawPyramid {
            f2: outputs[1],
            f3: outputs[2],
            f4: outputs[3],
        }
    }
}

pub enum Encoder {
    Toy(ToyEncoder),
    Resnet50(ResnetEncoder),
}

impl Encoder {
    pub fn kind(&self) -> EncoderKind {
        match self {
            Encoder::Toy(_) => EncoderKind::Toy,
            Encoder::Resnet50(_) => EncoderKind::Resnet50,
        }
    }

    /// Native channel counts at strides 8/16/32.
    pub fn channels(&self) -> [usize; 3] {
        match self {
            Encoder::Toy(_) => TOY_CHANNELS,
            Encoder::Resnet50(_) => RESNET50_CHANNELS,
        }
    }

    /// Extract the raw stride-8/16/32 pyramid. The spatial size must be a
    /// multiple of 32 so the stated strides are exact.
    pub fn extract_pyramid(&self, t: &mut Tape, ps: &ParamStore, image: Var) -> Result<RawPyramid> {
        let shape = t.shape(image).to_vec();
        if shape.len() != 4 || shape[1] != 3 {
            return Err(Error::BadShape(format!(
                "encoder expects (N,3,H,W), got {shape:?}"
            )));
        }
        let (h, w) = (shape[2], shape[3]);
        if h % 32 != 0 || w % 32 != 0 {
            return Err(Error::BadShape(format!(
                "input size {h}x{w} is not divisible by 32"
            )));
        }
        Ok(match self {
            Encoder::Toy(e) => e.forward(t, ps, image),
            Encoder::Resnet50(e) => e.forward(t, ps, image),
        })
    }
}

/// The three learned 1x1 projections onto `c_d` channels.
pub struct PyramidProjection {
    pub convs: [Conv2d; 3],
}

impl PyramidProjection {
    pub fn new(ps: &mut ParamStore, seed: u64, in_channels: [usize; 3], c_d: usize) -> Self {
        let convs = [
            Conv2d::new(ps, seed, "projection.level2", in_channels[0], c_d, 1, 1, 0),
            Conv2d::new(ps, seed, "projection.level3", in_channels[1], c_d, 1, 1, 0),
            Conv2d::new(ps, seed, "projection.level4", in_channels[2], c_d, 1, 1, 0),
        ];
        Self { convs }
    }

    pub fn project(&self, t: &mut Tape, ps: &ParamStore, raw: RawPyramid) -> FeaturePyramid {
        FeaturePyramid {
            f2: self.convs[0].forward(t, ps, raw.f2),
            f3: self.convs[1].forward(t, ps, raw.f3),
            f4: self.convs[2].forward(t, ps, raw.f4),
        }
    }

    /// Scalar parameter count: sum over levels of c_in*c_d + c_d.
    pub fn scalar_count(&self, ps: &ParamStore) -> usize {
        self.convs
            .iter()
            .map(|c| ps.value(c.w).len() + c.b.map_or(0, |b| ps.value(b).len()))
            .sum()
    }
}
