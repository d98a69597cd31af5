//! Eager reverse-mode automatic differentiation on f64 `ndarray` tensors.
//!
//! Values are computed when a node is recorded, so shape errors and contract
//! checks surface at build time. `backward` walks the tape once in reverse and
//! accumulates gradients for every node that (transitively) requires them.

pub mod kernels;

use crate::nn::{ParamId, ParamStore};
use ndarray::{Array1, Array2, Array4, ArrayD, Axis, Ix1, Ix2, Ix4, IxDyn};
use std::collections::HashMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op {
    Leaf { param: Option<ParamId> },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddScalar(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Ln(Var),
    Clamp(Var, f64, f64),
    SumAll(Var),
    MeanAll(Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
        cols: Option<Array2<f64>>,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    ConcatC(Vec<Var>),
    SliceC {
        x: Var,
        from: usize,
        to: usize,
    },
    Resize {
        x: Var,
        oh: usize,
        ow: usize,
    },
    MaxPool {
        x: Var,
        k: usize,
        stride: usize,
        pad: usize,
    },
    AreaResize {
        x: Var,
        oh: usize,
        ow: usize,
    },
    MulChanVec {
        x: Var,
        v: Var,
    },
    AddChanVec {
        x: Var,
        v: Var,
    },
    MulSpatialMap {
        x: Var,
        m: Var,
    },
    SumChannels(Var),
    SpatialSum(Var),
    DivByCol {
        x: Var,
        d: Var,
    },
    MeanGroups {
        x: Var,
        group: usize,
    },
    BroadcastRows {
        x: Var,
        n: usize,
    },
}

struct Node {
    value: ArrayD<f64>,
    needs_grad: bool,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<ArrayD<f64>>>,
    param_cache: HashMap<(u64, usize), Var>,
}

fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: ArrayD<f64>, needs_grad: bool, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            needs_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &ArrayD<f64> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn scalar(&self, v: Var) -> f64 {
        debug_assert_eq!(self.nodes[v.0].value.len(), 1);
        *self.nodes[v.0].value.iter().next().unwrap()
    }

    /// Leaf that never receives gradients.
    pub fn constant<D: ndarray::Dimension>(&mut self, value: ndarray::Array<f64, D>) -> Var {
        self.push(value.into_dyn(), false, Op::Leaf { param: None })
    }

    /// Leaf that accumulates gradients (used for data inputs in gradient checks).
    pub fn input<D: ndarray::Dimension>(&mut self, value: ndarray::Array<f64, D>) -> Var {
        self.push(value.into_dyn(), true, Op::Leaf { param: None })
    }

    /// Leaf bound to a stored parameter. Memoized: the same parameter maps to
    /// the same tape node within one graph, so shared modules accumulate
    /// gradients across uses.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let key = (store.token(), id.index());
        if let Some(&v) = self.param_cache.get(&key) {
            return v;
        }
        let v = self.push(
            store.value(id).clone(),
            store.trainable(id),
            Op::Leaf { param: Some(id) },
        );
        self.param_cache.insert(key, v);
        v
    }

    fn view4(&self, v: Var) -> ndarray::ArrayView4<f64> {
        self.nodes[v.0]
            .value
            .view()
            .into_dimensionality::<Ix4>()
            .expect("expected a 4-d tensor")
    }

    fn view2(&self, v: Var) -> ndarray::ArrayView2<f64> {
        self.nodes[v.0]
            .value
            .view()
            .into_dimensionality::<Ix2>()
            .expect("expected a 2-d tensor")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add shape mismatch");
        let v = &self.nodes[a.0].value + &self.nodes[b.0].value;
        let ng = self.needs(a) || self.needs(b);
        self.push(v, ng, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "sub shape mismatch");
        let v = &self.nodes[a.0].value - &self.nodes[b.0].value;
        let ng = self.needs(a) || self.needs(b);
        self.push(v, ng, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "mul shape mismatch");
        let v = &self.nodes[a.0].value * &self.nodes[b.0].value;
        let ng = self.needs(a) || self.needs(b);
        self.push(v, ng, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "div shape mismatch");
        let v = &self.nodes[a.0].value / &self.nodes[b.0].value;
        let ng = self.needs(a) || self.needs(b);
        self.push(v, ng, Op::Div(a, b))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let v = &self.nodes[a.0].value * k;
        let ng = self.needs(a);
        self.push(v, ng, Op::Scale(a, k))
    }

    pub fn add_scalar(&mut self, a: Var, k: f64) -> Var {
        let v = &self.nodes[a.0].value + k;
        let ng = self.needs(a);
        self.push(v, ng, Op::AddScalar(a, k))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| x.max(0.0));
        let ng = self.needs(a);
        self.push(v, ng, Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(sigmoid_scalar);
        let ng = self.needs(a);
        self.push(v, ng, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(f64::tanh);
        let ng = self.needs(a);
        self.push(v, ng, Op::Tanh(a))
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(f64::ln);
        let ng = self.needs(a);
        self.push(v, ng, Op::Ln(a))
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| x.clamp(lo, hi));
        let ng = self.needs(a);
        self.push(v, ng, Op::Clamp(a, lo, hi))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let v = ArrayD::from_elem(IxDyn(&[]), self.nodes[a.0].value.sum());
        let ng = self.needs(a);
        self.push(v, ng, Op::SumAll(a))
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.nodes[a.0].value.len() as f64;
        let v = ArrayD::from_elem(IxDyn(&[]), self.nodes[a.0].value.sum() / n);
        let ng = self.needs(a);
        self.push(v, ng, Op::MeanAll(a))
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let xv = self.view4(x);
        let wv = self.nodes[w.0]
            .value
            .view()
            .into_dimensionality::<Ix4>()
            .expect("conv weight must be 4-d")
            .to_owned();
        assert_eq!(xv.dim().1, wv.dim().1, "conv2d channel mismatch");
        let bv = b.map(|bb| {
            self.nodes[bb.0]
                .value
                .view()
                .into_dimensionality::<Ix1>()
                .expect("conv bias must be 1-d")
                .to_owned()
        });
        let (y, cols) = kernels::conv2d_keep_cols(&xv, &wv, bv.as_ref(), stride, pad);
        let ng = self.needs(x) || self.needs(w) || b.is_some_and(|bb| self.needs(bb));
        self.push(
            y.into_dyn(),
            ng,
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
                cols: ng.then_some(cols),
            },
        )
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let xv = self.view2(x);
        let wv = self.view2(w);
        assert_eq!(xv.dim().1, wv.dim().1, "linear input dim mismatch");
        let mut y = xv.dot(&wv.t());
        if let Some(bb) = b {
            let bv = self.nodes[bb.0]
                .value
                .view()
                .into_dimensionality::<Ix1>()
                .expect("linear bias must be 1-d");
            y += &bv;
        }
        let ng = self.needs(x) || self.needs(w) || b.is_some_and(|bb| self.needs(bb));
        self.push(y.into_dyn(), ng, Op::Linear { x, w, b })
    }

    pub fn concat_channels(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let views: Vec<_> = parts.iter().map(|&p| self.view4(p)).collect();
        let y = ndarray::concatenate(Axis(1), &views).expect("concat shapes");
        let ng = parts.iter().any(|&p| self.needs(p));
        self.push(y.into_dyn(), ng, Op::ConcatC(parts.to_vec()))
    }

    pub fn slice_channels(&mut self, x: Var, from: usize, to: usize) -> Var {
        let xv = self.view4(x);
        let y = xv.slice(ndarray::s![.., from..to, .., ..]).to_owned();
        let ng = self.needs(x);
        self.push(y.into_dyn(), ng, Op::SliceC { x, from, to })
    }

    pub fn resize_bilinear(&mut self, x: Var, oh: usize, ow: usize) -> Var {
        let xv = self.view4(x);
        let y = kernels::resize_bilinear(&xv, oh, ow);
        let ng = self.needs(x);
        self.push(y.into_dyn(), ng, Op::Resize { x, oh, ow })
    }

    pub fn max_pool2d(&mut self, x: Var, k: usize, stride: usize, pad: usize) -> Var {
        let xv = self.view4(x);
        let y = kernels::max_pool2d(&xv, k, stride, pad);
        let ng = self.needs(x);
        self.push(y.into_dyn(), ng, Op::MaxPool { x, k, stride, pad })
    }

    /// Area-averaging resize (exact box mean).
    pub fn resize_area(&mut self, x: Var, oh: usize, ow: usize) -> Var {
        let xv = self.view4(x);
        let y = kernels::resize_area(&xv, oh, ow);
        let ng = self.needs(x);
        self.push(y.into_dyn(), ng, Op::AreaResize { x, oh, ow })
    }

    /// x (N,C,H,W) * v (N,C), broadcast over the spatial dims.
    pub fn mul_chan_vec(&mut self, x: Var, v: Var) -> Var {
        let xv = self.view4(x);
        let vv = self.view2(v);
        let (n, c, h, w) = xv.dim();
        assert_eq!((n, c), vv.dim(), "mul_chan_vec shape mismatch");
        let mut y = xv.to_owned();
        for ni in 0..n {
            for ci in 0..c {
                let s = vv[[ni, ci]];
                y.slice_mut(ndarray::s![ni, ci, .., ..]).mapv_inplace(|t| t * s);
            }
        }
        let _ = (h, w);
        let ng = self.needs(x) || self.needs(v);
        self.push(y.into_dyn(), ng, Op::MulChanVec { x, v })
    }

    /// x (N,C,H,W) + v (N,C), broadcast over the spatial dims.
    pub fn add_chan_vec(&mut self, x: Var, v: Var) -> Var {
        let xv = self.view4(x);
        let vv = self.view2(v);
        let (n, c, _, _) = xv.dim();
        assert_eq!((n, c), vv.dim(), "add_chan_vec shape mismatch");
        let mut y = xv.to_owned();
        for ni in 0..n {
            for ci in 0..c {
                let s = vv[[ni, ci]];
                y.slice_mut(ndarray::s![ni, ci, .., ..]).mapv_inplace(|t| t + s);
            }
        }
        let ng = self.needs(x) || self.needs(v);
        self.push(y.into_dyn(), ng, Op::AddChanVec { x, v })
    }

    /// x (N,C,H,W) * m (N,1,H,W), broadcast over channels.
    pub fn mul_spatial_map(&mut self, x: Var, m: Var) -> Var {
        let xv = self.view4(x);
        let mv = self.view4(m);
        let (n, c, h, w) = xv.dim();
        assert_eq!(mv.dim(), (n, 1, h, w), "mul_spatial_map shape mismatch");
        let mut y = xv.to_owned();
        for ni in 0..n {
            for ci in 0..c {
                for hi in 0..h {
                    for wi in 0..w {
                        y[[ni, ci, hi, wi]] *= mv[[ni, 0, hi, wi]];
                    }
                }
            }
        }
        let _ = c;
        let ng = self.needs(x) || self.needs(m);
        self.push(y.into_dyn(), ng, Op::MulSpatialMap { x, m })
    }

    /// (N,C,H,W) -> (N,1,H,W), summing over channels.
    pub fn sum_channels(&mut self, x: Var) -> Var {
        let xv = self.view4(x);
        let (n, _c, h, w) = xv.dim();
        let summed = xv.sum_axis(Axis(1));
        let y = summed.into_shape_with_order((n, 1, h, w)).expect("sum_channels shape");
        let ng = self.needs(x);
        self.push(y.into_dyn(), ng, Op::SumChannels(x))
    }

    /// (N,C,H,W) -> (N,C), summing over the spatial dims.
    pub fn spatial_sum(&mut self, x: Var) -> Var {
        let xv = self.view4(x);
        let y = xv.sum_axis(Axis(3)).sum_axis(Axis(2));
        let ng = self.needs(x);
        self.push(y.into_dyn(), ng, Op::SpatialSum(x))
    }

    /// x (N,C) / d (N,1), broadcast across columns.
    pub fn div_by_col(&mut self, x: Var, d: Var) -> Var {
        let xv = self.view2(x);
        let dv = self.view2(d);
        let (n, c) = xv.dim();
        assert_eq!(dv.dim(), (n, 1), "div_by_col shape mismatch");
        let mut y = xv.to_owned();
        for ni in 0..n {
            for ci in 0..c {
                y[[ni, ci]] /= dv[[ni, 0]];
            }
        }
        let ng = self.needs(x) || self.needs(d);
        self.push(y.into_dyn(), ng, Op::DivByCol { x, d })
    }

    /// (N*K,C) -> (N,C), averaging contiguous groups of `group` rows.
    pub fn mean_groups(&mut self, x: Var, group: usize) -> Var {
        let xv = self.view2(x);
        let (m, c) = xv.dim();
        assert!(group >= 1 && m % group == 0, "mean_groups group mismatch");
        let n = m / group;
        let mut y = Array2::<f64>::zeros((n, c));
        for ni in 0..n {
            for ki in 0..group {
                for ci in 0..c {
                    y[[ni, ci]] += xv[[ni * group + ki, ci]];
                }
            }
        }
        y /= group as f64;
        let ng = self.needs(x);
        self.push(y.into_dyn(), ng, Op::MeanGroups { x, group })
    }

    /// (C,) -> (N,C), repeating the row.
    pub fn broadcast_rows(&mut self, x: Var, n: usize) -> Var {
        let xv = self.nodes[x.0]
            .value
            .view()
            .into_dimensionality::<Ix1>()
            .expect("broadcast_rows expects a vector");
        let c = xv.len();
        let mut y = Array2::<f64>::zeros((n, c));
        for ni in 0..n {
            y.row_mut(ni).assign(&xv);
        }
        let ng = self.needs(x);
        self.push(y.into_dyn(), ng, Op::BroadcastRows { x, n })
    }

    /// Run reverse accumulation from a scalar loss node.
    pub fn backward(&mut self, loss: Var) {
        assert_eq!(
            self.nodes[loss.0].value.len(),
            1,
            "backward requires a scalar loss"
        );
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[loss.0] = Some(ArrayD::from_elem(
            self.nodes[loss.0].value.raw_dim(),
            1.0,
        ));
        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].needs_grad {
                continue;
            }
            let Some(g) = self.grads[idx].take() else {
                continue;
            };
            self.apply_backward(idx, &g);
            self.grads[idx] = Some(g);
        }
    }

    fn accumulate(&mut self, target: Var, delta: ArrayD<f64>) {
        if !self.nodes[target.0].needs_grad {
            return;
        }
        match &mut self.grads[target.0] {
            Some(existing) => *existing += &delta,
            slot @ None => *slot = Some(delta),
        }
    }

    fn apply_backward(&mut self, idx: usize, g: &ArrayD<f64>) {
        // Ops only reference earlier nodes, so reverse iteration is a valid
        // topological order.
        let op_copy: OpRef = match &self.nodes[idx].op {
            Op::Leaf { .. } => return,
            Op::Add(a, b) => OpRef::Add(*a, *b),
            Op::Sub(a, b) => OpRef::Sub(*a, *b),
            Op::Mul(a, b) => OpRef::Mul(*a, *b),
            Op::Div(a, b) => OpRef::Div(*a, *b),
            Op::Scale(a, k) => OpRef::Scale(*a, *k),
            Op::AddScalar(a, _) => OpRef::AddScalar(*a),
            Op::Relu(a) => OpRef::Relu(*a),
            Op::Sigmoid(a) => OpRef::Sigmoid(*a),
            Op::Tanh(a) => OpRef::Tanh(*a),
            Op::Ln(a) => OpRef::Ln(*a),
            Op::Clamp(a, lo, hi) => OpRef::Clamp(*a, *lo, *hi),
            Op::SumAll(a) => OpRef::SumAll(*a),
            Op::MeanAll(a) => OpRef::MeanAll(*a),
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
                ..
            } => OpRef::Conv2d {
                x: *x,
                w: *w,
                b: *b,
                stride: *stride,
                pad: *pad,
                node: idx,
            },
            Op::Linear { x, w, b } => OpRef::Linear {
                x: *x,
                w: *w,
                b: *b,
            },
            Op::ConcatC(parts) => OpRef::ConcatC(parts.clone()),
            Op::SliceC { x, from, to } => OpRef::SliceC {
                x: *x,
                from: *from,
                to: *to,
            },
            Op::Resize { x, .. } => OpRef::Resize(*x),
            Op::MaxPool { x, k, stride, pad } => OpRef::MaxPool {
                x: *x,
                k: *k,
                stride: *stride,
                pad: *pad,
            },
            Op::AreaResize { x, .. } => OpRef::AreaResize(*x),
            Op::MulChanVec { x, v } => OpRef::MulChanVec { x: *x, v: *v },
            Op::AddChanVec { x, v } => OpRef::AddChanVec { x: *x, v: *v },
            Op::MulSpatialMap { x, m } => OpRef::MulSpatialMap { x: *x, m: *m },
            Op::SumChannels(x) => OpRef::SumChannels(*x),
            Op::SpatialSum(x) => OpRef::SpatialSum(*x),
            Op::DivByCol { x, d } => OpRef::DivByCol { x: *x, d: *d },
            Op::MeanGroups { x, group } => OpRef::MeanGroups {
                x: *x,
                group: *group,
            },
            Op::BroadcastRows { x, .. } => OpRef::BroadcastRows(*x),
        };
        match op_copy {
            OpRef::Add(a, b) => {
                self.accumulate(a, g.clone());
                self.accumulate(b, g.clone());
            }
            OpRef::Sub(a, b) => {
                self.accumulate(a, g.clone());
                self.accumulate(b, g * -1.0);
            }
            OpRef::Mul(a, b) => {
                let ga = g * &self.nodes[b.0].value;
                let gb = g * &self.nodes[a.0].value;
                self.accumulate(a, ga);
                self.accumulate(b, gb);
            }
            OpRef::Div(a, b) => {
                let bv = &self.nodes[b.0].value;
                let ga = g / bv;
                let gb = -(g * &self.nodes[a.0].value) / (bv * bv);
                self.accumulate(a, ga);
                self.accumulate(b, gb);
            }
            OpRef::Scale(a, k) => self.accumulate(a, g * k),
            OpRef::AddScalar(a) => self.accumulate(a, g.clone()),
            OpRef::Relu(a) => {
                let mask = self.nodes[a.0].value.mapv(|x| if x > 0.0 { 1.0 } else { 0.0 });
                self.accumulate(a, g * &mask);
            }
            OpRef::Sigmoid(a) => {
                let y = &self.nodes[idx].value;
                let dy = y * &(1.0 - y);
                self.accumulate(a, g * &dy);
            }
            OpRef::Tanh(a) => {
                let y = &self.nodes[idx].value;
                let dy = 1.0 - y * y;
                self.accumulate(a, g * &dy);
            }
            OpRef::Ln(a) => {
                let ga = g / &self.nodes[a.0].value;
                self.accumulate(a, ga);
            }
            OpRef::Clamp(a, lo, hi) => {
                let mask = self.nodes[a.0]
                    .value
                    .mapv(|x| if x > lo && x < hi { 1.0 } else { 0.0 });
                self.accumulate(a, g * &mask);
            }
            OpRef::SumAll(a) => {
                let gs = *g.iter().next().unwrap();
                let ga = ArrayD::from_elem(self.nodes[a.0].value.raw_dim(), gs);
                self.accumulate(a, ga);
            }
            OpRef::MeanAll(a) => {
                let n = self.nodes[a.0].value.len() as f64;
                let gs = *g.iter().next().unwrap() / n;
                let ga = ArrayD::from_elem(self.nodes[a.0].value.raw_dim(), gs);
                self.accumulate(a, ga);
            }
            OpRef::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
                node,
            } => {
                let xv = self.view4(x);
                let wv = self.nodes[w.0]
                    .value
                    .view()
                    .into_dimensionality::<Ix4>()
                    .unwrap()
                    .to_owned();
                let gy = g.view().into_dimensionality::<Ix4>().unwrap();
                let saved = match &self.nodes[node].op {
                    Op::Conv2d { cols, .. } => cols.as_ref(),
                    _ => None,
                };
                let (gx, gw, gb) = kernels::conv2d_backward(&xv, &wv, &gy, stride, pad, saved);
                self.accumulate(x, gx.into_dyn());
                self.accumulate(w, gw.into_dyn());
                if let Some(bb) = b {
                    self.accumulate(bb, gb.into_dyn());
                }
            }
            OpRef::Linear { x, w, b } => {
                let xv = self.view2(x).to_owned();
                let wv = self.view2(w).to_owned();
                let gy = g.view().into_dimensionality::<Ix2>().unwrap().to_owned();
                let gx = gy.dot(&wv);
                let gw = gy.t().dot(&xv);
                self.accumulate(x, gx.into_dyn());
                self.accumulate(w, gw.into_dyn());
                if let Some(bb) = b {
                    let gb: Array1<f64> = gy.sum_axis(Axis(0));
                    self.accumulate(bb, gb.into_dyn());
                }
            }
            OpRef::ConcatC(parts) => {
                let gy = g.view().into_dimensionality::<Ix4>().unwrap();
                let mut offset = 0;
                for p in parts {
                    let c = self.nodes[p.0].value.shape()[1];
                    let gp = gy
                        .slice(ndarray::s![.., offset..offset + c, .., ..])
                        .to_owned();
                    offset += c;
                    self.accumulate(p, gp.into_dyn());
                }
            }
            OpRef::SliceC { x, from, to } => {
                let xs = self.nodes[x.0].value.shape().to_vec();
                let gy = g.view().into_dimensionality::<Ix4>().unwrap();
                let mut gx = Array4::<f64>::zeros((xs[0], xs[1], xs[2], xs[3]));
                gx.slice_mut(ndarray::s![.., from..to, .., ..]).assign(&gy);
                self.accumulate(x, gx.into_dyn());
            }
            OpRef::Resize(x) => {
                let xs = self.nodes[x.0].value.shape().to_vec();
                let gy = g.view().into_dimensionality::<Ix4>().unwrap();
                let gx = kernels::resize_bilinear_backward(&gy, xs[2], xs[3]);
                self.accumulate(x, gx.into_dyn());
            }
            OpRef::MaxPool { x, k, stride, pad } => {
                let xv = self.view4(x);
                let gy = g.view().into_dimensionality::<Ix4>().unwrap();
                let gx = kernels::max_pool2d_backward(&xv, &gy, k, stride, pad);
                self.accumulate(x, gx.into_dyn());
            }
            OpRef::AreaResize(x) => {
                let xs = self.nodes[x.0].value.shape().to_vec();
                let gy = g.view().into_dimensionality::<Ix4>().unwrap();
                let gx = kernels::resize_area_backward(&gy, xs[2], xs[3]);
                self.accumulate(x, gx.into_dyn());
            }
            OpRef::MulChanVec { x, v } => {
                let xv = self.view4(x);
                let vv = self.view2(v);
                let gy = g.view().into_dimensionality::<Ix4>().unwrap();
                let (n, c, h, w) = xv.dim();
                let mut gx = Array4::<f64>::zeros((n, c, h, w));
                let mut gv = Array2::<f64>::zeros((n, c));
                for ni in 0..n {
                    for ci in 0..c {
                        let s = vv[[ni, ci]];
                        let mut acc = 0.0;
                        for hi in 0..h {
                            for wi in 0..w {
                                let gg = gy[[ni, ci, hi, wi]];
                                gx[[ni, ci, hi, wi]] = gg * s;
                                acc += gg * xv[[ni, ci, hi, wi]];
                            }
                        }
                        gv[[ni, ci]] = acc;
                    }
                }
                self.accumulate(x, gx.into_dyn());
                self.accumulate(v, gv.into_dyn());
            }
            OpRef::AddChanVec { x, v } => {
                let gy = g.view().into_dimensionality::<Ix4>().unwrap();
                let (n, c, _, _) = gy.dim();
                let mut gv = Array2::<f64>::zeros((n, c));
                for ni in 0..n {
                    for ci in 0..c {
                        gv[[ni, ci]] = gy.slice(ndarray::s![ni, ci, .., ..]).sum();
                    }
                }
                self.accumulate(x, g.clone());
                self.accumulate(v, gv.into_dyn());
            }
            OpRef::MulSpatialMap { x, m } => {
                let xv = self.view4(x);
                let mv = self.view4(m);
                let gy = g.view().into_dimensionality::<Ix4>().unwrap();
                let (n, c, h, w) = xv.dim();
                let mut gx = Array4::<f64>::zeros((n, c, h, w));
                let mut gm = Array4::<f64>::zeros((n, 1, h, w));
                for ni in 0..n {
                    for ci in 0..c {
                        for hi in 0..h {
                            for wi in 0..w {
                                let gg = gy[[ni, ci, hi, wi]];
                                gx[[ni, ci, hi, wi]] = gg * mv[[ni, 0, hi, wi]];
                                gm[[ni, 0, hi, wi]] += gg * xv[[ni, ci, hi, wi]];
                            }
                        }
                    }
                }
                self.accumulate(x, gx.into_dyn());
                self.accumulate(m, gm.into_dyn());
            }
            OpRef::SumChannels(x) => {
                let xs = self.nodes[x.0].value.shape().to_vec();
                let gy = g.view().into_dimensionality::<Ix4>().unwrap();
                let mut gx = Array4::<f64>::zeros((xs[0], xs[1], xs[2], xs[3]));
                for ni in 0..xs[0] {
                    for ci in 0..xs[1] {
                        for hi in 0..xs[2] {
                            for wi in 0..xs[3] {
                                gx[[ni, ci, hi, wi]] = gy[[ni, 0, hi, wi]];
                            }
                        }
                    }
                }
                self.accumulate(x, gx.into_dyn());
            }
            OpRef::SpatialSum(x) => {
                let xs = self.nodes[x.0].value.shape().to_vec();
                let gy = g.view().into_dimensionality::<Ix2>().unwrap();
                let mut gx = Array4::<f64>::zeros((xs[0], xs[1], xs[2], xs[3]));
                for ni in 0..xs[0] {
                    for ci in 0..xs[1] {
                        let gg = gy[[ni, ci]];
                        gx.slice_mut(ndarray::s![ni, ci, .., ..]).fill(gg);
                    }
                }
                self.accumulate(x, gx.into_dyn());
            }
            OpRef::DivByCol { x, d } => {
                let xv = self.view2(x);
                let dv = self.view2(d);
                let gy = g.view().into_dimensionality::<Ix2>().unwrap();
                let (n, c) = xv.dim();
                let mut gx = Array2::<f64>::zeros((n, c));
                let mut gd = Array2::<f64>::zeros((n, 1));
                for ni in 0..n {
                    let dd = dv[[ni, 0]];
                    let mut acc = 0.0;
                    for ci in 0..c {
                        let gg = gy[[ni, ci]];
                        gx[[ni, ci]] = gg / dd;
                        acc -= gg * xv[[ni, ci]] / (dd * dd);
                    }
                    gd[[ni, 0]] = acc;
                }
                self.accumulate(x, gx.into_dyn());
                self.accumulate(d, gd.into_dyn());
            }
            OpRef::MeanGroups { x, group } => {
                let xs = self.nodes[x.0].value.shape().to_vec();
                let gy = g.view().into_dimensionality::<Ix2>().unwrap();
                let mut gx = Array2::<f64>::zeros((xs[0], xs[1]));
                for mi in 0..xs[0] {
                    let ni = mi / group;
                    for ci in 0..xs[1] {
                        gx[[mi, ci]] = gy[[ni, ci]] / group as f64;
                    }
                }
                self.accumulate(x, gx.into_dyn());
            }
            OpRef::BroadcastRows(x) => {
                let gy = g.view().into_dimensionality::<Ix2>().unwrap();
                let gx: Array1<f64> = gy.sum_axis(Axis(0));
                self.accumulate(x, gx.into_dyn());
            }
        }
    }

    pub fn grad(&self, v: Var) -> Option<&ArrayD<f64>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradients of all trainable parameters touched by this graph,
    /// in ascending parameter-id order.
    pub fn param_grads(&self) -> Vec<(ParamId, ArrayD<f64>)> {
        let mut out: Vec<(ParamId, ArrayD<f64>)> = Vec::new();
        for (idx, node) in self.nodes.iter().enumerate() {
            if let Op::Leaf { param: Some(id) } = node.op {
                if let Some(Some(g)) = self.grads.get(idx) {
                    out.push((id, g.clone()));
                }
            }
        }
        out.sort_by_key(|(id, _)| id.index());
        out
    }
}

/// Owned copy of the op metadata so the backward match can mutate `self`.
enum OpRef {
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Ln(Var),
    Clamp(Var, f64, f64),
    SumAll(Var),
    MeanAll(Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
        node: usize,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    ConcatC(Vec<Var>),
    SliceC {
        x: Var,
        from: usize,
        to: usize,
    },
    Resize(Var),
    AreaResize(Var),
    MaxPool {
        x: Var,
        k: usize,
        stride: usize,
        pad: usize,
    },
    MulChanVec {
        x: Var,
        v: Var,
    },
    AddChanVec {
        x: Var,
        v: Var,
    },
    MulSpatialMap {
        x: Var,
        m: Var,
    },
    SumChannels(Var),
    SpatialSum(Var),
    DivByCol {
        x: Var,
        d: Var,
    },
    MeanGroups {
        x: Var,
        group: usize,
    },
    BroadcastRows(Var),
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{arr1, arr2, Array4};

    /// Central-difference check of d(sum of f(inputs))/d(inputs[0]).
    fn finite_diff_check<F>(build: F, input: ArrayD<f64>, tol: f64)
    where
        F: Fn(&mut Tape, Var) -> Var,
    {
        let mut tape = Tape::new();
        let x = tape.input(input.clone());
        let y = build(&mut tape, x);
        let loss = tape.sum_all(y);
        tape.backward(loss);
        let analytic = tape.grad(x).unwrap().clone();

        let h = 1e-6;
        for idx in 0..input.len() {
            let mut plus = input.clone();
            let mut minus = input.clone();
            plus.as_slice_mut().unwrap()[idx] += h;
            minus.as_slice_mut().unwrap()[idx] -= h;
            let eval = |arr: ArrayD<f64>| {
                let mut t = Tape::new();
                let v = t.input(arr);
                let y = build(&mut t, v);
                let l = t.sum_all(y);
                t.scalar(l)
            };
            let fd = (eval(plus) - eval(minus)) / (2.0 * h);
            let a = analytic.as_slice().unwrap()[idx];
            let denom = a.abs().max(fd.abs()).max(1e-6);
            assert!(
                ((a - fd).abs() / denom) < tol,
                "grad mismatch at {idx}: analytic {a} vs fd {fd}"
            );
        }
    }

    #[test]
    fn elementwise_grads_match_fd() {
        let x = ArrayD::from_shape_vec(IxDyn(&[2, 3]), vec![0.3, -0.7, 1.2, 0.05, -1.4, 2.2])
            .unwrap();
        finite_diff_check(
            |t, v| {
                let s = t.sigmoid(v);
                let th = t.tanh(s);
                let r = t.mul(th, s);
                t.scale(r, 1.7)
            },
            x,
            1e-6,
        );
    }

    #[test]
    fn conv_grads_match_fd() {
        let x = ArrayD::from_shape_vec(
            IxDyn(&[1, 2, 4, 4]),
            (0..32).map(|i| (i as f64) * 0.11 - 1.5).collect(),
        )
        .unwrap();
        finite_diff_check(
            |t, v| {
                let w = t.input(
                    Array4::from_shape_fn((3, 2, 3, 3), |(a, b, c, d)| {
                        ((a + 2 * b + 3 * c + d) as f64) * 0.07 - 0.2
                    })
                    .into_dyn(),
                );
                let b = t.input(arr1(&[0.1, -0.1, 0.2]).into_dyn());
                t.conv2d(v, w, Some(b), 1, 1)
            },
            x,
            1e-5,
        );
    }

    #[test]
    fn conv_weight_and_bias_grads_match_fd() {
        let w0 = Array4::from_shape_fn((2, 1, 3, 3), |(a, _, c, d)| {
            ((a * 9 + c * 3 + d) as f64) * 0.1073 - 0.4131
        })
        .into_dyn();
        finite_diff_check(
            |t, wv| {
                let x = t.constant(
                    Array4::from_shape_fn((1, 1, 4, 5), |(_, _, i, j)| {
                        ((i * 5 + j) as f64) * 0.2177 - 1.0421
                    }),
                );
                let y = t.conv2d(x, wv, None, 2, 1);
                t.relu(y)
            },
            w0,
            1e-5,
        );
    }

    #[test]
    fn resize_and_reduction_grads_match_fd() {
        let x = ArrayD::from_shape_vec(
            IxDyn(&[1, 2, 2, 3]),
            (0..12).map(|i| (i as f64) * 0.3 - 1.0).collect(),
        )
        .unwrap();
        finite_diff_check(
            |t, v| {
                let up = t.resize_bilinear(v, 5, 4);
                let s = t.sigmoid(up);
                t.sum_channels(s)
            },
            x,
            1e-5,
        );
    }

    #[test]
    fn masked_pool_style_grads_match_fd() {
        let x = ArrayD::from_shape_vec(
            IxDyn(&[2, 3, 2, 2]),
            (0..24).map(|i| (i as f64) * 0.17 - 1.3).collect(),
        )
        .unwrap();
        finite_diff_check(
            |t, v| {
                let m = t.constant(Array4::from_shape_fn((2, 1, 2, 2), |(n, _, i, j)| {
                    0.25 + 0.5 * ((n + i + j) % 2) as f64
                }));
                let weighted = t.mul_spatial_map(v, m);
                let sums = t.spatial_sum(weighted);
                let ones = t.constant(Array4::from_elem((2, 3, 2, 2), 1.0));
                let wsum4 = t.mul_spatial_map(ones, m);
                let wsum = t.spatial_sum(wsum4);
                let denom = t.slice_like_col(wsum);
                let pooled = t.div_by_col(sums, denom);
                t.mean_groups(pooled, 2)
            },
            x,
            1e-5,
        );
    }

    impl Tape {
        /// Test helper: take column 0 of a (N,C) value as a (N,1) tensor.
        fn slice_like_col(&mut self, x: Var) -> Var {
            let v = self.view2(x).column(0).to_owned();
            let n = v.len();
            let arr = Array2::from_shape_vec((n, 1), v.to_vec()).unwrap();
            // Constant w.r.t. gradients: fine for this helper's use.
            self.constant(arr)
        }
    }

    #[test]
    fn linear_grads_match_fd() {
        let x = ArrayD::from_shape_vec(IxDyn(&[3, 4]), (0..12).map(|i| i as f64 * 0.21 - 1.0).collect())
            .unwrap();
        finite_diff_check(
            |t, v| {
                let w = t.input(
                    arr2(&[
                        [0.2, -0.1, 0.4, 0.3],
                        [0.0, 0.5, -0.3, 0.1],
                    ])
                    .into_dyn(),
                );
                let b = t.input(arr1(&[0.05, -0.2]).into_dyn());
                let y = t.linear(v, w, Some(b));
                t.tanh(y)
            },
            x,
            1e-5,
        );
    }

    #[test]
    fn shared_param_accumulates_grads() {
        use crate::nn::ParamStore;
        let mut store = ParamStore::new();
        let id = store.add("w", arr1(&[2.0]).into_dyn(), true);
        let mut tape = Tape::new();
        let w1 = tape.param(&store, id);
        let w2 = tape.param(&store, id);
        assert_eq!(w1, w2);
        // loss = (w * w) -> d/dw = 2w = 4
        let prod = tape.mul(w1, w2);
        let loss = tape.sum_all(prod);
        tape.backward(loss);
        let grads = tape.param_grads();
        assert_eq!(grads.len(), 1);
        assert!((grads[0].1.as_slice().unwrap()[0] - 4.0).abs() < 1e-12);
    }

    #[test]
    fn concat_slice_round_trip_grads() {
        let x = ArrayD::from_shape_vec(
            IxDyn(&[1, 2, 2, 2]),
            (0..8).map(|i| i as f64 * 0.4 - 1.0).collect(),
        )
        .unwrap();
        finite_diff_check(
            |t, v| {
                let c = t.constant(Array4::from_elem((1, 1, 2, 2), 0.7));
                let cat = t.concat_channels(&[v, c]);
                let sl = t.slice_channels(cat, 1, 3);
                t.tanh(sl)
            },
            x,
            1e-5,
        );
    }
}
