//! Parameter storage and the two learned layer primitives (conv / linear).

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use ndarray::{Array1, Array2, Array4, ArrayD};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::HashMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(&self) -> usize {
        self.0
    }
}

struct Entry {
    name: String,
    value: ArrayD<f64>,
    trainable: bool,
}

/// Flat registry of named parameter tensors. Layers hold `ParamId`s, so the
/// whole model stays `Send + Sync` and checkpointing is a walk over names.
pub struct ParamStore {
    entries: Vec<Entry>,
    by_name: HashMap<String, usize>,
    token: u64,
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

static STORE_COUNTER: std::sync::atomic::AtomicU64 = std::sync::atomic::AtomicU64::new(1);

impl ParamStore {
    pub fn new() -> Self {
        Self {
            entries: Vec::new(),
            by_name: HashMap::new(),
            token: STORE_COUNTER.fetch_add(1, std::sync::atomic::Ordering::Relaxed),
        }
    }

    /// Process-unique identity of this store, distinguishing parameters of
    /// different stores on one tape.
    pub fn token(&self) -> u64 {
        self.token
    }

    pub fn add(&mut self, name: &str, value: ArrayD<f64>, trainable: bool) -> ParamId {
        assert!(
            !self.by_name.contains_key(name),
            "duplicate parameter name: {name}"
        );
        self.entries.push(Entry {
            name: name.to_string(),
            value,
            trainable,
        });
        let id = ParamId(self.entries.len() - 1);
        self.by_name.insert(name.to_string(), id.0);
        id
    }

    pub fn value(&self, id: ParamId) -> &ArrayD<f64> {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut ArrayD<f64> {
        &mut self.entries[id.0].value
    }

    pub fn trainable(&self, id: ParamId) -> bool {
        self.entries[id.0].trainable
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).map(|&i| ParamId(i))
    }

    /// Total number of scalar values across all parameters.
    pub fn scalar_count(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.entries[id.0].trainable = trainable;
    }

    pub fn set_value(&mut self, name: &str, value: ArrayD<f64>) -> Result<()> {
        let id = self
            .find(name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown parameter '{name}'")))?;
        if self.value(id).shape() != value.shape() {
            return Err(Error::Checkpoint(format!(
                "parameter '{name}' has shape {:?}, checkpoint has {:?}",
                self.value(id).shape(),
                value.shape()
            )));
        }
        self.entries[id.0].value = value;
        Ok(())
    }
}

fn fnv1a(s: &str) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in s.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E3779B97F4A7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D049BB133111EB);
    x ^ (x >> 31)
}

/// Seed derived from a global seed and a parameter name, so initialization
/// does not depend on construction order and architecture variants share
/// values for identically named parameters.
pub fn param_seed(global_seed: u64, name: &str) -> u64 {
    splitmix64(global_seed ^ fnv1a(name))
}

fn uniform_init(shape: &[usize], fan_in: usize, seed: u64) -> ArrayD<f64> {
    let bound = (1.0 / fan_in.max(1) as f64).sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
    ArrayD::from_shape_vec(ndarray::IxDyn(shape), data).unwrap()
}

#[derive(Debug, Clone, Copy)]
pub struct Conv2d {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        ps: &mut ParamStore,
        seed: u64,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        let fan_in = cin * k * k;
        let wname = format!("{name}.weight");
        let bname = format!("{name}.bias");
        let w = ps.add(
            &wname,
            uniform_init(&[cout, cin, k, k], fan_in, param_seed(seed, &wname)),
            true,
        );
        let b = ps.add(
            &bname,
            uniform_init(&[cout], fan_in, param_seed(seed, &bname)),
            true,
        );
        Self {
            w,
            b: Some(b),
            stride,
            pad,
        }
    }

    pub fn forward(&self, t: &mut Tape, ps: &ParamStore, x: Var) -> Var {
        let w = t.param(ps, self.w);
        let b = self.b.map(|id| t.param(ps, id));
        t.conv2d(x, w, b, self.stride, self.pad)
    }

    pub fn out_channels(&self, ps: &ParamStore) -> usize {
        ps.value(self.w).shape()[0]
    }

    /// Overwrite with an identity mapping (requires cin == cout, odd kernel).
    pub fn set_identity(&self, ps: &mut ParamStore) {
        let shape = ps.value(self.w).shape().to_vec();
        assert_eq!(shape[0], shape[1], "identity needs square channel mapping");
        let mid = shape[2] / 2;
        let mut w = Array4::<f64>::zeros((shape[0], shape[1], shape[2], shape[3]));
        for c in 0..shape[0] {
            w[[c, c, mid, mid]] = 1.0;
        }
        *ps.value_mut(self.w) = w.into_dyn();
        if let Some(b) = self.b {
            ps.value_mut(b).fill(0.0);
        }
    }

    pub fn set_zero(&self, ps: &mut ParamStore) {
        ps.value_mut(self.w).fill(0.0);
        if let Some(b) = self.b {
            ps.value_mut(b).fill(0.0);
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn new(ps: &mut ParamStore, seed: u64, name: &str, din: usize, dout: usize) -> Self {
        let wname = format!("{name}.weight");
        let bname = format!("{name}.bias");
        let w = ps.add(
            &wname,
            uniform_init(&[dout, din], din, param_seed(seed, &wname)),
            true,
        );
        let b = ps.add(
            &bname,
            uniform_init(&[dout], din, param_seed(seed, &bname)),
            true,
        );
        Self { w, b: Some(b) }
    }

    pub fn forward(&self, t: &mut Tape, ps: &ParamStore, x: Var) -> Var {
        let w = t.param(ps, self.w);
        let b = self.b.map(|id| t.param(ps, id));
        t.linear(x, w, b)
    }

    pub fn set_identity(&self, ps: &mut ParamStore) {
        let shape = ps.value(self.w).shape().to_vec();
        assert_eq!(shape[0], shape[1]);
        let mut w = Array2::<f64>::zeros((shape[0], shape[1]));
        for i in 0..shape[0] {
            w[[i, i]] = 1.0;
        }
        *ps.value_mut(self.w) = w.into_dyn();
        if let Some(b) = self.b {
            ps.value_mut(b).fill(0.0);
        }
    }

    pub fn set_zero(&self, ps: &mut ParamStore) {
        ps.value_mut(self.w).fill(0.0);
        if let Some(b) = self.b {
            ps.value_mut(b).fill(0.0);
        }
    }
}

/// Convenience for tests and provider nets.
pub fn zeros1(n: usize) -> Array1<f64> {
    Array1::zeros(n)
}
