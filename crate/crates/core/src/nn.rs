//! Named parameters, the per-forward binding session, basic layers and Adam.

use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::graph::{Gradients, Graph, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Parameter values are kept exactly representable in `f32` so that the
/// checkpoint payload round-trips without loss.
pub fn round_f32(t: &mut Tensor) {
    for v in t.data_mut() {
        *v = *v as f32 as f64;
    }
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, mut value: Tensor) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter name {name}");
        round_f32(&mut value);
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.values.push(value);
        ParamId(self.names.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn scalar_count(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    /// Overwrite with the values of `other`, matching by name and shape.
    pub fn assign_from(&mut self, other: &ParamStore) -> Result<(), String> {
        if other.len() != self.len() {
            return Err(format!("expected {} parameters, found {}", self.len(), other.len()));
        }
        for (name, value) in other.iter() {
            let i = *self.index.get(name).ok_or_else(|| format!("unknown parameter {name}"))?;
            if self.values[i].shape() != value.shape() {
                return Err(format!(
                    "parameter {name}: expected shape {:?}, found {:?}",
                    self.values[i].shape(),
                    value.shape()
                ));
            }
            self.values[i] = value.clone();
        }
        Ok(())
    }
}

/// One forward pass: owns the tape and binds parameters into it on first use.
pub struct Session<'p> {
    pub g: Graph,
    params: &'p ParamStore,
    bound: Vec<Option<Var>>,
    trainable: bool,
}

impl<'p> Session<'p> {
    /// Parameters become differentiable leaves.
    pub fn train(params: &'p ParamStore) -> Self {
        Self::with_mode(params, true)
    }

    /// Parameters become constants; no gradient bookkeeping.
    pub fn eval(params: &'p ParamStore) -> Self {
        Self::with_mode(params, false)
    }

    /// Continue recording on an existing tape (parameters as constants unless
    /// explicitly bound).
    pub fn on_graph(params: &'p ParamStore, g: Graph) -> Self {
        let mut s = Self::with_mode(params, false);
        s.g = g;
        s
    }

    fn with_mode(params: &'p ParamStore, trainable: bool) -> Self {
        Self {
            g: Graph::new(),
            params,
            bound: vec![None; params.len()],
            trainable,
        }
    }

    pub fn p(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let t = self.params.get(id).clone();
        let v = if self.trainable {
            self.g.param(t)
        } else {
            self.g.constant(t)
        };
        self.bound[id.0] = Some(v);
        v
    }

    /// Bind an override value for a parameter before first use (used by
    /// gradient checks that perturb parameters in double precision).
    pub fn bind(&mut self, id: ParamId, v: Var) {
        self.bound[id.0] = Some(v);
    }

    pub fn input(&mut self, t: Tensor) -> Var {
        self.g.constant(t)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        self.g.value(v)
    }

    /// Gradients for every parameter that took part in the forward pass.
    pub fn param_grads(&self, grads: &Gradients) -> Vec<(ParamId, Tensor)> {
        self.bound
            .iter()
            .enumerate()
            .filter_map(|(i, v)| v.and_then(|v| grads.get(v).map(|g| (ParamId(i), g.clone()))))
            .collect()
    }
}

/// Deterministic initializers.
pub struct Init<'r> {
    pub rng: &'r mut ChaCha8Rng,
}

impl Init<'_> {
    pub fn normal(&mut self, shape: &[usize], std: f64) -> Tensor {
        let d = Normal::new(0.0, std).expect("valid std");
        Tensor::from_fn(shape, |_| d.sample(self.rng))
    }

    /// Normal truncated at two standard deviations.
    pub fn trunc_normal(&mut self, shape: &[usize], std: f64) -> Tensor {
        let d = Normal::new(0.0, std).expect("valid std");
        Tensor::from_fn(shape, |_| loop {
            let v: f64 = d.sample(self.rng);
            if v.abs() <= 2.0 * std {
                break v;
            }
        })
    }

    pub fn uniform(&mut self, shape: &[usize], bound: f64) -> Tensor {
        Tensor::from_fn(shape, |_| self.rng.random_range(-bound..=bound))
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub inp: usize,
    pub out: usize,
}

impl Linear {
    pub fn new(ps: &mut ParamStore, init: &mut Init, name: &str, inp: usize, out: usize) -> Self {
        let bound = 1.0 / (inp as f64).sqrt();
        let w = ps.add(format!("{name}.weight"), init.uniform(&[inp, out], bound));
        let b = ps.add(format!("{name}.bias"), Tensor::zeros(&[out]));
        Self { w, b, inp, out }
    }

    /// Same as [`Linear::new`] with all-zero weights.
    pub fn zeros(ps: &mut ParamStore, name: &str, inp: usize, out: usize) -> Self {
        let w = ps.add(format!("{name}.weight"), Tensor::zeros(&[inp, out]));
        let b = ps.add(format!("{name}.bias"), Tensor::zeros(&[out]));
        Self { w, b, inp, out }
    }

    /// `x` is `[n, inp]` or a flat `[inp]` vector (returned as `[out]`).
    pub fn forward(&self, s: &mut Session, x: Var) -> Var {
        let flat = s.g.shape(x).len() == 1;
        let x2 = if flat { s.g.reshape(x, &[1, self.inp]) } else { x };
        let w = s.p(self.w);
        let b = s.p(self.b);
        let y = s.g.matmul(x2, w);
        let y = s.g.add_row_bias(y, b);
        if flat {
            s.g.reshape(y, &[self.out])
        } else {
            y
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(ps: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            gamma: ps.add(format!("{name}.gamma"), Tensor::full(&[dim], 1.0)),
            beta: ps.add(format!("{name}.beta"), Tensor::zeros(&[dim])),
        }
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Var {
        let g = s.p(self.gamma);
        let b = s.p(self.beta);
        s.g.layer_norm(x, g, b, 1e-5)
    }
}

/// Conv, group norm, SiLU.
#[derive(Clone, Debug)]
pub struct ConvBlock {
    pub w: ParamId,
    pub b: ParamId,
    pub gamma: ParamId,
    pub beta: ParamId,
    pub groups: usize,
    pub stride: usize,
}

pub fn groups_for(channels: usize) -> usize {
    (1..=channels.min(8)).rev().find(|g| channels % g == 0).unwrap_or(1)
}

impl ConvBlock {
    pub fn new(ps: &mut ParamStore, init: &mut Init, name: &str, cin: usize, cout: usize, stride: usize) -> Self {
        let std = (2.0 / (cin * 9) as f64).sqrt();
        Self {
            w: ps.add(format!("{name}.weight"), init.normal(&[cout, cin, 3, 3], std)),
            b: ps.add(format!("{name}.bias"), Tensor::zeros(&[cout])),
            gamma: ps.add(format!("{name}.norm.gamma"), Tensor::full(&[cout], 1.0)),
            beta: ps.add(format!("{name}.norm.beta"), Tensor::zeros(&[cout])),
            groups: groups_for(cout),
            stride,
        }
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Var {
        let w = s.p(self.w);
        let b = s.p(self.b);
        let y = s.g.conv2d(x, w, Some(b), self.stride, 1);
        let g = s.p(self.gamma);
        let be = s.p(self.beta);
        let y = s.g.group_norm(y, g, be, self.groups, 1e-5);
        s.g.silu(y)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Adam {
    pub cfg: AdamConfig,
    pub step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(params: &ParamStore, cfg: AdamConfig) -> Self {
        let zeros = |t: &Tensor| Tensor::zeros(t.shape());
        Self {
            cfg,
            step: 0,
            m: params.iter().map(|(_, t)| zeros(t)).collect(),
            v: params.iter().map(|(_, t)| zeros(t)).collect(),
        }
    }

    pub fn update(&mut self, params: &mut ParamStore, grads: &[(ParamId, Tensor)], lr: f64) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.cfg.beta1.powi(t);
        let bc2 = 1.0 - self.cfg.beta2.powi(t);
        for (id, g) in grads {
            let p = params.get_mut(*id);
            let m = &mut self.m[id.0];
            let v = &mut self.v[id.0];
            for i in 0..g.len() {
                let gi = g.data()[i] + self.cfg.weight_decay * p.data()[i];
                let mi = self.cfg.beta1 * m.data()[i] + (1.0 - self.cfg.beta1) * gi;
                let vi = self.cfg.beta2 * v.data()[i] + (1.0 - self.cfg.beta2) * gi * gi;
                m.data_mut()[i] = mi;
                v.data_mut()[i] = vi;
                let upd = lr * (mi / bc1) / ((vi / bc2).sqrt() + self.cfg.eps);
                let np = p.data()[i] - upd;
                p.data_mut()[i] = np as f32 as f64;
            }
        }
    }
}
