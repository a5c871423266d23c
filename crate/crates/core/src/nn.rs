//! Parameter storage, the forward-pass context and the basic layers.

use std::cell::{Cell, RefCell};
use std::collections::{BTreeMap, HashMap};

use rand_distr::{Distribution, Normal};

use crate::autograd::{Graph, Var};
use crate::error::{shape_err, Result};
use crate::tensor::Array;
use crate::types::{ImageTensor, Rng};

/// Named trainable parameters plus non-trainable buffers (running
/// statistics of batch normalization).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Array>,
    buffers: BTreeMap<String, Array>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert_param(&mut self, name: impl Into<String>, value: Array) {
        self.params.insert(name.into(), value);
    }

    pub fn insert_buffer(&mut self, name: impl Into<String>, value: Array) {
        self.buffers.insert(name.into(), value);
    }

    pub fn param(&self, name: &str) -> Option<&Array> {
        self.params.get(name)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Array> {
        self.params.get_mut(name)
    }

    pub fn buffer(&self, name: &str) -> Option<&Array> {
        self.buffers.get(name)
    }

    pub fn params(&self) -> &BTreeMap<String, Array> {
        &self.params
    }

    pub fn buffers(&self) -> &BTreeMap<String, Array> {
        &self.buffers
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = (&String, &mut Array)> {
        self.params.iter_mut()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.values().map(Array::len).sum()
    }

    /// Keep only entries whose name starts with one of `prefixes`.
    pub fn retain_prefixes(&mut self, prefixes: &[&str]) {
        let keep = |k: &String| prefixes.iter().any(|p| k.starts_with(p));
        self.params.retain(|k, _| keep(k));
        self.buffers.retain(|k, _| keep(k));
    }

    pub fn has_prefix(&self, prefix: &str) -> bool {
        self.params.keys().chain(self.buffers.keys()).any(|k| k.starts_with(prefix))
    }

    pub fn merge(&mut self, other: ParamStore) {
        self.params.extend(other.params);
        self.buffers.extend(other.buffers);
    }
}

/// State of one forward pass: the graph, the weights it reads, and whether
/// layers run in training mode.
pub struct Ctx<'g> {
    pub graph: &'g Graph,
    store: &'g ParamStore,
    pub train: bool,
    leaves: RefCell<HashMap<String, Var<'g>>>,
    buffer_updates: RefCell<BTreeMap<String, Array>>,
    track_stats: Cell<bool>,
}

impl<'g> Ctx<'g> {
    pub fn new(graph: &'g Graph, store: &'g ParamStore, train: bool) -> Self {
        Self {
            graph,
            store,
            train,
            leaves: RefCell::new(HashMap::new()),
            buffer_updates: RefCell::new(BTreeMap::new()),
            track_stats: Cell::new(true),
        }
    }

    pub fn store(&self) -> &'g ParamStore {
        self.store
    }

    /// Graph leaf for a parameter; repeated lookups return the same leaf.
    ///
    /// Panics when the parameter does not exist: models check their
    /// weights before running.
    pub fn p(&self, name: &str) -> Var<'g> {
        if let Some(v) = self.leaves.borrow().get(name) {
            return *v;
        }
        let value = self.store.param(name).unwrap_or_else(|| panic!("missing parameter {name}")).clone();
        let v = if self.train { self.graph.param(name, value) } else { self.graph.constant(value) };
        self.leaves.borrow_mut().insert(name.to_string(), v);
        v
    }

    pub fn buffer(&self, name: &str) -> &'g Array {
        self.store.buffer(name).unwrap_or_else(|| panic!("missing buffer {name}"))
    }

    /// Whether batch-norm layers record running statistics in this pass.
    pub fn set_track_stats(&self, on: bool) {
        self.track_stats.set(on);
    }

    pub fn take_buffer_updates(&self) -> BTreeMap<String, Array> {
        std::mem::take(&mut self.buffer_updates.borrow_mut())
    }
}

pub fn normal(shape: impl Into<Vec<usize>>, std: f64, rng: &mut Rng) -> Array {
    let dist = Normal::new(0.0, std).expect("finite std");
    Array::from_fn(shape, |_| dist.sample(rng))
}

/// Stacks images of one size into an `N × C × H × W` array.
pub fn stack_images<'a>(images: impl IntoIterator<Item = &'a ImageTensor>) -> Result<Array> {
    let mut data = Vec::new();
    let mut dims = None;
    let mut n = 0;
    for img in images {
        let d = (img.channels(), img.height(), img.width());
        match dims {
            None => dims = Some(d),
            Some(first) if first != d => return Err(shape_err("stack_images", first, d)),
            _ => {}
        }
        data.extend_from_slice(img.to_chw().data());
        n += 1;
    }
    let (c, h, w) = dims.ok_or_else(|| crate::IgclError::InvalidArgument("no images to stack".into()))?;
    Ok(Array::new([n, c, h, w], data))
}

/// Fully connected layer; the weight is stored `in × out`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub name: String,
    pub input: usize,
    pub output: usize,
    pub bias: bool,
}

impl Linear {
    pub fn new(name: impl Into<String>, input: usize, output: usize, bias: bool) -> Self {
        Self { name: name.into(), input, output, bias }
    }

    pub fn weight_name(&self) -> String {
        format!("{}.weight", self.name)
    }

    pub fn bias_name(&self) -> String {
        format!("{}.bias", self.name)
    }

    pub fn init(&self, store: &mut ParamStore, std: f64, rng: &mut Rng) {
        store.insert_param(self.weight_name(), normal([self.input, self.output], std, rng));
        if self.bias {
            store.insert_param(self.bias_name(), Array::zeros([self.output]));
        }
    }

    pub fn forward<'g>(&self, ctx: &Ctx<'g>, x: Var<'g>) -> Var<'g> {
        let y = x.matmul(ctx.p(&self.weight_name()));
        if self.bias {
            y.add(ctx.p(&self.bias_name()))
        } else {
            y
        }
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub name: String,
    pub input: usize,
    pub output: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    pub fn new(name: impl Into<String>, input: usize, output: usize, kernel: usize, stride: usize, padding: usize) -> Self {
        Self { name: name.into(), input, output, kernel, stride, padding }
    }

    pub fn weight_name(&self) -> String {
        format!("{}.weight", self.name)
    }

    pub fn bias_name(&self) -> String {
        format!("{}.bias", self.name)
    }

    /// He-normal initialization scaled by `gain`.
    pub fn init(&self, store: &mut ParamStore, gain: f64, rng: &mut Rng) {
        let fan_in = (self.input * self.kernel * self.kernel) as f64;
        let std = gain * (2.0 / fan_in).sqrt();
        store.insert_param(self.weight_name(), normal([self.output, self.input, self.kernel, self.kernel], std, rng));
        store.insert_param(self.bias_name(), Array::zeros([self.output]));
    }

    pub fn forward<'g>(&self, ctx: &Ctx<'g>, x: Var<'g>) -> Var<'g> {
        x.conv2d(ctx.p(&self.weight_name()), Some(ctx.p(&self.bias_name())), self.stride, self.padding)
    }
}

/// Layer normalization over the last axis.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub name: String,
    pub dim: usize,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(name: impl Into<String>, dim: usize) -> Self {
        Self { name: name.into(), dim, eps: 1e-6 }
    }

    pub fn init(&self, store: &mut ParamStore) {
        store.insert_param(format!("{}.gamma", self.name), Array::full([self.dim], 1.0));
        store.insert_param(format!("{}.beta", self.name), Array::zeros([self.dim]));
    }

    pub fn forward<'g>(&self, ctx: &Ctx<'g>, x: Var<'g>) -> Var<'g> {
        let axis = x.shape().len() - 1;
        let centered = x.sub(x.mean_axis(axis, true));
        let var = centered.square().mean_axis(axis, true);
        let normed = centered.div(var.add_scalar(self.eps).sqrt());
        normed.mul(ctx.p(&format!("{}.gamma", self.name))).add(ctx.p(&format!("{}.beta", self.name)))
    }
}

/// Batch normalization over the leading axis of `N × D` features.
#[derive(Debug, Clone)]
pub struct BatchNorm1d {
    pub name: String,
    pub dim: usize,
    pub eps: f64,
    pub momentum: f64,
}

impl BatchNorm1d {
    pub fn new(name: impl Into<String>, dim: usize) -> Self {
        Self { name: name.into(), dim, eps: 1e-5, momentum: 0.1 }
    }

    fn key(&self, what: &str) -> String {
        format!("{}.{what}", self.name)
    }

    pub fn init(&self, store: &mut ParamStore) {
        store.insert_param(self.key("gamma"), Array::full([self.dim], 1.0));
        store.insert_param(self.key("beta"), Array::zeros([self.dim]));
        store.insert_buffer(self.key("running_mean"), Array::zeros([self.dim]));
        store.insert_buffer(self.key("running_var"), Array::full([self.dim], 1.0));
    }

    /// Training mode normalizes with batch statistics (population
    /// variance) and records updated running statistics in the context.
    /// Inference mode uses the stored running statistics.
    pub fn forward<'g>(&self, ctx: &Ctx<'g>, x: Var<'g>) -> Var<'g> {
        let (gamma, beta) = (ctx.p(&self.key("gamma")), ctx.p(&self.key("beta")));
        let n = x.shape()[0];
        let normed = if ctx.train && n > 1 {
            let mean = x.mean_axis(0, true);
            let centered = x.sub(mean);
            let var = centered.square().mean_axis(0, true);
            if ctx.track_stats.get() {
                let (rm, rv) = (ctx.buffer(&self.key("running_mean")), ctx.buffer(&self.key("running_var")));
                let unbias = n as f64 / (n as f64 - 1.0);
                let m = self.momentum;
                let new_mean = rm.zip_map(&Array::clone(&mean.value()).reshape([self.dim]), |r, b| (1.0 - m) * r + m * b);
                let new_var = rv.zip_map(&Array::clone(&var.value()).reshape([self.dim]), |r, b| (1.0 - m) * r + m * b * unbias);
                let mut updates = ctx.buffer_updates.borrow_mut();
                updates.insert(self.key("running_mean"), new_mean);
                updates.insert(self.key("running_var"), new_var);
            }
            centered.div(var.add_scalar(self.eps).sqrt())
        } else {
            let g = ctx.graph;
            let mean = g.constant(ctx.buffer(&self.key("running_mean")).clone());
            let std = g.constant(ctx.buffer(&self.key("running_var")).map(|v| (v + self.eps).sqrt()));
            x.sub(mean).div(std)
        };
        normed.mul(gamma).add(beta)
    }
}

/// Batch-norm bottleneck followed by a bias-free identity classifier.
#[derive(Debug, Clone)]
pub struct ReidHead {
    pub bottleneck: BatchNorm1d,
    pub classifier: Linear,
}

impl ReidHead {
    pub fn new(prefix: &str, feature_dim: usize, num_classes: usize) -> Self {
        Self {
            bottleneck: BatchNorm1d::new(format!("{prefix}.bottleneck"), feature_dim),
            classifier: Linear::new(format!("{prefix}.classifier"), feature_dim, num_classes, false),
        }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut Rng) {
        self.bottleneck.init(store);
        self.classifier.init(store, 0.001, rng);
    }

    /// Returns `(normalized feature, logits)`.
    pub fn forward<'g>(&self, ctx: &Ctx<'g>, feature: Var<'g>) -> (Var<'g>, Var<'g>) {
        let bn = self.bottleneck.forward(ctx, feature);
        let logits = self.classifier.forward(ctx, bn);
        (bn, logits)
    }
}
