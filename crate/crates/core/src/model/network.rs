use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::dropout::ExampleTiedDropout;
use super::gates::{GateSet, UnitId};
use super::sparse::StaticSparseMask;
use super::spec::{Act, Activation, LayerKind, ModelSpec, Pool};
use crate::error::{shape_err, Error, Result};
use crate::graph::{Bindings, Graph, NormStats};
use crate::rng::{rng_for, stream};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor<T> {
    pub name: String,
    pub layer: usize,
    pub tensor: Tensor<T>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, Copy)]
pub enum Dropout<'a> {
    None,
    /// Inverted unit dropout with drop probability `p`; masks are drawn from
    /// `seed` and only in train mode.
    Standard { p: f64, seed: u64 },
    /// With `drop_mem`, only generalization units are active (ids ignored).
    /// Otherwise each row activates gen ∪ mem(ids[row]) in any mode.
    ExampleTied { spec: &'a ExampleTiedDropout, ids: Option<&'a [usize]>, drop_mem: bool },
}

#[derive(Debug, Clone, Copy)]
pub struct ForwardOptions<'a, T> {
    pub mode: Mode,
    pub gates: Option<&'a GateSet<T>>,
    pub dropout: Dropout<'a>,
    /// In train mode, frozen layers normalize with batch statistics and
    /// report them, so their running statistics can keep updating.
    pub frozen_bn_batch_stats: bool,
}

impl<'a, T> ForwardOptions<'a, T> {
    pub fn eval() -> Self {
        Self { mode: Mode::Eval, gates: None, dropout: Dropout::None, frozen_bn_batch_stats: false }
    }

    pub fn train() -> Self {
        Self { mode: Mode::Train, ..Self::eval() }
    }

    pub fn with_gates(mut self, gates: &'a GateSet<T>) -> Self {
        self.gates = Some(gates);
        self
    }

    pub fn with_dropout(mut self, dropout: Dropout<'a>) -> Self {
        self.dropout = dropout;
        self
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct GradRequest {
    pub params: bool,
    pub gates: bool,
}

#[derive(Debug, Clone)]
pub struct RunOutput<T> {
    pub logits: Tensor<T>,
    pub loss: Option<T>,
    pub param_grads: BTreeMap<String, Tensor<T>>,
    /// Per-layer gradient w.r.t. the unit gates (empty unless requested).
    pub gate_grads: Vec<Vec<T>>,
    /// `(layer, batch mean, unbiased batch variance)` of every batch-norm
    /// layer that normalized with batch statistics.
    pub bn_batch_stats: Vec<(usize, Vec<T>, Vec<T>)>,
}

/// Parameters θ = (θ_1..θ_d) of a [`ModelSpec`], plus batch-norm running
/// statistics and per-layer freeze flags.
#[derive(Debug, Clone, PartialEq)]
pub struct Model<T> {
    spec: ModelSpec,
    entering: Vec<Act>,
    params: Vec<NamedTensor<T>>,
    buffers: Vec<NamedTensor<T>>,
    frozen: Vec<bool>,
    sparse: Option<StaticSparseMask>,
}

fn weight_name(l: usize) -> String {
    format!("layer{l}.weight")
}
fn bias_name(l: usize) -> String {
    format!("layer{l}.bias")
}
fn gamma_name(l: usize) -> String {
    format!("layer{l}.bn.gamma")
}
fn beta_name(l: usize) -> String {
    format!("layer{l}.bn.beta")
}
fn mean_name(l: usize) -> String {
    format!("layer{l}.bn.running_mean")
}
fn var_name(l: usize) -> String {
    format!("layer{l}.bn.running_var")
}

impl<T: Scalar> Model<T> {
    /// Kaiming-normal (fan-in) weights, zero biases, unit BN scales.
    pub fn build(spec: &ModelSpec, seed: u64) -> Result<Self> {
        let entering = spec.trace()?;
        let mut params = Vec::new();
        let mut buffers = Vec::new();
        for (l, layer) in spec.layers.iter().enumerate() {
            let (wshape, fan_in, units) = match layer.kind {
                LayerKind::Dense { inputs, outputs } => (vec![inputs, outputs], inputs, outputs),
                LayerKind::Conv { in_channels, out_channels, kernel, .. } => (
                    vec![out_channels, in_channels, kernel, kernel],
                    in_channels * kernel * kernel,
                    out_channels,
                ),
            };
            let std = (2.0 / fan_in as f64).sqrt();
            let normal = Normal::new(0.0, std).map_err(|e| Error::Spec(e.to_string()))?;
            let mut rng = rng_for(seed, &[stream::INIT, l as u64]);
            let w = Tensor::from_fn(&wshape, |_| T::lit(normal.sample(&mut rng)));
            params.push(NamedTensor { name: weight_name(l), layer: l, tensor: w });
            params.push(NamedTensor { name: bias_name(l), layer: l, tensor: Tensor::zeros(&[units]) });
            if layer.batch_norm {
                params.push(NamedTensor { name: gamma_name(l), layer: l, tensor: Tensor::ones(&[units]) });
                params.push(NamedTensor { name: beta_name(l), layer: l, tensor: Tensor::zeros(&[units]) });
                buffers.push(NamedTensor { name: mean_name(l), layer: l, tensor: Tensor::zeros(&[units]) });
                buffers.push(NamedTensor { name: var_name(l), layer: l, tensor: Tensor::ones(&[units]) });
            }
        }
        Ok(Self {
            spec: spec.clone(),
            entering,
            params,
            buffers,
            frozen: vec![false; spec.layers.len()],
            sparse: None,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn num_layers(&self) -> usize {
        self.spec.layers.len()
    }

    pub fn head(&self) -> usize {
        self.num_layers() - 1
    }

    pub fn params(&self) -> &[NamedTensor<T>] {
        &self.params
    }

    pub fn buffers(&self) -> &[NamedTensor<T>] {
        &self.buffers
    }

    pub fn param(&self, name: &str) -> Option<&Tensor<T>> {
        self.params.iter().find(|p| p.name == name).map(|p| &p.tensor)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.params.iter_mut().find(|p| p.name == name).map(|p| &mut p.tensor)
    }

    pub fn buffer(&self, name: &str) -> Option<&Tensor<T>> {
        self.buffers.iter().find(|p| p.name == name).map(|p| &p.tensor)
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.tensor.len()).sum()
    }

    pub fn layer_param_count(&self, l: usize) -> usize {
        self.layer_params(l).map(|p| p.tensor.len()).sum()
    }

    pub fn layer_params(&self, l: usize) -> impl Iterator<Item = &NamedTensor<T>> {
        self.params.iter().filter(move |p| p.layer == l)
    }

    /// Parameters and buffers in catalog order.
    pub fn state(&self) -> impl Iterator<Item = &NamedTensor<T>> {
        self.params.iter().chain(&self.buffers)
    }

    pub fn state_mut(&mut self) -> impl Iterator<Item = &mut NamedTensor<T>> {
        self.params.iter_mut().chain(self.buffers.iter_mut())
    }

    pub fn units_per_layer(&self) -> Vec<usize> {
        self.spec.layers.iter().map(|l| l.units()).collect()
    }

    /// Stable enumeration of every unit, layer by layer.
    pub fn list_units(&self) -> Vec<UnitId> {
        self.units_per_layer()
            .iter()
            .enumerate()
            .flat_map(|(layer, &u)| (0..u).map(move |unit| UnitId { layer, unit }))
            .collect()
    }

    pub fn ones_gates(&self) -> GateSet<T> {
        GateSet::ones(&self.units_per_layer())
    }

    pub fn is_frozen(&self, l: usize) -> bool {
        self.frozen[l]
    }

    pub fn set_frozen(&mut self, l: usize, frozen: bool) -> Result<()> {
        let slot = self
            .frozen
            .get_mut(l)
            .ok_or_else(|| Error::InvalidArgument(format!("no layer {l}")))?;
        *slot = frozen;
        Ok(())
    }

    pub fn freeze_all_except(&mut self, keep: &[usize]) {
        for (l, f) in self.frozen.iter_mut().enumerate() {
            *f = !keep.contains(&l);
        }
    }

    pub fn sparse_mask(&self) -> Option<&StaticSparseMask> {
        self.sparse.as_ref()
    }

    /// Copies layer `l`'s parameters from `source`, leaving every other tensor
    /// untouched.
    pub fn replace_layer_params(&mut self, l: usize, source: &Model<T>) -> Result<()> {
        self.copy_layer(l, source, false)
    }

    pub fn replace_layer_buffers(&mut self, l: usize, source: &Model<T>) -> Result<()> {
        self.copy_layer(l, source, true)
    }

    fn copy_layer(&mut self, l: usize, source: &Model<T>, buffers: bool) -> Result<()> {
        if l >= self.num_layers() {
            return Err(Error::InvalidArgument(format!("no layer {l}")));
        }
        let (dst, src) = if buffers {
            (&mut self.buffers, &source.buffers)
        } else {
            (&mut self.params, &source.params)
        };
        for p in dst.iter_mut().filter(|p| p.layer == l) {
            let s = src
                .iter()
                .find(|s| s.name == p.name)
                .ok_or_else(|| shape_err("reinit_layer", format!("source lacks '{}'", p.name)))?;
            if s.tensor.shape() != p.tensor.shape() {
                return Err(shape_err(
                    "reinit_layer",
                    format!("'{}': {:?} vs {:?}", p.name, p.tensor.shape(), s.tensor.shape()),
                ));
            }
            p.tensor = s.tensor.clone();
        }
        Ok(())
    }

    /// Returns a copy with layer `l` set to `checkpoint`'s parameters.
    pub fn reinit_layer(&self, l: usize, checkpoint: &Model<T>) -> Result<Model<T>> {
        let mut out = self.clone();
        out.replace_layer_params(l, checkpoint)?;
        Ok(out)
    }

    /// Zeroes masked weights and keeps them at zero through training.
    pub fn apply_sparse_mask(&mut self, mask: StaticSparseMask) -> Result<()> {
        for name in mask.names() {
            let m = mask.mask(name).expect("listed");
            let p = self
                .param(name)
                .ok_or_else(|| shape_err("apply_sparse_mask", format!("model has no '{name}'")))?;
            if p.len() != m.len() {
                return Err(shape_err("apply_sparse_mask", format!("'{name}': {} vs mask {}", p.len(), m.len())));
            }
        }
        self.sparse = Some(mask);
        self.enforce_sparse_mask();
        Ok(())
    }

    /// `StaticSparseMask` over this model's weight tensors.
    pub fn sparse_mask_for(&self, keep: f64, seed: u64) -> Result<StaticSparseMask> {
        let tensors: Vec<(String, usize)> = (0..self.num_layers())
            .map(|l| (weight_name(l), self.param(&weight_name(l)).expect("weight").len()))
            .collect();
        StaticSparseMask::new(&tensors, keep, seed)
    }

    pub fn enforce_sparse_mask(&mut self) {
        let Some(mask) = self.sparse.clone() else { return };
        for p in &mut self.params {
            if let Some(m) = mask.mask(&p.name) {
                for (v, &keep) in p.tensor.data_mut().iter_mut().zip(m) {
                    if !keep {
                        *v = T::zero();
                    }
                }
            }
        }
    }

    pub fn mask_gradient(&self, name: &str, grad: &mut Tensor<T>) {
        if let Some(m) = self.sparse.as_ref().and_then(|s| s.mask(name)) {
            for (g, &keep) in grad.data_mut().iter_mut().zip(m) {
                if !keep {
                    *g = T::zero();
                }
            }
        }
    }

    /// `running = (1 − momentum)·running + momentum·batch`.
    pub fn update_running_stats(&mut self, l: usize, mean: &[T], var: &[T]) -> Result<()> {
        let m = T::lit(BN_MOMENTUM);
        for (name, batch) in [(mean_name(l), mean), (var_name(l), var)] {
            let buf = self
                .buffers
                .iter_mut()
                .find(|b| b.name == name)
                .ok_or_else(|| Error::InvalidArgument(format!("layer {l} has no batch norm")))?;
            if buf.tensor.len() != batch.len() {
                return Err(shape_err("update_running_stats", format!("{} vs {}", buf.tensor.len(), batch.len())));
            }
            for (r, &b) in buf.tensor.data_mut().iter_mut().zip(batch) {
                *r = (T::one() - m) * *r + m * b;
            }
        }
        Ok(())
    }

    /// Bitwise digest of one layer's parameters.
    pub fn layer_digest(&self, l: usize) -> u64 {
        let mut bytes = Vec::new();
        for p in self.layer_params(l) {
            bytes.extend_from_slice(p.name.as_bytes());
            for &v in p.tensor.data() {
                v.write_le(&mut bytes);
            }
        }
        crate::digest::fnv1a64(&bytes)
    }

    pub fn forward(&self, inputs: &Tensor<T>, opts: &ForwardOptions<'_, T>) -> Result<Tensor<T>> {
        Ok(self.run(inputs, opts, None, GradRequest::default())?.logits)
    }

    pub fn predict(&self, inputs: &Tensor<T>, opts: &ForwardOptions<'_, T>) -> Result<Vec<usize>> {
        Ok(argmax_rows(&self.forward(inputs, opts)?))
    }

    fn normalize_inputs(&self, inputs: &Tensor<T>) -> Result<Option<Tensor<T>>> {
        let dims = self.spec.input.dims();
        let s = inputs.shape();
        if s.len() == dims.len() + 1 && s[1..] == dims[..] {
            return Ok(None);
        }
        if s.len() >= 2 && s[1..].iter().product::<usize>() == self.spec.input.numel() {
            let mut shape = vec![s[0]];
            shape.extend(dims);
            return Ok(Some(inputs.clone().reshape(shape)?));
        }
        Err(shape_err("forward", format!("inputs {s:?} do not match model input {dims:?}")))
    }

    fn dropout_mask(&self, l: usize, n: usize, opts: &ForwardOptions<'_, T>) -> Result<Option<Tensor<T>>> {
        if l == self.head() {
            return Ok(None);
        }
        let units = self.spec.layers[l].units();
        match opts.dropout {
            Dropout::None => Ok(None),
            Dropout::Standard { p, seed } => {
                if !(0.0..1.0).contains(&p) {
                    return Err(Error::InvalidArgument(format!("dropout p must be in [0,1), got {p}")));
                }
                if opts.mode == Mode::Eval || p == 0.0 {
                    return Ok(None);
                }
                let scale = T::lit(1.0 / (1.0 - p));
                let mut rng = rng_for(seed, &[stream::DROPOUT, l as u64]);
                let mask = Tensor::from_fn(&[n, units], |_| {
                    if rng.random::<f64>() < p {
                        T::zero()
                    } else {
                        scale
                    }
                });
                Ok(Some(mask))
            }
            Dropout::ExampleTied { spec, ids, drop_mem } => {
                if !spec.applies_to(l) {
                    return Ok(None);
                }
                if drop_mem {
                    let keep = spec.drop_mem_mask(l)?;
                    return Ok(Some(Tensor::from_fn(&[n, units], |i| bool_scalar(keep[i % units]))));
                }
                let ids = ids.ok_or_else(|| {
                    Error::InvalidArgument("example-tied dropout needs example ids unless memorization units are dropped".into())
                })?;
                if ids.len() != n {
                    return Err(shape_err("example_tied_dropout", format!("{} ids for {n} rows", ids.len())));
                }
                let mut data = Vec::with_capacity(n * units);
                for &id in ids {
                    data.extend(spec.tied_mask(l, id)?.into_iter().map(bool_scalar::<T>));
                }
                Ok(Some(Tensor::new(vec![n, units], data)?))
            }
        }
    }

    /// Forward pass and, when a target is given, the weighted cross-entropy
    /// `Σ_i w_i·ℓ_i` with the requested gradients.
    pub fn run(
        &self,
        inputs: &Tensor<T>,
        opts: &ForwardOptions<'_, T>,
        target: Option<(&[usize], &[T])>,
        req: GradRequest,
    ) -> Result<RunOutput<T>> {
        let reshaped = self.normalize_inputs(inputs)?;
        let inputs = reshaped.as_ref().unwrap_or(inputs);
        let n = inputs.shape()[0];
        if let Some(g) = opts.gates {
            let units = self.units_per_layer();
            if g.num_layers() != units.len() || (0..units.len()).any(|l| g.layer(l).len() != units[l]) {
                return Err(shape_err("forward", "gate set does not match the model's units"));
            }
        }
        if req.gates && opts.gates.is_none() {
            return Err(Error::InvalidArgument("gate gradients requested without a gate set".into()));
        }

        let mut graph = Graph::<T>::new();
        let mut extras: Vec<(String, Tensor<T>)> = Vec::new();
        let mut bn_nodes = Vec::new();
        let mut h = graph.leaf("input", false);
        for (l, layer) in self.spec.layers.iter().enumerate() {
            let trainable = req.params && !self.frozen[l];
            let w = graph.leaf(&weight_name(l), trainable);
            let b = graph.leaf(&bias_name(l), trainable);
            match layer.kind {
                LayerKind::Dense { .. } => {
                    if matches!(self.entering[l], Act::Image(..)) {
                        h = graph.flatten(h);
                    }
                    h = graph.matmul(h, w);
                    h = graph.add(h, b);
                }
                LayerKind::Conv { stride, pad, .. } => {
                    h = graph.conv2d(h, w, stride, pad);
                    h = graph.add(h, b);
                }
            }
            if layer.batch_norm {
                let gm = graph.leaf(&gamma_name(l), trainable);
                let bt = graph.leaf(&beta_name(l), trainable);
                let batch = opts.mode == Mode::Train && (!self.frozen[l] || opts.frozen_bn_batch_stats);
                let stats = if batch {
                    NormStats::Batch
                } else {
                    NormStats::Running {
                        mean: self.buffer(&mean_name(l)).expect("bn buffer").data().to_vec(),
                        var: self.buffer(&var_name(l)).expect("bn buffer").data().to_vec(),
                    }
                };
                h = graph.batch_norm(h, gm, bt, T::lit(BN_EPS), stats);
                if batch {
                    bn_nodes.push((l, h));
                }
            }
            if layer.activation == Activation::Relu {
                h = graph.relu(h);
            }
            if let Some(mask) = self.dropout_mask(l, n, opts)? {
                let name = format!("dropout{l}");
                let m = graph.leaf(&name, false);
                h = graph.mul(h, m);
                extras.push((name, mask));
            }
            if let Some(gs) = opts.gates {
                if req.gates || !gs.is_all_ones(l) {
                    let name = format!("gate{l}");
                    let gl = graph.leaf(&name, req.gates);
                    h = graph.gate(h, gl);
                    extras.push((name, Tensor::new(vec![gs.layer(l).len()], gs.layer(l).to_vec())?));
                }
            }
            match layer.pool {
                Pool::None => {}
                Pool::Max2 => h = graph.max_pool2(h),
                Pool::GlobalAvg => h = graph.global_avg_pool(h),
            }
        }
        let logits_node = h;
        let loss_node = match target {
            Some((labels, weights)) => {
                if labels.len() != n || weights.len() != n {
                    return Err(shape_err("forward", format!("{} labels / {} weights for {n} rows", labels.len(), weights.len())));
                }
                Some(graph.softmax_cross_entropy(logits_node, labels.to_vec(), weights.to_vec()))
            }
            None => None,
        };

        let mut bindings = Bindings::new().with("input", inputs);
        for p in self.params.iter() {
            bindings.insert(p.name.clone(), &p.tensor);
        }
        for (name, t) in &extras {
            bindings.insert(name.clone(), t);
        }
        graph.evaluate(&bindings)?;

        let logits = graph.value(logits_node).expect("evaluated").clone();
        let loss = loss_node.map(|id| graph.value(id).expect("evaluated").data()[0]);
        let bn_batch_stats = bn_nodes
            .iter()
            .filter_map(|&(l, id)| graph.batch_stats(id).map(|(m, v)| (l, m, v)))
            .collect();
        let mut out = RunOutput { logits, loss, param_grads: BTreeMap::new(), gate_grads: Vec::new(), bn_batch_stats };
        if let Some(loss_id) = loss_node {
            if req.params || req.gates {
                let mut grads = graph.backward(loss_id)?.into_map();
                if req.gates {
                    out.gate_grads = (0..self.num_layers())
                        .map(|l| grads.remove(&format!("gate{l}")).map(Tensor::into_data).unwrap_or_default())
                        .collect();
                }
                grads.retain(|k, _| !k.starts_with("gate"));
                out.param_grads = grads;
            }
        }
        Ok(out)
    }
}

fn bool_scalar<T: Scalar>(b: bool) -> T {
    if b {
        T::one()
    } else {
        T::zero()
    }
}

/// Index of the largest value in each row; ties resolve to the lowest index.
pub fn argmax_rows<T: Scalar>(logits: &Tensor<T>) -> Vec<usize> {
    let k = logits.shape()[1];
    logits
        .data()
        .chunks(k)
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}
