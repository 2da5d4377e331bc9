//! Reverse-mode differentiation over a fixed set of tensor primitives.
//!
//! A [`Graph`] is declared up front (leaves by name, then primitive
//! applications, each referring only to earlier nodes), evaluated against a
//! set of [`Bindings`], and differentiated from a scalar loss node. Every
//! intermediate value is cached by [`Graph::evaluate`]; [`Graph::backward`]
//! visits each node once in reverse declaration order.

use std::collections::{BTreeMap, HashMap};

use crate::error::{shape_err, Error, Result};
use crate::kernels::{col2im, gemm, im2col, transpose, ConvGeom};
use crate::scalar::{DType, Scalar};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

/// Statistics used by a batch-normalization node.
#[derive(Debug, Clone)]
pub enum NormStats<T> {
    /// Normalize with the statistics of the current batch.
    Batch,
    /// Normalize with fixed (running) statistics.
    Running { mean: Vec<T>, var: Vec<T> },
}

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf { name: String, requires_grad: bool },
    MatMul(NodeId, NodeId),
    Conv2d { input: NodeId, weight: NodeId, stride: usize, pad: usize },
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Gate(NodeId, NodeId),
    Relu(NodeId),
    MaxPool2(NodeId),
    GlobalAvgPool(NodeId),
    BatchNorm { input: NodeId, gamma: NodeId, beta: NodeId, eps: T, stats: NormStats<T> },
    Flatten(NodeId),
    SoftmaxCrossEntropy { logits: NodeId, labels: Vec<usize>, weights: Vec<T> },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf { .. } => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Conv2d { .. } => "conv2d",
            Op::Add(..) => "add",
            Op::Mul(..) => "multiply",
            Op::Gate(..) => "gate",
            Op::Relu(..) => "relu",
            Op::MaxPool2(..) => "max_pool2",
            Op::GlobalAvgPool(..) => "global_avg_pool",
            Op::BatchNorm { .. } => "batch_norm",
            Op::Flatten(..) => "flatten",
            Op::SoftmaxCrossEntropy { .. } => "softmax_cross_entropy",
        }
    }

    fn inputs(&self) -> Vec<NodeId> {
        match self {
            Op::Leaf { .. } => vec![],
            Op::MatMul(a, b) | Op::Add(a, b) | Op::Mul(a, b) | Op::Gate(a, b) => vec![*a, *b],
            Op::Conv2d { input, weight, .. } => vec![*input, *weight],
            Op::Relu(a) | Op::MaxPool2(a) | Op::GlobalAvgPool(a) | Op::Flatten(a) => vec![*a],
            Op::BatchNorm { input, gamma, beta, .. } => vec![*input, *gamma, *beta],
            Op::SoftmaxCrossEntropy { logits, .. } => vec![*logits],
        }
    }
}

#[derive(Debug, Clone)]
enum Aux<T> {
    None,
    Argmax(Vec<usize>),
    Norm { xhat: Vec<T>, inv_std: Vec<T>, mean: Vec<T>, var: Vec<T>, count: usize },
    Probs(Vec<T>),
    Cols(Vec<T>),
}

/// Leaf values for one evaluation, looked up by name.
#[derive(Debug, Clone, Default)]
pub struct Bindings<'a, T> {
    map: HashMap<String, &'a Tensor<T>>,
}

impl<'a, T> Bindings<'a, T> {
    pub fn new() -> Self {
        Self { map: HashMap::new() }
    }

    pub fn with(mut self, name: impl Into<String>, value: &'a Tensor<T>) -> Self {
        self.map.insert(name.into(), value);
        self
    }

    pub fn insert(&mut self, name: impl Into<String>, value: &'a Tensor<T>) {
        self.map.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&'a Tensor<T>> {
        self.map.get(name).copied()
    }
}

/// Gradients of a scalar loss with respect to every `requires_grad` leaf.
#[derive(Debug, Clone, Default)]
pub struct Gradients<T> {
    by_name: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.by_name.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.by_name.iter()
    }

    pub fn into_map(self) -> BTreeMap<String, Tensor<T>> {
        self.by_name
    }

    pub fn len(&self) -> usize {
        self.by_name.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_name.is_empty()
    }
}

#[derive(Debug, Clone, Copy)]
enum Bcast {
    Same,
    /// `b` has shape `[c]`, broadcast over axis 1 of `a`.
    Channel { c: usize, inner: usize },
    /// `b` has shape `[n, c]`, broadcast over the trailing axes of `a`.
    BatchChannel { inner: usize },
}

impl Bcast {
    fn resolve(a: &[usize], b: &[usize]) -> Option<Self> {
        if a == b {
            return Some(Bcast::Same);
        }
        if a.len() >= 2 && b.len() == 1 && b[0] == a[1] {
            return Some(Bcast::Channel { c: a[1], inner: a[2..].iter().product() });
        }
        if a.len() > 2 && b.len() == 2 && b[0] == a[0] && b[1] == a[1] {
            return Some(Bcast::BatchChannel { inner: a[2..].iter().product() });
        }
        None
    }

    #[inline]
    fn index(self, i: usize) -> usize {
        match self {
            Bcast::Same => i,
            Bcast::Channel { c, inner } => (i / inner) % c,
            Bcast::BatchChannel { inner } => i / inner,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct Graph<T> {
    ops: Vec<Op<T>>,
    leaves: HashMap<String, NodeId>,
    values: Vec<Option<Tensor<T>>>,
    aux: Vec<Aux<T>>,
    evaluated: bool,
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            ops: Vec::new(),
            leaves: HashMap::new(),
            values: Vec::new(),
            aux: Vec::new(),
            evaluated: false,
        }
    }

    fn push(&mut self, op: Op<T>) -> NodeId {
        self.evaluated = false;
        self.ops.push(op);
        NodeId(self.ops.len() - 1)
    }

    /// Declares a named leaf; redeclaring a name returns the existing node.
    pub fn leaf(&mut self, name: &str, requires_grad: bool) -> NodeId {
        if let Some(&id) = self.leaves.get(name) {
            if let Op::Leaf { requires_grad: rg, .. } = &mut self.ops[id.0] {
                *rg |= requires_grad;
            }
            return id;
        }
        let id = self.push(Op::Leaf { name: name.to_string(), requires_grad });
        self.leaves.insert(name.to_string(), id);
        id
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::MatMul(a, b))
    }

    pub fn conv2d(&mut self, input: NodeId, weight: NodeId, stride: usize, pad: usize) -> NodeId {
        self.push(Op::Conv2d { input, weight, stride, pad })
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Add(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Mul(a, b))
    }

    /// Multiplies axis 1 of `x` by a per-unit gate vector.
    pub fn gate(&mut self, x: NodeId, gates: NodeId) -> NodeId {
        self.push(Op::Gate(x, gates))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Relu(a))
    }

    pub fn max_pool2(&mut self, a: NodeId) -> NodeId {
        self.push(Op::MaxPool2(a))
    }

    pub fn global_avg_pool(&mut self, a: NodeId) -> NodeId {
        self.push(Op::GlobalAvgPool(a))
    }

    pub fn batch_norm(
        &mut self,
        input: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: T,
        stats: NormStats<T>,
    ) -> NodeId {
        self.push(Op::BatchNorm { input, gamma, beta, eps, stats })
    }

    pub fn flatten(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Flatten(a))
    }

    /// Weighted sum of per-row cross-entropy losses: `Σ_i w_i · ℓ_i`.
    pub fn softmax_cross_entropy(&mut self, logits: NodeId, labels: Vec<usize>, weights: Vec<T>) -> NodeId {
        self.push(Op::SoftmaxCrossEntropy { logits, labels, weights })
    }

    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    pub fn output(&self) -> Option<NodeId> {
        (!self.ops.is_empty()).then(|| NodeId(self.ops.len() - 1))
    }

    pub fn leaf_id(&self, name: &str) -> Option<NodeId> {
        self.leaves.get(name).copied()
    }

    pub fn value(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.values.get(id.0).and_then(|v| v.as_ref())
    }

    /// Batch mean and unbiased batch variance of a batch-norm node evaluated in
    /// batch mode.
    pub fn batch_stats(&self, id: NodeId) -> Option<(Vec<T>, Vec<T>)> {
        match (self.ops.get(id.0)?, self.aux.get(id.0)?) {
            (Op::BatchNorm { stats: NormStats::Batch, .. }, Aux::Norm { mean, var, count, .. }) => {
                let m = T::lit(*count as f64);
                let unbiased = if *count > 1 {
                    var.iter().map(|&v| v * m / (m - T::one())).collect()
                } else {
                    var.clone()
                };
                Some((mean.clone(), unbiased))
            }
            _ => None,
        }
    }

    fn val(&self, id: NodeId) -> &Tensor<T> {
        self.values[id.0].as_ref().expect("inputs are evaluated before use")
    }

    /// Evaluates every node in declaration order and returns the last one.
    pub fn evaluate(&mut self, bindings: &Bindings<'_, T>) -> Result<&Tensor<T>> {
        if self.ops.is_empty() {
            return Err(Error::State("evaluate on an empty graph".into()));
        }
        self.evaluated = false;
        self.values = vec![None; self.ops.len()];
        self.aux = vec![Aux::None; self.ops.len()];
        for i in 0..self.ops.len() {
            for inp in self.ops[i].inputs() {
                if inp.0 >= i {
                    return Err(Error::State(format!(
                        "node {i} ({}) refers to later node {}",
                        self.ops[i].name(),
                        inp.0
                    )));
                }
            }
            let (value, aux) = self.forward_node(i, bindings)?;
            if !value.is_finite() {
                return Err(Error::NumericFault { op: self.ops[i].name().to_string() });
            }
            self.values[i] = Some(value);
            self.aux[i] = aux;
        }
        self.evaluated = true;
        Ok(self.values.last().and_then(|v| v.as_ref()).expect("evaluated"))
    }

    fn forward_node(&self, i: usize, bindings: &Bindings<'_, T>) -> Result<(Tensor<T>, Aux<T>)> {
        let op = &self.ops[i];
        let name = op.name();
        Ok(match op {
            Op::Leaf { name: leaf, .. } => {
                let t = bindings
                    .get(leaf)
                    .ok_or_else(|| Error::State(format!("leaf '{leaf}' is not bound")))?;
                let mut t = t.clone();
                t.clear_grad();
                (t, Aux::None)
            }
            Op::MatMul(a, b) => {
                let (a, b) = (self.val(*a), self.val(*b));
                let (sa, sb) = (a.shape(), b.shape());
                if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
                    return Err(shape_err(name, format!("{sa:?} x {sb:?}")));
                }
                let out = gemm(a.data(), b.data(), sa[0], sa[1], sb[1]);
                (Tensor::new(vec![sa[0], sb[1]], out)?, Aux::None)
            }
            Op::Conv2d { input, weight, stride, pad } => {
                let (x, w) = (self.val(*input), self.val(*weight));
                let g = conv_geom(x.shape(), w.shape(), *stride, *pad)?;
                let (oh, ow) = g.out_hw().expect("checked");
                let oc = w.shape()[0];
                let cols = im2col(x.data(), g);
                let wt = transpose(w.data(), oc, g.patch());
                let rows = gemm(&cols, &wt, g.n * oh * ow, g.patch(), oc);
                let plane = oh * ow;
                let mut out = vec![T::zero(); g.n * oc * plane];
                for n in 0..g.n {
                    for p in 0..plane {
                        let r = &rows[(n * plane + p) * oc..(n * plane + p + 1) * oc];
                        for (o, &v) in r.iter().enumerate() {
                            out[(n * oc + o) * plane + p] = v;
                        }
                    }
                }
                (Tensor::new(vec![g.n, oc, oh, ow], out)?, Aux::Cols(cols))
            }
            Op::Add(a, b) | Op::Mul(a, b) | Op::Gate(a, b) => {
                let (a, b) = (self.val(*a), self.val(*b));
                let bc = Bcast::resolve(a.shape(), b.shape()).ok_or_else(|| {
                    shape_err(name, format!("cannot broadcast {:?} onto {:?}", b.shape(), a.shape()))
                })?;
                if matches!(op, Op::Gate(..)) && !matches!(bc, Bcast::Channel { .. }) {
                    return Err(shape_err(
                        name,
                        format!("gate vector {:?} does not match axis 1 of {:?}", b.shape(), a.shape()),
                    ));
                }
                let (ad, bd) = (a.data(), b.data());
                let out: Vec<T> = if matches!(op, Op::Add(..)) {
                    (0..ad.len()).map(|i| ad[i] + bd[bc.index(i)]).collect()
                } else {
                    (0..ad.len()).map(|i| ad[i] * bd[bc.index(i)]).collect()
                };
                (Tensor::new(a.shape().to_vec(), out)?, Aux::None)
            }
            Op::Relu(a) => {
                let a = self.val(*a);
                (a.map(|v| if v > T::zero() { v } else { T::zero() }), Aux::None)
            }
            Op::MaxPool2(a) => {
                let a = self.val(*a);
                let s = a.shape();
                if s.len() != 4 || s[2] < 2 || s[3] < 2 {
                    return Err(shape_err(name, format!("expected [n,c,h>=2,w>=2], got {s:?}")));
                }
                let (nc, h, w) = (s[0] * s[1], s[2], s[3]);
                let (oh, ow) = (h / 2, w / 2);
                let d = a.data();
                let mut out = Vec::with_capacity(nc * oh * ow);
                let mut arg = Vec::with_capacity(nc * oh * ow);
                for p in 0..nc {
                    let base = p * h * w;
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let mut best = base + 2 * oy * w + 2 * ox;
                            for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                                let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                                if d[idx] > d[best] {
                                    best = idx;
                                }
                            }
                            out.push(d[best]);
                            arg.push(best);
                        }
                    }
                }
                (Tensor::new(vec![s[0], s[1], oh, ow], out)?, Aux::Argmax(arg))
            }
            Op::GlobalAvgPool(a) => {
                let a = self.val(*a);
                let s = a.shape();
                if s.len() != 4 {
                    return Err(shape_err(name, format!("expected [n,c,h,w], got {s:?}")));
                }
                let plane = s[2] * s[3];
                let inv = T::one() / T::lit(plane as f64);
                let out = a.data().chunks(plane).map(|c| c.iter().copied().sum::<T>() * inv).collect();
                (Tensor::new(vec![s[0], s[1]], out)?, Aux::None)
            }
            Op::BatchNorm { input, gamma, beta, eps, stats } => {
                let (x, gm, bt) = (self.val(*input), self.val(*gamma), self.val(*beta));
                let s = x.shape();
                if s.len() < 2 || gm.shape() != [s[1]] || bt.shape() != [s[1]] {
                    return Err(shape_err(
                        name,
                        format!("input {s:?}, gamma {:?}, beta {:?}", gm.shape(), bt.shape()),
                    ));
                }
                let c = s[1];
                let inner: usize = s[2..].iter().product();
                let count = s[0] * inner;
                let d = x.data();
                let ch = |i: usize| (i / inner) % c;
                let (mean, var) = match stats {
                    NormStats::Batch => {
                        let mut mean = vec![T::zero(); c];
                        for (i, &v) in d.iter().enumerate() {
                            mean[ch(i)] += v;
                        }
                        let m = T::lit(count as f64);
                        mean.iter_mut().for_each(|v| *v /= m);
                        let mut var = vec![T::zero(); c];
                        for (i, &v) in d.iter().enumerate() {
                            let dv = v - mean[ch(i)];
                            var[ch(i)] += dv * dv;
                        }
                        var.iter_mut().for_each(|v| *v /= m);
                        (mean, var)
                    }
                    NormStats::Running { mean, var } => {
                        if mean.len() != c || var.len() != c {
                            return Err(shape_err(name, format!("running stats for {} channels, input has {c}", mean.len())));
                        }
                        (mean.clone(), var.clone())
                    }
                };
                let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + *eps).sqrt()).collect();
                let xhat: Vec<T> = d.iter().enumerate().map(|(i, &v)| (v - mean[ch(i)]) * inv_std[ch(i)]).collect();
                let out = xhat
                    .iter()
                    .enumerate()
                    .map(|(i, &v)| gm.data()[ch(i)] * v + bt.data()[ch(i)])
                    .collect();
                (Tensor::new(s.to_vec(), out)?, Aux::Norm { xhat, inv_std, mean, var, count })
            }
            Op::Flatten(a) => {
                let a = self.val(*a);
                let s = a.shape();
                let rest: usize = s[1..].iter().product();
                (a.clone().reshape(vec![s[0], rest.max(1)])?, Aux::None)
            }
            Op::SoftmaxCrossEntropy { logits, labels, weights } => {
                let z = self.val(*logits);
                let s = z.shape();
                if s.len() != 2 || labels.len() != s[0] || weights.len() != s[0] {
                    return Err(shape_err(
                        name,
                        format!("logits {s:?}, {} labels, {} weights", labels.len(), weights.len()),
                    ));
                }
                let k = s[1];
                if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
                    return Err(shape_err(name, format!("label {bad} out of range for {k} classes")));
                }
                let mut probs = vec![T::zero(); z.len()];
                let mut loss = T::zero();
                for (r, row) in z.data().chunks(k).enumerate() {
                    let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
                    let mut total = T::zero();
                    for (j, &v) in row.iter().enumerate() {
                        let e = (v - mx).exp();
                        probs[r * k + j] = e;
                        total += e;
                    }
                    for p in &mut probs[r * k..(r + 1) * k] {
                        *p /= total;
                    }
                    let lse = mx + total.ln();
                    loss += weights[r] * (lse - row[labels[r]]);
                }
                (Tensor::scalar(loss), Aux::Probs(probs))
            }
        })
    }

    /// Gradients of the scalar `loss` node with respect to every leaf declared
    /// with `requires_grad`.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients<T>> {
        if !self.evaluated {
            return Err(Error::State("backward called before a successful evaluate".into()));
        }
        if loss.0 >= self.ops.len() || self.val(loss).len() != 1 {
            return Err(Error::State("backward requires a scalar loss node".into()));
        }
        let n = loss.0 + 1;
        let mut needs = vec![false; n];
        for i in 0..n {
            needs[i] = match &self.ops[i] {
                Op::Leaf { requires_grad, .. } => *requires_grad,
                op => op.inputs().iter().any(|p| needs[p.0]),
            };
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; n];
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..n).rev() {
            if !needs[i] {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if let Op::Leaf { .. } = self.ops[i] {
                grads[i] = Some(g);
                continue;
            }
            for (inp, gi) in self.backward_node(i, &g, &needs)? {
                match &mut grads[inp.0] {
                    Some(acc) => acc.iter_mut().zip(&gi).for_each(|(a, &b)| *a += b),
                    slot @ None => *slot = Some(gi),
                }
            }
        }
        let mut by_name = BTreeMap::new();
        for (i, op) in self.ops.iter().enumerate() {
            if let Op::Leaf { name, requires_grad: true } = op {
                let v = self.val(NodeId(i));
                let g = grads.get_mut(i).and_then(Option::take).unwrap_or_else(|| vec![T::zero(); v.len()]);
                by_name.insert(name.clone(), Tensor::new(v.shape().to_vec(), g)?);
            }
        }
        Ok(Gradients { by_name })
    }

    fn backward_node(&self, i: usize, g: &[T], needs: &[bool]) -> Result<Vec<(NodeId, Vec<T>)>> {
        let mut out = Vec::new();
        match &self.ops[i] {
            Op::Leaf { .. } => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.val(*a), self.val(*b));
                let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                if needs[a.0] {
                    let bt = transpose(bv.data(), k, n);
                    out.push((*a, gemm(g, &bt, m, n, k)));
                }
                if needs[b.0] {
                    let at = transpose(av.data(), m, k);
                    out.push((*b, gemm(&at, g, k, m, n)));
                }
            }
            Op::Conv2d { input, weight, stride, pad } => {
                let (x, w) = (self.val(*input), self.val(*weight));
                let geom = conv_geom(x.shape(), w.shape(), *stride, *pad)?;
                let (oh, ow) = geom.out_hw().expect("checked");
                let oc = w.shape()[0];
                let plane = oh * ow;
                let np = geom.n * plane;
                // rows layout [n·oh·ow, oc]
                let mut grows = vec![T::zero(); np * oc];
                for n in 0..geom.n {
                    for o in 0..oc {
                        let src = &g[(n * oc + o) * plane..(n * oc + o + 1) * plane];
                        for (p, &v) in src.iter().enumerate() {
                            grows[(n * plane + p) * oc + o] = v;
                        }
                    }
                }
                if needs[weight.0] {
                    let Aux::Cols(cols) = &self.aux[i] else {
                        return Err(Error::State("conv2d cache missing".into()));
                    };
                    let gt = transpose(&grows, np, oc);
                    out.push((*weight, gemm(&gt, cols, oc, np, geom.patch())));
                }
                if needs[input.0] {
                    let dcols = gemm(&grows, w.data(), np, oc, geom.patch());
                    out.push((*input, col2im(&dcols, geom)));
                }
            }
            Op::Add(a, b) => {
                let (av, bv) = (self.val(*a), self.val(*b));
                let bc = Bcast::resolve(av.shape(), bv.shape()).expect("checked in forward");
                if needs[a.0] {
                    out.push((*a, g.to_vec()));
                }
                if needs[b.0] {
                    let mut gb = vec![T::zero(); bv.len()];
                    for (idx, &gv) in g.iter().enumerate() {
                        gb[bc.index(idx)] += gv;
                    }
                    out.push((*b, gb));
                }
            }
            Op::Mul(a, b) | Op::Gate(a, b) => {
                let (av, bv) = (self.val(*a), self.val(*b));
                let bc = Bcast::resolve(av.shape(), bv.shape()).expect("checked in forward");
                let (ad, bd) = (av.data(), bv.data());
                if needs[a.0] {
                    out.push((*a, g.iter().enumerate().map(|(idx, &gv)| gv * bd[bc.index(idx)]).collect()));
                }
                if needs[b.0] {
                    let mut gb = vec![T::zero(); bv.len()];
                    for (idx, &gv) in g.iter().enumerate() {
                        gb[bc.index(idx)] += gv * ad[idx];
                    }
                    out.push((*b, gb));
                }
            }
            Op::Relu(a) => {
                if needs[a.0] {
                    let x = self.val(*a).data();
                    out.push((*a, g.iter().zip(x).map(|(&gv, &xv)| if xv > T::zero() { gv } else { T::zero() }).collect()));
                }
            }
            Op::MaxPool2(a) => {
                if needs[a.0] {
                    let Aux::Argmax(arg) = &self.aux[i] else {
                        return Err(Error::State("max_pool2 cache missing".into()));
                    };
                    let mut ga = vec![T::zero(); self.val(*a).len()];
                    for (&idx, &gv) in arg.iter().zip(g) {
                        ga[idx] += gv;
                    }
                    out.push((*a, ga));
                }
            }
            Op::GlobalAvgPool(a) => {
                if needs[a.0] {
                    let s = self.val(*a).shape();
                    let plane = s[2] * s[3];
                    let inv = T::one() / T::lit(plane as f64);
                    let mut ga = Vec::with_capacity(s.iter().product());
                    for &gv in g {
                        ga.extend(std::iter::repeat(gv * inv).take(plane));
                    }
                    out.push((*a, ga));
                }
            }
            Op::BatchNorm { input, gamma, beta, stats, .. } => {
                let Aux::Norm { xhat, inv_std, count, .. } = &self.aux[i] else {
                    return Err(Error::State("batch_norm cache missing".into()));
                };
                let x = self.val(*input);
                let gm = self.val(*gamma).data();
                let c = x.shape()[1];
                let inner: usize = x.shape()[2..].iter().product();
                let ch = |idx: usize| (idx / inner) % c;
                let mut sum_g = vec![T::zero(); c];
                let mut sum_gx = vec![T::zero(); c];
                for (idx, &gv) in g.iter().enumerate() {
                    sum_g[ch(idx)] += gv;
                    sum_gx[ch(idx)] += gv * xhat[idx];
                }
                if needs[input.0] {
                    let gx: Vec<T> = match stats {
                        NormStats::Batch => {
                            let m = T::lit(*count as f64);
                            g.iter()
                                .enumerate()
                                .map(|(idx, &gv)| {
                                    let k = ch(idx);
                                    gm[k] * inv_std[k] / m * (m * gv - sum_g[k] - xhat[idx] * sum_gx[k])
                                })
                                .collect()
                        }
                        NormStats::Running { .. } => {
                            g.iter().enumerate().map(|(idx, &gv)| gv * gm[ch(idx)] * inv_std[ch(idx)]).collect()
                        }
                    };
                    out.push((*input, gx));
                }
                if needs[gamma.0] {
                    out.push((*gamma, sum_gx));
                }
                if needs[beta.0] {
                    out.push((*beta, sum_g));
                }
            }
            Op::Flatten(a) => {
                if needs[a.0] {
                    out.push((*a, g.to_vec()));
                }
            }
            Op::SoftmaxCrossEntropy { logits, labels, weights } => {
                if needs[logits.0] {
                    let Aux::Probs(probs) = &self.aux[i] else {
                        return Err(Error::State("softmax cache missing".into()));
                    };
                    let k = self.val(*logits).shape()[1];
                    let up = g[0];
                    let mut gz = probs.clone();
                    for (r, row) in gz.chunks_mut(k).enumerate() {
                        row[labels[r]] -= T::one();
                        let s = up * weights[r];
                        row.iter_mut().for_each(|v| *v *= s);
                    }
                    out.push((*logits, gz));
                }
            }
        }
        Ok(out)
    }
}

fn conv_geom(xs: &[usize], ws: &[usize], stride: usize, pad: usize) -> Result<ConvGeom> {
    if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[1] || ws[2] != ws[3] {
        return Err(shape_err("conv2d", format!("input {xs:?}, kernel {ws:?}")));
    }
    let g = ConvGeom { n: xs[0], c: xs[1], h: xs[2], w: xs[3], k: ws[2], stride, pad };
    if g.out_hw().is_none() {
        return Err(shape_err(
            "conv2d",
            format!("kernel {ws:?} with stride {stride}, pad {pad} does not fit input {xs:?}"),
        ));
    }
    Ok(g)
}

/// Central-difference estimate of `d output / d param` at the given flat
/// coordinates. The graph output must be scalar. Only `f64` graphs are
/// accepted: the estimate is used as an oracle and `f32` rounding swamps it.
pub fn finite_diff_coords<T: Scalar>(
    graph: &mut Graph<T>,
    bindings: &Bindings<'_, T>,
    param: &str,
    coords: &[usize],
    step: f64,
) -> Result<Vec<T>> {
    if T::DTYPE != DType::F64 {
        return Err(Error::InvalidArgument("finite differences require f64 tensors".into()));
    }
    if !(step > 0.0) {
        return Err(Error::InvalidArgument(format!("step must be positive, got {step}")));
    }
    let base = bindings
        .get(param)
        .ok_or_else(|| Error::State(format!("parameter '{param}' is not bound")))?;
    let mut perturbed = base.clone();
    let mut out = Vec::with_capacity(coords.len());
    let h = T::lit(step);
    for &c in coords {
        if c >= base.len() {
            return Err(Error::InvalidArgument(format!("coordinate {c} out of range for '{param}'")));
        }
        let orig = base.data()[c];
        perturbed.data_mut()[c] = orig + h;
        let plus = scalar_output(graph, &bindings.clone().with(param, &perturbed))?;
        perturbed.data_mut()[c] = orig - h;
        let minus = scalar_output(graph, &bindings.clone().with(param, &perturbed))?;
        perturbed.data_mut()[c] = orig;
        out.push((plus - minus) / (h + h));
    }
    graph.evaluate(bindings)?;
    Ok(out)
}

/// Central-difference gradient over every coordinate of `param`.
pub fn finite_diff_gradient<T: Scalar>(
    graph: &mut Graph<T>,
    bindings: &Bindings<'_, T>,
    param: &str,
    step: f64,
) -> Result<Tensor<T>> {
    let base = bindings
        .get(param)
        .ok_or_else(|| Error::State(format!("parameter '{param}' is not bound")))?;
    let coords: Vec<usize> = (0..base.len()).collect();
    let g = finite_diff_coords(graph, bindings, param, &coords, step)?;
    Tensor::new(base.shape().to_vec(), g)
}

fn scalar_output<T: Scalar>(graph: &mut Graph<T>, bindings: &Bindings<'_, T>) -> Result<T> {
    let out = graph.evaluate(bindings)?;
    if out.len() != 1 {
        return Err(Error::State("finite differences require a scalar output".into()));
    }
    Ok(out.data()[0])
}
