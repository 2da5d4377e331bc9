//! Greedy critical-unit removal under a noise-smoothed classifier, flip
//! statistics, and the flip-count mislabel detector.

use std::collections::BTreeMap;

use rand::seq::index;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::ProbeDataset;
use crate::error::{shape_err, Error, Result};
use crate::model::{ForwardOptions, GateSet, GradRequest, LayerKind, Model, UnitId};
use crate::rng::{rng_for, stream};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::trainer::{evaluate_ids, EvalOptions};

/// Row-wise softmax in f64.
pub fn softmax_rows<T: Scalar>(logits: &Tensor<T>) -> Vec<Vec<f64>> {
    let k = logits.shape()[1];
    logits
        .data()
        .chunks(k)
        .map(|row| {
            let row: Vec<f64> = row.iter().map(|v| v.to_f64().unwrap_or(f64::NAN)).collect();
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
            let s: f64 = e.iter().sum();
            e.into_iter().map(|v| v / s).collect()
        })
        .collect()
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (j, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = j;
        }
    }
    best
}

/// The base model averaged over `k` Gaussian perturbations of its input.
#[derive(Debug, Clone, Copy)]
pub struct SmoothedClassifier<'a, T> {
    pub model: &'a Model<T>,
    pub sigma: f64,
    pub k: usize,
    pub seed: u64,
}

impl<'a, T: Scalar> SmoothedClassifier<'a, T> {
    pub fn new(model: &'a Model<T>, sigma: f64, k: usize, seed: u64) -> Result<Self> {
        if !(sigma >= 0.0) || k == 0 {
            return Err(Error::InvalidArgument(format!("smoothing needs sigma >= 0 and k >= 1, got {sigma}, {k}")));
        }
        Ok(Self { model, sigma, k, seed })
    }

    /// `copies` noisy versions of each row of `x`; draw streams are keyed by `key`.
    fn perturb(&self, x: &Tensor<T>, copies: usize, key: &[u64]) -> Result<Tensor<T>> {
        let n = x.shape()[0];
        let row = x.len() / n;
        let mut shape = x.shape().to_vec();
        shape[0] = n * copies;
        let mut data = Vec::with_capacity(n * copies * row);
        for r in 0..n {
            for _ in 0..copies {
                data.extend_from_slice(&x.data()[r * row..(r + 1) * row]);
            }
        }
        if self.sigma > 0.0 {
            let normal = Normal::new(0.0, self.sigma).map_err(|e| Error::InvalidArgument(e.to_string()))?;
            let mut path = vec![stream::SMOOTHING];
            path.extend_from_slice(key);
            let mut rng = rng_for(self.seed, &path);
            for v in &mut data {
                *v += T::lit(normal.sample(&mut rng));
            }
        }
        Tensor::new(shape, data)
    }

    /// Class and mean softmax over the `k` draws for a single example.
    pub fn predict(&self, x: &Tensor<T>, key: u64, gates: Option<&GateSet<T>>) -> Result<(usize, Vec<f64>)> {
        if x.shape()[0] != 1 {
            return Err(shape_err("smoothed_predict", format!("expected one example, got {:?}", x.shape())));
        }
        let xs = self.perturb(x, self.k, &[key])?;
        let fo = ForwardOptions { gates, ..ForwardOptions::eval() };
        let probs = softmax_rows(&self.model.forward(&xs, &fo)?);
        let classes = probs[0].len();
        let mut mean = vec![0.0; classes];
        for p in &probs {
            for (m, v) in mean.iter_mut().zip(p) {
                *m += v / self.k as f64;
            }
        }
        Ok((argmax(&mean), mean))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scorer {
    /// Gradient of the objective with respect to each unit's gate.
    #[default]
    GateGradient,
    /// First-order effect of zeroing each unit's own parameters,
    /// `−Σ θ·∂obj/∂θ` over its incoming weights, bias, and norm affine terms.
    ParamGradient,
}

/// Parameter coordinates owned by one unit.
fn unit_coords<T: Scalar>(model: &Model<T>, unit: UnitId) -> Vec<(String, usize)> {
    let l = unit.layer;
    let mut out = Vec::new();
    match model.spec().layers[l].kind {
        LayerKind::Dense { inputs, outputs } => {
            out.extend((0..inputs).map(|i| (format!("layer{l}.weight"), i * outputs + unit.unit)));
        }
        LayerKind::Conv { in_channels, kernel, .. } => {
            let patch = in_channels * kernel * kernel;
            out.extend((0..patch).map(|i| (format!("layer{l}.weight"), unit.unit * patch + i)));
        }
    }
    for name in ["bias", "bn.gamma", "bn.beta"] {
        let name = format!("layer{l}.{name}");
        if model.param(&name).is_some() {
            out.push((name, unit.unit));
        }
    }
    out
}

/// Search target: one example against a fixed reference batch.
#[derive(Debug, Clone)]
pub struct Probe<T> {
    pub id: usize,
    pub input: Tensor<T>,
    pub label: usize,
    pub reference_inputs: Tensor<T>,
    pub reference_labels: Vec<usize>,
}

/// Score of every active candidate unit: the first-order increase of
/// `ℓ(x_i, y_i) − mean_batch ℓ` when the unit is zeroed. The example term is
/// averaged over the `k` noise draws; each reference row gets one draw.
pub fn criticality_scores<T: Scalar>(
    sc: &SmoothedClassifier<'_, T>,
    gates: &GateSet<T>,
    probe: &Probe<T>,
    scorer: Scorer,
    include_head: bool,
) -> Result<Vec<(UnitId, f64)>> {
    let model = sc.model;
    let candidates: Vec<UnitId> = gates
        .active_units()
        .into_iter()
        .filter(|u| include_head || u.layer != model.head())
        .collect();
    if candidates.is_empty() {
        return Err(Error::InvalidArgument("no active units left to score".into()));
    }
    let xs = sc.perturb(&probe.input, sc.k, &[probe.id as u64])?;
    let nref = probe.reference_labels.len();
    let refs = sc.perturb(&probe.reference_inputs, 1, &[probe.id as u64, stream::REFERENCE])?;
    let row = xs.len() / sc.k;
    let mut data = xs.into_data();
    data.extend_from_slice(refs.data());
    let mut shape = probe.input.shape().to_vec();
    shape[0] = sc.k + nref;
    let inputs = Tensor::new(shape, data)?;
    debug_assert_eq!(inputs.len(), row * (sc.k + nref));
    let mut labels = vec![probe.label; sc.k];
    labels.extend_from_slice(&probe.reference_labels);
    let mut weights = vec![T::one() / T::lit(sc.k as f64); sc.k];
    weights.extend(std::iter::repeat_n(-T::one() / T::lit(nref.max(1) as f64), nref));

    let fo = ForwardOptions { gates: Some(gates), ..ForwardOptions::eval() };
    match scorer {
        Scorer::GateGradient => {
            let out = model.run(&inputs, &fo, Some((&labels, &weights)), GradRequest { params: false, gates: true })?;
            Ok(candidates
                .into_iter()
                .map(|u| (u, -out.gate_grads[u.layer][u.unit].to_f64().unwrap_or(f64::NAN)))
                .collect())
        }
        Scorer::ParamGradient => {
            let mut m = model.clone();
            for l in 0..m.num_layers() {
                m.set_frozen(l, false)?;
            }
            let out = m.run(&inputs, &fo, Some((&labels, &weights)), GradRequest { params: true, gates: false })?;
            Ok(candidates
                .into_iter()
                .map(|u| {
                    let s: f64 = unit_coords(&m, u)
                        .iter()
                        .map(|(name, i)| {
                            let g = out.param_grads[name].data()[*i].to_f64().unwrap_or(f64::NAN);
                            let p = m.param(name).expect("own parameter").data()[*i].to_f64().unwrap_or(f64::NAN);
                            -g * p
                        })
                        .sum();
                    (u, s)
                })
                .collect())
        }
    }
}

fn best_unit(scores: &[(UnitId, f64)]) -> UnitId {
    let mut best = 0;
    for (i, s) in scores.iter().enumerate() {
        if s.1 > scores[best].1 {
            best = i;
        }
    }
    scores[best].0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FlipOptions {
    pub budget: usize,
    pub reference_batch: usize,
    pub include_head: bool,
    pub scorer: Scorer,
    /// Seed for reference-batch draws.
    pub seed: u64,
}

impl Default for FlipOptions {
    fn default() -> Self {
        Self { budget: 100, reference_batch: 512, include_head: false, scorer: Scorer::GateGradient, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlipResult {
    pub example_id: usize,
    pub is_probe: bool,
    pub removed: Vec<UnitId>,
    /// Units removed; `0` when the example was already misclassified.
    pub flip_count: usize,
    pub flipped: bool,
    pub pre_flipped: bool,
    /// Base-model accuracy on the evaluation ids with the final gates,
    /// the searched example included.
    pub post_removal_acc: Option<f64>,
    pub budget: usize,
}

/// Reference batch for one example, drawn without replacement from the
/// other training examples.
pub fn reference_ids(n: usize, example: usize, size: usize, seed: u64) -> Vec<usize> {
    let pool = n - 1;
    let take = size.min(pool);
    let mut rng = rng_for(seed, &[stream::REFERENCE, example as u64]);
    let mut ids: Vec<usize> = index::sample(&mut rng, pool, take)
        .into_iter()
        .map(|i| if i >= example { i + 1 } else { i })
        .collect();
    ids.sort_unstable();
    ids
}

pub fn probe_for<T: Scalar>(data: &ProbeDataset<T>, id: usize, opts: &FlipOptions) -> Result<Probe<T>> {
    if id >= data.len() {
        return Err(Error::InvalidArgument(format!("example {id} outside dataset of {}", data.len())));
    }
    let refs = reference_ids(data.len(), id, opts.reference_batch, opts.seed);
    Ok(Probe {
        id,
        input: data.rows(&[id])?,
        label: data.training_labels()[id],
        reference_inputs: data.rows(&refs)?,
        reference_labels: refs.iter().map(|&i| data.training_labels()[i]).collect(),
    })
}

/// Zeroes the highest-scoring unit repeatedly until the smoothed prediction
/// leaves the example's training label or the budget runs out.
pub fn flip_example<T: Scalar>(
    sc: &SmoothedClassifier<'_, T>,
    data: &ProbeDataset<T>,
    id: usize,
    opts: &FlipOptions,
    eval_ids: Option<&[usize]>,
) -> Result<FlipResult> {
    if opts.budget == 0 {
        return Err(Error::InvalidArgument("flip budget must be at least 1".into()));
    }
    let probe = probe_for(data, id, opts)?;
    let mut gates = sc.model.ones_gates();
    let mut removed = Vec::new();
    let (pred, _) = sc.predict(&probe.input, id as u64, Some(&gates))?;
    let pre_flipped = pred != probe.label;
    let mut flipped = false;
    if !pre_flipped {
        while removed.len() < opts.budget {
            let scores = match criticality_scores(sc, &gates, &probe, opts.scorer, opts.include_head) {
                Ok(s) => s,
                Err(Error::InvalidArgument(_)) => break,
                Err(e) => return Err(e),
            };
            let unit = best_unit(&scores);
            gates.zero_in_place(unit)?;
            removed.push(unit);
            if sc.predict(&probe.input, id as u64, Some(&gates))?.0 != probe.label {
                flipped = true;
                break;
            }
        }
    }
    let post_removal_acc = match eval_ids {
        Some(ids) => evaluate_ids(sc.model, data, ids, &EvalOptions { gates: Some(&gates), ..EvalOptions::default() })?.accuracy,
        None => None,
    };
    Ok(FlipResult {
        example_id: id,
        is_probe: data.probe_flags()[id],
        flip_count: removed.len(),
        removed,
        flipped,
        pre_flipped,
        post_removal_acc,
        budget: opts.budget,
    })
}

/// [`flip_example`] over many ids, split across `jobs` threads; results
/// come back in input order.
pub fn flip_examples<T: Scalar>(
    sc: &SmoothedClassifier<'_, T>,
    data: &ProbeDataset<T>,
    ids: &[usize],
    opts: &FlipOptions,
    eval_ids: Option<&[usize]>,
    jobs: usize,
) -> Result<Vec<FlipResult>> {
    let jobs = jobs.clamp(1, ids.len().max(1));
    if jobs == 1 {
        return ids.iter().map(|&i| flip_example(sc, data, i, opts, eval_ids)).collect();
    }
    let mut slots: Vec<Option<Result<FlipResult>>> = (0..ids.len()).map(|_| None).collect();
    std::thread::scope(|s| {
        let chunk = ids.len().div_ceil(jobs);
        for (slot_chunk, id_chunk) in slots.chunks_mut(chunk).zip(ids.chunks(chunk)) {
            s.spawn(move || {
                for (slot, &i) in slot_chunk.iter_mut().zip(id_chunk) {
                    *slot = Some(flip_example(sc, data, i, opts, eval_ids));
                }
            });
        }
    });
    slots.into_iter().map(|s| s.expect("every slot filled")).collect()
}

/// Mean flip count per example over repeated runs.
pub fn flip_statistics(runs: &[Vec<FlipResult>]) -> Result<BTreeMap<usize, f64>> {
    if runs.is_empty() {
        return Err(Error::InvalidArgument("flip statistics need at least one run".into()));
    }
    let mut sums: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
    for run in runs {
        for r in run {
            let e = sums.entry(r.example_id).or_default();
            e.0 += r.flip_count as f64;
            e.1 += 1;
        }
    }
    Ok(sums.into_iter().map(|(id, (s, n))| (id, s / n as f64)).collect())
}

/// Rank-based AUC of `scores` for separating flagged (positive) examples,
/// ties counted one half. Exact: computed from doubled integer ranks.
pub fn mislabel_auc(scores: &[f64], flags: &[bool]) -> Result<f64> {
    if scores.len() != flags.len() {
        return Err(shape_err("mislabel_auc", format!("{} scores, {} flags", scores.len(), flags.len())));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::InvalidArgument("NaN score".into()));
    }
    let pos = flags.iter().filter(|&&f| f).count() as u128;
    let neg = flags.len() as u128 - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::InvalidArgument("AUC needs both positive and negative examples".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // sum over positives of twice their average rank (1-based)
    let mut rank2_sum: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let twice_avg = (i + 1 + j + 1) as u128;
        rank2_sum += twice_avg * order[i..=j].iter().filter(|&&k| flags[k]).count() as u128;
        i = j + 1;
    }
    let numerator = rank2_sum - pos * (pos + 1);
    Ok(numerator as f64 / (2 * pos * neg) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub threshold: f64,
    pub tpr: f64,
    pub fpr: f64,
}

/// Operating points flagging `score >= threshold`, one per distinct score.
pub fn threshold_sweep(scores: &[f64], flags: &[bool]) -> Vec<SweepPoint> {
    let mut ts: Vec<f64> = scores.to_vec();
    ts.sort_by(|a, b| b.total_cmp(a));
    ts.dedup();
    let pos = flags.iter().filter(|&&f| f).count().max(1) as f64;
    let neg = flags.iter().filter(|&&f| !f).count().max(1) as f64;
    ts.into_iter()
        .map(|t| {
            let tp = scores.iter().zip(flags).filter(|(&s, &f)| f && s >= t).count() as f64;
            let fp = scores.iter().zip(flags).filter(|(&s, &f)| !f && s >= t).count() as f64;
            SweepPoint { threshold: t, tpr: tp / pos, fpr: fp / neg }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorResult {
    pub ids: Vec<usize>,
    /// Negated mean flip count: higher is more suspicious.
    pub scores: Vec<f64>,
    pub flags: Vec<bool>,
    pub auc: f64,
    pub sweep: Vec<SweepPoint>,
}

pub fn flip_detector(mean_flips: &BTreeMap<usize, f64>, flags: &[bool]) -> Result<DetectorResult> {
    let ids: Vec<usize> = mean_flips.keys().copied().collect();
    let scores: Vec<f64> = mean_flips.values().map(|f| -f).collect();
    let flags: Vec<bool> = ids.iter().map(|&i| flags[i]).collect();
    let auc = mislabel_auc(&scores, &flags)?;
    let sweep = threshold_sweep(&scores, &flags);
    Ok(DetectorResult { ids, scores, flags, auc, sweep })
}

/// Normalized histogram over layers of the units removed in `results`.
pub fn layer_histogram<'a>(results: impl IntoIterator<Item = &'a FlipResult>, layers: usize) -> Vec<f64> {
    let mut h = vec![0.0; layers];
    for r in results {
        for u in &r.removed {
            h[u.layer] += 1.0;
        }
    }
    let total: f64 = h.iter().sum();
    if total > 0.0 {
        h.iter_mut().for_each(|v| *v /= total);
    }
    h
}

pub fn total_variation(p: &[f64], q: &[f64]) -> f64 {
    0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>()
}
