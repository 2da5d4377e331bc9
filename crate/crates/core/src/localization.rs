//! Layer-level localization: gradient accounting and alignment, layer
//! rewinding, and clean-only layer retraining.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::checkpoint::CheckpointStore;
use crate::data::{ProbeDataset, Subset};
use crate::error::{Error, Result};
use crate::model::{ForwardOptions, GradRequest, Model, Dropout};
use crate::optim::{cosine_similarity, OneCycleSchedule};
use crate::scalar::Scalar;
use crate::trainer::{evaluate, train, DropoutConfig, EpochHook, EvalOptions, TrainConfig};

/// A layer or a named group of layers treated as one unit of analysis.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Target {
    pub label: String,
    pub layers: Vec<usize>,
}

impl Target {
    pub fn layer(l: usize) -> Self {
        Self { label: format!("layer{l}"), layers: vec![l] }
    }
}

/// One target per layer, or one per group label when `by_group`.
pub fn targets<T: Scalar>(model: &Model<T>, by_group: bool) -> Vec<Target> {
    if by_group {
        model.spec().groups().into_iter().map(|(label, layers)| Target { label, layers }).collect()
    } else {
        (0..model.num_layers()).map(Target::layer).collect()
    }
}

/// Sum-loss gradient `dL(ids)/dθ` of every parameter, accumulated in f64.
/// The model is evaluated frozen, in eval mode.
pub fn subset_gradient<T: Scalar>(
    model: &Model<T>,
    data: &ProbeDataset<T>,
    ids: &[usize],
    eval: &EvalOptions<'_, T>,
) -> Result<BTreeMap<String, Vec<f64>>> {
    let mut m = model.clone();
    for l in 0..m.num_layers() {
        m.set_frozen(l, false)?;
    }
    let mut acc: BTreeMap<String, Vec<f64>> = m.params().iter().map(|p| (p.name.clone(), vec![0.0; p.tensor.len()])).collect();
    for chunk in ids.chunks(eval.batch_size.max(1)) {
        let x = data.rows(chunk)?;
        let y: Vec<usize> = chunk.iter().map(|&i| data.training_labels()[i]).collect();
        let w = vec![T::one(); chunk.len()];
        let dropout = match eval.tied {
            Some(spec) => Dropout::ExampleTied { spec, ids: Some(chunk), drop_mem: eval.drop_mem },
            None => Dropout::None,
        };
        let fo = ForwardOptions { gates: eval.gates, dropout, ..ForwardOptions::eval() };
        let out = m.run(&x, &fo, Some((&y, &w)), GradRequest { params: true, gates: false })?;
        for (name, g) in out.param_grads {
            let a = acc.get_mut(&name).expect("same model");
            for (s, v) in a.iter_mut().zip(g.data()) {
                *s += v.to_f64().unwrap_or(f64::NAN);
            }
        }
    }
    Ok(acc)
}

/// Concatenation of the target's parameter gradients, in catalog order.
pub fn flatten_target<T: Scalar>(model: &Model<T>, grads: &BTreeMap<String, Vec<f64>>, target: &Target) -> Vec<f64> {
    model
        .params()
        .iter()
        .filter(|p| target.layers.contains(&p.layer))
        .flat_map(|p| grads[&p.name].iter().copied())
        .collect()
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccountingRecord {
    pub epoch: usize,
    pub layer: String,
    /// `clean`, `probe`, or `total`.
    pub subset: String,
    pub count: usize,
    /// `‖dL(S)/dθ_l‖ / sqrt(P_l)`; `None` for an empty subset.
    pub norm: Option<f64>,
    /// Normalized norm of the mean per-example gradient.
    pub per_example_norm: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentRecord {
    pub epoch: usize,
    pub layer: String,
    /// Cosine of mean clean vs mean probe gradient; `None` when undefined.
    pub cosine: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct AccountingOptions {
    pub by_group: bool,
    /// Compute the total-set gradient with its own pass instead of as the
    /// sum of the clean and probe gradients.
    pub direct_total: bool,
}

/// Per-target gradient norms for the clean, probe, and total sets, plus the
/// clean/probe cosine alignment, on a frozen snapshot.
pub fn gradient_accounting<T: Scalar>(
    model: &Model<T>,
    data: &ProbeDataset<T>,
    epoch: usize,
    eval: &EvalOptions<'_, T>,
    opts: AccountingOptions,
) -> Result<(Vec<AccountingRecord>, Vec<AlignmentRecord>)> {
    let clean_ids = data.ids(Subset::Clean);
    let probe_ids = data.ids(Subset::Probe);
    let clean = subset_gradient(model, data, &clean_ids, eval)?;
    let probe = subset_gradient(model, data, &probe_ids, eval)?;
    let total = if opts.direct_total {
        subset_gradient(model, data, &data.ids(Subset::All), eval)?
    } else {
        clean
            .iter()
            .map(|(k, c)| (k.clone(), c.iter().zip(&probe[k]).map(|(a, b)| a + b).collect()))
            .collect()
    };
    let mut records = Vec::new();
    let mut align = Vec::new();
    for target in targets(model, opts.by_group) {
        let gc = flatten_target(model, &clean, &target);
        let gp = flatten_target(model, &probe, &target);
        let gt = flatten_target(model, &total, &target);
        let root_p = (gc.len() as f64).sqrt();
        for (name, g, n) in [("clean", &gc, clean_ids.len()), ("probe", &gp, probe_ids.len()), ("total", &gt, data.len())] {
            let (norm_v, per) = if n == 0 {
                (None, None)
            } else {
                let v = norm(g) / root_p;
                (Some(v), Some(v / n as f64))
            };
            records.push(AccountingRecord { epoch, layer: target.label.clone(), subset: name.into(), count: n, norm: norm_v, per_example_norm: per });
        }
        let cosine = if clean_ids.is_empty() || probe_ids.is_empty() {
            None
        } else {
            match cosine_similarity(&gc, &gp) {
                Ok(c) => Some(c),
                Err(Error::UndefinedSimilarity) => None,
                Err(e) => return Err(e),
            }
        };
        align.push(AlignmentRecord { epoch, layer: target.label.clone(), cosine });
    }
    Ok((records, align))
}

/// Epoch hook that runs [`gradient_accounting`] at every boundary.
#[derive(Debug, Default)]
pub struct AccountingHook {
    pub opts: AccountingOptions,
    pub batch_size: usize,
    pub records: Vec<AccountingRecord>,
    pub alignment: Vec<AlignmentRecord>,
}

impl AccountingHook {
    pub fn new(opts: AccountingOptions) -> Self {
        Self { opts, batch_size: 500, ..Self::default() }
    }
}

impl<T: Scalar> EpochHook<T> for AccountingHook {
    fn on_epoch(&mut self, epoch: usize, model: &Model<T>, data: &ProbeDataset<T>) -> Result<()> {
        let eval = EvalOptions { batch_size: self.batch_size, ..EvalOptions::default() };
        let (r, a) = gradient_accounting(model, data, epoch, &eval, self.opts)?;
        self.records.extend(r);
        self.alignment.extend(a);
        Ok(())
    }
}

/// `(θ_1^T .. θ_l^t .. θ_d^T)` for every layer `l` of the target. Batch-norm
/// buffers stay converged unless `rewind_buffers`.
pub fn rewind_target<T: Scalar>(
    converged: &Model<T>,
    store: &CheckpointStore,
    target: &Target,
    epoch: usize,
    rewind_buffers: bool,
) -> Result<Model<T>> {
    let past = store.load::<T>(epoch, converged.spec())?;
    rewind_with(converged, &past, target, rewind_buffers)
}

pub fn rewind_layer<T: Scalar>(converged: &Model<T>, store: &CheckpointStore, layer: usize, epoch: usize, rewind_buffers: bool) -> Result<Model<T>> {
    if layer >= converged.num_layers() {
        return Err(Error::InvalidArgument(format!("no layer {layer}")));
    }
    rewind_target(converged, store, &Target::layer(layer), epoch, rewind_buffers)
}

fn rewind_with<T: Scalar>(converged: &Model<T>, past: &Model<T>, target: &Target, rewind_buffers: bool) -> Result<Model<T>> {
    let mut out = converged.clone();
    for &l in &target.layers {
        out.replace_layer_params(l, past)?;
        if rewind_buffers {
            out.replace_layer_buffers(l, past)?;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewindCell {
    pub layer: String,
    pub epoch: usize,
    pub clean_acc: Option<f64>,
    pub probe_acc: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RewindMatrix {
    pub cells: Vec<RewindCell>,
}

impl RewindMatrix {
    pub fn get(&self, layer: &str, epoch: usize) -> Option<&RewindCell> {
        self.cells.iter().find(|c| c.layer == layer && c.epoch == epoch)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct SweepOptions<'a, T> {
    pub rewind_buffers: bool,
    pub eval: EvalOptions<'a, T>,
    /// Worker threads; cells are partitioned by epoch and merged in order.
    pub jobs: usize,
}

impl<T> Default for SweepOptions<'_, T> {
    fn default() -> Self {
        Self { rewind_buffers: false, eval: EvalOptions::default(), jobs: 1 }
    }
}

fn sweep_epoch<T: Scalar>(
    converged: &Model<T>,
    store: &CheckpointStore,
    data: &ProbeDataset<T>,
    targets: &[Target],
    epoch: usize,
    opts: &SweepOptions<'_, T>,
) -> Result<Vec<RewindCell>> {
    let past = store.load::<T>(epoch, converged.spec())?;
    targets
        .iter()
        .map(|t| {
            let m = rewind_with(converged, &past, t, opts.rewind_buffers)?;
            Ok(RewindCell {
                layer: t.label.clone(),
                epoch,
                clean_acc: evaluate(&m, data, Subset::Clean, &opts.eval)?.accuracy,
                probe_acc: evaluate(&m, data, Subset::Probe, &opts.eval)?.accuracy,
            })
        })
        .collect()
}

/// Clean and probe accuracy for every (target, epoch) rewind.
pub fn rewind_sweep<T: Scalar>(
    converged: &Model<T>,
    store: &CheckpointStore,
    data: &ProbeDataset<T>,
    targets: &[Target],
    epochs: &[usize],
    opts: &SweepOptions<'_, T>,
) -> Result<RewindMatrix> {
    for t in targets {
        if let Some(&l) = t.layers.iter().find(|&&l| l >= converged.num_layers()) {
            return Err(Error::InvalidArgument(format!("target {} names layer {l}", t.label)));
        }
    }
    let jobs = opts.jobs.clamp(1, epochs.len().max(1));
    let per_epoch: Vec<Result<Vec<RewindCell>>> = if jobs == 1 {
        epochs.iter().map(|&e| sweep_epoch(converged, store, data, targets, e, opts)).collect()
    } else {
        let mut slots: Vec<Option<Result<Vec<RewindCell>>>> = (0..epochs.len()).map(|_| None).collect();
        std::thread::scope(|s| {
            let chunk = epochs.len().div_ceil(jobs);
            for (slot_chunk, epoch_chunk) in slots.chunks_mut(chunk).zip(epochs.chunks(chunk)) {
                s.spawn(move || {
                    for (slot, &e) in slot_chunk.iter_mut().zip(epoch_chunk) {
                        *slot = Some(sweep_epoch(converged, store, data, targets, e, opts));
                    }
                });
            }
        });
        slots.into_iter().map(|s| s.expect("every slot filled")).collect()
    };
    let mut by_epoch = Vec::with_capacity(epochs.len());
    for r in per_epoch {
        by_epoch.push(r?);
    }
    // layer-major order
    let mut cells = Vec::with_capacity(targets.len() * epochs.len());
    for ti in 0..targets.len() {
        for row in &by_epoch {
            cells.push(row[ti].clone());
        }
    }
    Ok(RewindMatrix { cells })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RetrainConfig {
    pub epochs: usize,
    pub peak_lr: f64,
    pub peak_epoch: usize,
    pub batch_size: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
    /// Fraction of converged probe accuracy that marks a layer redundant.
    pub redundancy_threshold: f64,
    pub rewind_buffers: bool,
}

impl Default for RetrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            peak_lr: 0.1,
            peak_epoch: 10,
            batch_size: 512,
            momentum: 0.9,
            weight_decay: 5e-4,
            seed: 0,
            redundancy_threshold: 0.8,
            rewind_buffers: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    /// Probe accuracy recovered without the probes: the other layers suffice.
    RedundantForMemorization,
    /// Low recovery does not show that the layer is critical.
    Inconclusive,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrainPoint {
    pub epoch: usize,
    pub clean_acc: Option<f64>,
    pub probe_acc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrainCurve {
    pub layer: String,
    pub points: Vec<RetrainPoint>,
    pub final_clean: Option<f64>,
    pub final_probe: Option<f64>,
    pub peak_probe: Option<f64>,
    pub converged_probe: Option<f64>,
    pub verdict: Verdict,
}

/// Resets the target to its initialization, freezes every other layer, and
/// trains on the clean subset only. Running batch-norm statistics keep
/// updating in all layers.
pub fn retrain_target<T: Scalar>(
    converged: &Model<T>,
    store: &CheckpointStore,
    data: &ProbeDataset<T>,
    target: &Target,
    cfg: &RetrainConfig,
) -> Result<RetrainCurve> {
    if data.ids(Subset::Clean).is_empty() {
        return Err(Error::InvalidArgument("retraining needs a nonempty clean subset".into()));
    }
    let converged_probe = evaluate(converged, data, Subset::Probe, &EvalOptions::default())?.accuracy;
    let start = rewind_target(converged, store, target, 0, cfg.rewind_buffers)?;
    let freeze: Vec<usize> = (0..converged.num_layers()).filter(|l| !target.layers.contains(l)).collect();
    let tc = TrainConfig {
        epochs: cfg.epochs,
        batch_size: cfg.batch_size,
        schedule: OneCycleSchedule {
            peak_lr: cfg.peak_lr,
            peak_epoch: cfg.peak_epoch,
            total_epochs: cfg.epochs.max(cfg.peak_epoch + 1),
            ..OneCycleSchedule::default()
        },
        momentum: cfg.momentum,
        weight_decay: cfg.weight_decay,
        seed: cfg.seed,
        dropout: DropoutConfig::None,
        freeze,
        bn_update_while_frozen: true,
        train_subset: Subset::Clean,
        ..TrainConfig::default()
    };
    let out = train(start, data, None, &tc, None, &mut [])?;
    if let Some(&leak) = data.ids(Subset::Probe).iter().find(|i| out.trained_ids.contains(i)) {
        return Err(Error::State(format!("probe example {leak} appeared in a retraining batch")));
    }
    let points: Vec<RetrainPoint> = out
        .curves
        .points
        .iter()
        .map(|p| RetrainPoint { epoch: p.epoch, clean_acc: p.clean.accuracy, probe_acc: p.probe.accuracy })
        .collect();
    let peak_probe = points.iter().filter_map(|p| p.probe_acc).reduce(f64::max);
    let last = points.last().expect("epoch 0 always present");
    let verdict = match (peak_probe, converged_probe) {
        (Some(peak), Some(conv)) if peak >= cfg.redundancy_threshold * conv => Verdict::RedundantForMemorization,
        _ => Verdict::Inconclusive,
    };
    Ok(RetrainCurve {
        layer: target.label.clone(),
        final_clean: last.clean_acc,
        final_probe: last.probe_acc,
        peak_probe,
        converged_probe,
        points,
        verdict,
    })
}

pub fn retrain_layer<T: Scalar>(
    converged: &Model<T>,
    store: &CheckpointStore,
    data: &ProbeDataset<T>,
    layer: usize,
    cfg: &RetrainConfig,
) -> Result<RetrainCurve> {
    if layer >= converged.num_layers() {
        return Err(Error::InvalidArgument(format!("no layer {layer}")));
    }
    retrain_target(converged, store, data, &Target::layer(layer), cfg)
}
