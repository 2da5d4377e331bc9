//! Minibatch SGD with per-epoch checkpoints, learning curves, and hooks.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::checkpoint::CheckpointStore;
use crate::data::{BatchPlan, ProbeDataset, Subset};
use crate::error::{Error, Result};
use crate::model::{Dropout, ExampleTiedDropout, ForwardOptions, GateSet, GradRequest, Model};
use crate::optim::{OneCycleSchedule, Sgd};
use crate::rng::derive_seed;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DropoutConfig {
    #[default]
    None,
    Standard { p: f64 },
    ExampleTied { p_gen: f64, p_mem: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub schedule: OneCycleSchedule,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub dropout: DropoutConfig,
    /// Layers that receive no parameter updates.
    pub freeze: Vec<usize>,
    /// Let frozen batch-norm layers keep updating their running statistics.
    pub bn_update_while_frozen: bool,
    /// Examples trained on; the others are still evaluated.
    pub train_subset: Subset,
    pub eval_batch_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 512,
            schedule: OneCycleSchedule::default(),
            momentum: 0.9,
            weight_decay: 5e-4,
            seed: 0,
            dropout: DropoutConfig::None,
            freeze: Vec::new(),
            bn_update_while_frozen: false,
            train_subset: Subset::All,
            eval_batch_size: 500,
        }
    }
}

impl TrainConfig {
    /// Defaults with a one-cycle schedule peaking at a fifth of the run.
    pub fn with_epochs(epochs: usize, batch_size: usize, peak_lr: f64, seed: u64) -> Self {
        let schedule = OneCycleSchedule {
            peak_lr,
            peak_epoch: (epochs / 5).max(1),
            total_epochs: epochs.max(2),
            ..OneCycleSchedule::default()
        };
        Self { epochs, batch_size, schedule, seed, ..Self::default() }
    }

    pub fn validate(&self, layers: usize) -> Result<()> {
        if self.epochs > 0 {
            self.schedule.validate()?;
            if self.schedule.total_epochs < self.epochs {
                return Err(Error::InvalidArgument(format!(
                    "schedule covers {} epochs but training runs {}",
                    self.schedule.total_epochs, self.epochs
                )));
            }
        }
        if self.batch_size == 0 || self.eval_batch_size == 0 {
            return Err(Error::InvalidArgument("batch sizes must be positive".into()));
        }
        if let Some(&l) = self.freeze.iter().find(|&&l| l >= layers) {
            return Err(Error::InvalidArgument(format!("freeze set names layer {l}, model has {layers}")));
        }
        if let DropoutConfig::Standard { p } = self.dropout {
            if !(0.0..1.0).contains(&p) {
                return Err(Error::InvalidArgument(format!("dropout p must be in [0,1), got {p}")));
            }
        }
        Ok(())
    }

    /// Example-tied dropout over every layer but the head, if configured.
    pub fn tied_dropout<T: Scalar>(&self, model: &Model<T>, example_count: usize) -> Result<Option<ExampleTiedDropout>> {
        match self.dropout {
            DropoutConfig::ExampleTied { p_gen, p_mem } => {
                let units: Vec<Option<usize>> = model
                    .units_per_layer()
                    .iter()
                    .enumerate()
                    .map(|(l, &u)| (l != model.head()).then_some(u))
                    .collect();
                Ok(Some(ExampleTiedDropout::new(&units, p_gen, p_mem, self.seed, example_count)?))
            }
            _ => Ok(None),
        }
    }
}

/// Accuracy and mean loss over a subset; `None` marks an empty subset.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SubsetEval {
    pub count: usize,
    pub accuracy: Option<f64>,
    pub mean_loss: Option<f64>,
}

impl SubsetEval {
    pub fn empty() -> Self {
        Self { count: 0, accuracy: None, mean_loss: None }
    }

    pub fn acc(&self) -> f64 {
        self.accuracy.unwrap_or(f64::NAN)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct EvalOptions<'a, T> {
    pub gates: Option<&'a GateSet<T>>,
    pub tied: Option<&'a ExampleTiedDropout>,
    /// With `tied`, evaluate with only the generalization units active.
    pub drop_mem: bool,
    pub batch_size: usize,
}

impl<T> Default for EvalOptions<'_, T> {
    fn default() -> Self {
        Self { gates: None, tied: None, drop_mem: false, batch_size: 500 }
    }
}

impl<'a, T> EvalOptions<'a, T> {
    pub fn tied(tied: Option<&'a ExampleTiedDropout>, drop_mem: bool) -> Self {
        Self { tied, drop_mem, ..Self::default() }
    }
}

/// Predictions and per-example losses for `ids` against `labels`.
fn run_ids<T: Scalar>(
    model: &Model<T>,
    data: &ProbeDataset<T>,
    ids: &[usize],
    labels: &[usize],
    opts: &EvalOptions<'_, T>,
) -> Result<(Vec<usize>, f64)> {
    let mut preds = Vec::with_capacity(ids.len());
    let mut loss = 0.0;
    for chunk in ids.chunks(opts.batch_size.max(1)) {
        let x = data.rows(chunk)?;
        let y: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
        let dropout = match opts.tied {
            Some(spec) => Dropout::ExampleTied { spec, ids: Some(chunk), drop_mem: opts.drop_mem },
            None => Dropout::None,
        };
        let fo = ForwardOptions { gates: opts.gates, dropout, ..ForwardOptions::eval() };
        let w = vec![T::one(); chunk.len()];
        let out = model.run(&x, &fo, Some((&y, &w)), GradRequest::default())?;
        loss += out.loss.expect("target given").to_f64().unwrap_or(f64::NAN);
        preds.extend(crate::model::argmax_rows(&out.logits));
    }
    Ok((preds, loss))
}

fn summarize(preds: &[usize], ids: &[usize], labels: &[usize], loss: f64) -> SubsetEval {
    if ids.is_empty() {
        return SubsetEval::empty();
    }
    let correct = preds.iter().zip(ids).filter(|(&p, &i)| p == labels[i]).count();
    SubsetEval {
        count: ids.len(),
        accuracy: Some(correct as f64 / ids.len() as f64),
        mean_loss: Some(loss / ids.len() as f64),
    }
}

/// Accuracy on a training subset, measured against the training labels.
pub fn evaluate<T: Scalar>(model: &Model<T>, data: &ProbeDataset<T>, subset: Subset, opts: &EvalOptions<'_, T>) -> Result<SubsetEval> {
    evaluate_ids(model, data, &data.ids(subset), opts)
}

pub fn evaluate_ids<T: Scalar>(model: &Model<T>, data: &ProbeDataset<T>, ids: &[usize], opts: &EvalOptions<'_, T>) -> Result<SubsetEval> {
    if ids.is_empty() {
        return Ok(SubsetEval::empty());
    }
    let (preds, loss) = run_ids(model, data, ids, data.training_labels(), opts)?;
    Ok(summarize(&preds, ids, data.training_labels(), loss))
}

/// Accuracy on a held-out split against original labels. Example-tied
/// models always run with memorization units dropped here.
pub fn evaluate_test<T: Scalar>(model: &Model<T>, test: &ProbeDataset<T>, opts: &EvalOptions<'_, T>) -> Result<SubsetEval> {
    let ids = test.ids(Subset::All);
    let opts = EvalOptions { drop_mem: true, ..*opts };
    let (preds, loss) = run_ids(model, test, &ids, test.original_labels(), &opts)?;
    Ok(summarize(&preds, &ids, test.original_labels(), loss))
}

/// Predicted classes for `ids`.
pub fn predict_ids<T: Scalar>(model: &Model<T>, data: &ProbeDataset<T>, ids: &[usize], opts: &EvalOptions<'_, T>) -> Result<Vec<usize>> {
    if ids.is_empty() {
        return Ok(Vec::new());
    }
    Ok(run_ids(model, data, ids, data.training_labels(), opts)?.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub epoch: usize,
    /// Learning rate used during the epoch that ended here (none at epoch 0).
    pub lr: Option<f64>,
    pub train_loss: Option<f64>,
    pub clean: SubsetEval,
    pub probe: SubsetEval,
    pub test: Option<SubsetEval>,
}

/// One point per epoch boundary, epoch 0 (initialization) included.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LearningCurves {
    pub points: Vec<CurvePoint>,
}

impl LearningCurves {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn last(&self) -> Option<&CurvePoint> {
        self.points.last()
    }
}

/// Called at every epoch boundary with the post-update model.
pub trait EpochHook<T> {
    fn on_epoch(&mut self, epoch: usize, model: &Model<T>, data: &ProbeDataset<T>) -> Result<()>;
}

impl<T, F> EpochHook<T> for F
where
    F: FnMut(usize, &Model<T>, &ProbeDataset<T>) -> Result<()>,
{
    fn on_epoch(&mut self, epoch: usize, model: &Model<T>, data: &ProbeDataset<T>) -> Result<()> {
        self(epoch, model, data)
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutput<T> {
    pub model: Model<T>,
    pub curves: LearningCurves,
    /// Every example id that appeared in a training batch.
    pub trained_ids: BTreeSet<usize>,
    pub tied: Option<ExampleTiedDropout>,
}

impl<T: Scalar> TrainOutput<T> {
    pub fn eval_options(&self) -> EvalOptions<'_, T> {
        EvalOptions::tied(self.tied.as_ref(), false)
    }
}

fn curve_point<T: Scalar>(
    model: &Model<T>,
    data: &ProbeDataset<T>,
    test: Option<&ProbeDataset<T>>,
    opts: &EvalOptions<'_, T>,
    epoch: usize,
    lr: Option<f64>,
    train_loss: Option<f64>,
) -> Result<CurvePoint> {
    Ok(CurvePoint {
        epoch,
        lr,
        train_loss,
        clean: evaluate(model, data, Subset::Clean, opts)?,
        probe: evaluate(model, data, Subset::Probe, opts)?,
        test: test.map(|t| evaluate_test(model, t, opts)).transpose()?,
    })
}

/// Trains `model` on `data`, checkpointing epoch 0 and every epoch after.
/// Accuracies are measured after each epoch's updates.
pub fn train<T: Scalar>(
    mut model: Model<T>,
    data: &ProbeDataset<T>,
    test: Option<&ProbeDataset<T>>,
    cfg: &TrainConfig,
    mut store: Option<&mut CheckpointStore>,
    hooks: &mut [&mut dyn EpochHook<T>],
) -> Result<TrainOutput<T>> {
    cfg.validate(model.num_layers())?;
    for l in 0..model.num_layers() {
        model.set_frozen(l, cfg.freeze.contains(&l))?;
    }
    let tied = cfg.tied_dropout(&model, data.len())?;
    let eval_opts = EvalOptions { batch_size: cfg.eval_batch_size, ..EvalOptions::tied(tied.as_ref(), false) };
    let plan = BatchPlan::new(cfg.seed, cfg.batch_size)?;
    let ids = data.ids(cfg.train_subset);
    let mut sgd = Sgd::<T>::new(cfg.momentum, cfg.weight_decay);
    let mut curves = LearningCurves::default();
    let mut trained_ids = BTreeSet::new();

    if let Some(s) = store.as_deref_mut() {
        s.save(&model, 0)?;
    }
    curves.points.push(curve_point(&model, data, test, &eval_opts, 0, None, None)?);
    for h in hooks.iter_mut() {
        h.on_epoch(0, &model, data)?;
    }

    for epoch in 0..cfg.epochs {
        let lr = cfg.schedule.lr(epoch)?;
        let lr_t = T::lit(lr);
        let mut loss_sum = 0.0;
        let mut loss_n = 0usize;
        if !ids.is_empty() {
            for (b, batch) in plan.batches(&ids, epoch).into_iter().enumerate() {
                let diverged = || Error::Diverged { epoch, batch: b };
                let x = data.rows(&batch)?;
                let y: Vec<usize> = batch.iter().map(|&i| data.training_labels()[i]).collect();
                let w = vec![T::one() / T::lit(batch.len() as f64); batch.len()];
                let dropout = match (cfg.dropout, tied.as_ref()) {
                    (DropoutConfig::Standard { p }, _) => Dropout::Standard { p, seed: derive_seed(cfg.seed, &[epoch as u64, b as u64]) },
                    (DropoutConfig::ExampleTied { .. }, Some(spec)) => Dropout::ExampleTied { spec, ids: Some(&batch), drop_mem: false },
                    _ => Dropout::None,
                };
                let fo = ForwardOptions { dropout, frozen_bn_batch_stats: cfg.bn_update_while_frozen, ..ForwardOptions::train() };
                let out = match model.run(&x, &fo, Some((&y, &w)), GradRequest { params: true, gates: false }) {
                    Err(Error::NumericFault { .. }) => return Err(diverged()),
                    other => other?,
                };
                let loss = out.loss.expect("target given");
                if !loss.is_finite() {
                    return Err(diverged());
                }
                loss_sum += loss.to_f64().unwrap_or(f64::NAN) * batch.len() as f64;
                loss_n += batch.len();
                for (name, mut grad) in out.param_grads {
                    model.mask_gradient(&name, &mut grad);
                    let p = model.param_mut(&name).expect("gradient names come from the model");
                    sgd.step(&name, p, &grad, lr_t)?;
                    if !p.is_finite() {
                        return Err(diverged());
                    }
                }
                model.enforce_sparse_mask();
                for (l, mean, var) in out.bn_batch_stats {
                    if !model.is_frozen(l) || cfg.bn_update_while_frozen {
                        model.update_running_stats(l, &mean, &var)?;
                    }
                }
                trained_ids.extend(batch);
            }
        }
        let done = epoch + 1;
        if let Some(s) = store.as_deref_mut() {
            s.save(&model, done)?;
        }
        let train_loss = (loss_n > 0).then(|| loss_sum / loss_n as f64);
        curves.points.push(curve_point(&model, data, test, &eval_opts, done, Some(lr), train_loss)?);
        for h in hooks.iter_mut() {
            h.on_epoch(done, &model, data)?;
        }
    }
    Ok(TrainOutput { model, curves, trained_ids, tied })
}
