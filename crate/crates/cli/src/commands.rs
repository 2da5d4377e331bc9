//! One function per subcommand. Each reads the resolved config, runs the
//! experiment at the configured dtype, and writes its payloads.

use std::collections::BTreeMap;
use std::time::Instant;

use memloc_core::checkpoint::CheckpointStore;
use memloc_core::data::{ProbeDataset, Subset};
use memloc_core::etdrop::{forgotten_clean_report, run_baselines, run_etdrop, run_grid, BaselineRecord};
use memloc_core::localization::{
    retrain_target, rewind_sweep, targets, AccountingHook, AccountingOptions, SweepOptions, Target,
};
use memloc_core::neuron_search::{
    flip_detector, flip_examples, flip_statistics, layer_histogram, total_variation, FlipOptions, FlipResult,
    SmoothedClassifier,
};
use memloc_core::rng::{derive_seed, rng_for, stream};
use memloc_core::trainer::{train, EpochHook, LearningCurves};
use memloc_core::{DType, Model, Scalar};
use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{CliError, Result};
use crate::reports::Writer;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Train,
    Account,
    Rewind,
    Retrain,
    Flip,
    Etdrop,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Train => "train",
            Command::Account => "account",
            Command::Rewind => "rewind",
            Command::Retrain => "retrain",
            Command::Flip => "flip",
            Command::Etdrop => "etdrop",
        }
    }
}

/// Runs `cmd`; returns the payload file names written.
pub fn run(cmd: Command, cfg: &RunConfig) -> Result<Vec<String>> {
    let started = Instant::now();
    let mut w = Writer::new(cfg)?;
    match cfg.dtype {
        DType::F32 => dispatch::<f32>(cmd, cfg, &mut w)?,
        DType::F64 => dispatch::<f64>(cmd, cfg, &mut w)?,
    }
    w.finish(cmd.name(), cfg, started)
}

fn dispatch<T: Scalar>(cmd: Command, cfg: &RunConfig, w: &mut Writer) -> Result<()> {
    match cmd {
        Command::Train => train_cmd::<T>(cfg, w, false),
        Command::Account => train_cmd::<T>(cfg, w, true),
        Command::Rewind => rewind_cmd::<T>(cfg, w),
        Command::Retrain => retrain_cmd::<T>(cfg, w),
        Command::Flip => flip_cmd::<T>(cfg, w),
        Command::Etdrop => etdrop_cmd::<T>(cfg, w),
    }
}

/// Written next to the checkpoints so later commands can check they were
/// produced by the same dataset, model, and training settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct RunStamp {
    training_digest: String,
    final_epoch: usize,
}

#[derive(Serialize)]
struct CurveRow {
    lr: Option<f64>,
    train_loss: Option<f64>,
    clean_acc: Option<f64>,
    probe_acc: Option<f64>,
    test_acc: Option<f64>,
}

fn write_curves(w: &mut Writer, name: &str, curves: &LearningCurves) -> Result<()> {
    w.csv(
        name,
        curves.points.iter().map(|p| {
            (
                p.epoch,
                CurveRow {
                    lr: p.lr,
                    train_loss: p.train_loss,
                    clean_acc: p.clean.accuracy,
                    probe_acc: p.probe.accuracy,
                    test_acc: p.test.and_then(|t| t.accuracy),
                },
            )
        }),
    )
}

#[derive(Serialize)]
struct AccountingRow<'a> {
    layer: &'a str,
    subset: &'a str,
    count: usize,
    norm: Option<f64>,
    per_example_norm: Option<f64>,
}

#[derive(Serialize)]
struct AlignmentRow<'a> {
    layer: &'a str,
    cosine: Option<f64>,
}

fn train_cmd<T: Scalar>(cfg: &RunConfig, w: &mut Writer, account: bool) -> Result<()> {
    let (data, test) = cfg.load_data::<T>()?;
    let spec = cfg.model_spec(data.example_shape(), data.class_count())?;
    let dir = cfg.checkpoint_dir();
    if dir.exists() {
        std::fs::remove_dir_all(&dir)?;
    }
    let mut store = CheckpointStore::open(&dir)?;
    let mut hook = AccountingHook::new(AccountingOptions { by_group: cfg.account.by_group, direct_total: cfg.account.direct_total });
    let mut hooks: Vec<&mut dyn EpochHook<T>> = Vec::new();
    if account {
        hooks.push(&mut hook);
    }
    let out = train(Model::<T>::build(&spec, cfg.seed)?, &data, test.as_ref(), &cfg.train, Some(&mut store), &mut hooks)?;
    let stamp = RunStamp { training_digest: cfg.training_digest(), final_epoch: cfg.train.epochs };
    std::fs::write(dir.join("run.json"), serde_json::to_vec_pretty(&stamp)?)?;
    write_curves(w, "curves.csv", &out.curves)?;
    if account {
        w.csv(
            "accounting.csv",
            hook.records.iter().map(|r| {
                (
                    r.epoch,
                    AccountingRow { layer: &r.layer, subset: &r.subset, count: r.count, norm: r.norm, per_example_norm: r.per_example_norm },
                )
            }),
        )?;
        w.csv("alignment.csv", hook.alignment.iter().map(|a| (a.epoch, AlignmentRow { layer: &a.layer, cosine: a.cosine })))?;
    }
    Ok(())
}

/// The checkpoint store from a previous `train`/`account` run with the same
/// training settings, and its converged model.
fn converged<T: Scalar>(cfg: &RunConfig, data: &ProbeDataset<T>) -> Result<(CheckpointStore, Model<T>, usize)> {
    let dir = cfg.checkpoint_dir();
    let stamp_path = dir.join("run.json");
    if !stamp_path.exists() {
        return Err(memloc_core::Error::MissingCheckpoint(cfg.train.epochs).into());
    }
    let stamp: RunStamp = serde_json::from_slice(&std::fs::read(&stamp_path)?)?;
    if stamp.training_digest != cfg.training_digest() {
        return Err(memloc_core::Error::Incompatible(format!(
            "checkpoints in {} were trained with settings {} but the config resolves to {}",
            dir.display(),
            stamp.training_digest,
            cfg.training_digest()
        ))
        .into());
    }
    let store = CheckpointStore::open(&dir)?;
    let spec = cfg.model_spec(data.example_shape(), data.class_count())?;
    let model = store.load::<T>(stamp.final_epoch, &spec)?;
    Ok((store, model, stamp.final_epoch))
}

#[derive(Serialize)]
struct RewindRow<'a> {
    layer: &'a str,
    clean_acc: Option<f64>,
    probe_acc: Option<f64>,
}

fn rewind_cmd<T: Scalar>(cfg: &RunConfig, w: &mut Writer) -> Result<()> {
    let (data, _) = cfg.load_data::<T>()?;
    let (store, model, _) = converged(cfg, &data)?;
    let epochs = if cfg.rewind.epochs.is_empty() { store.epochs()? } else { cfg.rewind.epochs.clone() };
    let ts = targets(&model, cfg.rewind.by_group);
    let opts = SweepOptions { rewind_buffers: cfg.rewind.rewind_buffers, jobs: cfg.jobs, ..SweepOptions::default() };
    let m = rewind_sweep(&model, &store, &data, &ts, &epochs, &opts)?;
    w.csv("rewind.csv", m.cells.iter().map(|c| (c.epoch, RewindRow { layer: &c.layer, clean_acc: c.clean_acc, probe_acc: c.probe_acc })))
}

#[derive(Serialize)]
struct RetrainRow<'a> {
    layer: &'a str,
    clean_acc: Option<f64>,
    probe_acc: Option<f64>,
}

#[derive(Serialize)]
struct RetrainSummary {
    layer: String,
    final_clean: Option<f64>,
    final_probe: Option<f64>,
    peak_probe: Option<f64>,
    converged_probe: Option<f64>,
    verdict: memloc_core::localization::Verdict,
}

fn retrain_cmd<T: Scalar>(cfg: &RunConfig, w: &mut Writer) -> Result<()> {
    let (data, _) = cfg.load_data::<T>()?;
    let (store, model, _) = converged(cfg, &data)?;
    let layers: Vec<usize> =
        if cfg.retrain.layers.is_empty() { (0..model.num_layers()).collect() } else { cfg.retrain.layers.clone() };
    let mut summary = Vec::new();
    for l in layers {
        if l >= model.num_layers() {
            return Err(CliError::Invalid(format!("retrain names layer {l}; the model has {}", model.num_layers())));
        }
        let curve = retrain_target(&model, &store, &data, &Target::layer(l), &cfg.retrain.settings)?;
        w.csv(
            &format!("retrain_{l}.csv"),
            curve.points.iter().map(|p| (p.epoch, RetrainRow { layer: &curve.layer, clean_acc: p.clean_acc, probe_acc: p.probe_acc })),
        )?;
        summary.push(RetrainSummary {
            layer: curve.layer.clone(),
            final_clean: curve.final_clean,
            final_probe: curve.final_probe,
            peak_probe: curve.peak_probe,
            converged_probe: curve.converged_probe,
            verdict: curve.verdict,
        });
    }
    w.json("retrain.json", &summary)
}

/// Deterministic sample of `k` ids from `pool`, sorted.
fn sample_ids(pool: &[usize], k: usize, seed: u64, tag: u64) -> Vec<usize> {
    let mut rng = rng_for(seed, &[stream::PROBES, tag]);
    let mut ids: Vec<usize> = index::sample(&mut rng, pool.len(), k.min(pool.len())).into_iter().map(|i| pool[i]).collect();
    ids.sort_unstable();
    ids
}

#[derive(Serialize)]
struct FlipRow {
    run: usize,
    example_id: usize,
    is_probe: bool,
    flip_count: usize,
    flipped: bool,
    pre_flipped: bool,
    post_removal_acc: Option<f64>,
    budget: usize,
}

#[derive(Serialize)]
struct FlipUnitRow {
    run: usize,
    example_id: usize,
    step: usize,
    layer: usize,
    unit: usize,
}

#[derive(Serialize)]
struct DetectorReport {
    mean_flips_clean: f64,
    mean_flips_noisy: f64,
    auc: f64,
    layer_histogram_clean: Vec<f64>,
    layer_histogram_noisy: Vec<f64>,
    layer_tv_distance: f64,
    detector: memloc_core::neuron_search::DetectorResult,
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        s / n as f64
    }
}

fn flip_cmd<T: Scalar>(cfg: &RunConfig, w: &mut Writer) -> Result<()> {
    let (data, _) = cfg.load_data::<T>()?;
    let (_, model, epoch) = converged(cfg, &data)?;
    let f = &cfg.flip;
    let mut ids = sample_ids(&data.ids(Subset::Clean), f.clean_probes, cfg.seed, 0);
    ids.extend(sample_ids(&data.ids(Subset::Probe), f.noisy_probes, cfg.seed, 1));
    ids.sort_unstable();
    let eval_ids = (f.eval_subsample > 0).then(|| sample_ids(&data.ids(Subset::All), f.eval_subsample, cfg.seed, 2));
    let mut runs: Vec<Vec<FlipResult>> = Vec::new();
    for r in 0..f.runs.max(1) {
        let sc = SmoothedClassifier::new(&model, f.sigma, f.samples, derive_seed(cfg.seed, &[stream::SMOOTHING, r as u64]))?;
        let opts = FlipOptions {
            budget: f.budget,
            reference_batch: f.reference_batch,
            include_head: f.include_head,
            scorer: f.scorer,
            seed: derive_seed(cfg.seed, &[stream::REFERENCE, r as u64]),
        };
        runs.push(flip_examples(&sc, &data, &ids, &opts, eval_ids.as_deref(), cfg.jobs)?);
    }
    w.csv(
        "flips.csv",
        runs.iter().enumerate().flat_map(|(run, rs)| {
            rs.iter().map(move |x| {
                (
                    epoch,
                    FlipRow {
                        run,
                        example_id: x.example_id,
                        is_probe: x.is_probe,
                        flip_count: x.flip_count,
                        flipped: x.flipped,
                        pre_flipped: x.pre_flipped,
                        post_removal_acc: x.post_removal_acc,
                        budget: x.budget,
                    },
                )
            })
        }),
    )?;
    w.csv(
        "flip_units.csv",
        runs.iter().enumerate().flat_map(|(run, rs)| {
            rs.iter().flat_map(move |x| {
                x.removed.iter().enumerate().map(move |(step, u)| {
                    (epoch, FlipUnitRow { run, example_id: x.example_id, step, layer: u.layer, unit: u.unit })
                })
            })
        }),
    )?;
    let means: BTreeMap<usize, f64> = flip_statistics(&runs)?;
    let flags = data.probe_flags();
    let detector = flip_detector(&means, flags)?;
    let all: Vec<&FlipResult> = runs.iter().flatten().collect();
    let hc = layer_histogram(all.iter().copied().filter(|r| !r.is_probe), model.num_layers());
    let hn = layer_histogram(all.iter().copied().filter(|r| r.is_probe), model.num_layers());
    let report = DetectorReport {
        mean_flips_clean: mean(means.iter().filter(|(&i, _)| !flags[i]).map(|(_, &m)| m)),
        mean_flips_noisy: mean(means.iter().filter(|(&i, _)| flags[i]).map(|(_, &m)| m)),
        auc: detector.auc,
        layer_tv_distance: total_variation(&hc, &hn),
        layer_histogram_clean: hc,
        layer_histogram_noisy: hn,
        detector,
    };
    w.json("detector.json", &report)
}

#[derive(Serialize)]
struct ForgottenRow {
    id: usize,
    label: usize,
    predicted_after: usize,
}

#[derive(Serialize)]
struct GridRow {
    p_mem: f64,
    p_gen: f64,
    cell_seed: u64,
    clean_after: Option<f64>,
    noisy_after: Option<f64>,
    error: Option<String>,
}

fn etdrop_cmd<T: Scalar>(cfg: &RunConfig, w: &mut Writer) -> Result<()> {
    let (data, test) = cfg.load_data::<T>()?;
    let spec = cfg.model_spec(data.example_shape(), data.class_count())?;
    let e = &cfg.etdrop;
    let epoch = cfg.train.epochs;
    let label = match &cfg.dataset.source {
        crate::config::DataSource::Idx { .. } => "idx",
        crate::config::DataSource::Synthetic { .. } => "synthetic",
    };
    let run = run_etdrop(&data, test.as_ref(), &spec, e.p_gen, e.p_mem, &cfg.train, label)?;
    w.json("etdrop.json", &run.outcome)?;
    let forgotten = forgotten_clean_report(&run, &data)?;
    w.csv("forgotten.csv", forgotten.iter().map(|f| (epoch, ForgottenRow { id: f.id, label: f.label, predicted_after: f.predicted_after })))?;
    if !e.grid_p_gen.is_empty() || !e.grid_p_mem.is_empty() {
        let grid = run_grid(&data, &spec, &e.grid_p_gen, &e.grid_p_mem, &cfg.train, cfg.jobs)?;
        w.csv(
            "grid.csv",
            grid.cells.into_iter().map(|c| {
                (
                    epoch,
                    GridRow { p_mem: c.p_mem, p_gen: c.p_gen, cell_seed: c.seed, clean_after: c.clean_after, noisy_after: c.noisy_after, error: c.error },
                )
            }),
        )?;
    }
    if e.baselines {
        let mut rows = run_baselines(&data, test.as_ref(), &spec, e.p_gen, &cfg.train)?;
        let a = run.outcome.after;
        rows.push(BaselineRecord { arm: "example_tied".into(), parameter: e.p_gen, clean: a.clean, noisy: a.noisy, test: a.test });
        w.csv("baselines.csv", rows.into_iter().map(|r| (epoch, r)))?;
    }
    Ok(())
}
