//! Example-tied dropout experiments: the before/after memorization-drop
//! comparison, the `(p_gen, p_mem)` grid, the dense-capacity baselines, and
//! the list of clean examples lost when memorization units are dropped.

use serde::{Deserialize, Serialize};

use crate::data::{ProbeDataset, Subset};
use crate::error::{Error, Result};
use crate::model::{ExampleTiedDropout, LayerSpec, Model, ModelSpec, Pool};
use crate::rng::{derive_seed, stream};
use crate::scalar::Scalar;
use crate::trainer::{evaluate, evaluate_test, predict_ids, train, DropoutConfig, EvalOptions, TrainConfig, TrainOutput};

/// Two conv blocks (3×3, ReLU, 2×2 max-pool), one hidden dense layer, and a
/// linear head, for `side×side` single-channel images.
pub fn desk_cnn(side: usize, channels: (usize, usize), hidden: usize, classes: usize) -> ModelSpec {
    let (c1, c2) = channels;
    let flat = c2 * (side / 4) * (side / 4);
    ModelSpec {
        input: crate::model::InputShape::Image { channels: 1, height: side, width: side },
        layers: vec![
            LayerSpec::conv(1, c1, 3, 1, 1).relu().pool(Pool::Max2),
            LayerSpec::conv(c1, c2, 3, 1, 1).relu().pool(Pool::Max2),
            LayerSpec::dense(flat, hidden).relu(),
            LayerSpec::dense(hidden, classes),
        ],
        classes,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Accuracies {
    pub clean: f64,
    pub noisy: f64,
    pub test: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EtdropSettings {
    pub p_gen: f64,
    pub p_mem: f64,
    pub dataset: String,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EtdropOutcome {
    pub config: EtdropSettings,
    pub before: Accuracies,
    pub after: Accuracies,
}

#[derive(Debug, Clone)]
pub struct EtdropRun<T> {
    pub outcome: EtdropOutcome,
    pub trained: TrainOutput<T>,
}

fn accuracies<T: Scalar>(
    model: &Model<T>,
    data: &ProbeDataset<T>,
    test: Option<&ProbeDataset<T>>,
    opts: &EvalOptions<'_, T>,
) -> Result<Accuracies> {
    Ok(Accuracies {
        clean: evaluate(model, data, Subset::Clean, opts)?.acc(),
        noisy: evaluate(model, data, Subset::Probe, opts)?.acc(),
        test: test.map(|t| evaluate_test(model, t, opts)).transpose()?.map(|e| e.acc()),
    })
}

/// Trains `spec` with example-tied dropout after every hidden layer and
/// evaluates the same weights with and without the memorization units.
pub fn run_etdrop<T: Scalar>(
    data: &ProbeDataset<T>,
    test: Option<&ProbeDataset<T>>,
    spec: &ModelSpec,
    p_gen: f64,
    p_mem: f64,
    cfg: &TrainConfig,
    dataset: &str,
) -> Result<EtdropRun<T>> {
    if p_gen + p_mem > 1.0 + 1e-12 {
        return Err(Error::InvalidArgument(format!("p_gen + p_mem = {} exceeds 1", p_gen + p_mem)));
    }
    let cfg = TrainConfig { dropout: DropoutConfig::ExampleTied { p_gen, p_mem }, ..cfg.clone() };
    let model = Model::<T>::build(spec, cfg.seed)?;
    let trained = train(model, data, test, &cfg, None, &mut [])?;
    let tied = trained.tied.as_ref().expect("example-tied run");
    let before = accuracies(&trained.model, data, test, &EvalOptions::tied(Some(tied), false))?;
    let after = accuracies(&trained.model, data, test, &EvalOptions::tied(Some(tied), true))?;
    let outcome = EtdropOutcome {
        config: EtdropSettings { p_gen, p_mem, dataset: dataset.to_string(), seed: cfg.seed },
        before,
        after,
    };
    Ok(EtdropRun { outcome, trained })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub p_mem: f64,
    pub p_gen: f64,
    pub seed: u64,
    pub clean_after: Option<f64>,
    pub noisy_after: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridOutcome {
    pub cells: Vec<GridCell>,
}

impl GridOutcome {
    pub fn get(&self, p_mem: f64, p_gen: f64) -> Option<&GridCell> {
        self.cells.iter().find(|c| c.p_mem == p_mem && c.p_gen == p_gen)
    }
}

/// Seed of one grid cell; depends only on the base seed and the cell.
pub fn cell_seed(base: u64, p_gen: f64, p_mem: f64) -> u64 {
    derive_seed(base, &[stream::GRID, p_gen.to_bits(), p_mem.to_bits()])
}

/// One independent run per `(p_mem, p_gen)` cell, rows ordered by `p_mem`.
/// A failing cell records its error and the grid continues.
pub fn run_grid<T: Scalar>(
    data: &ProbeDataset<T>,
    spec: &ModelSpec,
    p_gens: &[f64],
    p_mems: &[f64],
    cfg: &TrainConfig,
    jobs: usize,
) -> Result<GridOutcome> {
    if p_gens.is_empty() || p_mems.is_empty() {
        return Err(Error::InvalidArgument("grid needs at least one p_gen and one p_mem".into()));
    }
    let pairs: Vec<(f64, f64)> = p_mems.iter().flat_map(|&m| p_gens.iter().map(move |&g| (m, g))).collect();
    let run = |&(p_mem, p_gen): &(f64, f64)| {
        let seed = cell_seed(cfg.seed, p_gen, p_mem);
        let cell_cfg = TrainConfig { seed, ..cfg.clone() };
        match run_etdrop(data, None, spec, p_gen, p_mem, &cell_cfg, "") {
            Ok(r) => GridCell {
                p_mem,
                p_gen,
                seed,
                clean_after: Some(r.outcome.after.clean),
                noisy_after: Some(r.outcome.after.noisy),
                error: None,
            },
            Err(e) => GridCell { p_mem, p_gen, seed, clean_after: None, noisy_after: None, error: Some(e.to_string()) },
        }
    };
    let jobs = jobs.clamp(1, pairs.len());
    let cells = if jobs == 1 {
        pairs.iter().map(run).collect()
    } else {
        let mut slots: Vec<Option<GridCell>> = vec![None; pairs.len()];
        std::thread::scope(|s| {
            let chunk = pairs.len().div_ceil(jobs);
            for (out, work) in slots.chunks_mut(chunk).zip(pairs.chunks(chunk)) {
                let run = &run;
                s.spawn(move || {
                    for (o, w) in out.iter_mut().zip(work) {
                        *o = Some(run(w));
                    }
                });
            }
        });
        slots.into_iter().map(|c| c.expect("cell filled")).collect()
    };
    Ok(GridOutcome { cells })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineRecord {
    /// `standard_dropout`, `sparse`, or `example_tied`.
    pub arm: String,
    pub parameter: f64,
    pub clean: f64,
    pub noisy: f64,
    pub test: Option<f64>,
}

/// Standard dropout with `p = p_gen` and a static sparse network keeping a
/// `p_gen` fraction of weights, under the budget and seed of `cfg`.
pub fn run_baselines<T: Scalar>(
    data: &ProbeDataset<T>,
    test: Option<&ProbeDataset<T>>,
    spec: &ModelSpec,
    p_gen: f64,
    cfg: &TrainConfig,
) -> Result<Vec<BaselineRecord>> {
    let mut out = Vec::with_capacity(2);

    let dcfg = TrainConfig { dropout: DropoutConfig::Standard { p: p_gen }, ..cfg.clone() };
    let trained = train(Model::<T>::build(spec, cfg.seed)?, data, test, &dcfg, None, &mut [])?;
    let a = accuracies(&trained.model, data, test, &EvalOptions::default())?;
    out.push(BaselineRecord { arm: "standard_dropout".into(), parameter: p_gen, clean: a.clean, noisy: a.noisy, test: a.test });

    let scfg = TrainConfig { dropout: DropoutConfig::None, ..cfg.clone() };
    let mut model = Model::<T>::build(spec, cfg.seed)?;
    let mask = model.sparse_mask_for(p_gen, derive_seed(cfg.seed, &[stream::SPARSE]))?;
    model.apply_sparse_mask(mask)?;
    let trained = train(model, data, test, &scfg, None, &mut [])?;
    let a = accuracies(&trained.model, data, test, &EvalOptions::default())?;
    out.push(BaselineRecord { arm: "sparse".into(), parameter: p_gen, clean: a.clean, noisy: a.noisy, test: a.test });
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ForgottenExample {
    pub id: usize,
    pub label: usize,
    pub predicted_after: usize,
}

/// Clean examples predicted correctly with their memorization units and
/// wrongly without them.
pub fn forgotten_clean_report<T: Scalar>(run: &EtdropRun<T>, data: &ProbeDataset<T>) -> Result<Vec<ForgottenExample>> {
    let tied: Option<&ExampleTiedDropout> = run.trained.tied.as_ref();
    let ids = data.ids(Subset::Clean);
    let before = predict_ids(&run.trained.model, data, &ids, &EvalOptions::tied(tied, false))?;
    let after = predict_ids(&run.trained.model, data, &ids, &EvalOptions::tied(tied, true))?;
    let labels = data.training_labels();
    Ok(ids
        .iter()
        .zip(before.iter().zip(&after))
        .filter(|(&i, (&b, &a))| b == labels[i] && a != labels[i])
        .map(|(&i, (_, &a))| ForgottenExample { id: i, label: labels[i], predicted_after: a })
        .collect())
}
