//! Run configuration: a TOML file plus command-line overrides.

use std::path::{Path, PathBuf};

use memloc_core::data::{load_idx, synth_clusters, IdxOptions, ProbeDataset, ScoreFile};
use memloc_core::digest::{fnv1a64, hex64};
use memloc_core::etdrop::desk_cnn;
use memloc_core::localization::RetrainConfig;
use memloc_core::neuron_search::Scorer;
use memloc_core::rng::{derive_seed, stream};
use memloc_core::trainer::TrainConfig;
use memloc_core::{DType, ModelSpec, Scalar};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "schema_version")]
    pub version: u32,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_dtype")]
    pub dtype: DType,
    #[serde(default = "one")]
    pub jobs: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub account: AccountConfig,
    #[serde(default)]
    pub rewind: RewindConfig,
    #[serde(default)]
    pub retrain: RetrainBlock,
    #[serde(default)]
    pub flip: FlipConfig,
    #[serde(default)]
    pub etdrop: EtdropConfig,
}

fn schema_version() -> u32 {
    SCHEMA_VERSION
}

fn default_dtype() -> DType {
    DType::F32
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    Idx { images: PathBuf, labels: PathBuf },
    Synthetic { classes: usize, per_class: usize, dim: usize, margin: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub source: DataSource,
    /// Leading examples used for training; the rest (up to `test_count`) are held out.
    #[serde(default)]
    pub train_count: Option<usize>,
    #[serde(default)]
    pub test_count: usize,
    #[serde(default)]
    pub noise_rate: f64,
    /// Per-example consistency scores; examples below the threshold become the probe set.
    #[serde(default)]
    pub score_file: Option<PathBuf>,
    #[serde(default = "half")]
    pub score_threshold: f64,
    #[serde(default)]
    pub standardize: bool,
}

fn half() -> f64 {
    0.5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelConfig {
    Mlp { hidden: Vec<usize> },
    Cnn { channels: [usize; 2], hidden: usize },
    Custom { spec: ModelSpec },
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AccountConfig {
    pub by_group: bool,
    pub direct_total: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RewindConfig {
    /// Epochs to rewind to; empty means every saved epoch.
    pub epochs: Vec<usize>,
    pub by_group: bool,
    pub rewind_buffers: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RetrainBlock {
    /// Layers to retrain, one run each; empty means every layer.
    pub layers: Vec<usize>,
    pub settings: RetrainConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FlipConfig {
    pub clean_probes: usize,
    pub noisy_probes: usize,
    pub budget: usize,
    pub sigma: f64,
    pub samples: usize,
    pub reference_batch: usize,
    pub include_head: bool,
    pub scorer: Scorer,
    pub runs: usize,
    /// Training examples used for post-removal accuracy; 0 skips it.
    pub eval_subsample: usize,
}

impl Default for FlipConfig {
    fn default() -> Self {
        Self {
            clean_probes: 200,
            noisy_probes: 200,
            budget: 100,
            sigma: 0.0,
            samples: 1,
            reference_batch: 512,
            include_head: false,
            scorer: Scorer::GateGradient,
            runs: 1,
            eval_subsample: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EtdropConfig {
    pub p_gen: f64,
    pub p_mem: f64,
    pub grid_p_gen: Vec<f64>,
    pub grid_p_mem: Vec<f64>,
    pub baselines: bool,
}

impl Default for EtdropConfig {
    fn default() -> Self {
        Self { p_gen: 0.4, p_mem: 0.1, grid_p_gen: Vec::new(), grid_p_mem: Vec::new(), baselines: false }
    }
}

/// Command-line values that take precedence over the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub jobs: Option<usize>,
    pub dtype: Option<DType>,
}

impl RunConfig {
    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        toml::from_str(text).map_err(|e| CliError::Config { path: path.to_path_buf(), msg: e.to_string() })
    }

    /// Reads `path`; relative data paths are resolved against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config { path: path.to_path_buf(), msg: e.to_string() })?;
        let mut cfg = Self::parse(&text, path)?;
        let base = path.parent().unwrap_or(Path::new(""));
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let DataSource::Idx { images, labels } = &mut cfg.dataset.source {
            fix(images);
            fix(labels);
        }
        if let Some(s) = &mut cfg.dataset.score_file {
            fix(s);
        }
        Ok(cfg)
    }

    /// Applies overrides, falling back to `env_out` and then `runs` for the
    /// output directory, and checks the result.
    pub fn resolve(mut self, o: &Overrides, env_out: Option<PathBuf>) -> Result<Self> {
        if let Some(s) = o.seed {
            self.seed = s;
        }
        if let Some(j) = o.jobs {
            self.jobs = j;
        }
        if let Some(d) = o.dtype {
            self.dtype = d;
        }
        self.out = o.out.clone().or(self.out).or(env_out).or_else(|| Some(PathBuf::from("runs")));
        self.train.seed = self.seed;
        self.retrain.settings.seed = self.seed;
        self.validate()?;
        Ok(self)
    }

    fn validate(&self) -> Result<()> {
        if self.version != SCHEMA_VERSION {
            return Err(CliError::Invalid(format!("config schema version {} (supported: {SCHEMA_VERSION})", self.version)));
        }
        if self.jobs == 0 {
            return Err(CliError::Invalid("jobs must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.dataset.noise_rate) {
            return Err(CliError::Invalid(format!("noise_rate {} outside [0,1]", self.dataset.noise_rate)));
        }
        Ok(())
    }

    pub fn out_dir(&self) -> PathBuf {
        self.out.clone().unwrap_or_else(|| PathBuf::from("runs"))
    }

    pub fn checkpoint_dir(&self) -> PathBuf {
        self.out_dir().join("checkpoints")
    }

    /// Digest of everything that affects results; output location and
    /// thread count are excluded.
    pub fn digest(&self) -> String {
        let mut c = self.clone();
        c.out = None;
        c.jobs = 1;
        hex64(fnv1a64(serde_json::to_string(&c).expect("config serializes").as_bytes()))
    }

    /// Digest of the blocks that determine the trained checkpoints.
    pub fn training_digest(&self) -> String {
        let key = (&self.seed, &self.dtype, &self.dataset, &self.model, &self.train);
        hex64(fnv1a64(serde_json::to_string(&key).expect("config serializes").as_bytes()))
    }

    pub fn noise_seed(&self) -> u64 {
        derive_seed(self.seed, &[stream::NOISE])
    }

    /// Training split (with noise or score partition applied) and optional test split.
    pub fn load_data<T: Scalar>(&self) -> Result<(ProbeDataset<T>, Option<ProbeDataset<T>>)> {
        let d = &self.dataset;
        let mut all = match &d.source {
            DataSource::Idx { images, labels } => load_idx::<T>(images, labels, &IdxOptions::default())?,
            DataSource::Synthetic { classes, per_class, dim, margin } => {
                synth_clusters::<T>(*classes, *per_class, *dim, *margin, derive_seed(self.seed, &[stream::SYNTH]))?
            }
        };
        if d.standardize {
            all.standardize_channels();
        }
        let n = all.len();
        let n_train = d.train_count.unwrap_or(n - d.test_count.min(n));
        if n_train == 0 || n_train + d.test_count > n {
            return Err(CliError::Invalid(format!(
                "dataset has {n} examples; cannot take {n_train} train + {} test",
                d.test_count
            )));
        }
        let mut train = all.slice(0, n_train)?;
        if d.noise_rate > 0.0 {
            train = train.inject_label_noise(d.noise_rate, self.noise_seed())?;
        }
        if let Some(path) = &d.score_file {
            train = train.partition_by_score(&ScoreFile::read_csv(path)?, d.score_threshold)?;
        }
        let test = (d.test_count > 0).then(|| all.slice(n_train, n_train + d.test_count)).transpose()?;
        Ok((train, test))
    }

    pub fn model_spec(&self, example_shape: &[usize], classes: usize) -> Result<ModelSpec> {
        let spec = match &self.model {
            ModelConfig::Mlp { hidden } => ModelSpec::mlp(example_shape.iter().product(), hidden, classes),
            ModelConfig::Cnn { channels, hidden } => {
                let side = match example_shape {
                    [1, h, w] if h == w => *h,
                    s => return Err(CliError::Invalid(format!("cnn preset needs square single-channel images, got {s:?}"))),
                };
                desk_cnn(side, (channels[0], channels[1]), *hidden, classes)
            }
            ModelConfig::Custom { spec } => spec.clone(),
        };
        spec.validate()?;
        Ok(spec)
    }
}
