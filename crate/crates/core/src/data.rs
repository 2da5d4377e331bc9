//! Probe datasets: inputs with original and training labels and a two-way
//! probe partition (clean/noisy or typical/atypical).

use std::collections::BTreeMap;
use std::io::Read;
use std::path::Path;

use flate2::read::GzDecoder;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::rng::{rng_for, stream};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Which examples an evaluation or training pass covers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Subset {
    Clean,
    Probe,
    All,
}

impl Subset {
    pub fn as_str(self) -> &'static str {
        match self {
            Subset::Clean => "clean",
            Subset::Probe => "probe",
            Subset::All => "all",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeDataset<T> {
    inputs: Tensor<T>,
    original_labels: Vec<usize>,
    training_labels: Vec<usize>,
    probe_flags: Vec<bool>,
    class_count: usize,
}

impl<T: Scalar> ProbeDataset<T> {
    /// A dataset with training labels equal to the original ones and no probes.
    pub fn new(inputs: Tensor<T>, labels: Vec<usize>, class_count: usize) -> Result<Self> {
        let n = labels.len();
        Self::from_parts(inputs, labels.clone(), labels, vec![false; n], class_count)
    }

    pub fn from_parts(
        inputs: Tensor<T>,
        original_labels: Vec<usize>,
        training_labels: Vec<usize>,
        probe_flags: Vec<bool>,
        class_count: usize,
    ) -> Result<Self> {
        let n = inputs.shape()[0];
        if original_labels.len() != n || training_labels.len() != n || probe_flags.len() != n {
            return Err(shape_err("dataset", format!("{n} inputs but {} / {} labels, {} flags", original_labels.len(), training_labels.len(), probe_flags.len())));
        }
        if class_count < 2 {
            return Err(Error::InvalidArgument("a dataset needs at least two classes".into()));
        }
        if let Some((i, &y)) = original_labels.iter().chain(&training_labels).enumerate().find(|(_, &y)| y >= class_count) {
            return Err(Error::InvalidArgument(format!("label {y} at position {} outside [0, {class_count})", i % n)));
        }
        Ok(Self { inputs, original_labels, training_labels, probe_flags, class_count })
    }

    pub fn len(&self) -> usize {
        self.original_labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.original_labels.is_empty()
    }

    pub fn inputs(&self) -> &Tensor<T> {
        &self.inputs
    }

    pub fn original_labels(&self) -> &[usize] {
        &self.original_labels
    }

    pub fn training_labels(&self) -> &[usize] {
        &self.training_labels
    }

    pub fn probe_flags(&self) -> &[bool] {
        &self.probe_flags
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    /// Per-example feature shape (without the leading batch axis).
    pub fn example_shape(&self) -> &[usize] {
        &self.inputs.shape()[1..]
    }

    pub fn ids(&self, subset: Subset) -> Vec<usize> {
        (0..self.len())
            .filter(|&i| match subset {
                Subset::All => true,
                Subset::Clean => !self.probe_flags[i],
                Subset::Probe => self.probe_flags[i],
            })
            .collect()
    }

    pub fn rows(&self, ids: &[usize]) -> Result<Tensor<T>> {
        self.inputs.gather_rows(ids)
    }

    /// Rows `[start, end)` as a new dataset, keeping labels and flags.
    pub fn slice(&self, start: usize, end: usize) -> Result<Self> {
        let ids: Vec<usize> = (start..end).collect();
        self.select(&ids)
    }

    pub fn select(&self, ids: &[usize]) -> Result<Self> {
        Ok(Self {
            inputs: self.inputs.gather_rows(ids)?,
            original_labels: ids.iter().map(|&i| self.original_labels[i]).collect(),
            training_labels: ids.iter().map(|&i| self.training_labels[i]).collect(),
            probe_flags: ids.iter().map(|&i| self.probe_flags[i]).collect(),
            class_count: self.class_count,
        })
    }

    /// Replaces probe flags, e.g. to track a hand-picked probe set.
    pub fn with_probe_flags(mut self, flags: Vec<bool>) -> Result<Self> {
        if flags.len() != self.len() {
            return Err(shape_err("with_probe_flags", format!("{} flags for {} examples", flags.len(), self.len())));
        }
        self.probe_flags = flags;
        Ok(self)
    }

    /// Mean over features of the per-feature standard deviation.
    pub fn mean_feature_std(&self) -> f64 {
        let n = self.len();
        let d = self.inputs.len() / n;
        let data = self.inputs.data();
        let mut total = 0.0;
        for j in 0..d {
            let (mut s, mut s2) = (0.0f64, 0.0f64);
            for i in 0..n {
                let v = data[i * d + j].to_f64().unwrap_or(0.0);
                s += v;
                s2 += v * v;
            }
            let mean = s / n as f64;
            total += (s2 / n as f64 - mean * mean).max(0.0).sqrt();
        }
        total / d as f64
    }

    /// Flags exactly `round(rate·N)` examples and gives each a label drawn
    /// uniformly from the other classes.
    pub fn inject_label_noise(&self, rate: f64, seed: u64) -> Result<Self> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::InvalidArgument(format!("noise rate must be in [0,1), got {rate}")));
        }
        let n = self.len();
        let count = (rate * n as f64).round() as usize;
        let mut rng = rng_for(seed, &[stream::NOISE]);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        let mut out = self.clone();
        out.training_labels = self.original_labels.clone();
        out.probe_flags = vec![false; n];
        let mut chosen = order[..count].to_vec();
        chosen.sort_unstable();
        for i in chosen {
            let y = self.original_labels[i];
            let r = rng.random_range(0..self.class_count - 1);
            out.training_labels[i] = if r >= y { r + 1 } else { r };
            out.probe_flags[i] = true;
        }
        Ok(out)
    }

    /// Flags examples whose score is below `threshold`; labels are untouched.
    pub fn partition_by_score(&self, scores: &ScoreFile, threshold: f64) -> Result<Self> {
        let mut flags = Vec::with_capacity(self.len());
        for i in 0..self.len() {
            let s = scores.get(i).ok_or_else(|| Error::InvalidArgument(format!("score file has no entry for example {i}")))?;
            flags.push(s < threshold);
        }
        let mut out = self.clone();
        out.probe_flags = flags;
        Ok(out)
    }

    /// Standardizes each input channel (axis 1) to zero mean and unit variance.
    pub fn standardize_channels(&mut self) {
        let shape = self.inputs.shape().to_vec();
        let (n, c) = (shape[0], if shape.len() > 2 { shape[1] } else { 1 });
        let inner: usize = if shape.len() > 2 { shape[2..].iter().product() } else { shape[1] };
        let data = self.inputs.data_mut();
        for ch in 0..c {
            let (mut s, mut s2, mut m) = (0.0f64, 0.0f64, 0.0f64);
            for i in 0..n {
                for v in &data[(i * c + ch) * inner..(i * c + ch + 1) * inner] {
                    let v = v.to_f64().unwrap_or(0.0);
                    s += v;
                    s2 += v * v;
                    m += 1.0;
                }
            }
            let mean = s / m;
            let std = (s2 / m - mean * mean).max(0.0).sqrt().max(1e-12);
            for i in 0..n {
                for v in &mut data[(i * c + ch) * inner..(i * c + ch + 1) * inner] {
                    *v = T::lit((v.to_f64().unwrap_or(0.0) - mean) / std);
                }
            }
        }
    }
}

/// Per-example consistency scores in `[0,1]`, read from a CSV with header `id,score`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ScoreFile {
    scores: BTreeMap<usize, f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ScoreRow {
    id: usize,
    score: f64,
}

impl ScoreFile {
    pub fn from_map(scores: BTreeMap<usize, f64>) -> Result<Self> {
        if let Some((id, s)) = scores.iter().find(|(_, s)| !(0.0..=1.0).contains(*s)) {
            return Err(Error::InvalidArgument(format!("score {s} for example {id} outside [0,1]")));
        }
        Ok(Self { scores })
    }

    pub fn get(&self, id: usize) -> Option<f64> {
        self.scores.get(&id).copied()
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut reader = csv::Reader::from_path(path)?;
        let mut scores = BTreeMap::new();
        for row in reader.deserialize() {
            let row: ScoreRow = row?;
            if scores.insert(row.id, row.score).is_some() {
                return Err(Error::InvalidArgument(format!("duplicate score for example {}", row.id)));
            }
        }
        Self::from_map(scores)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for (&id, &score) in &self.scores {
            w.serialize(ScoreRow { id, score })?;
        }
        w.flush()?;
        Ok(())
    }
}

fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let raw = std::fs::read(path)?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(&raw[..]).read_to_end(&mut out)?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn be_u32(bytes: &[u8], offset: usize) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes(b.try_into().expect("4 bytes")))
        .ok_or_else(|| Error::Format { offset: offset as u64, msg: "truncated header".into() })
}

/// Parses an IDX image file (magic `0x00000803`) into `(count, rows, cols, pixels)`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<(usize, usize, usize, &[u8])> {
    let magic = be_u32(bytes, 0)?;
    if magic != 0x0000_0803 {
        return Err(Error::Format { offset: 0, msg: format!("bad image magic {magic:#010x}") });
    }
    let n = be_u32(bytes, 4)? as usize;
    let rows = be_u32(bytes, 8)? as usize;
    let cols = be_u32(bytes, 12)? as usize;
    let need = 16 + n * rows * cols;
    if bytes.len() < need {
        return Err(Error::Format { offset: bytes.len() as u64, msg: format!("truncated image data, expected {need} bytes") });
    }
    Ok((n, rows, cols, &bytes[16..need]))
}

/// Parses an IDX label file (magic `0x00000801`).
pub fn parse_idx_labels(bytes: &[u8]) -> Result<&[u8]> {
    let magic = be_u32(bytes, 0)?;
    if magic != 0x0000_0801 {
        return Err(Error::Format { offset: 0, msg: format!("bad label magic {magic:#010x}") });
    }
    let n = be_u32(bytes, 4)? as usize;
    if bytes.len() < 8 + n {
        return Err(Error::Format { offset: bytes.len() as u64, msg: format!("truncated label data, expected {} bytes", 8 + n) });
    }
    Ok(&bytes[8..8 + n])
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IdxOptions {
    pub class_count: usize,
    /// Keep only the first `limit` examples.
    pub limit: Option<usize>,
    pub standardize: bool,
}

impl Default for IdxOptions {
    fn default() -> Self {
        Self { class_count: 10, limit: None, standardize: false }
    }
}

/// Loads an IDX image/label pair (plain or gzipped) as `N×1×H×W` inputs in `[0,1]`.
pub fn load_idx<T: Scalar>(images: &Path, labels: &Path, opts: &IdxOptions) -> Result<ProbeDataset<T>> {
    let img_bytes = read_maybe_gz(images)?;
    let lab_bytes = read_maybe_gz(labels)?;
    let (n, rows, cols, pixels) = parse_idx_images(&img_bytes)?;
    let labs = parse_idx_labels(&lab_bytes)?;
    if labs.len() != n {
        return Err(Error::Format { offset: 4, msg: format!("{} labels for {n} images", labs.len()) });
    }
    if let Some(pos) = labs.iter().position(|&y| y as usize >= opts.class_count) {
        return Err(Error::Format { offset: 8 + pos as u64, msg: format!("label {} outside [0, {})", labs[pos], opts.class_count) });
    }
    let keep = opts.limit.map_or(n, |l| l.min(n));
    if keep == 0 || rows == 0 || cols == 0 {
        return Err(Error::Format { offset: 4, msg: "empty image set".into() });
    }
    let inputs = Tensor::new(
        vec![keep, 1, rows, cols],
        pixels[..keep * rows * cols].iter().map(|&p| T::lit(p as f64 / 255.0)).collect(),
    )?;
    let labels: Vec<usize> = labs[..keep].iter().map(|&y| y as usize).collect();
    let mut ds = ProbeDataset::new(inputs, labels, opts.class_count)?;
    if opts.standardize {
        ds.standardize_channels();
    }
    Ok(ds)
}

/// Gaussian blobs (unit variance) around class means at pairwise distance
/// `margin`; examples are interleaved by class.
pub fn synth_clusters<T: Scalar>(classes: usize, per_class: usize, dim: usize, margin: f64, seed: u64) -> Result<ProbeDataset<T>> {
    if !(margin > 0.0) || classes < 2 || per_class == 0 || dim == 0 {
        return Err(Error::InvalidArgument("synth_clusters needs margin > 0, classes >= 2, per_class >= 1, dim >= 1".into()));
    }
    // orthogonal axes when they fit, otherwise random unit directions
    let scale = margin / std::f64::consts::SQRT_2;
    let mut mrng = rng_for(seed, &[stream::SYNTH, 0]);
    let means: Vec<Vec<f64>> = (0..classes)
        .map(|c| {
            if classes <= dim {
                (0..dim).map(|j| if j == c { scale } else { 0.0 }).collect()
            } else {
                let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut mrng)).collect();
                let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
                v.iter().map(|x| x * scale / norm).collect()
            }
        })
        .collect();
    let mut rng = rng_for(seed, &[stream::SYNTH, 1]);
    let n = classes * per_class;
    let mut data = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % classes;
        for mean in &means[c] {
            let z: f64 = StandardNormal.sample(&mut rng);
            data.push(T::lit(mean + z));
        }
        labels.push(c);
    }
    ProbeDataset::new(Tensor::new(vec![n, dim], data)?, labels, classes)
}

/// Seeded per-epoch shuffling into fixed-size batches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchPlan {
    pub seed: u64,
    pub batch_size: usize,
}

impl BatchPlan {
    pub fn new(seed: u64, batch_size: usize) -> Result<Self> {
        if batch_size == 0 {
            return Err(Error::InvalidArgument("batch size must be positive".into()));
        }
        Ok(Self { seed, batch_size })
    }

    /// Permutation of `ids` for `epoch`.
    pub fn order(&self, ids: &[usize], epoch: usize) -> Vec<usize> {
        let mut order = ids.to_vec();
        order.shuffle(&mut rng_for(self.seed, &[stream::SHUFFLE, epoch as u64]));
        order
    }

    /// Batches of ids for `epoch`; the last batch may be short.
    pub fn batches(&self, ids: &[usize], epoch: usize) -> Vec<Vec<usize>> {
        self.order(ids, epoch).chunks(self.batch_size).map(<[usize]>::to_vec).collect()
    }
}

/// One materialized batch.
#[derive(Debug, Clone)]
pub struct Batch<T> {
    pub ids: Vec<usize>,
    pub inputs: Tensor<T>,
    pub labels: Vec<usize>,
}

/// All batches of one epoch over the whole dataset.
pub fn batches<T: Scalar>(dataset: &ProbeDataset<T>, plan: &BatchPlan, epoch: usize) -> Result<Vec<Batch<T>>> {
    let ids = dataset.ids(Subset::All);
    plan.batches(&ids, epoch)
        .into_iter()
        .map(|ids| {
            Ok(Batch {
                inputs: dataset.rows(&ids)?,
                labels: ids.iter().map(|&i| dataset.training_labels()[i]).collect(),
                ids,
            })
        })
        .collect()
}
