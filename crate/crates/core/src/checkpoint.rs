//! Per-epoch snapshots of every parameter and buffer.
//!
//! Layout: `manifest_<epoch>.json` holds the tensor catalog (name, shape,
//! dtype, byte offset) and the spec digest; `weights_<epoch>.bin` holds the
//! little-endian values in catalog order.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::digest::{fnv1a64, hex64};
use crate::error::{Error, Result};
use crate::model::{Model, ModelSpec};
use crate::scalar::{DType, Scalar};
use crate::tensor::Tensor;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: DType,
    pub offset: u64,
    pub buffer: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub spec_digest: String,
    pub epoch: usize,
    pub blob_digest: String,
    pub spec: ModelSpec,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone)]
enum Backend {
    Dir(PathBuf),
    Memory(BTreeMap<usize, (Vec<u8>, Vec<u8>)>),
}

#[derive(Debug, Clone)]
pub struct CheckpointStore {
    backend: Backend,
}

fn encode<T: Scalar>(model: &Model<T>, epoch: usize) -> Result<(Manifest, Vec<u8>)> {
    let mut blob = Vec::new();
    let mut tensors = Vec::new();
    for (i, nt) in model.state().enumerate() {
        tensors.push(TensorEntry {
            name: nt.name.clone(),
            shape: nt.tensor.shape().to_vec(),
            dtype: T::DTYPE,
            offset: blob.len() as u64,
            buffer: i >= model.params().len(),
        });
        for &v in nt.tensor.data() {
            v.write_le(&mut blob);
        }
    }
    let manifest = Manifest {
        version: FORMAT_VERSION,
        spec_digest: hex64(model.spec().digest()),
        epoch,
        blob_digest: hex64(fnv1a64(&blob)),
        spec: model.spec().clone(),
        tensors,
    };
    Ok((manifest, blob))
}

fn decode<T: Scalar>(manifest: &Manifest, blob: &[u8], spec: &ModelSpec) -> Result<Model<T>> {
    if manifest.version != FORMAT_VERSION {
        return Err(Error::Incompatible(format!("format version {} (expected {FORMAT_VERSION})", manifest.version)));
    }
    let want = hex64(spec.digest());
    if manifest.spec_digest != want {
        return Err(Error::Incompatible(format!("checkpoint spec digest {} does not match model spec {want}", manifest.spec_digest)));
    }
    if hex64(fnv1a64(blob)) != manifest.blob_digest {
        return Err(Error::Incompatible(format!("epoch {} weight blob digest mismatch", manifest.epoch)));
    }
    let mut model = Model::<T>::build(spec, 0)?;
    let mut seen = 0usize;
    for nt in model.state_mut() {
        let entry = manifest
            .tensors
            .iter()
            .find(|e| e.name == nt.name)
            .ok_or_else(|| Error::Incompatible(format!("checkpoint lacks tensor '{}'", nt.name)))?;
        if entry.dtype != T::DTYPE || entry.shape != nt.tensor.shape() {
            return Err(Error::Incompatible(format!(
                "tensor '{}': stored {:?} {}, model {:?} {}",
                entry.name,
                entry.shape,
                entry.dtype.as_str(),
                nt.tensor.shape(),
                T::DTYPE.as_str()
            )));
        }
        let start = entry.offset as usize;
        let end = start + nt.tensor.len() * T::BYTES;
        let bytes = blob
            .get(start..end)
            .ok_or_else(|| Error::Format { offset: blob.len() as u64, msg: format!("tensor '{}' truncated", entry.name) })?;
        for (v, chunk) in nt.tensor.data_mut().iter_mut().zip(bytes.chunks_exact(T::BYTES)) {
            *v = T::read_le(chunk);
        }
        seen += 1;
    }
    if seen != manifest.tensors.len() {
        return Err(Error::Incompatible("checkpoint has tensors the model does not".into()));
    }
    Ok(model)
}

fn write_atomic(dir: &Path, name: &str, bytes: &[u8]) -> Result<()> {
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(dir.join(name)).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

impl CheckpointStore {
    /// A store rooted at `dir`, created if absent.
    pub fn open(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        std::fs::create_dir_all(&dir)?;
        Ok(Self { backend: Backend::Dir(dir) })
    }

    pub fn in_memory() -> Self {
        Self { backend: Backend::Memory(BTreeMap::new()) }
    }

    pub fn dir(&self) -> Option<&Path> {
        match &self.backend {
            Backend::Dir(d) => Some(d),
            Backend::Memory(_) => None,
        }
    }

    pub fn epochs(&self) -> Result<Vec<usize>> {
        match &self.backend {
            Backend::Memory(m) => Ok(m.keys().copied().collect()),
            Backend::Dir(d) => {
                let mut out = Vec::new();
                for entry in std::fs::read_dir(d)? {
                    let name = entry?.file_name();
                    let name = name.to_string_lossy();
                    if let Some(e) = name.strip_prefix("manifest_").and_then(|s| s.strip_suffix(".json")) {
                        if let Ok(e) = e.parse() {
                            out.push(e);
                        }
                    }
                }
                out.sort_unstable();
                Ok(out)
            }
        }
    }

    pub fn contains(&self, epoch: usize) -> Result<bool> {
        Ok(self.epochs()?.contains(&epoch))
    }

    /// Saves a snapshot; an epoch may be saved only once.
    pub fn save<T: Scalar>(&mut self, model: &Model<T>, epoch: usize) -> Result<()> {
        if self.contains(epoch)? {
            return Err(Error::State(format!("checkpoint for epoch {epoch} already exists")));
        }
        let (manifest, blob) = encode(model, epoch)?;
        let json = serde_json::to_vec_pretty(&manifest)?;
        match &mut self.backend {
            Backend::Memory(m) => {
                m.insert(epoch, (json, blob));
            }
            Backend::Dir(d) => {
                // the manifest is written last so a present manifest implies a complete blob
                write_atomic(d, &format!("weights_{epoch}.bin"), &blob)?;
                write_atomic(d, &format!("manifest_{epoch}.json"), &json)?;
            }
        }
        Ok(())
    }

    fn read(&self, epoch: usize) -> Result<(Manifest, Vec<u8>)> {
        let (json, blob) = match &self.backend {
            Backend::Memory(m) => m.get(&epoch).cloned().ok_or(Error::MissingCheckpoint(epoch))?,
            Backend::Dir(d) => {
                let mpath = d.join(format!("manifest_{epoch}.json"));
                if !mpath.exists() {
                    return Err(Error::MissingCheckpoint(epoch));
                }
                (std::fs::read(mpath)?, std::fs::read(d.join(format!("weights_{epoch}.bin")))?)
            }
        };
        Ok((serde_json::from_slice(&json)?, blob))
    }

    pub fn manifest(&self, epoch: usize) -> Result<Manifest> {
        Ok(self.read(epoch)?.0)
    }

    /// Raw weight blob of one epoch.
    pub fn blob(&self, epoch: usize) -> Result<Vec<u8>> {
        Ok(self.read(epoch)?.1)
    }

    /// Loads an epoch for `spec`, failing if the stored spec digest differs.
    pub fn load<T: Scalar>(&self, epoch: usize, spec: &ModelSpec) -> Result<Model<T>> {
        let (manifest, blob) = self.read(epoch)?;
        decode(&manifest, &blob, spec)
    }

    /// Loads an epoch using the spec embedded in its manifest.
    pub fn load_model<T: Scalar>(&self, epoch: usize) -> Result<Model<T>> {
        let (manifest, blob) = self.read(epoch)?;
        decode(&manifest, &blob, &manifest.spec.clone())
    }
}

/// Copies every tensor of `src` into `dst` (same spec), keeping `dst`'s
/// freeze flags and sparse mask.
pub fn copy_state<T: Scalar>(dst: &mut Model<T>, src: &Model<T>) -> Result<()> {
    if dst.spec() != src.spec() {
        return Err(Error::Incompatible("models have different specs".into()));
    }
    for (d, s) in dst.state_mut().zip(src.state()) {
        d.tensor = Tensor::clone(&s.tensor);
    }
    Ok(())
}
