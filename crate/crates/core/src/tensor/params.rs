//! Named parameter store and the on-disk checkpoint format.
//!
//! A checkpoint is a pair of files: `<stem>.json` (manifest) and `<stem>.bin`
//! (little-endian arrays concatenated in manifest order).

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{numel, Adam, BatchNormState, Real, Tensor};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &str = "ATMRN-CKPT-1";

/// Trainable tensors keyed by name, plus batch-norm running statistics.
#[derive(Clone, Debug)]
pub struct ModelParams<T: Real> {
    entries: BTreeMap<String, Tensor<T>>,
    norms: BTreeMap<String, BatchNormState<T>>,
    pub seed: u64,
    pub arch_hash: String,
}

impl<T: Real> ModelParams<T> {
    pub fn new(seed: u64, arch_hash: impl Into<String>) -> Self {
        Self {
            entries: BTreeMap::new(),
            norms: BTreeMap::new(),
            seed,
            arch_hash: arch_hash.into(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> Result<()> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(Error::invalid("params", format!("duplicate parameter {name}")));
        }
        let t = if tensor.requires_grad() { tensor } else { tensor.to_parameter() };
        self.entries.insert(name, t);
        Ok(())
    }

    pub fn insert_norm(&mut self, name: impl Into<String>, state: BatchNormState<T>) -> Result<()> {
        let name = name.into();
        if self.norms.contains_key(&name) {
            return Err(Error::invalid("params", format!("duplicate norm state {name}")));
        }
        self.norms.insert(name, state);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::invalid("params", format!("missing parameter {name}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn norm_mut(&mut self, name: &str) -> Result<&mut BatchNormState<T>> {
        self.norms
            .get_mut(name)
            .ok_or_else(|| Error::invalid("params", format!("missing norm state {name}")))
    }

    pub fn norms(&self) -> impl Iterator<Item = (&String, &BatchNormState<T>)> {
        self.norms.iter()
    }

    /// Replace a parameter's values with a fresh leaf of the same shape.
    pub fn set_data(&mut self, name: &str, data: Vec<T>) -> Result<()> {
        let old = self.get(name)?;
        let t = Tensor::parameter(old.shape(), data)?;
        self.entries.insert(name.to_string(), t);
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.entries.iter()
    }

    pub fn names(&self) -> Vec<String> {
        self.entries.keys().cloned().collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.values().map(|t| t.numel()).sum()
    }

    pub fn zero_grad(&self) {
        self.entries.values().for_each(|t| t.zero_grad());
    }

    /// L2 norm of the accumulated gradients of parameters under `prefix`;
    /// `None` when none of them received a gradient.
    pub fn grad_norm(&self, prefix: &str) -> Option<f64> {
        let mut any = false;
        let mut acc = 0.0;
        for (name, t) in self.entries.range(prefix.to_string()..) {
            if !name.starts_with(prefix) {
                break;
            }
            if let Some(g) = t.grad() {
                any = true;
                acc += g.iter().map(|v| v.as_f64().powi(2)).sum::<f64>();
            }
        }
        any.then(|| acc.sqrt())
    }

    /// Copy into another element type (used for gradient-check runs).
    pub fn cast<U: Real>(&self) -> ModelParams<U> {
        let mut out = ModelParams::new(self.seed, self.arch_hash.clone());
        for (k, t) in &self.entries {
            let data = t.data().iter().map(|v| U::from_real(v.as_f64())).collect();
            out.entries.insert(k.clone(), Tensor::parameter(t.shape(), data).expect("same shape"));
        }
        for (k, s) in &self.norms {
            out.norms.insert(
                k.clone(),
                BatchNormState {
                    running_mean: s.running_mean.iter().map(|v| U::from_real(v.as_f64())).collect(),
                    running_var: s.running_var.iter().map(|v| U::from_real(v.as_f64())).collect(),
                    momentum: s.momentum,
                    eps: s.eps,
                },
            );
        }
        out
    }

    /// Bitwise equality of values and norm statistics.
    pub fn same_values(&self, other: &ModelParams<T>) -> bool {
        self.entries.len() == other.entries.len()
            && self.entries.iter().zip(&other.entries).all(|((ka, a), (kb, b))| {
                ka == kb && a.shape() == b.shape() && a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits_eq(*y))
            })
            && self.norms == other.norms
    }
}

trait BitsEq {
    fn to_bits_eq(self, other: Self) -> bool;
}

impl<T: Real> BitsEq for T {
    fn to_bits_eq(self, other: Self) -> bool {
        self.as_f64().to_bits() == other.as_f64().to_bits()
    }
}

/// Kaiming-uniform initializer: `U(-b, b)` with `b = sqrt(6 / fan_in)`.
pub fn kaiming_uniform<T: Real, R: Rng>(rng: &mut R, shape: &[usize], fan_in: usize) -> Tensor<T> {
    let bound = (6.0 / fan_in.max(1) as f64).sqrt();
    let data = (0..numel(shape)).map(|_| T::from_real(rng.gen_range(-bound..bound))).collect();
    Tensor::parameter(shape, data).expect("shape is non-empty")
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct TensorRecord {
    pub name: String,
    pub kind: String,
    pub shape: Vec<usize>,
    /// Byte offset into the binary blob.
    pub offset: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub magic: String,
    pub dtype: String,
    pub arch_hash: String,
    pub seed: u64,
    pub optimizer_step: u64,
    pub optimizer_keys: Vec<String>,
    pub tensors: Vec<TensorRecord>,
    pub blob_bytes: usize,
    /// Free-form configuration recorded alongside the weights.
    pub config: serde_json::Value,
}

/// In-memory form of a loaded checkpoint.
#[derive(Debug)]
pub struct Checkpoint<T: Real> {
    pub params: ModelParams<T>,
    pub optimizer: Option<Adam<T>>,
    pub manifest: CheckpointManifest,
}

fn stem_paths(stem: &Path) -> (PathBuf, PathBuf) {
    (stem.with_extension("json"), stem.with_extension("bin"))
}

/// Write `<stem>.json` and `<stem>.bin`.
pub fn save_checkpoint<T: Real>(
    stem: &Path,
    params: &ModelParams<T>,
    optimizer: Option<&Adam<T>>,
    config: serde_json::Value,
) -> Result<()> {
    let mut blob = Vec::new();
    let mut records = Vec::new();
    let mut push = |name: &str, kind: &str, shape: Vec<usize>, data: &[T], blob: &mut Vec<u8>| {
        records.push(TensorRecord {
            name: name.to_string(),
            kind: kind.to_string(),
            shape,
            offset: blob.len(),
        });
        for &v in data {
            v.write_le(blob);
        }
    };
    for (name, t) in params.iter() {
        push(name, "param", t.shape().to_vec(), t.data(), &mut blob);
    }
    for (name, s) in params.norms() {
        push(name, "running_mean", vec![s.running_mean.len()], &s.running_mean, &mut blob);
        push(name, "running_var", vec![s.running_var.len()], &s.running_var, &mut blob);
    }
    let mut optimizer_keys = Vec::new();
    let mut step = 0;
    if let Some(opt) = optimizer {
        step = opt.step_count();
        for (name, (m, v)) in opt.moments() {
            let shape = vec![m.len()];
            push(name, "adam.m", shape.clone(), m, &mut blob);
            push(name, "adam.v", shape, v, &mut blob);
            optimizer_keys.push(format!("adam.m.{name}"));
            optimizer_keys.push(format!("adam.v.{name}"));
        }
    }
    let manifest = CheckpointManifest {
        magic: CHECKPOINT_MAGIC.to_string(),
        dtype: T::DTYPE.to_string(),
        arch_hash: params.arch_hash.clone(),
        seed: params.seed,
        optimizer_step: step,
        optimizer_keys,
        tensors: records,
        blob_bytes: blob.len(),
        config,
    };
    let (json_path, bin_path) = stem_paths(stem);
    if let Some(dir) = json_path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&json_path, text).map_err(|e| Error::io(&json_path, e))?;
    fs::write(&bin_path, &blob).map_err(|e| Error::io(&bin_path, e))?;
    Ok(())
}

/// Read a checkpoint. When `expected_arch_hash` is given, a mismatch is a
/// hard error.
pub fn load_checkpoint<T: Real>(stem: &Path, expected_arch_hash: Option<&str>) -> Result<Checkpoint<T>> {
    let (json_path, bin_path) = stem_paths(stem);
    let text = fs::read_to_string(&json_path).map_err(|e| Error::io(&json_path, e))?;
    let manifest: CheckpointManifest =
        serde_json::from_str(&text).map_err(|e| Error::format(&json_path, e.to_string()))?;
    if manifest.magic != CHECKPOINT_MAGIC {
        return Err(Error::format(&json_path, format!("bad magic {:?}", manifest.magic)));
    }
    if manifest.dtype != T::DTYPE {
        return Err(Error::format(
            &json_path,
            format!("checkpoint dtype {} but {} requested", manifest.dtype, T::DTYPE),
        ));
    }
    if let Some(h) = expected_arch_hash {
        if h != manifest.arch_hash {
            return Err(Error::Config(format!(
                "architecture hash mismatch: checkpoint {} vs current {h}",
                manifest.arch_hash
            )));
        }
    }
    let blob = fs::read(&bin_path).map_err(|e| Error::io(&bin_path, e))?;
    if blob.len() != manifest.blob_bytes {
        return Err(Error::format(
            &bin_path,
            format!("expected {} bytes, found {}", manifest.blob_bytes, blob.len()),
        ));
    }
    let read = |rec: &TensorRecord| -> Result<Vec<T>> {
        let n = numel(&rec.shape);
        let end = rec.offset + n * T::BYTES;
        if end > blob.len() {
            return Err(Error::format(&bin_path, format!("tensor {} overruns blob", rec.name)));
        }
        Ok(blob[rec.offset..end].chunks_exact(T::BYTES).map(T::read_le).collect())
    };

    let mut params = ModelParams::new(manifest.seed, manifest.arch_hash.clone());
    let mut means: BTreeMap<String, Vec<T>> = BTreeMap::new();
    let mut moments: BTreeMap<String, (Vec<T>, Vec<T>)> = BTreeMap::new();
    for rec in &manifest.tensors {
        let data = read(rec)?;
        match rec.kind.as_str() {
            "param" => params.insert(rec.name.clone(), Tensor::parameter(&rec.shape, data)?)?,
            "running_mean" => {
                means.insert(rec.name.clone(), data);
            }
            "running_var" => {
                let mean = means
                    .remove(&rec.name)
                    .ok_or_else(|| Error::format(&json_path, format!("running_var before mean for {}", rec.name)))?;
                let mut st = BatchNormState::new(mean.len());
                st.running_mean = mean;
                st.running_var = data;
                params.insert_norm(rec.name.clone(), st)?;
            }
            "adam.m" => {
                moments.entry(rec.name.clone()).or_default().0 = data;
            }
            "adam.v" => {
                moments.entry(rec.name.clone()).or_default().1 = data;
            }
            other => return Err(Error::format(&json_path, format!("unknown tensor kind {other}"))),
        }
    }
    let optimizer = (!manifest.optimizer_keys.is_empty() || manifest.optimizer_step > 0)
        .then(|| Adam::from_moments(manifest.optimizer_step, moments));
    Ok(Checkpoint {
        params,
        optimizer,
        manifest,
    })
}
