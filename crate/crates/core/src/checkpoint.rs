//! Named-tensor checkpoints: a JSON manifest next to a little-endian blob.
//!
//! `<stem>.json` holds names, shapes, dtype, byte offsets, the config echo and
//! seed; `<stem>.bin` holds the raw values. `f32` is the compact format for
//! backbones (values are rounded to `f32` before saving so the round-trip is
//! exact); `f64` keeps full training state.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const CHECKPOINT_FORMAT: &str = "promptfed-ckpt/1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    pub fn width(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub nbytes: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub dtype: Dtype,
    pub seed: u64,
    /// Config that produced the checkpoint, as written by the config echo.
    pub config_echo: String,
    /// Free-form state that is not a tensor (round index, counts, ...).
    #[serde(default)]
    pub extra: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub manifest: Manifest,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::format("checkpoint", format!("missing tensor {name:?}")))
    }

    /// Copies stored values into `targets`, matching by name and shape.
    pub fn restore_into<'a>(&self, targets: impl IntoIterator<Item = (String, &'a mut Tensor)>) -> Result<()> {
        for (name, t) in targets {
            let src = self.get(&name)?;
            if src.shape() != t.shape() {
                return Err(Error::format(
                    "checkpoint",
                    format!("tensor {name:?} has shape {:?}, expected {:?}", src.shape(), t.shape()),
                ));
            }
            *t = src.clone();
        }
        Ok(())
    }
}

pub fn paths(stem: &Path) -> (PathBuf, PathBuf) {
    (stem.with_extension("json"), stem.with_extension("bin"))
}

/// Rounds every value to the nearest `f32`.
pub fn round_to_f32(t: &mut Tensor) {
    t.data_mut().iter_mut().for_each(|v| *v = *v as f32 as f64);
}

pub fn save<'a, S: AsRef<str>>(
    stem: &Path,
    tensors: impl IntoIterator<Item = (S, &'a Tensor)>,
    dtype: Dtype,
    config_echo: &str,
    seed: u64,
    extra: serde_json::Value,
) -> Result<Manifest> {
    let mut blob = Vec::new();
    let mut entries = Vec::new();
    for (name, t) in tensors {
        let offset = blob.len() as u64;
        for &v in t.data() {
            match dtype {
                Dtype::F32 => {
                    let w = v as f32;
                    if f64::from(w).to_bits() != v.to_bits() && !(v.is_nan() && w.is_nan()) {
                        return Err(Error::format(
                            "checkpoint",
                            format!("tensor {:?} is not representable as f32; round it first", name.as_ref()),
                        ));
                    }
                    blob.extend_from_slice(&w.to_le_bytes());
                }
                Dtype::F64 => blob.extend_from_slice(&v.to_le_bytes()),
            }
        }
        entries.push(TensorEntry {
            name: name.as_ref().to_string(),
            shape: t.shape().to_vec(),
            offset,
            nbytes: blob.len() as u64 - offset,
        });
    }
    let manifest = Manifest {
        format: CHECKPOINT_FORMAT.into(),
        dtype,
        seed,
        config_echo: config_echo.into(),
        extra,
        tensors: entries,
    };
    let (json_path, bin_path) = paths(stem);
    if let Some(dir) = stem.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::format("checkpoint manifest", e.to_string()))?;
    fs::write(&json_path, text).map_err(|e| Error::io(&json_path, e))?;
    fs::write(&bin_path, &blob).map_err(|e| Error::io(&bin_path, e))?;
    Ok(manifest)
}

pub fn load(stem: &Path) -> Result<Checkpoint> {
    let (json_path, bin_path) = paths(stem);
    let text = fs::read_to_string(&json_path).map_err(|e| Error::io(&json_path, e))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::format("checkpoint manifest", e.to_string()))?;
    if manifest.format != CHECKPOINT_FORMAT {
        return Err(Error::format("checkpoint", format!("unknown format {:?}", manifest.format)));
    }
    let blob = fs::read(&bin_path).map_err(|e| Error::io(&bin_path, e))?;
    let width = manifest.dtype.width();
    let mut tensors = Vec::with_capacity(manifest.tensors.len());
    for e in &manifest.tensors {
        let numel: usize = e.shape.iter().product();
        let start = e.offset as usize;
        let end = start + numel * width;
        if e.nbytes as usize != numel * width || end > blob.len() {
            return Err(Error::format("checkpoint", format!("tensor {:?} overruns the blob", e.name)));
        }
        let data = blob[start..end]
            .chunks_exact(width)
            .map(|c| match manifest.dtype {
                Dtype::F32 => f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes"))),
                Dtype::F64 => f64::from_le_bytes(c.try_into().expect("8 bytes")),
            })
            .collect();
        tensors.push((e.name.clone(), Tensor::new(e.shape.clone(), data)?));
    }
    Ok(Checkpoint { manifest, tensors })
}
