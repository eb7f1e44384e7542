//! On-disk formats: a JSON manifest next to a raw little-endian `f32` blob.
//!
//! Datasets store the samples row-major followed by the labels as `i32`
//! at `label_offset` bytes. Checkpoints store named parameter arrays in
//! manifest order.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use crate::datasets::{DatasetMeta, LabeledDataset};
use crate::error::{Error, Result};

pub const DTYPE_F32LE: &str = "f32le";
pub const DTYPE_I32LE: &str = "i32le";

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn format_err(path: &Path, detail: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        detail: detail.into(),
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(io_err(path))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|e| format_err(path, e.to_string()))
}

fn f32_bytes<'a>(values: impl Iterator<Item = &'a f64>) -> Vec<u8> {
    values.flat_map(|&v| (v as f32).to_le_bytes()).collect()
}

fn read_f32(bytes: &[u8]) -> Vec<f64> {
    bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub generator: String,
    pub seed: u64,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub class_count: usize,
    pub label_offset: usize,
    pub label_dtype: String,
    pub data_file: String,
}

/// Writes `<stem>.json` and `<stem>.bin` into `dir`; returns the manifest path.
pub fn save_dataset(ds: &LabeledDataset, dir: &Path, stem: &str) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let data_file = format!("{stem}.bin");
    let mut bytes = f32_bytes(ds.samples().iter());
    let label_offset = bytes.len();
    for &y in ds.labels() {
        bytes.extend((y as i32).to_le_bytes());
    }
    let bin_path = dir.join(&data_file);
    fs::write(&bin_path, bytes).map_err(io_err(&bin_path))?;
    let manifest = DatasetManifest {
        generator: ds.meta().generator.clone(),
        seed: ds.meta().seed,
        shape: ds.samples().shape().to_vec(),
        dtype: DTYPE_F32LE.into(),
        class_count: ds.class_count(),
        label_offset,
        label_dtype: DTYPE_I32LE.into(),
        data_file,
    };
    let path = dir.join(format!("{stem}.json"));
    write_json(&path, &manifest)?;
    Ok(path)
}

pub fn load_dataset(manifest_path: &Path) -> Result<LabeledDataset> {
    let m: DatasetManifest = read_json(manifest_path)?;
    if m.dtype != DTYPE_F32LE || m.label_dtype != DTYPE_I32LE {
        return Err(format_err(manifest_path, "unsupported dtype"));
    }
    let dir = manifest_path.parent().unwrap_or(Path::new("."));
    let bin_path = dir.join(&m.data_file);
    let bytes = fs::read(&bin_path).map_err(io_err(&bin_path))?;
    let n_values: usize = m.shape.iter().product();
    let n = m.shape.first().copied().unwrap_or(0);
    if m.label_offset != 4 * n_values || bytes.len() != m.label_offset + 4 * n {
        return Err(format_err(&bin_path, "size does not match manifest"));
    }
    let samples = ArrayD::from_shape_vec(IxDyn(&m.shape), read_f32(&bytes[..m.label_offset]))
        .map_err(|e| format_err(&bin_path, e.to_string()))?;
    let mut labels = Vec::with_capacity(n);
    for c in bytes[m.label_offset..].chunks_exact(4) {
        let y = i32::from_le_bytes([c[0], c[1], c[2], c[3]]);
        if y < 0 {
            return Err(format_err(&bin_path, "negative label"));
        }
        labels.push(y as usize);
    }
    LabeledDataset::new(
        samples,
        labels,
        m.class_count,
        DatasetMeta {
            generator: m.generator,
            seed: m.seed,
        },
    )
}

/// One parameter array inside a checkpoint blob; offsets count `f32` values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub kind: String,
    pub architecture: String,
    pub seed: u64,
    pub input_shape: Vec<usize>,
    pub dtype: String,
    pub blob_file: String,
    pub params: Vec<ParamEntry>,
    /// Model-specific settings (class count, noise schedule, ...).
    pub extra: serde_json::Value,
}

/// Named parameters as they are held in memory.
pub type NamedParams = Vec<(String, ArrayD<f64>)>;

/// Rounds parameters through `f32` so that a saved checkpoint reloads to the
/// exact in-memory values.
pub fn round_to_f32(params: &mut NamedParams) {
    for (_, p) in params.iter_mut() {
        p.mapv_inplace(|v| v as f32 as f64);
    }
}

pub fn save_checkpoint(
    path: &Path,
    kind: &str,
    architecture: &str,
    seed: u64,
    input_shape: &[usize],
    params: &NamedParams,
    extra: serde_json::Value,
) -> Result<()> {
    let dir = path.parent().unwrap_or(Path::new("."));
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let stem = path
        .file_stem()
        .and_then(|s| s.to_str())
        .ok_or_else(|| format_err(path, "checkpoint path needs a file name"))?;
    let blob_file = format!("{stem}.bin");
    let mut entries = Vec::with_capacity(params.len());
    let mut bytes = Vec::new();
    let mut offset = 0;
    for (name, p) in params {
        entries.push(ParamEntry {
            name: name.clone(),
            shape: p.shape().to_vec(),
            offset,
        });
        offset += p.len();
        bytes.extend(f32_bytes(p.as_standard_layout().iter()));
    }
    let blob_path = dir.join(&blob_file);
    fs::write(&blob_path, bytes).map_err(io_err(&blob_path))?;
    let manifest = CheckpointManifest {
        kind: kind.into(),
        architecture: architecture.into(),
        seed,
        input_shape: input_shape.to_vec(),
        dtype: DTYPE_F32LE.into(),
        blob_file,
        params: entries,
        extra,
    };
    write_json(path, &manifest)
}

pub fn load_checkpoint(path: &Path, expected_kind: &str) -> Result<(CheckpointManifest, NamedParams)> {
    let m: CheckpointManifest = read_json(path)?;
    if m.kind != expected_kind {
        return Err(format_err(path, format!("expected a {expected_kind} checkpoint, found {}", m.kind)));
    }
    if m.dtype != DTYPE_F32LE {
        return Err(format_err(path, "unsupported dtype"));
    }
    let dir = path.parent().unwrap_or(Path::new("."));
    let blob_path = dir.join(&m.blob_file);
    let values = read_f32(&fs::read(&blob_path).map_err(io_err(&blob_path))?);
    let mut params = Vec::with_capacity(m.params.len());
    for e in &m.params {
        let len: usize = e.shape.iter().product();
        let slice = values
            .get(e.offset..e.offset + len)
            .ok_or_else(|| format_err(&blob_path, format!("blob too short for {}", e.name)))?;
        let arr = ArrayD::from_shape_vec(IxDyn(&e.shape), slice.to_vec())
            .map_err(|err| format_err(&blob_path, err.to_string()))?;
        params.push((e.name.clone(), arr));
    }
    Ok((m, params))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::make_shape_images;

    #[test]
    fn dataset_layout_is_samples_then_labels() {
        let dir = tempfile::tempdir().unwrap();
        let ds = make_shape_images(2, 12, 3).unwrap();
        let path = save_dataset(&ds, dir.path(), "train").unwrap();
        let m: DatasetManifest = read_json(&path).unwrap();
        assert_eq!(m.label_offset, 6 * 144 * 4);
        let bytes = fs::read(dir.path().join("train.bin")).unwrap();
        assert_eq!(bytes.len(), m.label_offset + 6 * 4);
        let first = f32::from_le_bytes(bytes[0..4].try_into().unwrap());
        assert_eq!(first as f64, *ds.samples().iter().next().unwrap() as f32 as f64);
        assert_eq!(load_dataset(&path).unwrap(), ds);
    }

    #[test]
    fn truncated_blob_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let ds = make_shape_images(1, 12, 0).unwrap();
        let path = save_dataset(&ds, dir.path(), "d").unwrap();
        let bin = dir.path().join("d.bin");
        let mut bytes = fs::read(&bin).unwrap();
        bytes.pop();
        fs::write(&bin, bytes).unwrap();
        assert!(matches!(load_dataset(&path), Err(Error::Format { .. })));
    }
}
