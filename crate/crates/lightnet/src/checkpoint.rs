//! Checkpointing: `<prefix>.manifest.json` describing the config, optimizer
//! hyperparameters, and tensor layout, plus `<prefix>.bin` holding every
//! tensor as raw little-endian f64 in manifest order. Loading reproduces
//! forward outputs bit-identically.

use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::tensor::Tensor;
use crate::train::{Adam, AdamConfig};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset_bytes: usize,
    num_elements: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    config: ModelConfig,
    optimizer: Option<AdamConfig>,
    step: usize,
    tensors: Vec<TensorEntry>,
}

fn manifest_path(prefix: &Path) -> PathBuf {
    let mut p = prefix.as_os_str().to_owned();
    p.push(".manifest.json");
    PathBuf::from(p)
}

fn blob_path(prefix: &Path) -> PathBuf {
    let mut p = prefix.as_os_str().to_owned();
    p.push(".bin");
    PathBuf::from(p)
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io { path: path.display().to_string(), source }
}

/// Write model parameters (and optimizer moments, when given) to
/// `<prefix>.manifest.json` + `<prefix>.bin`.
pub fn save(model: &Model, adam: Option<&Adam>, prefix: &Path) -> Result<()> {
    let mut entries = Vec::new();
    let mut blob: Vec<u8> = Vec::new();
    let mut push = |name: String, t: &Tensor<f64>, blob: &mut Vec<u8>| {
        entries.push(TensorEntry {
            name,
            shape: t.shape().to_vec(),
            offset_bytes: blob.len(),
            num_elements: t.numel(),
        });
        for &x in t.data() {
            blob.extend_from_slice(&x.to_le_bytes());
        }
    };
    let names = model.param_names();
    for (name, t) in names.iter().zip(model.param_tensors()) {
        push(name.clone(), t, &mut blob);
    }
    if let Some(adam) = adam {
        for (name, t) in names.iter().zip(&adam.m) {
            push(format!("adam.m.{name}"), t, &mut blob);
        }
        for (name, t) in names.iter().zip(&adam.v) {
            push(format!("adam.v.{name}"), t, &mut blob);
        }
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        config: model.cfg.clone(),
        optimizer: adam.map(|a| a.cfg.clone()),
        step: adam.map(|a| a.step).unwrap_or(0),
        tensors: entries,
    };
    let mpath = manifest_path(prefix);
    let json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::Checkpoint(format!("manifest serialization failed: {e}")))?;
    let mut f = std::fs::File::create(&mpath).map_err(io_err(&mpath))?;
    f.write_all(json.as_bytes()).map_err(io_err(&mpath))?;
    let bpath = blob_path(prefix);
    std::fs::write(&bpath, &blob).map_err(io_err(&bpath))?;
    Ok(())
}

fn read_tensor(blob: &[u8], entry: &TensorEntry, bpath: &Path) -> Result<Tensor<f64>> {
    let want = entry.num_elements * 8;
    let end = entry.offset_bytes + want;
    if end > blob.len() {
        return Err(Error::Checkpoint(format!(
            "blob {} is {} bytes short: tensor `{}` wants bytes {}..{end}, file has {}",
            bpath.display(),
            end - blob.len(),
            entry.name,
            entry.offset_bytes,
            blob.len()
        )));
    }
    let data: Vec<f64> = blob[entry.offset_bytes..end]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Tensor::from_vec(&entry.shape, data).map_err(|_| {
        Error::Checkpoint(format!(
            "tensor `{}` manifest shape {:?} disagrees with its {} elements",
            entry.name, entry.shape, entry.num_elements
        ))
    })
}

/// Load a checkpoint. When `expected` is given, the stored config must match
/// it field for field.
pub fn load(prefix: &Path, expected: Option<&ModelConfig>) -> Result<(Model, Option<Adam>)> {
    let mpath = manifest_path(prefix);
    let json = std::fs::read_to_string(&mpath).map_err(io_err(&mpath))?;
    let manifest: Manifest = serde_json::from_str(&json)
        .map_err(|e| Error::Checkpoint(format!("corrupt manifest {}: {e}", mpath.display())))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported format version {} (this build reads {FORMAT_VERSION})",
            manifest.format_version
        )));
    }
    if let Some(expected) = expected {
        manifest.config.check_matches(expected)?;
    }
    let bpath = blob_path(prefix);
    let blob = std::fs::read(&bpath).map_err(io_err(&bpath))?;

    let mut model = Model::build(manifest.config.clone())?;
    let names = model.param_names();
    let mut by_name: std::collections::HashMap<&str, &TensorEntry> =
        manifest.tensors.iter().map(|e| (e.name.as_str(), e)).collect();
    {
        let mut tensors = model.param_tensors_mut();
        for (name, slot) in names.iter().zip(tensors.iter_mut()) {
            let entry = by_name.remove(name.as_str()).ok_or_else(|| {
                Error::Checkpoint(format!("manifest is missing tensor `{name}`"))
            })?;
            let t = read_tensor(&blob, entry, &bpath)?;
            if t.shape() != slot.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor `{name}` has shape {:?}, model wants {:?}",
                    t.shape(),
                    slot.shape()
                )));
            }
            **slot = t;
        }
    }

    let adam = match manifest.optimizer {
        None => None,
        Some(cfg) => {
            let mut adam = Adam::new(&model, cfg);
            adam.step = manifest.step;
            for (name, slot) in names.iter().zip(adam.m.iter_mut()) {
                let key = format!("adam.m.{name}");
                let entry = by_name.remove(key.as_str()).ok_or_else(|| {
                    Error::Checkpoint(format!("manifest is missing tensor `{key}`"))
                })?;
                *slot = read_tensor(&blob, entry, &bpath)?;
            }
            for (name, slot) in names.iter().zip(adam.v.iter_mut()) {
                let key = format!("adam.v.{name}");
                let entry = by_name.remove(key.as_str()).ok_or_else(|| {
                    Error::Checkpoint(format!("manifest is missing tensor `{key}`"))
                })?;
                *slot = read_tensor(&blob, entry, &bpath)?;
            }
            Some(adam)
        }
    };
    Ok((model, adam))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::Tape;

    fn config() -> ModelConfig {
        ModelConfig {
            vocab: 17,
            continuous: false,
            out_dim: 17,
            d: 8,
            layers: 1,
            heads: 2,
            tpe_modes: 2,
            grid: vec![5],
            causal: true,
            lrpe: false,
            tpe: true,
            seed: 3,
        }
    }

    fn forward_bits(model: &Model, tokens: &[usize]) -> Vec<u64> {
        let mut tape = Tape::new();
        let mut vars = Vec::new();
        let mv = model.insert(&mut tape, &mut vars);
        let out = model.forward_tokens(&mut tape, &mv, tokens).unwrap();
        tape.value(out).data().iter().map(|x| x.to_bits()).collect()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let prefix = dir.path().join("ckpt");
        let mut model = Model::build(config()).unwrap();
        // Perturb away from the seeded init so the blob actually matters.
        model.head_b = Tensor::from_fn(&[17], |i| (i as f64) * 0.125 - 1.0);
        let adam = Adam::new(&model, AdamConfig::default());
        save(&model, Some(&adam), &prefix).unwrap();
        let (loaded, loaded_adam) = load(&prefix, Some(&config())).unwrap();
        assert_eq!(forward_bits(&model, &[1, 2, 3, 4, 5]), forward_bits(&loaded, &[1, 2, 3, 4, 5]));
        assert_eq!(loaded_adam.unwrap().step, 0);
    }

    #[test]
    fn truncated_blob_names_missing_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let prefix = dir.path().join("ckpt");
        let model = Model::build(config()).unwrap();
        save(&model, None, &prefix).unwrap();
        let bpath = prefix.with_extension("bin");
        let bytes = std::fs::read(&bpath).unwrap();
        std::fs::write(&bpath, &bytes[..bytes.len() - 16]).unwrap();
        let err = load(&prefix, None).unwrap_err().to_string();
        assert!(err.contains("16 bytes short"), "{err}");
    }

    #[test]
    fn config_mismatch_is_reported_by_field() {
        let dir = tempfile::tempdir().unwrap();
        let prefix = dir.path().join("ckpt");
        let model = Model::build(config()).unwrap();
        save(&model, None, &prefix).unwrap();
        let mut other = config();
        other.d = 16;
        let err = load(&prefix, Some(&other)).unwrap_err().to_string();
        assert!(err.contains('d') && err.contains("16"), "{err}");
    }

    #[test]
    fn corrupt_manifest_is_a_clean_error() {
        let dir = tempfile::tempdir().unwrap();
        let prefix = dir.path().join("ckpt");
        let model = Model::build(config()).unwrap();
        save(&model, None, &prefix).unwrap();
        std::fs::write(prefix.with_extension("manifest.json"), "{not json").unwrap();
        let err = load(&prefix, None).unwrap_err().to_string();
        assert!(err.contains("corrupt manifest"), "{err}");
    }

    #[test]
    fn version_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let prefix = dir.path().join("ckpt");
        let model = Model::build(config()).unwrap();
        save(&model, None, &prefix).unwrap();
        let mpath = prefix.with_extension("manifest.json");
        let json = std::fs::read_to_string(&mpath).unwrap();
        std::fs::write(&mpath, json.replace("\"format_version\": 1", "\"format_version\": 9")).unwrap();
        let err = load(&prefix, None).unwrap_err().to_string();
        assert!(err.contains("format version 9"), "{err}");
    }
}
