//! Self-describing binary checkpoints: a JSON header (model config + input
//! spec) followed by named parameter blobs as little-endian f32.
//!
//! Layout:
//!
//! ```text
//! magic  "ADTT"            4 bytes
//! version u32 LE           currently 1
//! header length u32 LE, then header JSON
//! blob count u32 LE
//! per blob: name length u16 LE, name, ndim u8, dims u32 LE..., data f32 LE
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::InputSpec;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::nn::ParamSet;
use crate::tensor::Tensor;
use crate::train::{build_state, TrainState};

const MAGIC: &[u8; 4] = b"ADTT";
const VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    pub input: InputSpec,
}

pub fn save_checkpoint(
    path: &Path,
    model: &ModelConfig,
    input: &InputSpec,
    params: &ParamSet,
) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e: std::io::Error| Error::io(path, e);

    w.write_all(MAGIC).map_err(io)?;
    w.write_all(&VERSION.to_le_bytes()).map_err(io)?;
    let header = serde_json::json!({ "model": model, "input": input });
    let header = serde_json::to_vec(&header)
        .map_err(|e| Error::Checkpoint(format!("header encode: {e}")))?;
    w.write_all(&(header.len() as u32).to_le_bytes()).map_err(io)?;
    w.write_all(&header).map_err(io)?;

    w.write_all(&(params.len() as u32).to_le_bytes()).map_err(io)?;
    for p in params.iter() {
        let name = p.name.as_bytes();
        w.write_all(&(name.len() as u16).to_le_bytes()).map_err(io)?;
        w.write_all(name).map_err(io)?;
        let shape = p.value.shape();
        w.write_all(&[shape.len() as u8]).map_err(io)?;
        for &d in shape {
            w.write_all(&(d as u32).to_le_bytes()).map_err(io)?;
        }
        let mut bytes = Vec::with_capacity(p.value.numel() * 4);
        for &v in p.value.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&bytes).map_err(io)?;
    }
    w.flush().map_err(io)
}

/// Raw checkpoint contents, before a model is rebuilt around them.
#[derive(Debug)]
pub struct CheckpointFile {
    pub meta: CheckpointMeta,
    pub blobs: Vec<(String, Tensor)>,
}

pub fn read_checkpoint(path: &Path) -> Result<CheckpointFile> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let io = |e: std::io::Error| Error::io(path, e);

    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(io)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint(format!(
            "{}: not a model checkpoint",
            path.display()
        )));
    }
    let version = read_u32(&mut r).map_err(io)?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let header_len = read_u32(&mut r).map_err(io)? as usize;
    let mut header = vec![0u8; header_len];
    r.read_exact(&mut header).map_err(io)?;
    let meta: CheckpointMeta = serde_json::from_slice(&header)
        .map_err(|e| Error::Checkpoint(format!("header decode: {e}")))?;

    let count = read_u32(&mut r).map_err(io)? as usize;
    let mut blobs = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = read_u16(&mut r).map_err(io)? as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name).map_err(io)?;
        let name = String::from_utf8(name)
            .map_err(|e| Error::Checkpoint(format!("blob name not utf-8: {e}")))?;
        let mut ndim = [0u8; 1];
        r.read_exact(&mut ndim).map_err(io)?;
        let mut shape = Vec::with_capacity(ndim[0] as usize);
        for _ in 0..ndim[0] {
            shape.push(read_u32(&mut r).map_err(io)? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut bytes = vec![0u8; numel * 4];
        r.read_exact(&mut bytes).map_err(io)?;
        let data: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        blobs.push((name, Tensor::new(shape, data)?));
    }
    Ok(CheckpointFile { meta, blobs })
}

/// Rebuilds the model described by a checkpoint and fills in every parameter.
/// Missing or unknown blobs are errors.
pub fn restore_state(path: &Path) -> Result<(CheckpointMeta, TrainState)> {
    let file = read_checkpoint(path)?;
    let mut state = build_state(&file.meta.model, &file.meta.input, 0)?;
    if file.blobs.len() != state.params.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint has {} blobs, model has {} parameters",
            file.blobs.len(),
            state.params.len()
        )));
    }
    for (name, value) in file.blobs {
        state.params.set_by_name(&name, value)?;
    }
    Ok((file.meta, state))
}

fn read_u32(r: &mut impl Read) -> std::io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u16(r: &mut impl Read) -> std::io::Result<u16> {
    let mut b = [0u8; 2];
    r.read_exact(&mut b)?;
    Ok(u16::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fusion::FusionConfig;
    use crate::model::TaskKind;

    fn tiny_adatt() -> ModelConfig {
        ModelConfig::Adatt(FusionConfig {
            num_tasks: 2,
            num_levels: 2,
            experts_per_task: vec![2, 1],
            shared_experts: 1,
            input_dim: 5,
            expert_dims: vec![4, 3],
            tower_hidden_dim: 2,
            task_kinds: vec![TaskKind::Classification, TaskKind::Regression],
            ablate_native_fusion: false,
        })
    }

    #[test]
    fn save_load_round_trip_preserves_values_and_names() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let cfg = tiny_adatt();
        let spec = InputSpec::Dense { dim: 5 };
        let state = build_state(&cfg, &spec, 42).unwrap();
        save_checkpoint(&path, &cfg, &spec, &state.params).unwrap();

        let (meta, restored) = restore_state(&path).unwrap();
        assert_eq!(meta.model, cfg);
        assert_eq!(restored.params.len(), state.params.len());
        for (a, b) in state.params.iter().zip(restored.params.iter()) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.value.data(), b.value.data());
        }
    }

    #[test]
    fn checkpoint_naming_scheme_is_stable() {
        let cfg = tiny_adatt();
        let spec = InputSpec::Dense { dim: 5 };
        let state = build_state(&cfg, &spec, 0).unwrap();
        for name in [
            "level1/task0/expert0/weight",
            "level1/task0/expert1/bias",
            "level1/task0/gate",
            "level1/task0/native",
            "level1/shared/expert0/weight",
            "level2/task1/gate",
            "tower0/hidden/weight",
            "tower1/head/bias",
        ] {
            assert!(
                state.params.id_by_name(name).is_some(),
                "missing parameter {name}"
            );
        }
        // single-expert unit: unit native weight is fixed, not a parameter
        assert!(state.params.id_by_name("level1/task1/native").is_none());
    }

    #[test]
    fn truncated_file_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ckpt");
        std::fs::write(&path, b"ADTT\x01\x00\x00\x00").unwrap();
        assert!(read_checkpoint(&path).is_err());
    }

    #[test]
    fn wrong_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("notckpt");
        std::fs::write(&path, b"nope").unwrap();
        let err = read_checkpoint(&path).unwrap_err().to_string();
        assert!(err.contains("not a model checkpoint"), "{err}");
    }
}
