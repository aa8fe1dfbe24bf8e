//! Checkpoint directory: `model.json` plus `params.f64le`, the flat parameter
//! buffer as 64-bit little-endian floats in [`Layout`](super::Layout) order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelParams, NetDims};
use crate::error::{Error, Result};

pub const CHECKPOINT_SCHEMA_VERSION: u32 = 1;
const PARAMS_FILE: &str = "params.f64le";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub schema_version: u32,
    pub dims: NetDims,
    pub num_classes: usize,
    pub seed: u64,
    /// 1 or 2; 0 for an untrained initialization.
    pub stage: usize,
    /// Global step count completed when the checkpoint was written.
    pub step: usize,
    pub param_count: usize,
    pub params_file: String,
    pub tensors: Vec<TensorEntry>,
}

pub fn save_checkpoint(
    dir: &Path,
    params: &ModelParams,
    seed: u64,
    stage: usize,
    step: usize,
) -> Result<CheckpointMeta> {
    fs::create_dir_all(dir)?;
    let dims = *params.dims();
    let meta = CheckpointMeta {
        schema_version: CHECKPOINT_SCHEMA_VERSION,
        dims,
        num_classes: dims.classes,
        seed,
        stage,
        step,
        param_count: params.len(),
        params_file: PARAMS_FILE.to_string(),
        tensors: params
            .layout()
            .named()
            .iter()
            .map(|(name, slot)| TensorEntry {
                name: name.to_string(),
                offset: slot.offset,
                rows: slot.rows,
                cols: slot.cols,
            })
            .collect(),
    };
    let bytes: Vec<u8> = params
        .as_slice()
        .iter()
        .flat_map(|v| v.to_le_bytes())
        .collect();
    fs::write(dir.join(PARAMS_FILE), bytes)?;
    let mut json = serde_json::to_string_pretty(&meta)?;
    json.push('\n');
    fs::write(dir.join("model.json"), json)?;
    Ok(meta)
}

pub fn load_checkpoint(dir: &Path) -> Result<(ModelParams, CheckpointMeta)> {
    let meta_path = dir.join("model.json");
    let meta: CheckpointMeta = serde_json::from_slice(&fs::read(&meta_path)?)?;
    let corrupt = |reason: String| Error::Corrupt {
        path: meta_path.clone(),
        reason,
    };
    if meta.schema_version != CHECKPOINT_SCHEMA_VERSION {
        return Err(corrupt(format!("unsupported schema_version {}", meta.schema_version)));
    }
    let bytes = fs::read(dir.join(&meta.params_file))?;
    if bytes.len() != meta.param_count * 8 {
        return Err(corrupt(format!(
            "params file holds {} bytes, manifest says {} values",
            bytes.len(),
            meta.param_count
        )));
    }
    let data = bytes
        .chunks_exact(8)
        .map(|b| f64::from_le_bytes(b.try_into().expect("8-byte chunk")))
        .collect();
    let params = ModelParams::from_vec(meta.dims, data)?;
    if !params.is_finite() {
        return Err(corrupt("non-finite parameter".into()));
    }
    Ok((params, meta))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let dims = NetDims {
            input: 16,
            hidden1: 8,
            hidden2: 6,
            feature: 4,
            classes: 3,
            disc_hidden: 5,
        };
        let params = ModelParams::init(dims, 99).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let meta = save_checkpoint(dir.path(), &params, 99, 2, 150).unwrap();
        assert_eq!(meta.tensors.len(), 14);
        assert_eq!(meta.tensors[0].name, "extractor.w1");
        let (back, meta2) = load_checkpoint(dir.path()).unwrap();
        assert_eq!(meta, meta2);
        let bits = |p: &ModelParams| p.as_slice().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&back), bits(&params));
    }

    #[test]
    fn short_params_file_is_rejected() {
        let dims = NetDims::standard(4, 2);
        let params = ModelParams::init(dims, 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(dir.path(), &params, 1, 1, 1).unwrap();
        let path = dir.path().join(PARAMS_FILE);
        let mut raw = fs::read(&path).unwrap();
        raw.pop();
        fs::write(&path, raw).unwrap();
        assert!(matches!(load_checkpoint(dir.path()), Err(Error::Corrupt { .. })));
    }
}
