//! Single-file weight checkpoints.
//!
//! Layout (little-endian): magic `PMRC`, u32 version, u32 config length and
//! that many bytes of JSON (the network config, self-describing loading),
//! u32 tensor count, then per tensor: u32 name length, name bytes, u32 rank,
//! u32 dims, f32 data. Keys are hierarchical block names, so alternate
//! implementations can interoperate at the name level.

use crate::tensor::Tensor;
use crate::NnError;
use pmr_core::Scalar;
use std::io::Read;
use std::path::Path;

const MAGIC: &[u8; 4] = b"PMRC";
const VERSION: u32 = 1;

pub fn save<S: Scalar>(
    path: &Path,
    config_json: &str,
    params: &[(String, &Tensor<S>)],
) -> Result<(), NnError> {
    let mut bytes = Vec::new();
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&VERSION.to_le_bytes());
    bytes.extend_from_slice(&(config_json.len() as u32).to_le_bytes());
    bytes.extend_from_slice(config_json.as_bytes());
    bytes.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, tensor) in params {
        bytes.extend_from_slice(&(name.len() as u32).to_le_bytes());
        bytes.extend_from_slice(name.as_bytes());
        bytes.extend_from_slice(&(tensor.shape().len() as u32).to_le_bytes());
        for &d in tensor.shape() {
            bytes.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in tensor.data() {
            bytes.extend_from_slice(&(v.f64() as f32).to_le_bytes());
        }
    }
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)
            .map_err(|e| NnError::Io { path: parent.to_path_buf(), reason: e.to_string() })?;
    }
    std::fs::write(path, bytes)
        .map_err(|e| NnError::Io { path: path.to_path_buf(), reason: e.to_string() })
}

pub fn load<S: Scalar>(path: &Path) -> Result<(String, Vec<(String, Tensor<S>)>), NnError> {
    let err = |reason: String| NnError::Io { path: path.to_path_buf(), reason };
    let mut file = std::fs::File::open(path).map_err(|e| err(e.to_string()))?;
    let mut bytes = Vec::new();
    file.read_to_end(&mut bytes).map_err(|e| err(e.to_string()))?;
    let mut pos = 0usize;
    let take = |pos: &mut usize, n: usize| -> Result<&[u8], NnError> {
        if *pos + n > bytes.len() {
            return Err(NnError::Checkpoint("truncated checkpoint".into()));
        }
        let s = &bytes[*pos..*pos + n];
        *pos += n;
        Ok(s)
    };
    let read_u32 = |pos: &mut usize| -> Result<u32, NnError> {
        Ok(u32::from_le_bytes(take(pos, 4)?.try_into().unwrap()))
    };
    if take(&mut pos, 4)? != MAGIC {
        return Err(NnError::Checkpoint("bad magic".into()));
    }
    let version = read_u32(&mut pos)?;
    if version != VERSION {
        return Err(NnError::Checkpoint(format!("unsupported version {version}")));
    }
    let cfg_len = read_u32(&mut pos)? as usize;
    let cfg = String::from_utf8(take(&mut pos, cfg_len)?.to_vec())
        .map_err(|_| NnError::Checkpoint("config is not utf-8".into()))?;
    let count = read_u32(&mut pos)? as usize;
    let mut params = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = read_u32(&mut pos)? as usize;
        let name = String::from_utf8(take(&mut pos, name_len)?.to_vec())
            .map_err(|_| NnError::Checkpoint("name is not utf-8".into()))?;
        let rank = read_u32(&mut pos)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u32(&mut pos)? as usize);
        }
        let numel: usize = shape.iter().product();
        let raw = take(&mut pos, numel * 4)?;
        let data = (0..numel)
            .map(|i| S::of(f32::from_le_bytes(raw[i * 4..i * 4 + 4].try_into().unwrap()) as f64))
            .collect();
        params.push((name, Tensor::from_vec(&shape, data)));
    }
    Ok((cfg, params))
}

/// Copy loaded tensors into a freshly constructed network by name, requiring
/// an exact one-to-one match.
pub fn assign<S: Scalar>(
    targets: Vec<(String, &mut Tensor<S>)>,
    loaded: Vec<(String, Tensor<S>)>,
) -> Result<(), NnError> {
    let mut by_name: std::collections::BTreeMap<String, Tensor<S>> = loaded.into_iter().collect();
    let expected = targets.len();
    for (name, target) in targets {
        let source = by_name
            .remove(&name)
            .ok_or_else(|| NnError::Checkpoint(format!("missing tensor '{name}'")))?;
        if source.shape() != target.shape() {
            return Err(NnError::Checkpoint(format!(
                "tensor '{name}' has shape {:?}, expected {:?}",
                source.shape(),
                target.shape()
            )));
        }
        *target = source;
    }
    if !by_name.is_empty() {
        return Err(NnError::Checkpoint(format!(
            "checkpoint carries {} extra tensors beyond the {expected} expected",
            by_name.len()
        )));
    }
    Ok(())
}
