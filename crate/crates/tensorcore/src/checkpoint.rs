use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::adam::{AdamState, PlateauTracker};
use crate::params::Params;
use crate::tensor::Tensor;
use crate::{Result, TensorError};

/// Reserved name for the scalar optimizer state (step counter, learning
/// rate, plateau tracker) packed as a small tensor.
const ADAM_META: &str = "__adam.meta";
const ADAM_META_LEN: usize = 9;

#[derive(Serialize, Deserialize)]
struct IndexEntry {
    shape: Vec<usize>,
    byte_offset: u64,
    byte_len: u64,
    dtype: String,
}

/// Model checkpoint container.
///
/// Layout: a JSON index `{name -> {shape, byte_offset, byte_len, dtype}}`
/// terminated by a newline and a single 0 byte, followed by the raw
/// little-endian f64 arrays. Offsets are relative to the first byte after
/// the 0 terminator. Adam moments ride along under `<param>.adam.m` /
/// `<param>.adam.v`.
pub fn save_checkpoint(path: &Path, params: &Params, adam: Option<&AdamState>) -> Result<()> {
    let mut entries: BTreeMap<String, &Tensor> = BTreeMap::new();
    for (name, tensor) in params.iter() {
        tensor.ensure_finite(name)?;
        entries.insert(name.to_string(), tensor);
    }
    let meta;
    if let Some(state) = adam {
        for (name, tensor) in &state.m {
            if tensor.len() == params.get(name)?.len() {
                entries.insert(format!("{}.adam.m", name), tensor);
            }
        }
        for (name, tensor) in &state.v {
            if tensor.len() == params.get(name)?.len() {
                entries.insert(format!("{}.adam.v", name), tensor);
            }
        }
        meta = Tensor::from_vec(
            [ADAM_META_LEN],
            vec![
                state.step as f64,
                state.lr,
                state.beta1,
                state.beta2,
                state.eps,
                state.plateau.best_loss,
                state.plateau.stagnant_epochs as f64,
                state.plateau.patience as f64,
                state.plateau.factor,
            ],
        )?;
        entries.insert(ADAM_META.to_string(), &meta);
    }

    let mut index: BTreeMap<String, IndexEntry> = BTreeMap::new();
    let mut offset = 0u64;
    for (name, tensor) in &entries {
        let byte_len = (tensor.len() * 8) as u64;
        index.insert(
            name.clone(),
            IndexEntry {
                shape: tensor.shape().to_vec(),
                byte_offset: offset,
                byte_len,
                dtype: "f64".to_string(),
            },
        );
        offset += byte_len;
    }

    let header = serde_json::to_string(&index)
        .map_err(|e| TensorError::Format(format!("index encode: {}", e)))?;
    let mut out = Vec::with_capacity(header.len() + 2 + offset as usize);
    out.extend_from_slice(header.as_bytes());
    out.push(b'\n');
    out.push(0u8);
    for tensor in entries.values() {
        for v in tensor.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut file = fs::File::create(path)?;
    file.write_all(&out)?;
    Ok(())
}

pub struct Checkpoint {
    pub params: Params,
    pub adam: Option<AdamState>,
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path)?;
    let nul = bytes
        .iter()
        .position(|&b| b == 0)
        .ok_or_else(|| TensorError::Format("missing index terminator".into()))?;
    if nul == 0 || bytes[nul - 1] != b'\n' {
        return Err(TensorError::Format(
            "index must end with a newline before the 0 byte".into(),
        ));
    }
    let index: BTreeMap<String, IndexEntry> = serde_json::from_slice(&bytes[..nul - 1])
        .map_err(|e| TensorError::Format(format!("index decode: {}", e)))?;
    let payload = &bytes[nul + 1..];

    let mut tensors: BTreeMap<String, Tensor> = BTreeMap::new();
    for (name, entry) in &index {
        if entry.dtype != "f64" {
            return Err(TensorError::Format(format!(
                "tensor '{}' has unsupported dtype '{}'",
                name, entry.dtype
            )));
        }
        let count: usize = entry.shape.iter().product();
        if entry.byte_len as usize != count * 8 {
            return Err(TensorError::Format(format!(
                "tensor '{}' byte_len {} does not match shape {:?}",
                name, entry.byte_len, entry.shape
            )));
        }
        let start = entry.byte_offset as usize;
        let end = start + entry.byte_len as usize;
        if end > payload.len() {
            return Err(TensorError::Format(format!(
                "tensor '{}' extends past end of payload",
                name
            )));
        }
        let data: Vec<f64> = payload[start..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        tensors.insert(name.clone(), Tensor::from_vec(entry.shape.clone(), data)?);
    }

    let meta = tensors.remove(ADAM_META);
    let mut params = Params::new();
    let mut m: BTreeMap<String, Tensor> = BTreeMap::new();
    let mut v: BTreeMap<String, Tensor> = BTreeMap::new();
    for (name, tensor) in tensors {
        if let Some(base) = name.strip_suffix(".adam.m") {
            m.insert(base.to_string(), tensor);
        } else if let Some(base) = name.strip_suffix(".adam.v") {
            v.insert(base.to_string(), tensor);
        } else {
            params.insert(name, tensor);
        }
    }

    let adam = match meta {
        None => None,
        Some(meta) => {
            if meta.len() != ADAM_META_LEN {
                return Err(TensorError::Format("malformed optimizer metadata".into()));
            }
            let d = meta.data();
            let mut state = AdamState::new(d[1], &m.keys().cloned().collect::<Vec<_>>())?;
            state.step = d[0] as u64;
            state.beta1 = d[2];
            state.beta2 = d[3];
            state.eps = d[4];
            state.plateau = PlateauTracker {
                best_loss: d[5],
                stagnant_epochs: d[6] as u32,
                patience: d[7] as u32,
                factor: d[8],
            };
            state.m = m;
            state.v = v;
            Some(state)
        }
    };

    Ok(Checkpoint { params, adam })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_params_and_optimizer() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");

        let mut params = Params::new();
        params.insert("conv.weight", Tensor::from_vec([2, 1, 1, 1], vec![0.25, -1.5]).unwrap());
        params.insert("conv.bias", Tensor::from_vec([2], vec![0.0, 3.0]).unwrap());

        let mut adam = AdamState::new(5e-4, &["conv.weight".to_string()]).unwrap();
        adam.step = 17;
        adam.m.insert(
            "conv.weight".to_string(),
            Tensor::from_vec([2, 1, 1, 1], vec![0.1, 0.2]).unwrap(),
        );
        adam.v.insert(
            "conv.weight".to_string(),
            Tensor::from_vec([2, 1, 1, 1], vec![0.01, 0.02]).unwrap(),
        );
        adam.plateau.best_loss = 0.75;
        adam.plateau.stagnant_epochs = 2;

        save_checkpoint(&path, &params, Some(&adam)).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.params.get("conv.weight").unwrap(), params.get("conv.weight").unwrap());
        assert_eq!(loaded.params.get("conv.bias").unwrap(), params.get("conv.bias").unwrap());
        let adam2 = loaded.adam.unwrap();
        assert_eq!(adam2.step, 17);
        assert_eq!(adam2.lr, 5e-4);
        assert_eq!(adam2.plateau.best_loss, 0.75);
        assert_eq!(adam2.plateau.stagnant_epochs, 2);
        assert_eq!(adam2.m["conv.weight"].data(), &[0.1, 0.2]);
    }

    #[test]
    fn header_layout_is_json_newline_nul() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let mut params = Params::new();
        params.insert("w", Tensor::scalar(2.0));
        save_checkpoint(&path, &params, None).unwrap();
        let bytes = fs::read(&path).unwrap();
        let nul = bytes.iter().position(|&b| b == 0).unwrap();
        assert_eq!(bytes[nul - 1], b'\n');
        let index: serde_json::Value = serde_json::from_slice(&bytes[..nul - 1]).unwrap();
        assert_eq!(index["w"]["dtype"], "f64");
        assert_eq!(index["w"]["byte_offset"], 0);
        assert_eq!(&bytes[nul + 1..nul + 9], 2.0f64.to_le_bytes());
    }

    #[test]
    fn save_is_byte_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let (p1, p2) = (dir.path().join("a.ckpt"), dir.path().join("b.ckpt"));
        let mut params = Params::new();
        params.insert("b", Tensor::from_vec([3], vec![1.0, 2.0, 3.0]).unwrap());
        params.insert("a", Tensor::scalar(-0.5));
        save_checkpoint(&p1, &params, None).unwrap();
        save_checkpoint(&p2, &params, None).unwrap();
        assert_eq!(fs::read(&p1).unwrap(), fs::read(&p2).unwrap());
    }

    #[test]
    fn non_finite_parameter_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let mut params = Params::new();
        params.insert("w", Tensor::scalar(f64::INFINITY));
        assert!(save_checkpoint(&dir.path().join("m.ckpt"), &params, None).is_err());
    }
}
