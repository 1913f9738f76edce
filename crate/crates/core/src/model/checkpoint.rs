//! JSON checkpoints.
//!
//! ```json
//! {"format": "dlgmoe-checkpoint", "version": 1,
//!  "config": { ... },
//!  "params": [{"name": "frontend.proj.w", "shape": [16, 16], "data": [...]}, ...]}
//! ```
//!
//! Parameters are listed in construction order. Floats round-trip exactly,
//! so saving the same model twice yields identical bytes.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{contract, Result};
use crate::tensor::Tensor;

use super::{DlgMoeConfig, DlgMoeModel};

pub const FORMAT: &str = "dlgmoe-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct NamedTensor {
    name: String,
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    format: String,
    version: u32,
    config: DlgMoeConfig,
    params: Vec<NamedTensor>,
}

pub fn to_json(model: &DlgMoeModel) -> Result<String> {
    let params = model
        .store
        .ids()
        .map(|id| {
            let t = model.store.get(id);
            NamedTensor {
                name: model.store.name(id).to_string(),
                shape: t.shape().to_vec(),
                data: t.data().to_vec(),
            }
        })
        .collect();
    let ck = Checkpoint {
        format: FORMAT.into(),
        version: VERSION,
        config: model.config.clone(),
        params,
    };
    Ok(serde_json::to_string(&ck)?)
}

pub fn from_json(text: &str) -> Result<DlgMoeModel> {
    let ck: Checkpoint = serde_json::from_str(text)?;
    if ck.format != FORMAT || ck.version != VERSION {
        return Err(contract(format!(
            "unsupported checkpoint {} v{}",
            ck.format, ck.version
        )));
    }
    let mut model = DlgMoeModel::new(ck.config)?;
    if ck.params.len() != model.store.len() {
        return Err(contract(format!(
            "checkpoint has {} tensors, model has {}",
            ck.params.len(),
            model.store.len()
        )));
    }
    for p in ck.params {
        let id = model
            .store
            .find(&p.name)
            .ok_or_else(|| contract(format!("unknown parameter {}", p.name)))?;
        model.store.set(id, Tensor::new(p.shape, p.data)?)?;
    }
    Ok(model)
}

pub fn save(model: &DlgMoeModel, path: &Path) -> Result<()> {
    std::fs::write(path, to_json(model)?)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<DlgMoeModel> {
    from_json(&std::fs::read_to_string(path)?)
}

/// SHA-256 over parameter names, shapes and little-endian values.
pub fn param_checksum(model: &DlgMoeModel) -> String {
    let mut h = Sha256::new();
    for id in model.store.ids() {
        let t = model.store.get(id);
        h.update(model.store.name(id).as_bytes());
        for &s in t.shape() {
            h.update((s as u64).to_le_bytes());
        }
        for v in t.data() {
            h.update(v.to_le_bytes());
        }
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_exact() {
        let model = DlgMoeModel::new(DlgMoeConfig::default()).unwrap();
        let text = to_json(&model).unwrap();
        let back = from_json(&text).unwrap();
        assert_eq!(param_checksum(&model), param_checksum(&back));
        assert_eq!(to_json(&back).unwrap(), text);
    }

    #[test]
    fn rejects_foreign_format() {
        let model = DlgMoeModel::new(DlgMoeConfig::default()).unwrap();
        let text = to_json(&model).unwrap().replace(FORMAT, "other");
        assert!(from_json(&text).is_err());
    }
}
