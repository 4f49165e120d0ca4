//! Checkpoint container.
//!
//! ```json
//! {
//!   "format_version": 1,
//!   "meta": { ... },
//!   "params": [ { "name": "embed.proj.weight", "shape": [400, 80], "values": [ ... ] } ]
//! }
//! ```
//!
//! Values are row-major. `meta` is free-form (the model stores its config
//! there). Parameter order is the registration order of the store.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ParamStore, Tensor};
use crate::error::{Error, Result};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ParamRecord {
    name: String,
    shape: Vec<usize>,
    values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    #[serde(default)]
    pub meta: serde_json::Value,
    params: Vec<ParamRecord>,
}

impl Checkpoint {
    pub fn from_store(store: &ParamStore, meta: serde_json::Value) -> Self {
        Checkpoint {
            format_version: CHECKPOINT_VERSION,
            meta,
            params: store
                .iter()
                .map(|(name, t)| ParamRecord {
                    name: name.to_string(),
                    shape: t.shape().to_vec(),
                    values: t.data().to_vec(),
                })
                .collect(),
        }
    }

    pub fn to_store(&self) -> Result<ParamStore> {
        let mut store = ParamStore::new();
        for p in &self.params {
            let t = Tensor::new(p.shape.clone(), p.values.clone())
                .map_err(|e| Error::Checkpoint(format!("parameter {}: {e}", p.name)))?;
            store
                .insert(p.name.clone(), t)
                .map_err(|e| Error::Checkpoint(e.to_string()))?;
        }
        Ok(store)
    }
}

pub fn save_checkpoint(path: &Path, store: &ParamStore, meta: serde_json::Value) -> Result<()> {
    let ck = Checkpoint::from_store(store, meta);
    let text = serde_json::to_string(&ck).map_err(|e| Error::json(path, e))?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let ck: Checkpoint = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
    if ck.format_version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported format_version {} (expected {CHECKPOINT_VERSION})",
            ck.format_version
        )));
    }
    Ok(ck)
}
