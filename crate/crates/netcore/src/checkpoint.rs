//! Text checkpoint container.
//!
//! A checkpoint is one JSON document:
//!
//! ```text
//! {
//!   "format": "netcore-checkpoint",
//!   "version": 1,
//!   "step": <optimizer steps>,
//!   "meta": { <string key>: <any JSON>, ... },
//!   "entries": [
//!     { "name": "...", "shape": [rows, cols],
//!       "value": [...], "m": [...], "v": [...] },
//!     ...
//!   ]
//! }
//! ```
//!
//! Arrays are column-major. Numbers are written in shortest round-trip form
//! and parsed with full precision, so save/load is bit-exact.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{NetError, Result};
use crate::params::{Entry, ParamStore};
use crate::Mat;

pub const FORMAT: &str = "netcore-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct EntryDoc {
    name: String,
    shape: [usize; 2],
    value: Vec<f64>,
    m: Vec<f64>,
    v: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct Doc {
    format: String,
    version: u32,
    step: u64,
    meta: BTreeMap<String, Value>,
    entries: Vec<EntryDoc>,
}

/// Parameters, optimizer state and free-form metadata (configuration,
/// architecture, normalization statistics).
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ParamStore,
    pub meta: BTreeMap<String, Value>,
}

impl Checkpoint {
    pub fn new(params: ParamStore) -> Self {
        Checkpoint {
            params,
            meta: BTreeMap::new(),
        }
    }

    pub fn to_string(&self) -> Result<String> {
        for e in &self.params.entries {
            if !crate::all_finite(&e.value) || !crate::all_finite(&e.m) || !crate::all_finite(&e.v) {
                return Err(NetError::Checkpoint(format!("entry `{}` is not finite", e.name)));
            }
        }
        let doc = Doc {
            format: FORMAT.to_string(),
            version: VERSION,
            step: self.params.step,
            meta: self.meta.clone(),
            entries: self
                .params
                .entries
                .iter()
                .map(|e| EntryDoc {
                    name: e.name.clone(),
                    shape: [e.value.nrows(), e.value.ncols()],
                    value: e.value.as_slice().to_vec(),
                    m: e.m.as_slice().to_vec(),
                    v: e.v.as_slice().to_vec(),
                })
                .collect(),
        };
        serde_json::to_string(&doc).map_err(|e| NetError::Checkpoint(e.to_string()))
    }

    pub fn from_str(text: &str) -> Result<Self> {
        let doc: Doc = serde_json::from_str(text).map_err(|e| NetError::Checkpoint(e.to_string()))?;
        if doc.format != FORMAT || doc.version != VERSION {
            return Err(NetError::Checkpoint(format!(
                "unsupported container {} v{}",
                doc.format, doc.version
            )));
        }
        let mut entries = Vec::with_capacity(doc.entries.len());
        for e in doc.entries {
            let [r, c] = e.shape;
            let n = r * c;
            if e.value.len() != n || e.m.len() != n || e.v.len() != n {
                return Err(NetError::Checkpoint(format!(
                    "entry `{}` declares {r}x{c} but stores {} values",
                    e.name,
                    e.value.len()
                )));
            }
            entries.push(Entry {
                name: e.name,
                value: Mat::from_vec(r, c, e.value),
                m: Mat::from_vec(r, c, e.m),
                v: Mat::from_vec(r, c, e.v),
            });
        }
        Ok(Checkpoint {
            params: ParamStore::restore_raw(entries, doc.step)?,
            meta: doc.meta,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_string()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_str(&fs::read_to_string(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optim::{optimizer_step, AdamConfig};
    use crate::params::Grads;

    #[test]
    fn round_trip_is_bit_exact() {
        let mut s = ParamStore::new();
        s.add("a", Mat::from_fn(3, 2, |i, j| (i as f64 + 0.1) / (j as f64 + 3.0))).unwrap();
        s.add("b", Mat::from_element(1, 4, std::f64::consts::PI)).unwrap();
        let g = Grads(vec![Mat::from_element(3, 2, 0.3), Mat::from_element(1, 4, -1.0 / 3.0)]);
        optimizer_step(&mut s, &g, &AdamConfig::default()).unwrap();
        let mut ck = Checkpoint::new(s);
        ck.meta.insert("note".into(), Value::from("hello"));
        let text = ck.to_string().unwrap();
        let back = Checkpoint::from_str(&text).unwrap();
        assert_eq!(back, ck);
        for (x, y) in back.params.entries.iter().zip(&ck.params.entries) {
            for (a, b) in x.value.iter().zip(y.value.iter()) {
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }
        assert_eq!(back.params.step(), 1);
    }

    #[test]
    fn rejects_wrong_value_count() {
        let text = r#"{"format":"netcore-checkpoint","version":1,"step":0,"meta":{},
            "entries":[{"name":"x","shape":[2,2],"value":[1,2,3],"m":[0,0,0],"v":[0,0,0]}]}"#;
        assert!(Checkpoint::from_str(text).is_err());
    }
}
