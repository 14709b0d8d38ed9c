//! JSON checkpoints with base64 little-endian `f64` buffers per named parameter.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine as _;
use serde::{Deserialize, Serialize};

use super::{Matrix, NumericError};

pub const CHECKPOINT_FORMAT: &str = "themewise-checkpoint/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncodedMatrix {
    pub rows: usize,
    pub cols: usize,
    /// Base64 of `rows * cols` little-endian `f64` values, row-major.
    pub data: String,
}

pub fn encode_matrix(m: &Matrix) -> EncodedMatrix {
    let mut bytes = Vec::with_capacity(m.data().len() * 8);
    for v in m.data() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    EncodedMatrix {
        rows: m.rows(),
        cols: m.cols(),
        data: B64.encode(bytes),
    }
}

pub fn decode_matrix(e: &EncodedMatrix) -> Result<Matrix, NumericError> {
    let bytes = B64
        .decode(&e.data)
        .map_err(|err| NumericError::Checkpoint(format!("bad base64: {err}")))?;
    if bytes.len() % 8 != 0 {
        return Err(NumericError::Checkpoint(format!(
            "buffer of {} bytes is not a whole number of f64 values",
            bytes.len()
        )));
    }
    let values = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect();
    Matrix::new(e.rows, e.cols, values)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub seed: u64,
    /// Echo of the configuration that produced the parameters.
    pub config: serde_json::Value,
    pub params: BTreeMap<String, EncodedMatrix>,
    #[serde(default)]
    pub metadata: BTreeMap<String, serde_json::Value>,
}

impl Checkpoint {
    pub fn new(seed: u64, config: serde_json::Value) -> Checkpoint {
        Checkpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            seed,
            config,
            params: BTreeMap::new(),
            metadata: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, m: &Matrix) {
        self.params.insert(name.into(), encode_matrix(m));
    }

    pub fn get(&self, name: &str) -> Result<Matrix, NumericError> {
        let e = self
            .params
            .get(name)
            .ok_or_else(|| NumericError::Checkpoint(format!("missing parameter `{name}`")))?;
        decode_matrix(e)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("checkpoint serializes")
    }

    pub fn from_json(s: &str) -> Result<Checkpoint, NumericError> {
        let c: Checkpoint =
            serde_json::from_str(s).map_err(|e| NumericError::Checkpoint(e.to_string()))?;
        if c.format != CHECKPOINT_FORMAT {
            return Err(NumericError::Checkpoint(format!(
                "unsupported format `{}` (expected `{CHECKPOINT_FORMAT}`)",
                c.format
            )));
        }
        Ok(c)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> std::io::Result<()> {
        let path = path.as_ref();
        let tmp = path.with_extension("json.tmp");
        fs::write(&tmp, self.to_json())?;
        fs::rename(tmp, path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Checkpoint, NumericError> {
        let path = path.as_ref();
        let s = fs::read_to_string(path)
            .map_err(|e| NumericError::Checkpoint(format!("{}: {e}", path.display())))?;
        Checkpoint::from_json(&s)
    }
}
