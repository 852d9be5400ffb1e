//! Binary parameter checkpoints.
//!
//! Layout: one format-version byte, a little-endian `u64` manifest length, the
//! JSON manifest, then the raw little-endian `f64` values of every tensor in
//! manifest order.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use super::{AdamConfig, NnError, Tensor};

pub const FORMAT_VERSION: u8 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerSnapshot {
    pub config: AdamConfig,
    pub step_count: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tensors: Vec<TensorEntry>,
    pub optimizer: Option<OptimizerSnapshot>,
    /// Owner-defined metadata (model kind, data hashes, training config).
    pub meta: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub optimizer: Option<OptimizerSnapshot>,
    pub meta: serde_json::Value,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let manifest = Manifest {
            tensors: self
                .tensors
                .iter()
                .map(|(name, t)| TensorEntry { name: name.clone(), shape: t.shape().to_vec() })
                .collect(),
            optimizer: self.optimizer.clone(),
            meta: self.meta.clone(),
        };
        let json = serde_json::to_vec(&manifest).expect("manifest serializes");
        let payload: usize = self.tensors.iter().map(|(_, t)| t.numel() * 8).sum();
        let mut out = Vec::with_capacity(1 + 8 + json.len() + payload);
        out.push(FORMAT_VERSION);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, t) in &self.tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, NnError> {
        let err = |m: &str| NnError::Checkpoint(m.to_string());
        let (&version, rest) = bytes.split_first().ok_or_else(|| err("empty file"))?;
        if version != FORMAT_VERSION {
            return Err(NnError::Checkpoint(format!("unsupported format version {version}")));
        }
        if rest.len() < 8 {
            return Err(err("truncated header"));
        }
        let (len_bytes, rest) = rest.split_at(8);
        let len = u64::from_le_bytes(len_bytes.try_into().expect("8 bytes")) as usize;
        if rest.len() < len {
            return Err(err("truncated manifest"));
        }
        let (json, mut payload) = rest.split_at(len);
        let manifest: Manifest =
            serde_json::from_slice(json).map_err(|e| NnError::Checkpoint(format!("bad manifest: {e}")))?;
        let mut tensors = Vec::with_capacity(manifest.tensors.len());
        for entry in manifest.tensors {
            let numel: usize = entry.shape.iter().product();
            if payload.len() < numel * 8 {
                return Err(NnError::Checkpoint(format!("tensor {} is truncated", entry.name)));
            }
            let (chunk, tail) = payload.split_at(numel * 8);
            payload = tail;
            let data = chunk
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            tensors.push((entry.name, Tensor::new(entry.shape, data)?));
        }
        if !payload.is_empty() {
            return Err(err("trailing bytes after tensor payload"));
        }
        Ok(Self { optimizer: manifest.optimizer, meta: manifest.meta, tensors })
    }

    pub fn write_to(&self, w: &mut impl Write) -> std::io::Result<()> {
        w.write_all(&self.to_bytes())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self, NnError> {
        let mut buf = Vec::new();
        r.read_to_end(&mut buf).map_err(|e| NnError::Checkpoint(e.to_string()))?;
        Self::from_bytes(&buf)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn round_trips(values in proptest::collection::vec(-1e6f64..1e6, 1..40), split in 1usize..4) {
            let n = values.len();
            let a = Tensor::new(vec![n], values.clone()).unwrap();
            let b = Tensor::from_fn(&[split, 2], |i| values[i % n] * 0.5);
            let ck = Checkpoint {
                optimizer: Some(OptimizerSnapshot { config: AdamConfig::default(), step_count: 7 }),
                meta: serde_json::json!({"kind": "test"}),
                tensors: vec![("a".into(), a), ("b".into(), b)],
            };
            let bytes = ck.to_bytes();
            prop_assert_eq!(bytes[0], FORMAT_VERSION);
            prop_assert_eq!(Checkpoint::from_bytes(&bytes).unwrap(), ck);
        }
    }

    #[test]
    fn rejects_bad_version_and_truncation() {
        let ck = Checkpoint { optimizer: None, meta: serde_json::Value::Null, tensors: vec![("w".into(), Tensor::zeros(&[3]))] };
        let mut bytes = ck.to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        bytes[0] = 9;
        assert!(Checkpoint::from_bytes(&bytes).is_err());
    }
}
