//! Single-file checkpoints: `VPCK` magic, `u32` version, `u64` header length,
//! a JSON header, then one VPTF block per tensor in header order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{vptf, DType, Element, Tensor};

pub const MAGIC: &[u8; 4] = b"VPCK";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub dtype: DType,
    pub epoch: usize,
    pub seed: u64,
    pub config: serde_json::Value,
    #[serde(default)]
    pub state: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T: Element> {
    pub epoch: usize,
    pub seed: u64,
    pub config: serde_json::Value,
    /// Free-form bookkeeping (optimizer step, logs, selection state).
    pub state: serde_json::Value,
    pub tensors: Vec<(String, Tensor<T>)>,
}

impl<T: Element> Checkpoint<T> {
    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = CheckpointHeader {
            format_version: VERSION,
            dtype: T::DTYPE,
            epoch: self.epoch,
            seed: self.seed,
            config: self.config.clone(),
            state: self.state.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|(name, t)| TensorEntry {
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, t) in &self.tensors {
            out.extend_from_slice(&vptf::encode(t));
        }
        Ok(out)
    }

    /// Decode a checkpoint; stored tensors must already be of dtype `T`.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (header, mut at) = parse_header(bytes)?;
        if header.dtype != T::DTYPE {
            return Err(Error::Format(format!(
                "checkpoint holds {} tensors, requested {}",
                header.dtype,
                T::DTYPE
            )));
        }
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for entry in &header.tensors {
            let block = &bytes[at..];
            let h = vptf::read_header(block)?;
            if h.dtype != header.dtype || h.shape != entry.shape {
                return Err(Error::Format(format!(
                    "block `{}` is {} {:?}, header says {} {:?}",
                    entry.name, h.dtype, h.shape, header.dtype, entry.shape
                )));
            }
            let (t, used) = vptf::decode::<T>(block)?;
            at += used;
            tensors.push((entry.name.clone(), t));
        }
        if at != bytes.len() {
            return Err(Error::Format(format!("{} trailing bytes in checkpoint", bytes.len() - at)));
        }
        Ok(Checkpoint {
            epoch: header.epoch,
            seed: header.seed,
            config: header.config,
            state: header.state,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::from_bytes(&bytes).map_err(|e| match e {
            Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}

fn parse_header(bytes: &[u8]) -> Result<(CheckpointHeader, usize)> {
    let trunc = || Error::Format("truncated checkpoint header".into());
    if bytes.get(..4).ok_or_else(trunc)? != MAGIC {
        return Err(Error::Format("bad magic, expected VPCK".into()));
    }
    let version = u32::from_le_bytes(bytes.get(4..8).ok_or_else(trunc)?.try_into().unwrap());
    if version != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let len = u64::from_le_bytes(bytes.get(8..16).ok_or_else(trunc)?.try_into().unwrap()) as usize;
    let json = bytes.get(16..16 + len).ok_or_else(trunc)?;
    let header: CheckpointHeader =
        serde_json::from_slice(json).map_err(|e| Error::Format(format!("checkpoint header: {e}")))?;
    if header.format_version != VERSION {
        return Err(Error::Format(format!(
            "header format_version {} does not match container version {VERSION}",
            header.format_version
        )));
    }
    Ok((header, 16 + len))
}

/// Read only the header, e.g. to pick the element type before a full load.
pub fn read_checkpoint_header(path: &Path) -> Result<CheckpointHeader> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(parse_header(&bytes)?.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn sample() -> Checkpoint<f64> {
        Checkpoint {
            epoch: 3,
            seed: 42,
            config: serde_json::json!({"lr": 0.1}),
            state: serde_json::json!({"step": 7}),
            tensors: vec![
                ("a".into(), rng::gaussian_tensor(1, "a", &[3, 4], 1.0)),
                ("b".into(), Tensor::scalar(-0.0)),
            ],
        }
    }

    #[test]
    fn round_trip_is_bit_identical() {
        let ck = sample();
        let back = Checkpoint::<f64>::from_bytes(&ck.to_bytes().unwrap()).unwrap();
        assert_eq!(back.epoch, 3);
        assert_eq!(back.config, ck.config);
        for ((n1, t1), (n2, t2)) in ck.tensors.iter().zip(&back.tensors) {
            assert_eq!(n1, n2);
            assert!(t1.bit_eq(t2));
        }
    }

    #[test]
    fn corruption_is_detected() {
        let bytes = sample().to_bytes().unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'Z';
        assert!(Checkpoint::<f64>::from_bytes(&bad).unwrap_err().to_string().contains("magic"));
        let err = Checkpoint::<f64>::from_bytes(&bytes[..bytes.len() - 2]).unwrap_err();
        assert!(err.to_string().contains("truncated"), "{err}");
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(Checkpoint::<f64>::from_bytes(&bad).unwrap_err().to_string().contains("version"));
        assert!(Checkpoint::<f32>::from_bytes(&bytes).is_err());
    }

    #[test]
    fn header_peek() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.vpck");
        sample().save(&p).unwrap();
        let h = read_checkpoint_header(&p).unwrap();
        assert_eq!(h.dtype, DType::F64);
        assert_eq!(h.tensors.len(), 2);
    }
}
