//! Binary model container: magic `XMQ1`, a version byte, a little-endian
//! `u32` header length, a JSON header, then every tensor as `f32` LE.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::autograd::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"XMQ1";
pub const VERSION: u8 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct TensorInfo {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    kind: String,
    config: Value,
    tensors: Vec<TensorInfo>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub kind: String,
    pub config: Value,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn new(kind: impl Into<String>, config: Value) -> Self {
        Self {
            kind: kind.into(),
            config,
            tensors: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, t: &Tensor) {
        self.tensors.push((name.into(), t.clone()));
    }

    pub fn tensor(&self, name: &str) -> Result<Tensor> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t.clone())
            .ok_or_else(|| Error::Validation(format!("checkpoint has no tensor {name:?}")))
    }

    /// Fetches a tensor and checks its shape.
    pub fn tensor_shaped(&self, name: &str, rows: usize, cols: usize) -> Result<Tensor> {
        let t = self.tensor(name)?;
        if t.shape() != (rows, cols) {
            return Err(Error::Validation(format!(
                "tensor {name:?} is {}x{}, expected {rows}x{cols}",
                t.rows, t.cols
            )));
        }
        Ok(t)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            kind: self.kind.clone(),
            config: self.config.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|(name, t)| TensorInfo {
                    name: name.clone(),
                    rows: t.rows,
                    cols: t.cols,
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header)?;
        let mut b = Vec::with_capacity(9 + json.len());
        b.extend_from_slice(MAGIC);
        b.push(VERSION);
        b.extend_from_slice(&(json.len() as u32).to_le_bytes());
        b.extend_from_slice(&json);
        for (_, t) in &self.tensors {
            for v in &t.data {
                b.extend_from_slice(&(*v as f32).to_le_bytes());
            }
        }
        Ok(b)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: String| Error::Validation(format!("checkpoint: {m}"));
        if bytes.len() < 9 || &bytes[..4] != MAGIC {
            return Err(bad("bad magic".into()));
        }
        if bytes[4] != VERSION {
            return Err(bad(format!("unsupported version {}", bytes[4])));
        }
        let hlen = u32::from_le_bytes(bytes[5..9].try_into().expect("four bytes")) as usize;
        let body = bytes.get(9..9 + hlen).ok_or_else(|| bad("truncated header".into()))?;
        let header: Header = serde_json::from_slice(body).map_err(|e| bad(format!("header: {e}")))?;
        let mut pos = 9 + hlen;
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for info in header.tensors {
            let n = info.rows * info.cols;
            let raw = bytes
                .get(pos..pos + 4 * n)
                .ok_or_else(|| bad(format!("truncated tensor {}", info.name)))?;
            pos += 4 * n;
            let data: Vec<f64> = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("four bytes")) as f64)
                .collect();
            if data.iter().any(|v| !v.is_finite()) {
                return Err(bad(format!("tensor {} has non-finite values", info.name)));
            }
            tensors.push((info.name, Tensor::from_vec(info.rows, info.cols, data)));
        }
        if pos != bytes.len() {
            return Err(bad("trailing bytes".into()));
        }
        Ok(Self {
            kind: header.kind,
            config: header.config,
            tensors,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        crate::io::write_bytes(path, &self.to_bytes()?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_bytes(&crate::io::read_bytes(path)?).map_err(|e| match e {
            Error::Validation(m) => Error::format(path, m),
            other => other,
        })
    }

    /// Fails unless the checkpoint holds a model of `kind`.
    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.kind == kind {
            Ok(())
        } else {
            Err(Error::Validation(format!(
                "checkpoint holds a {:?} model, expected {kind:?}",
                self.kind
            )))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_rounds_through_f32() {
        let mut c = Checkpoint::new("demo", serde_json::json!({"k": 3}));
        c.push("w", &Tensor::from_vec(2, 2, vec![0.1, -2.0, 3.5, 1e-3]));
        c.push("b", &Tensor::zeros(1, 3));
        let back = Checkpoint::from_bytes(&c.to_bytes().unwrap()).unwrap();
        assert_eq!(back.kind, "demo");
        assert_eq!(back.tensor("w").unwrap().data[0], 0.1f32 as f64);
        assert_eq!(back.tensor_shaped("b", 1, 3).unwrap(), Tensor::zeros(1, 3));
        assert!(back.tensor_shaped("b", 3, 1).is_err());
        let again = Checkpoint::from_bytes(&back.to_bytes().unwrap()).unwrap();
        assert_eq!(again, back);
    }

    #[test]
    fn corrupt_inputs_are_rejected() {
        let c = Checkpoint::new("demo", Value::Null);
        let mut b = c.to_bytes().unwrap();
        assert!(Checkpoint::from_bytes(&b[..3]).is_err());
        b.push(0);
        assert!(Checkpoint::from_bytes(&b).is_err());
        b[0] = b'Y';
        assert!(Checkpoint::from_bytes(&b).is_err());
    }
}
