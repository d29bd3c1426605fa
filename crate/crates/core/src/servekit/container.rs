use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::ServeError;
use crate::autodiff::Tensor;

const MAGIC: &[u8; 4] = b"E4SC";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    kind: String,
    meta: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

/// Named tensors plus JSON metadata in one checksummed file.
///
/// Layout: magic `E4SC`, u32 version, u32 header length, JSON header
/// (`kind`, `meta`, tensor names and shapes), the tensors as little-endian
/// f32 in header order, and a CRC32 of every preceding byte.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub kind: String,
    pub meta: serde_json::Value,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn new(kind: impl Into<String>, meta: serde_json::Value) -> Self {
        Self { kind: kind.into(), meta, tensors: Vec::new() }
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.tensors.push((name.into(), tensor));
    }

    pub fn get(&self, name: &str) -> Result<&Tensor, ServeError> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| ServeError::Format(format!("{} checkpoint has no tensor {name:?}", self.kind)))
    }

    pub fn take(&mut self, name: &str) -> Result<Tensor, ServeError> {
        let pos = self
            .tensors
            .iter()
            .position(|(n, _)| n == name)
            .ok_or_else(|| ServeError::Format(format!("{} checkpoint has no tensor {name:?}", self.kind)))?;
        Ok(self.tensors.remove(pos).1)
    }

    pub fn meta_as<T: serde::de::DeserializeOwned>(&self) -> Result<T, ServeError> {
        serde_json::from_value(self.meta.clone()).map_err(|e| ServeError::Format(format!("{} metadata: {e}", self.kind)))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            kind: self.kind.clone(),
            meta: self.meta.clone(),
            tensors: self.tensors.iter().map(|(n, t)| TensorEntry { name: n.clone(), shape: t.shape().to_vec() }).collect(),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let floats: usize = self.tensors.iter().map(|(_, t)| t.numel()).sum();
        let mut out = Vec::with_capacity(16 + json.len() + 4 * floats);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, t) in &self.tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ServeError> {
        let body = super::verify_crc(bytes)?;
        let mut r = super::Reader::new(body);
        if r.bytes(4)? != MAGIC {
            return Err(ServeError::Format("not a checkpoint file (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(ServeError::Format(format!("unsupported checkpoint version {version}")));
        }
        let len = r.u32()? as usize;
        let header: Header =
            serde_json::from_slice(r.bytes(len)?).map_err(|e| ServeError::Format(format!("checkpoint header: {e}")))?;
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for entry in header.tensors {
            let data = r.f32s(entry.shape.iter().product())?;
            let t = Tensor::new(entry.shape, data).map_err(|e| ServeError::Format(e.to_string()))?;
            tensors.push((entry.name, t));
        }
        r.finish()?;
        Ok(Self { kind: header.kind, meta: header.meta, tensors })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), ServeError> {
        super::write_atomic(path.as_ref(), &self.to_bytes())
    }

    /// Loads and checks that the file holds a checkpoint of the given kind.
    pub fn load(path: impl AsRef<Path>, kind: &str) -> Result<Self, ServeError> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| ServeError::Io { path: path.display().to_string(), source: e })?;
        let ck = Self::from_bytes(&bytes)?;
        if ck.kind != kind {
            return Err(ServeError::Format(format!("{} holds a {} checkpoint, expected {kind}", path.display(), ck.kind)));
        }
        Ok(ck)
    }
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)
}
