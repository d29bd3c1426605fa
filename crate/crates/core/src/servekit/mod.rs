//! Checkpoint and bundle containers, the servable model, the bundle
//! registry and top-k inference.

mod bundle;
mod container;
mod registry;
mod servable;

pub use bundle::{export_bundle, import_bundle, Bundle, BundleHeader, BundleReport, BundleTarget, BUNDLE_MAGIC, BUNDLE_VERSION};
pub use container::Checkpoint;
pub use registry::{Recommendation, Registry};
pub use servable::{top_k, Servable};

use std::path::Path;

#[derive(Debug, thiserror::Error)]
pub enum ServeError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("checksum mismatch (stored {stored:08x}, computed {computed:08x}); file is corrupt")]
    Checksum { stored: u32, computed: u32 },
    #[error("malformed file: {0}")]
    Format(String),
    #[error("bundle needs hidden width {bundle}, backbone has {backbone}")]
    Incompatible { bundle: usize, backbone: usize },
    #[error("unknown item ids {ids:?} (catalog has {n_items} items)")]
    UnknownItems { ids: Vec<usize>, n_items: usize },
    #[error("invalid request: {0}")]
    Invalid(String),
    #[error("unknown dataset {0:?}")]
    UnknownDataset(String),
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), ServeError> {
    container::write_file(path, bytes).map_err(|e| ServeError::Io { path: path.display().to_string(), source: e })
}

/// Splits off and checks the trailing CRC32, returning the covered bytes.
pub(crate) fn verify_crc(bytes: &[u8]) -> Result<&[u8], ServeError> {
    if bytes.len() < 8 {
        return Err(ServeError::Format(format!("file too short ({} bytes)", bytes.len())));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().unwrap());
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(ServeError::Checksum { stored, computed });
    }
    Ok(body)
}

/// Little-endian cursor over a checksummed body.
pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    pub(crate) fn bytes(&mut self, n: usize) -> Result<&'a [u8], ServeError> {
        if self.buf.len() - self.pos < n {
            return Err(ServeError::Format(format!("unexpected end of data at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn u8(&mut self) -> Result<u8, ServeError> {
        Ok(self.bytes(1)?[0])
    }

    pub(crate) fn u32(&mut self) -> Result<u32, ServeError> {
        Ok(u32::from_le_bytes(self.bytes(4)?.try_into().unwrap()))
    }

    pub(crate) fn f32s(&mut self, n: usize) -> Result<Vec<f32>, ServeError> {
        let raw = self.bytes(n.checked_mul(4).ok_or_else(|| ServeError::Format("section too large".into()))?)?;
        Ok(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
    }

    pub(crate) fn finish(&self) -> Result<(), ServeError> {
        if self.pos != self.buf.len() {
            return Err(ServeError::Format(format!("{} trailing bytes", self.buf.len() - self.pos)));
        }
        Ok(())
    }
}
