use std::path::Path;
use std::sync::Arc;

use serde::Serialize;

use super::{verify_crc, write_atomic, Reader, ServeError};
use crate::autodiff::Tensor;
use crate::backbone::{Backbone, LoraConfig};
use crate::e4srec::{E4SRec, E4SRecParts, Mode};
use crate::seqrec::{ItemEmbeddingTable, Provenance};

pub const BUNDLE_MAGIC: &[u8; 4] = b"E4SB";
pub const BUNDLE_VERSION: u32 = 1;

const NO_LLM_FLAG: u8 = 0x80;

/// One adapted projection as declared in the header.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct BundleTarget {
    pub name: String,
    pub d_in: usize,
    pub d_out: usize,
}

/// Everything a bundle declares before its tensor sections.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BundleHeader {
    pub n_items: usize,
    pub d_s: usize,
    pub d_k: usize,
    pub r: usize,
    pub alpha: u32,
    pub targets: Vec<BundleTarget>,
    pub provenance: Provenance,
    pub mode: Mode,
    pub n_layers: usize,
    pub max_len: usize,
}

/// The four pluggable sections; Θ holds (A, B) per layer and target.
#[derive(Clone, Debug)]
pub struct Bundle {
    pub header: BundleHeader,
    pub embeddings: Tensor,
    pub w_in: Tensor,
    pub lora: Vec<(Tensor, Tensor)>,
    pub w_out: Tensor,
}

#[derive(Clone, Debug, Serialize)]
pub struct BundleReport {
    pub path: String,
    pub bytes: usize,
    pub parameters: usize,
    pub backbone_parameters: usize,
    /// `parameters / backbone_parameters`.
    pub ratio: f64,
}

impl Bundle {
    pub fn from_model(model: &E4SRec) -> Result<Self, ServeError> {
        let cfg = &model.adapter.config;
        if cfg.alpha.fract() != 0.0 || cfg.alpha < 0.0 {
            return Err(ServeError::Invalid(format!("LoRA alpha {} is not a non-negative integer", cfg.alpha)));
        }
        let mut targets: Vec<BundleTarget> = Vec::new();
        for m in &model.adapter.modules {
            if !targets.iter().any(|t| t.name == m.target) {
                targets.push(BundleTarget { name: m.target.clone(), d_in: m.d_in, d_out: m.d_out });
            }
        }
        Ok(Self {
            header: BundleHeader {
                n_items: model.n_items(),
                d_s: model.d_s(),
                d_k: model.d_k(),
                r: cfg.r,
                alpha: cfg.alpha as u32,
                targets,
                provenance: model.provenance,
                mode: model.mode,
                n_layers: model.backbone.config.n_layers,
                max_len: model.max_len,
            },
            embeddings: model.item_table().clone(),
            w_in: model.w_in().clone(),
            lora: model.lora_tensors(),
            w_out: model.w_out().clone(),
        })
    }

    /// `N·d_s + d_s·d_k + Σ r·(d_in + d_out) + d_k·N`.
    pub fn num_parameters(&self) -> usize {
        self.embeddings.numel()
            + self.w_in.numel()
            + self.lora.iter().map(|(a, b)| a.numel() + b.numel()).sum::<usize>()
            + self.w_out.numel()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let h = &self.header;
        let mut out = Vec::with_capacity(64 + 4 * self.num_parameters());
        out.extend_from_slice(BUNDLE_MAGIC);
        for v in [BUNDLE_VERSION as usize, h.n_items, h.d_s, h.d_k, h.r, h.alpha as usize, h.targets.len()] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        for t in &h.targets {
            out.extend_from_slice(&(t.name.len() as u32).to_le_bytes());
            out.extend_from_slice(t.name.as_bytes());
            out.extend_from_slice(&(t.d_in as u32).to_le_bytes());
            out.extend_from_slice(&(t.d_out as u32).to_le_bytes());
        }
        let mut tag = match h.provenance {
            Provenance::Sasrec => 0u8,
            Provenance::Bpr => 1u8,
        };
        if h.mode == Mode::NoLlm {
            tag |= NO_LLM_FLAG;
        }
        out.push(tag);
        out.extend_from_slice(&(h.n_layers as u32).to_le_bytes());
        out.extend_from_slice(&(h.max_len as u32).to_le_bytes());
        let mut put = |t: &Tensor| {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        };
        put(&self.embeddings);
        put(&self.w_in);
        for (a, b) in &self.lora {
            put(a);
            put(b);
        }
        put(&self.w_out);
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    /// Parses and checks a bundle; nothing is returned unless the checksum
    /// and every declared length agree.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ServeError> {
        let body = verify_crc(bytes)?;
        let mut r = Reader::new(body);
        if r.bytes(4)? != BUNDLE_MAGIC {
            return Err(ServeError::Format("not a bundle (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != BUNDLE_VERSION {
            return Err(ServeError::Format(format!("unsupported bundle version {version}")));
        }
        let mut dims = [0usize; 6];
        for d in dims.iter_mut() {
            *d = r.u32()? as usize;
        }
        let [n_items, d_s, d_k, rank, alpha, n_targets] = dims;
        let mut targets = Vec::with_capacity(n_targets);
        for _ in 0..n_targets {
            let len = r.u32()? as usize;
            let name = std::str::from_utf8(r.bytes(len)?)
                .map_err(|_| ServeError::Format("target name is not UTF-8".into()))?
                .to_string();
            let d_in = r.u32()? as usize;
            let d_out = r.u32()? as usize;
            targets.push(BundleTarget { name, d_in, d_out });
        }
        let tag = r.u8()?;
        let provenance = match tag & !NO_LLM_FLAG {
            0 => Provenance::Sasrec,
            1 => Provenance::Bpr,
            other => return Err(ServeError::Format(format!("unknown provenance tag {other}"))),
        };
        let mode = if tag & NO_LLM_FLAG != 0 { Mode::NoLlm } else { Mode::Llm };
        let n_layers = r.u32()? as usize;
        let max_len = r.u32()? as usize;
        let mut tensor = |shape: [usize; 2]| -> Result<Tensor, ServeError> {
            let data = r.f32s(shape[0] * shape[1])?;
            Tensor::new(shape.to_vec(), data).map_err(|e| ServeError::Format(e.to_string()))
        };
        let embeddings = tensor([n_items, d_s])?;
        let w_in = tensor([d_s, d_k])?;
        let mut lora = Vec::with_capacity(n_layers * targets.len());
        for _ in 0..n_layers {
            for t in &targets {
                let a = tensor([t.d_in, rank])?;
                let b = tensor([rank, t.d_out])?;
                lora.push((a, b));
            }
        }
        let w_out = tensor([d_k, n_items])?;
        r.finish()?;
        let header = BundleHeader {
            n_items,
            d_s,
            d_k,
            r: rank,
            alpha: alpha as u32,
            targets,
            provenance,
            mode,
            n_layers,
            max_len,
        };
        Ok(Self { header, embeddings, w_in, lora, w_out })
    }

    /// Rebuilds the recommender on top of a shared backbone.
    pub fn into_model(self, backbone: Arc<Backbone>) -> Result<E4SRec, ServeError> {
        let h = &self.header;
        if h.d_k != backbone.d_model() {
            return Err(ServeError::Incompatible { bundle: h.d_k, backbone: backbone.d_model() });
        }
        if h.n_layers != backbone.config.n_layers {
            return Err(ServeError::Format(format!(
                "bundle adapts {} layers, backbone has {}",
                h.n_layers, backbone.config.n_layers
            )));
        }
        let lora = LoraConfig {
            r: h.r,
            alpha: h.alpha as f32,
            dropout: 0.0,
            targets: h.targets.iter().map(|t| t.name.clone()).collect(),
            ..Default::default()
        };
        let parts = E4SRecParts {
            embeddings: ItemEmbeddingTable { table: self.embeddings, provenance: h.provenance },
            w_in: self.w_in,
            w_out: self.w_out,
            lora,
            lora_tensors: self.lora,
            mode: h.mode,
            max_len: h.max_len,
        };
        E4SRec::from_parts(backbone, parts).map_err(|e| ServeError::Format(e.to_string()))
    }
}

/// Writes the model's pluggable components; the backbone is not included.
pub fn export_bundle(model: &E4SRec, path: impl AsRef<Path>) -> Result<BundleReport, ServeError> {
    let path = path.as_ref();
    let bundle = Bundle::from_model(model)?;
    let bytes = bundle.to_bytes();
    write_atomic(path, &bytes)?;
    let parameters = bundle.num_parameters();
    let backbone_parameters = model.backbone.num_parameters();
    Ok(BundleReport {
        path: path.display().to_string(),
        bytes: bytes.len(),
        parameters,
        backbone_parameters,
        ratio: parameters as f64 / backbone_parameters as f64,
    })
}

pub fn import_bundle(path: impl AsRef<Path>, backbone: Arc<Backbone>) -> Result<E4SRec, ServeError> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| ServeError::Io { path: path.display().to_string(), source: e })?;
    Bundle::from_bytes(&bytes)?.into_model(backbone)
}
