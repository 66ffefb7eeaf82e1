//! Single-file tensor archive: magic, JSON header, raw little-endian f64
//! payload in column-major order. Round trips are bit-exact.

use std::io::{Read, Write};
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::params::{ModelConfig, ModelParams, Weights};
use super::vocab::Vocab;
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"SPRDTNSR";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    meta: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    rows: usize,
    cols: usize,
}

/// Named tensors plus free-form JSON metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct Archive {
    pub meta: serde_json::Value,
    pub tensors: Vec<(String, DMatrix<f64>)>,
}

impl Archive {
    pub fn get(&self, name: &str) -> Option<&DMatrix<f64>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            meta: self.meta.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|(name, t)| TensorEntry {
                    name: name.clone(),
                    rows: t.nrows(),
                    cols: t.ncols(),
                })
                .collect(),
        };
        let header = serde_json::to_vec(&header).expect("header serializes");
        let payload: usize = self.tensors.iter().map(|(_, t)| t.len() * 8).sum();
        let mut out = Vec::with_capacity(20 + header.len() + payload);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for (_, t) in &self.tensors {
            for x in t.as_slice() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("missing archive magic"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != VERSION {
            return Err(bad("unsupported archive version"));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let body = &bytes[20..];
        if body.len() < hlen {
            return Err(bad("truncated header"));
        }
        let header: Header = serde_json::from_slice(&body[..hlen])?;
        let mut data = &body[hlen..];
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for e in header.tensors {
            let n = e.rows * e.cols;
            if data.len() < n * 8 {
                return Err(bad("truncated tensor payload"));
            }
            let vals: Vec<f64> = data[..n * 8]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            data = &data[n * 8..];
            tensors.push((e.name, DMatrix::from_vec(e.rows, e.cols, vals)));
        }
        if !data.is_empty() {
            return Err(bad("trailing bytes after payload"));
        }
        Ok(Archive {
            meta: header.meta,
            tensors,
        })
    }
}

pub fn write_archive(path: &Path, archive: &Archive) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(&archive.to_bytes())?;
    Ok(())
}

pub fn read_archive(path: &Path) -> Result<Archive> {
    let mut buf = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut buf)?;
    Archive::from_bytes(&buf)
}

#[derive(Serialize, Deserialize)]
struct ModelMeta {
    kind: String,
    config: ModelConfig,
    vocab: Vocab,
}

impl ModelParams {
    pub fn to_archive(&self) -> Archive {
        let meta = ModelMeta {
            kind: "model".into(),
            config: self.config.clone(),
            vocab: self.vocab.clone(),
        };
        Archive {
            meta: serde_json::to_value(meta).expect("meta serializes"),
            tensors: self
                .weights
                .named()
                .into_iter()
                .map(|(n, t)| (n, t.clone()))
                .collect(),
        }
    }

    pub fn from_archive(a: &Archive) -> Result<Self> {
        let meta: ModelMeta = serde_json::from_value(a.meta.clone())?;
        if meta.kind != "model" {
            return Err(Error::Checkpoint(format!("expected model archive, found {}", meta.kind)));
        }
        meta.config.validate()?;
        let mut weights = Weights::zeros(&meta.config);
        let mut missing = None;
        weights.for_each_mut(|name, t| match a.get(name) {
            Some(src) if src.shape() == t.shape() => t.copy_from(src),
            _ => missing = Some(name.to_string()),
        });
        if let Some(name) = missing {
            return Err(Error::Checkpoint(format!("tensor `{name}` missing or misshapen")));
        }
        Ok(ModelParams {
            config: meta.config,
            vocab: meta.vocab,
            weights,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_archive(path, &self.to_archive())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_archive(&read_archive(path)?)
    }
}
