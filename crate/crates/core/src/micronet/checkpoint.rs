//! Network checkpoint container.
//!
//! ```text
//! offset  size        content
//! 0       8           magic "HYDRNET1"
//! 8       4           u32 LE  header length H
//! 12      H           UTF-8 JSON header:
//!                       {"format":1, "input_shape":[..], "metadata_width":n,
//!                        "layers":[LayerSpec..], "tags":{"key":"value"..}}
//! 12+H    4           u32 LE  parameter tensor count T
//! then T times:       u32 LE rank r, r × u32 LE dims,
//!                     prod(dims) × f64 LE values (row-major)
//! ```
//!
//! Tensors appear in layer order, weights before biases, so the layer table
//! alone determines every expected shape; a mismatch is rejected on load.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{LayerSpec, Network};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"HYDRNET1";
const FORMAT: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    format: u32,
    input_shape: Vec<usize>,
    metadata_width: usize,
    layers: Vec<LayerSpec>,
    tags: BTreeMap<String, String>,
}

/// A network plus free-form string tags (config hash, role, ...).
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub network: Network,
    pub tags: BTreeMap<String, String>,
}

impl Checkpoint {
    pub fn new(network: Network) -> Self {
        Checkpoint {
            network,
            tags: BTreeMap::new(),
        }
    }

    pub fn with_tag(mut self, key: &str, value: impl Into<String>) -> Self {
        self.tags.insert(key.to_string(), value.into());
        self
    }

    pub fn tag(&self, key: &str) -> Option<&str> {
        self.tags.get(key).map(String::as_str)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            format: FORMAT,
            input_shape: self.network.input_shape().to_vec(),
            metadata_width: self.network.metadata_width(),
            layers: self.network.layers().to_vec(),
            tags: self.tags.clone(),
        };
        let json = serde_json::to_vec(&header)?;
        let params = self.network.params();
        let mut out = Vec::with_capacity(16 + json.len() + 8 * self.network.parameter_count() + 16 * params.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&(params.len() as u32).to_le_bytes());
        for p in params {
            out.extend_from_slice(&(p.rank() as u32).to_le_bytes());
            for d in p.shape() {
                out.extend_from_slice(&(*d as u32).to_le_bytes());
            }
            for v in p.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Data("not a network checkpoint (bad magic)".into()));
        }
        let header_len = r.u32()? as usize;
        let header: Header = serde_json::from_slice(r.take(header_len)?)?;
        if header.format != FORMAT {
            return Err(Error::Data(format!("unsupported checkpoint format {}", header.format)));
        }
        let mut network = Network::new(header.input_shape, header.metadata_width, header.layers)?;
        let count = r.u32()? as usize;
        if count != network.params().len() {
            return Err(Error::Data(format!(
                "checkpoint holds {count} tensors, layer table needs {}",
                network.params().len()
            )));
        }
        let mut params = Vec::with_capacity(count);
        for _ in 0..count {
            let rank = r.u32()? as usize;
            let shape = (0..rank)
                .map(|_| r.u32().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let raw = r.take(n * 8)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            params.push(Tensor::new(shape, data)?);
        }
        if r.pos != bytes.len() {
            return Err(Error::Data("trailing bytes after checkpoint payload".into()));
        }
        network.set_params(params)?;
        Ok(Checkpoint {
            network,
            tags: header.tags,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::fsutil::write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Data("truncated checkpoint".into()))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}
