//! Model checkpoints: one file holding every parameter tensor.
//!
//! Layout: an 8-byte little-endian header length, a UTF-8 JSON header
//! (geometry, pooling, calibrated failure threshold, free-form metadata and
//! a table of tensor names with byte offsets), then the tensors as
//! back-to-back `EDT1` blobs. Offsets in the table are relative to the
//! first byte after the header.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encoders::{ActionHeadParams, Encoders, Geometry, LanguageEncoderParams, Pooling, VisualEncoderParams};
use crate::error::{EdpaError, Result};
use crate::tensor::{write_file, Tensor};

const FORMAT: &str = "edpa-checkpoint/1";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub encoders: Encoders,
    /// Action-error threshold above which a prediction counts as a failure.
    pub failure_threshold: Option<f64>,
    pub meta: BTreeMap<String, String>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    offset: usize,
    length: usize,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format: String,
    geometry: Geometry,
    pooling: Pooling,
    failure_threshold: Option<f64>,
    meta: BTreeMap<String, String>,
    tensors: Vec<TensorEntry>,
}

fn named_tensors(enc: &Encoders) -> Vec<(String, &Tensor)> {
    let v = VisualEncoderParams::NAMES
        .iter()
        .zip(enc.visual.tensors())
        .map(|(n, t)| (format!("visual.{n}"), t));
    let l = LanguageEncoderParams::NAMES
        .iter()
        .zip(enc.language.tensors())
        .map(|(n, t)| (format!("language.{n}"), t));
    let h = ActionHeadParams::NAMES
        .iter()
        .zip(enc.head.tensors())
        .map(|(n, t)| (format!("head.{n}"), t));
    v.chain(l).chain(h).collect()
}

impl Checkpoint {
    pub fn new(encoders: Encoders) -> Self {
        Self {
            encoders,
            failure_threshold: None,
            meta: BTreeMap::new(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut blobs = Vec::new();
        let mut tensors = Vec::new();
        for (name, t) in named_tensors(&self.encoders) {
            let offset = blobs.len();
            t.write_edt1(&mut blobs);
            tensors.push(TensorEntry {
                name,
                offset,
                length: blobs.len() - offset,
                shape: t.shape().to_vec(),
            });
        }
        let header = Header {
            format: FORMAT.into(),
            geometry: self.encoders.geometry(),
            pooling: self.encoders.head.pooling,
            failure_threshold: self.failure_threshold,
            meta: self.meta.clone(),
            tensors,
        };
        let json = serde_json::to_vec_pretty(&header).expect("header serialises");
        let mut out = (json.len() as u64).to_le_bytes().to_vec();
        out.extend_from_slice(&json);
        out.extend_from_slice(&blobs);
        out
    }

    pub fn from_bytes(bytes: &[u8], context: &str) -> Result<Self> {
        let fail = |msg: String| EdpaError::format(context, msg);
        if bytes.len() < 8 {
            return Err(fail(format!(
                "at byte offset 0: header length truncated ({} bytes)",
                bytes.len()
            )));
        }
        let hlen = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
        let body = 8usize
            .checked_add(hlen)
            .filter(|&end| end <= bytes.len())
            .ok_or_else(|| {
                fail(format!(
                    "at byte offset 8: header of {hlen} bytes runs past end of file"
                ))
            })?;
        let header: Header =
            serde_json::from_slice(&bytes[8..body]).map_err(|e| fail(format!("at byte offset 8: bad header: {e}")))?;
        if header.format != FORMAT {
            return Err(fail(format!("unsupported format {:?}", header.format)));
        }
        let mut table = BTreeMap::new();
        for e in &header.tensors {
            let start = body + e.offset;
            let end = start
                .checked_add(e.length)
                .filter(|&end| end <= bytes.len())
                .ok_or_else(|| fail(format!("at byte offset {start}: tensor {} truncated", e.name)))?;
            let (t, used) = Tensor::read_edt1(&bytes[start..end], start, &format!("{context}: tensor {}", e.name))?;
            if used != e.length || t.shape() != e.shape.as_slice() {
                return Err(fail(format!(
                    "at byte offset {start}: tensor {} does not match its table entry",
                    e.name
                )));
            }
            table.insert(e.name.clone(), t);
        }
        let mut take = |name: String| -> Result<Tensor> {
            table
                .remove(&name)
                .ok_or_else(|| fail(format!("missing tensor {name}")))
        };
        let geometry = header.geometry;
        let visual = VisualEncoderParams {
            geometry,
            w1: take("visual.w1".into())?,
            b1: take("visual.b1".into())?,
            w2: take("visual.w2".into())?,
            b2: take("visual.b2".into())?,
            pos: take("visual.pos".into())?,
        };
        visual.validate().map_err(|e| fail(e.to_string()))?;
        let language = LanguageEncoderParams {
            geometry,
            table: take("language.table".into())?,
            pos: take("language.pos".into())?,
        };
        let head = ActionHeadParams {
            pooling: header.pooling,
            wq: take("head.wq".into())?,
            w: take("head.w".into())?,
            b: take("head.b".into())?,
        };
        let shapes_ok = language.table.shape() == [geometry.vocab, geometry.dim]
            && language.pos.shape() == [geometry.max_tokens, geometry.dim]
            && head.wq.shape() == [geometry.dim, geometry.dim]
            && head.w.shape() == [2 * geometry.dim, geometry.action_dim]
            && head.b.shape() == [geometry.action_dim];
        if !shapes_ok {
            return Err(fail("language or head tensor shapes disagree with geometry".into()));
        }
        if let Some(extra) = table.keys().next() {
            return Err(fail(format!("unexpected tensor {extra}")));
        }
        Ok(Self {
            encoders: Encoders { visual, language, head },
            failure_threshold: header.failure_threshold,
            meta: header.meta,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| EdpaError::io(path, e))?;
        Self::from_bytes(&bytes, &path.display().to_string())
    }

    /// Threshold or an error telling the caller to calibrate first.
    pub fn threshold(&self) -> Result<f64> {
        self.failure_threshold
            .ok_or_else(|| EdpaError::Config("checkpoint has no calibrated failure threshold".into()))
    }
}
