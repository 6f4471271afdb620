//! Named-tensor archives and attention-map dumps.
//!
//! An archive is a JSON header listing `{name, shape, dtype, offset}` per
//! tensor plus free-form metadata, and a flat binary payload. Weights are
//! stored as binary64 so a reload is bit-exact; attention dumps use binary32.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::graph::AttnTag;
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::featbank::{decode_f32, read_json, write_file};

pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const WEIGHTS_FILE: &str = "weights.bin";
pub const ATTENTION_INDEX_FILE: &str = "attention.json";
pub const ATTENTION_FILE: &str = "attention.bin";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub offset: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    meta: serde_json::Value,
    tensors: Vec<TensorRecord>,
}

/// Writes `checkpoint.json` and `weights.bin` into `dir`.
pub fn save_archive(dir: &Path, meta: serde_json::Value, tensors: &[(String, &Tensor)]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut payload = Vec::new();
    let mut records = Vec::with_capacity(tensors.len());
    for (name, t) in tensors {
        records.push(TensorRecord {
            name: name.clone(),
            shape: t.shape().to_vec(),
            dtype: "f64le".into(),
            offset: payload.len() as u64,
        });
        for x in t.data() {
            payload.extend_from_slice(&x.to_le_bytes());
        }
    }
    let header = Header { meta, tensors: records };
    let json = serde_json::to_vec_pretty(&header).expect("header serializes");
    write_file(&dir.join(WEIGHTS_FILE), &payload)?;
    write_file(&dir.join(CHECKPOINT_FILE), &json)
}

/// Reads an archive written by [`save_archive`].
pub fn load_archive(dir: &Path) -> Result<(serde_json::Value, Vec<(String, Tensor)>)> {
    let hpath = dir.join(CHECKPOINT_FILE);
    if !hpath.exists() {
        return Err(Error::Checkpoint(format!("no checkpoint at {}", hpath.display())));
    }
    let header: Header = read_json(&hpath)?;
    let wpath = dir.join(WEIGHTS_FILE);
    let payload = fs::read(&wpath).map_err(|e| Error::io(&wpath, e))?;
    let mut out = Vec::with_capacity(header.tensors.len());
    let mut expected = 0u64;
    for rec in header.tensors {
        if rec.dtype != "f64le" {
            return Err(Error::format(&hpath, 0, format!("tensor {} has dtype {}", rec.name, rec.dtype)));
        }
        if rec.offset != expected {
            return Err(Error::format(&wpath, rec.offset, format!("tensor {} offset != {expected}", rec.name)));
        }
        let count: usize = rec.shape.iter().product();
        let end = rec.offset as usize + count * 8;
        if end > payload.len() {
            return Err(Error::format(&wpath, payload.len() as u64, format!("tensor {} truncated", rec.name)));
        }
        let data: Vec<f64> = payload[rec.offset as usize..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        expected = end as u64;
        let t = Tensor::new(rec.shape, data).map_err(|e| Error::format(&hpath, 0, e.to_string()))?;
        out.push((rec.name, t));
    }
    if expected != payload.len() as u64 {
        return Err(Error::format(&wpath, expected, "trailing bytes after the last tensor"));
    }
    Ok((header.meta, out))
}

/// One head-averaged map in an attention dump.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionRecord {
    pub video: usize,
    #[serde(flatten)]
    pub tag: AttnTag,
    pub rows: usize,
    pub cols: usize,
    pub offset: u64,
}

/// Writes maps as binary32 with a JSON index.
pub fn save_attention_dump(dir: &Path, maps: &[(usize, AttnTag, Tensor)]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut payload = Vec::new();
    let mut index = Vec::with_capacity(maps.len());
    for (video, tag, m) in maps {
        index.push(AttentionRecord {
            video: *video,
            tag: *tag,
            rows: m.rows(),
            cols: m.cols(),
            offset: payload.len() as u64,
        });
        for &x in m.data() {
            payload.extend_from_slice(&(x as f32).to_le_bytes());
        }
    }
    write_file(&dir.join(ATTENTION_FILE), &payload)?;
    let json = serde_json::to_vec_pretty(&index).expect("index serializes");
    write_file(&dir.join(ATTENTION_INDEX_FILE), &json)
}

pub fn load_attention_dump(dir: &Path) -> Result<Vec<(usize, AttnTag, Tensor)>> {
    let index: Vec<AttentionRecord> = read_json(&dir.join(ATTENTION_INDEX_FILE))?;
    let bpath = dir.join(ATTENTION_FILE);
    let payload = fs::read(&bpath).map_err(|e| Error::io(&bpath, e))?;
    index
        .into_iter()
        .map(|r| {
            let v = decode_f32(&bpath, &payload, r.offset, r.rows * r.cols)?;
            let t = Tensor::matrix(r.rows, r.cols, v.into_iter().map(f64::from).collect());
            Ok((r.video, r.tag, t))
        })
        .collect()
}
