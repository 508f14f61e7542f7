//! Binary parameter checkpoints.
//!
//! Layout: an 8-byte little-endian header length, a JSON header listing the
//! tensors in order with their shapes, then every value as little-endian f64.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{BlockLayout, ParamSet, TaskVector, TaskVectorPool};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    format_version: u32,
    dtype: String,
    endianness: String,
    kind: String,
    tensors: Vec<Entry>,
    #[serde(default)]
    meta: Value,
}

#[derive(Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub kind: String,
    pub params: ParamSet,
    pub meta: Value,
}

pub fn write_checkpoint(path: &Path, kind: &str, params: &ParamSet, meta: Value) -> Result<()> {
    let header = Header {
        format_version: CHECKPOINT_VERSION,
        dtype: "f64".into(),
        endianness: "little".into(),
        kind: kind.into(),
        tensors: params.iter().map(|(n, t)| Entry { name: n.into(), shape: t.shape().to_vec() }).collect(),
        meta,
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::Invalid(e.to_string()))?;
    let mut buf = Vec::with_capacity(8 + json.len() + 8 * params.num_params());
    buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&json);
    for (_, t) in params.iter() {
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |message: String| Error::Malformed { path: path.to_path_buf(), message };
    if bytes.len() < 8 {
        return Err(bad("truncated header".into()));
    }
    let hlen = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
    let body_start = 8usize.checked_add(hlen).filter(|&e| e <= bytes.len()).ok_or_else(|| bad("truncated header".into()))?;
    let header: Header = serde_json::from_slice(&bytes[8..body_start]).map_err(|e| bad(format!("bad header: {e}")))?;
    if header.format_version != CHECKPOINT_VERSION {
        return Err(bad(format!("unsupported format version {}", header.format_version)));
    }
    if header.dtype != "f64" || header.endianness != "little" {
        return Err(bad(format!("unsupported encoding {}/{}", header.dtype, header.endianness)));
    }
    let body = &bytes[body_start..];
    let total: usize = header.tensors.iter().map(|e| e.shape.iter().product::<usize>()).sum();
    if body.len() != total * 8 {
        return Err(bad(format!("expected {} data bytes, found {}", total * 8, body.len())));
    }
    let mut values = body.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap()));
    let mut entries = Vec::with_capacity(header.tensors.len());
    for e in header.tensors {
        let n = e.shape.iter().product();
        let data: Vec<f64> = values.by_ref().take(n).collect();
        let t = Tensor::new(e.shape, data).map_err(|err| bad(err.to_string()))?;
        entries.push((e.name, t));
    }
    let params = ParamSet::new(entries).map_err(|err| bad(err.to_string()))?;
    Ok(Checkpoint { kind: header.kind, params, meta: header.meta })
}

impl TaskVectorPool {
    /// Store every task vector in one checkpoint as `{task}/{tensor}`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut entries = Vec::new();
        for (i, v) in self.vectors().iter().enumerate() {
            for (name, t) in v.delta.iter() {
                entries.push((format!("{i}/{name}"), t.clone()));
            }
        }
        let meta = serde_json::json!({
            "n_tasks": self.n_tasks(),
            "tasks": self.vectors().iter().map(|v| v.task).collect::<Vec<_>>(),
            "tensor_names": self.layout_template().names(),
            "blocks": self.blocks(),
        });
        write_checkpoint(path, "task_vector_pool", &ParamSet::new(entries)?, meta)
    }

    pub fn load(path: &Path) -> Result<TaskVectorPool> {
        let ck = read_checkpoint(path)?;
        let bad = |message: String| Error::Malformed { path: path.to_path_buf(), message };
        if ck.kind != "task_vector_pool" {
            return Err(bad(format!("expected a task vector pool, found `{}`", ck.kind)));
        }
        let tasks: Vec<usize> =
            serde_json::from_value(ck.meta["tasks"].clone()).map_err(|e| bad(format!("bad task list: {e}")))?;
        let names: Vec<String> =
            serde_json::from_value(ck.meta["tensor_names"].clone()).map_err(|e| bad(format!("bad tensor names: {e}")))?;
        let blocks: BlockLayout =
            serde_json::from_value(ck.meta["blocks"].clone()).map_err(|e| bad(format!("bad block layout: {e}")))?;
        let mut vectors = Vec::with_capacity(tasks.len());
        for (i, &task) in tasks.iter().enumerate() {
            let entries = names
                .iter()
                .map(|n| {
                    let key = format!("{i}/{n}");
                    ck.params.get(&key).cloned().map(|t| (n.clone(), t)).ok_or_else(|| bad(format!("missing `{key}`")))
                })
                .collect::<Result<Vec<_>>>()?;
            vectors.push(TaskVector { task, delta: ParamSet::new(entries)? });
        }
        TaskVectorPool::new(vectors, blocks)
    }
}
