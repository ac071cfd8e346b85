// SPDX-License-Identifier: Apache-2.0

//! `FPCK` checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "FPCK"  u32 version
//! repeated, sorted by name:
//!   u32 name_len  name (UTF-8)  u32 rank  rank x u32 dims  prod(dims) x f32
//! ```
//!
//! A JSON metadata sidecar lives next to the container at `<path>.json`.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{AutodiffError, Result};
use crate::params::ModelParameters;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"FPCK";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub config_hash: String,
    pub stage: String,
    pub epoch: usize,
    #[serde(flatten)]
    pub extra: serde_json::Map<String, serde_json::Value>,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

pub fn encode(params: &ModelParameters<f32>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for (name, p) in params.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(p.value.rank() as u32).to_le_bytes());
        for &d in p.value.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in p.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(AutodiffError::Checkpoint(format!(
                "truncated while reading {what} at byte {}",
                self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

/// Decodes a container. Every entry comes back trainable; callers overlay
/// the values onto a freshly built parameter set to recover buffer flags.
pub fn decode(bytes: &[u8]) -> Result<ModelParameters<f32>> {
    let mut cur = Cursor { buf: bytes, pos: 0 };
    if cur.take(4, "magic")? != MAGIC {
        return Err(AutodiffError::Checkpoint("bad magic, expected FPCK".into()));
    }
    let version = cur.u32("version")?;
    if version != VERSION {
        return Err(AutodiffError::Checkpoint(format!("unsupported version {version}")));
    }
    let mut params = ModelParameters::new();
    let mut last: Option<String> = None;
    while cur.pos < bytes.len() {
        let len = cur.u32("name length")? as usize;
        let name = std::str::from_utf8(cur.take(len, "name")?)
            .map_err(|_| AutodiffError::Checkpoint("parameter name is not UTF-8".into()))?
            .to_string();
        if last.as_ref().is_some_and(|l| *l >= name) {
            return Err(AutodiffError::Checkpoint(format!("record `{name}` out of order")));
        }
        let rank = cur.u32("rank")? as usize;
        let shape = (0..rank)
            .map(|_| cur.u32("dims").map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let raw = cur.take(n * 4, &name)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        params.insert(name.clone(), Tensor::new(&shape, data)?);
        last = Some(name);
    }
    Ok(params)
}

pub fn save(path: &Path, params: &ModelParameters<f32>, meta: &CheckpointMeta) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::File::create(path)?.write_all(&encode(params))?;
    let json = serde_json::to_string_pretty(meta)
        .map_err(|e| AutodiffError::Checkpoint(e.to_string()))?;
    fs::write(sidecar_path(path), json + "\n")?;
    Ok(())
}

pub fn load(path: &Path) -> Result<(ModelParameters<f32>, CheckpointMeta)> {
    let params = decode(&fs::read(path)?)?;
    let text = fs::read_to_string(sidecar_path(path))?;
    let meta = serde_json::from_str(&text).map_err(|e| AutodiffError::Checkpoint(e.to_string()))?;
    Ok((params, meta))
}
