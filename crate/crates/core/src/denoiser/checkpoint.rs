//! Checkpoint container: a plain-text header followed by raw little-endian
//! `f32` payloads.
//!
//! ```text
//! PLATESR-CHECKPOINT 1
//! config {"in_channels":6,...}
//! meta step 1200
//! tensors 2
//! conv_in.weight 32x6x3x3 0 6912
//! conv_in.bias 32 6912 128
//! end
//! <payload bytes>
//! ```
//!
//! Offsets and lengths are in bytes relative to the first payload byte.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use super::{DenoiserConfig, DenoiserParams, ParamTensor};
use crate::error::{Error, Result};

const MAGIC: &str = "PLATESR-CHECKPOINT";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: DenoiserConfig,
    /// Free-form `key value` pairs (no whitespace in keys).
    pub meta: BTreeMap<String, String>,
    pub tensors: BTreeMap<String, ParamTensor>,
}

impl Checkpoint {
    pub fn new(config: DenoiserConfig, params: &DenoiserParams) -> Self {
        Self {
            config,
            meta: BTreeMap::new(),
            tensors: params.tensors.clone(),
        }
    }

    /// Tensors whose names start with `prefix`, with the prefix stripped.
    pub fn params_with_prefix(&self, prefix: &str) -> DenoiserParams {
        DenoiserParams {
            tensors: self
                .tensors
                .iter()
                .filter_map(|(k, v)| k.strip_prefix(prefix).map(|s| (s.to_string(), v.clone())))
                .collect(),
        }
    }

    /// Tensors without any of the given prefixes.
    pub fn params_excluding(&self, prefixes: &[&str]) -> DenoiserParams {
        DenoiserParams {
            tensors: self
                .tensors
                .iter()
                .filter(|(k, _)| !prefixes.iter().any(|p| k.starts_with(p)))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    pub fn insert_params(&mut self, prefix: &str, params: &DenoiserParams) {
        for (k, v) in &params.tensors {
            self.tensors.insert(format!("{prefix}{k}"), v.clone());
        }
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut header = format!("{MAGIC} {VERSION}\n");
        header.push_str(&format!("config {}\n", serde_json::to_string(&self.config)?));
        for (k, v) in &self.meta {
            if k.is_empty() || k.contains(char::is_whitespace) || v.contains('\n') {
                return Err(Error::Checkpoint(format!("unencodable meta entry {k:?}")));
            }
            header.push_str(&format!("meta {k} {v}\n"));
        }
        header.push_str(&format!("tensors {}\n", self.tensors.len()));
        let mut offset = 0usize;
        for (name, t) in &self.tensors {
            if name.contains(char::is_whitespace) {
                return Err(Error::Checkpoint(format!("tensor name {name:?} has whitespace")));
            }
            let elems: usize = t.shape.iter().product();
            if elems != t.data.len() {
                return Err(Error::Checkpoint(format!(
                    "tensor {name}: shape {:?} but {} values",
                    t.shape,
                    t.data.len()
                )));
            }
            let shape = t.shape.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("x");
            let bytes = t.data.len() * 4;
            header.push_str(&format!("{name} {shape} {offset} {bytes}\n"));
            offset += bytes;
        }
        header.push_str("end\n");
        let mut out = header.into_bytes();
        out.reserve(offset);
        for t in self.tensors.values() {
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let bad = |m: String| Error::Checkpoint(m);
        let mut pos = 0usize;
        let mut next_line = || -> Result<&str> {
            let rest = &bytes[pos..];
            let nl = rest
                .iter()
                .position(|&b| b == b'\n')
                .ok_or_else(|| bad("truncated header".into()))?;
            let line = std::str::from_utf8(&rest[..nl]).map_err(|_| bad("header is not utf-8".into()))?;
            pos += nl + 1;
            Ok(line)
        };

        let first = next_line()?;
        let version = first
            .strip_prefix(MAGIC)
            .map(str::trim)
            .ok_or_else(|| bad("missing magic".into()))?;
        if version != VERSION.to_string() {
            return Err(bad(format!("unsupported version {version}")));
        }
        let config_line = next_line()?;
        let config: DenoiserConfig = serde_json::from_str(
            config_line
                .strip_prefix("config ")
                .ok_or_else(|| bad("missing config line".into()))?,
        )?;
        let mut meta = BTreeMap::new();
        let count: usize = loop {
            let line = next_line()?;
            if let Some(rest) = line.strip_prefix("meta ") {
                let (k, v) = rest.split_once(' ').unwrap_or((rest, ""));
                meta.insert(k.to_string(), v.to_string());
            } else if let Some(n) = line.strip_prefix("tensors ") {
                break n.trim().parse().map_err(|_| bad(format!("bad tensor count {n:?}")))?;
            } else {
                return Err(bad(format!("unexpected header line {line:?}")));
            }
        };
        let mut table = Vec::with_capacity(count);
        for _ in 0..count {
            let line = next_line()?;
            let fields: Vec<&str> = line.split(' ').collect();
            let [name, shape, offset, len] = fields[..] else {
                return Err(bad(format!("bad tensor entry {line:?}")));
            };
            let shape: Vec<usize> = shape
                .split('x')
                .map(|d| d.parse().map_err(|_| bad(format!("bad shape in {line:?}"))))
                .collect::<Result<_>>()?;
            let offset: usize = offset.parse().map_err(|_| bad(format!("bad offset in {line:?}")))?;
            let len: usize = len.parse().map_err(|_| bad(format!("bad length in {line:?}")))?;
            if len != shape.iter().product::<usize>() * 4 {
                return Err(bad(format!("length disagrees with shape in {line:?}")));
            }
            table.push((name.to_string(), shape, offset, len));
        }
        if next_line()? != "end" {
            return Err(bad("missing end marker".into()));
        }
        let payload = &bytes[pos..];
        let mut tensors = BTreeMap::new();
        for (name, shape, offset, len) in table {
            let raw = payload
                .get(offset..offset + len)
                .ok_or_else(|| bad(format!("tensor {name} runs past the payload")))?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            tensors.insert(name, ParamTensor { shape, data });
        }
        Ok(Self {
            config,
            meta,
            tensors,
        })
    }
}

pub fn write_checkpoint(path: impl AsRef<Path>, checkpoint: &Checkpoint) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, checkpoint.encode()?).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::decode(&bytes)
}
