//! Checkpoint files: a text manifest followed by a little-endian f64 payload.
//!
//! ```text
//! asr-checkpoint
//! version 1
//! graph {"input_shape":[3,32,32],...}
//! meta seed 7
//! tensor stem.conv.weight param 16,3,3,3 0 432
//! end
//! <payload>
//! ```
//!
//! Tensor offsets are byte offsets into the payload.

use crate::error::{Error, Result};
use crate::graph::ModelGraph;
use crate::params::{ParamKind, ParamSet};
use crate::tensor::Tensor;
use std::collections::BTreeMap;
use std::path::Path;

const MAGIC: &str = "asr-checkpoint";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub graph: ModelGraph,
    pub params: ParamSet,
    /// Free-form single-line annotations.
    pub meta: BTreeMap<String, String>,
}

fn is_token(s: &str) -> bool {
    !s.is_empty() && !s.chars().any(|c| c.is_whitespace())
}

impl Checkpoint {
    pub fn new(graph: ModelGraph, params: ParamSet) -> Result<Self> {
        graph.check_params(&params)?;
        Ok(Checkpoint {
            graph,
            params,
            meta: BTreeMap::new(),
        })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut manifest = format!("{MAGIC}\nversion {VERSION}\ngraph {}\n", serde_json::to_string(&self.graph)?);
        for (k, v) in &self.meta {
            if !is_token(k) || v.contains('\n') {
                return Err(Error::Config(format!("meta entry {k:?} cannot be stored on one line")));
            }
            manifest.push_str(&format!("meta {k} {v}\n"));
        }
        let mut payload = Vec::new();
        for (name, e) in self.params.iter() {
            if !is_token(name) {
                return Err(Error::Config(format!("tensor name {name:?} contains whitespace")));
            }
            let dims: Vec<String> = e.value.shape().iter().map(|d| d.to_string()).collect();
            manifest.push_str(&format!(
                "tensor {name} {} {} {} {}\n",
                e.kind.tag(),
                dims.join(","),
                payload.len(),
                e.value.len()
            ));
            for x in e.value.data() {
                payload.extend_from_slice(&x.to_le_bytes());
            }
        }
        manifest.push_str("end\n");
        let mut out = manifest.into_bytes();
        out.extend(payload);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut pos = 0usize;
        let mut next_line = || -> Result<(u64, String)> {
            let start = pos;
            let end = bytes[pos..]
                .iter()
                .position(|&b| b == b'\n')
                .map(|i| pos + i)
                .ok_or_else(|| Error::Format {
                    offset: start as u64,
                    detail: "manifest ends without an end line".into(),
                })?;
            pos = end + 1;
            let line = std::str::from_utf8(&bytes[start..end]).map_err(|_| Error::Format {
                offset: start as u64,
                detail: "manifest line is not utf-8".into(),
            })?;
            Ok((start as u64, line.to_string()))
        };
        let bad = |offset: u64, detail: String| Error::Format { offset, detail };

        let (off, line) = next_line()?;
        if line != MAGIC {
            return Err(bad(off, format!("not a checkpoint (found {line:?})")));
        }
        let (off, line) = next_line()?;
        if line != format!("version {VERSION}") {
            return Err(bad(off, format!("unsupported version line {line:?}")));
        }
        let (off, line) = next_line()?;
        let json = line
            .strip_prefix("graph ")
            .ok_or_else(|| bad(off, "missing graph line".into()))?;
        let graph: ModelGraph = serde_json::from_str(json).map_err(|e| bad(off, format!("graph: {e}")))?;

        let mut meta = BTreeMap::new();
        let mut entries = Vec::new();
        loop {
            let (off, line) = next_line()?;
            if line == "end" {
                break;
            }
            let mut parts = line.splitn(2, ' ');
            match (parts.next(), parts.next()) {
                (Some("meta"), Some(rest)) => {
                    let (k, v) = rest.split_once(' ').unwrap_or((rest, ""));
                    meta.insert(k.to_string(), v.to_string());
                }
                (Some("tensor"), Some(rest)) => {
                    let f: Vec<&str> = rest.split(' ').collect();
                    if f.len() != 5 {
                        return Err(bad(off, format!("tensor line has {} fields", f.len())));
                    }
                    let kind = ParamKind::from_tag(f[1]).ok_or_else(|| bad(off, format!("unknown kind {}", f[1])))?;
                    let dims = f[2]
                        .split(',')
                        .map(|d| d.parse::<usize>())
                        .collect::<std::result::Result<Vec<_>, _>>()
                        .map_err(|e| bad(off, format!("dims {}: {e}", f[2])))?;
                    let offset: usize = f[3].parse().map_err(|e| bad(off, format!("offset {}: {e}", f[3])))?;
                    let count: usize = f[4].parse().map_err(|e| bad(off, format!("count {}: {e}", f[4])))?;
                    if dims.iter().product::<usize>() != count {
                        return Err(bad(off, format!("count {count} does not match dims {dims:?}")));
                    }
                    entries.push((off, f[0].to_string(), kind, dims, offset, count));
                }
                _ => return Err(bad(off, format!("unrecognised manifest line {line:?}"))),
            }
        }

        let payload = &bytes[pos..];
        let mut spans: Vec<(usize, usize, u64)> = Vec::with_capacity(entries.len());
        let mut params = ParamSet::new();
        for (off, name, kind, dims, offset, count) in entries {
            let end = offset
                .checked_add(count * 8)
                .filter(|&e| e <= payload.len())
                .ok_or_else(|| bad(off, format!("tensor {name} runs past the payload")))?;
            spans.push((offset, end, off));
            let data = payload[offset..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            let t = Tensor::new(dims, data).map_err(|e| bad(off, format!("tensor {name}: {e}")))?;
            if params.contains(&name) {
                return Err(bad(off, format!("duplicate tensor {name}")));
            }
            params.insert(name, t, kind);
        }
        spans.sort();
        for w in spans.windows(2) {
            if w[1].0 < w[0].1 {
                return Err(bad(w[1].2, "tensor overlaps its predecessor in the payload".into()));
            }
        }
        graph.check_params(&params)?;
        Ok(Checkpoint { graph, params, meta })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
