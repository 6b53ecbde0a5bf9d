//! Checkpoint container: a text manifest followed by raw tensor data.
//!
//! ```text
//! MCEEND-CHECKPOINT 1
//! meta {"model":{...},"step":1200,"epoch":3}
//! tensor blocks.0.attn.theta.q.w f64 256x256 0
//! tensor blocks.0.attn.theta.q.b f64 256 524288
//! ...
//! end
//! <little-endian f64 values, tensors back to back>
//! ```
//!
//! Offsets are in bytes from the first byte after the `end` line. Names
//! are unique and sorted. Files are written to a sibling temporary path
//! and renamed into place.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::encoders::ModelConfig;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::params::ParamStore;
use crate::tensor::Tensor;

const MAGIC: &str = "MCEEND-CHECKPOINT 1";

/// Everything besides tensors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    /// Optimizer steps taken so far.
    pub step: u64,
    /// Completed epochs.
    pub epoch: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    /// Model parameters plus any optimizer tensors, by name.
    pub tensors: BTreeMap<String, Tensor>,
}

impl Checkpoint {
    pub fn from_model(model: &Model) -> Self {
        Checkpoint {
            meta: CheckpointMeta {
                model: model.config.clone(),
                step: 0,
                epoch: 0,
            },
            tensors: model.params.iter().map(|(n, t)| (n.to_string(), t.clone())).collect(),
        }
    }

    /// Rebuilds the model from the tensors named by its parameter specs.
    pub fn model(&self) -> Result<Model> {
        let mut params = ParamStore::new();
        for spec in Model::specs(&self.meta.model) {
            let t = self
                .tensors
                .get(&spec.name)
                .ok_or_else(|| Error::Data(format!("checkpoint lacks parameter {}", spec.name)))?;
            params.insert(spec.name, t.clone())?;
        }
        Model::from_params(self.meta.model.clone(), params)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut header = format!("{MAGIC}\nmeta {}\n", serde_json::to_string(&self.meta)?);
        let mut offset = 0usize;
        for (name, t) in &self.tensors {
            if name.is_empty() || name.contains(char::is_whitespace) {
                return Err(Error::Data(format!("invalid tensor name {name:?}")));
            }
            let dims: Vec<String> = t.shape().iter().map(usize::to_string).collect();
            header += &format!("tensor {name} f64 {} {offset}\n", dims.join("x"));
            offset += t.numel() * 8;
        }
        header += "end\n";
        let mut bytes = header.into_bytes();
        bytes.reserve(offset);
        for t in self.tensors.values() {
            for v in t.data() {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        let tmp = temp_path(path);
        let io = |e| Error::io(&tmp, e);
        let mut f = std::fs::File::create(&tmp).map_err(io)?;
        f.write_all(&bytes).map_err(io)?;
        f.sync_all().map_err(io)?;
        drop(f);
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let perr = |line: usize, msg: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            msg,
        };
        let mut pos = 0;
        let mut lines = Vec::new();
        loop {
            let nl = bytes[pos..]
                .iter()
                .position(|&b| b == b'\n')
                .ok_or_else(|| perr(lines.len() + 1, "unterminated header".into()))?;
            let line = std::str::from_utf8(&bytes[pos..pos + nl])
                .map_err(|_| perr(lines.len() + 1, "header is not UTF-8".into()))?;
            pos += nl + 1;
            if line == "end" {
                break;
            }
            lines.push(line.to_string());
        }
        let data = &bytes[pos..];
        if lines.first().map(String::as_str) != Some(MAGIC) {
            return Err(perr(1, format!("expected {MAGIC:?}")));
        }
        let meta_json = lines
            .get(1)
            .and_then(|l| l.strip_prefix("meta "))
            .ok_or_else(|| perr(2, "missing meta line".into()))?;
        let meta: CheckpointMeta =
            serde_json::from_str(meta_json).map_err(|e| perr(2, e.to_string()))?;
        let mut tensors = BTreeMap::new();
        for (i, line) in lines.iter().enumerate().skip(2) {
            let n = i + 1;
            let f: Vec<&str> = line.split(' ').collect();
            let [tag, name, dtype, dims, offset] = f[..] else {
                return Err(perr(n, "expected `tensor <name> <dtype> <shape> <offset>`".into()));
            };
            if tag != "tensor" || dtype != "f64" {
                return Err(perr(n, format!("unsupported record {tag} {dtype}")));
            }
            let shape = dims
                .split('x')
                .map(str::parse::<usize>)
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| perr(n, format!("bad shape {dims:?}: {e}")))?;
            let offset: usize = offset.parse().map_err(|e| perr(n, format!("bad offset: {e}")))?;
            let count: usize = shape.iter().product();
            let raw = data
                .get(offset..offset + 8 * count)
                .ok_or_else(|| perr(n, format!("{name} extends past the end of the file")))?;
            let values = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            let t = Tensor::new(shape, values).map_err(|e| perr(n, e.to_string()))?;
            if tensors.insert(name.to_string(), t).is_some() {
                return Err(perr(n, format!("duplicate tensor {name}")));
            }
        }
        Ok(Checkpoint { meta, tensors })
    }
}

fn temp_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".tmp");
    path.with_file_name(name)
}
