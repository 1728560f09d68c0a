//! Binary checkpoints: an 8-byte magic, a little-endian `u32` version, a
//! little-endian `u64` header length, a JSON header, then every tensor as
//! raw little-endian `f32` in header order.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use cisunet_tensor::Tensor;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::params::NetworkParameters;

pub const MAGIC: &[u8; 8] = b"CISUNETC";
pub const FORMAT_VERSION: u32 = 1;

/// Position of a seeded ChaCha stream.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    /// Word position, as a decimal string because it is a `u128`.
    pub word_pos: String,
}

/// AdamW moments and step count.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub m: BTreeMap<String, Tensor<f32>>,
    pub v: BTreeMap<String, Tensor<f32>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub iteration: usize,
    pub params: NetworkParameters<f32>,
    pub optimizer: Option<OptimizerState>,
    pub rng: Option<RngState>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    group: String,
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: RunConfig,
    iteration: usize,
    optimizer_step: Option<u64>,
    rng: Option<RngState>,
    tensors: Vec<TensorEntry>,
}

const PARAM: &str = "param";
const ADAM_M: &str = "adam_m";
const ADAM_V: &str = "adam_v";

fn ckpt_err(path: &Path, msg: impl Into<String>) -> Error {
    Error::Checkpoint {
        path: path.to_path_buf(),
        msg: msg.into(),
    }
}

impl Checkpoint {
    fn groups(&self) -> Vec<(&'static str, &BTreeMap<String, Tensor<f32>>)> {
        let mut out = Vec::new();
        if let Some(opt) = &self.optimizer {
            out.push((ADAM_M, &opt.m));
            out.push((ADAM_V, &opt.v));
        }
        out
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut entries = Vec::new();
        let mut payload: Vec<&Tensor<f32>> = Vec::new();
        for (name, t) in self.params.iter() {
            entries.push(TensorEntry {
                group: PARAM.into(),
                name: name.clone(),
                shape: t.shape().to_vec(),
            });
            payload.push(t);
        }
        for (group, map) in self.groups() {
            for (name, t) in map {
                entries.push(TensorEntry {
                    group: group.into(),
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                });
                payload.push(t);
            }
        }
        let header = Header {
            config: self.config.clone(),
            iteration: self.iteration,
            optimizer_step: self.optimizer.as_ref().map(|o| o.step),
            rng: self.rng.clone(),
            tensors: entries,
        };
        let json =
            serde_json::to_vec(&header).map_err(|e| Error::invalid("checkpoint", e.to_string()))?;
        let floats: usize = payload.iter().map(|t| t.numel()).sum();
        let mut out = Vec::with_capacity(20 + json.len() + 4 * floats);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for t in payload {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    /// Parses bytes produced by [`Checkpoint::to_bytes`]; `path` is only
    /// used in error messages.
    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = bytes;
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)
            .map_err(|_| ckpt_err(path, "truncated file"))?;
        if &magic != MAGIC {
            return Err(ckpt_err(path, "not a checkpoint (bad magic)"));
        }
        let mut word = [0u8; 4];
        r.read_exact(&mut word)
            .map_err(|_| ckpt_err(path, "truncated file"))?;
        let version = u32::from_le_bytes(word);
        if version != FORMAT_VERSION {
            return Err(ckpt_err(
                path,
                format!("format version {version}, this build reads {FORMAT_VERSION}"),
            ));
        }
        let mut len = [0u8; 8];
        r.read_exact(&mut len)
            .map_err(|_| ckpt_err(path, "truncated file"))?;
        let len = u64::from_le_bytes(len) as usize;
        if r.len() < len {
            return Err(ckpt_err(path, "truncated header"));
        }
        let header: Header = serde_json::from_slice(&r[..len])
            .map_err(|e| ckpt_err(path, format!("bad header: {e}")))?;
        header.config.validate()?;
        r = &r[len..];
        let mut groups: BTreeMap<String, BTreeMap<String, Tensor<f32>>> = BTreeMap::new();
        for entry in header.tensors {
            let n: usize = entry.shape.iter().product();
            if r.len() < 4 * n {
                return Err(ckpt_err(
                    path,
                    format!("truncated data for `{}`", entry.name),
                ));
            }
            let data = r[..4 * n]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            r = &r[4 * n..];
            let t = Tensor::new(entry.shape, data)?;
            groups.entry(entry.group).or_default().insert(entry.name, t);
        }
        if !r.is_empty() {
            return Err(ckpt_err(path, format!("{} trailing bytes", r.len())));
        }
        let params = NetworkParameters::from_tensors(
            &header.config.model,
            groups.remove(PARAM).unwrap_or_default(),
        )
        .map_err(|e| ckpt_err(path, e.to_string()))?;
        let optimizer = header.optimizer_step.map(|step| OptimizerState {
            step,
            m: groups.remove(ADAM_M).unwrap_or_default(),
            v: groups.remove(ADAM_V).unwrap_or_default(),
        });
        if let Some(group) = groups.keys().next() {
            return Err(ckpt_err(path, format!("unknown tensor group `{group}`")));
        }
        Ok(Checkpoint {
            config: header.config,
            iteration: header.iteration,
            params,
            optimizer,
            rng: header.rng,
        })
    }

    /// Writes via a temporary file and rename so readers never see a partial file.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes = self.to_bytes()?;
        let mut tmp = PathBuf::from(path);
        tmp.as_mut_os_string().push(".tmp");
        let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}
