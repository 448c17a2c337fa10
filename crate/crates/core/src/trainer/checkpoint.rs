//! Binary checkpoint container.
//!
//! Layout: 8-byte magic `PSEGCKPT`, `u32` format version, `u64` header length,
//! UTF-8 JSON header, then little-endian `f32` tensor blobs in header order.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::optim::{AdamW, AdamWConfig};
use super::{ModelConfig, Stage, TrainConfig};
use crate::attention::AttentionParams;
use crate::data::RngState;
use crate::encoder::EncoderParams;
use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::params::{ParamKind, ParamStore};
use crate::protohead::ProtoNet;

pub const MAGIC: &[u8; 8] = b"PSEGCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub stage: Stage,
    /// Episodes completed in `stage`.
    pub episode: usize,
    pub config_digest: String,
    pub seed: u64,
    pub model: ModelConfig,
    /// Configuration of the stage that produced the checkpoint.
    pub train: Option<TrainConfig>,
    pub net: ProtoNet<f32>,
    pub optimizer: Option<AdamW<f32>>,
    pub rng: Option<RngState>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    group: String,
    name: String,
    kind: ParamKind,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct OptimizerHeader {
    config: AdamWConfig,
    step: u64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    stage: Stage,
    episode: usize,
    config_digest: String,
    seed: u64,
    model: ModelConfig,
    train: Option<TrainConfig>,
    head_channels: usize,
    head_d_k: usize,
    optimizer: Option<OptimizerHeader>,
    rng: Option<RngState>,
    tensors: Vec<TensorEntry>,
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut tensors = Vec::new();
        let mut blobs: Vec<&Tensor<f32>> = Vec::new();
        let push_store = |group: &str, store: &'_ ParamStore<f32>, tensors: &mut Vec<TensorEntry>| {
            for (name, entry) in store.iter() {
                tensors.push(TensorEntry {
                    group: group.to_string(),
                    name: name.to_string(),
                    kind: entry.kind,
                    shape: entry.tensor.shape().to_vec(),
                });
            }
        };
        push_store("encoder", &self.net.encoder.store, &mut tensors);
        push_store("head", &self.net.head.store, &mut tensors);
        blobs.extend(self.net.encoder.store.iter().map(|(_, e)| &e.tensor));
        blobs.extend(self.net.head.store.iter().map(|(_, e)| &e.tensor));
        if let Some(opt) = &self.optimizer {
            for (group, moments) in [("adam_m", &opt.first), ("adam_v", &opt.second)] {
                for (name, t) in moments {
                    tensors.push(TensorEntry {
                        group: group.to_string(),
                        name: name.clone(),
                        kind: ParamKind::Buffer,
                        shape: t.shape().to_vec(),
                    });
                    blobs.push(t);
                }
            }
        }
        let header = Header {
            stage: self.stage,
            episode: self.episode,
            config_digest: self.config_digest.clone(),
            seed: self.seed,
            model: self.model.clone(),
            train: self.train.clone(),
            head_channels: self.net.head.channels,
            head_d_k: self.net.head.d_k,
            optimizer: self.optimizer.as_ref().map(|o| OptimizerHeader {
                config: o.config.clone(),
                step: o.step,
            }),
            rng: self.rng.clone(),
            tensors,
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(20 + json.len() + blobs.iter().map(|t| 4 * t.len()).sum::<usize>());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for t in blobs {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(corrupt("not a checkpoint (bad magic)"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(corrupt(format!("unsupported format version {version}")));
        }
        let header_len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let body = bytes
            .get(20..20 + header_len)
            .ok_or_else(|| corrupt("truncated header"))?;
        let header: Header = serde_json::from_slice(body)?;
        let mut offset = 20 + header_len;
        let mut encoder = ParamStore::new();
        let mut head = ParamStore::new();
        let mut first = BTreeMap::new();
        let mut second = BTreeMap::new();
        for entry in header.tensors {
            let n: usize = entry.shape.iter().product();
            let raw = bytes
                .get(offset..offset + 4 * n)
                .ok_or_else(|| corrupt(format!("truncated blob for {}/{}", entry.group, entry.name)))?;
            offset += 4 * n;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            let tensor = Tensor::new(&entry.shape, data)?;
            match entry.group.as_str() {
                "encoder" => encoder.insert(entry.name, tensor, entry.kind),
                "head" => head.insert(entry.name, tensor, entry.kind),
                "adam_m" => {
                    first.insert(entry.name, tensor);
                }
                "adam_v" => {
                    second.insert(entry.name, tensor);
                }
                other => return Err(corrupt(format!("unknown tensor group `{other}`"))),
            }
        }
        if offset != bytes.len() {
            return Err(corrupt(format!("{} trailing bytes", bytes.len() - offset)));
        }
        let model = header.model;
        model.encoder.validate()?;
        let net = ProtoNet {
            encoder: EncoderParams {
                config: model.encoder.clone(),
                store: encoder,
            },
            head: AttentionParams {
                variant: model.attention_variant,
                channels: header.head_channels,
                d_k: header.head_d_k,
                store: head,
            },
            attention_config: model.attention.clone(),
            config: model.head.clone(),
        };
        let optimizer = header.optimizer.map(|o| AdamW {
            config: o.config,
            step: o.step,
            first,
            second,
        });
        Ok(Checkpoint {
            stage: header.stage,
            episode: header.episode,
            config_digest: header.config_digest,
            seed: header.seed,
            model,
            train: header.train,
            net,
            optimizer,
            rng: header.rng,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
