//! Binary checkpoints.
//!
//! Layout, all integers little-endian:
//! `"IDFM"`, version `u32`, config length `u64`, UTF-8 JSON config, then until
//! end of file a table of tensors, each `name length u32`, UTF-8 name,
//! `rank u32`, `rank × u64` dims and the values as `f64`.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::{AttentionMode, Trainer};
use crate::model::{LoraAdapter, ModelConfig, ModelState, ParamSet, TrainMode};
use crate::numerics::{AdamConfig, AdamState, Tensor};

pub const MAGIC: &[u8; 4] = b"IDFM";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdapterMeta {
    pub target: String,
    pub rank: usize,
    pub alpha: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerMeta {
    pub mode: TrainMode,
    pub attention: AttentionMode,
    pub adam: AdamConfig,
    pub step: u64,
}

/// The JSON blob stored in the header.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    pub adapters: Vec<AdapterMeta>,
    pub optimizer: Option<OptimizerMeta>,
}

/// A model and, when saved mid-training, its optimizer state.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: ModelState,
    pub trainer: Option<Trainer>,
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_tensor(out: &mut Vec<u8>, name: &str, t: &Tensor) {
    put_u32(out, name.len() as u32);
    out.extend_from_slice(name.as_bytes());
    put_u32(out, t.dims().len() as u32);
    for &d in t.dims() {
        put_u64(out, d as u64);
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

impl Checkpoint {
    pub fn meta(&self) -> CheckpointMeta {
        CheckpointMeta {
            model: self.model.config.clone(),
            adapters: self
                .model
                .adapters
                .iter()
                .map(|a| AdapterMeta {
                    target: a.target.clone(),
                    rank: a.rank,
                    alpha: a.alpha,
                })
                .collect(),
            optimizer: self.trainer.as_ref().map(|t| OptimizerMeta {
                mode: t.mode,
                attention: t.attention.clone(),
                adam: t.adam.config,
                step: t.adam.step_count,
            }),
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = MAGIC.to_vec();
        put_u32(&mut out, VERSION);
        let json = serde_json::to_vec(&self.meta()).expect("serializable");
        put_u64(&mut out, json.len() as u64);
        out.extend_from_slice(&json);
        for (name, t) in self.model.params.iter() {
            put_tensor(&mut out, name, t);
        }
        for a in &self.model.adapters {
            put_tensor(&mut out, &format!("lora.{}.a", a.target), &a.a);
            put_tensor(&mut out, &format!("lora.{}.b", a.target), &a.b);
        }
        if let Some(tr) = &self.trainer {
            for (k, &id) in tr.param_ids().iter().enumerate() {
                let name = self.model.param_name(id);
                put_tensor(&mut out, &format!("adam.m.{name}"), &tr.adam.first_moment[k]);
                put_tensor(&mut out, &format!("adam.v.{name}"), &tr.adam.second_moment[k]);
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!("checkpoint version {version}, expected {VERSION}")));
        }
        let len = r.u64()? as usize;
        let meta: CheckpointMeta = serde_json::from_slice(r.take(len)?)?;
        meta.model.validate()?;
        let mut table = HashMap::new();
        while r.pos < bytes.len() {
            let (name, t) = r.tensor()?;
            if table.contains_key(&name) {
                return Err(Error::Format(format!("tensor {name} appears twice")));
            }
            table.insert(name, t);
        }
        let mut take = |name: &str, dims: &[usize]| -> Result<Tensor> {
            let t = table
                .remove(name)
                .ok_or_else(|| Error::Format(format!("checkpoint lacks tensor {name}")))?;
            if t.dims() != dims {
                return Err(Error::Format(format!("tensor {name} is {:?}, expected {dims:?}", t.dims())));
            }
            Ok(t)
        };

        let mut params = ParamSet::new();
        for (name, dims) in meta.model.param_shapes() {
            let t = take(&name, &dims)?;
            params.insert(name, t)?;
        }
        let mut adapters = Vec::new();
        for am in &meta.adapters {
            let w = params.get(&am.target)?;
            let (out, inp) = (w.rows(), w.cols());
            adapters.push(LoraAdapter {
                a: take(&format!("lora.{}.a", am.target), &[am.rank, inp])?,
                b: take(&format!("lora.{}.b", am.target), &[out, am.rank])?,
                target: am.target.clone(),
                rank: am.rank,
                alpha: am.alpha,
            });
        }
        let model = ModelState {
            config: meta.model.clone(),
            params,
            adapters,
        };
        let trainer = match &meta.optimizer {
            None => None,
            Some(om) => {
                let mut tr = Trainer::new(&model, om.mode, om.attention.clone(), om.adam);
                let ids = tr.param_ids().to_vec();
                let mut adam = AdamState {
                    config: om.adam,
                    first_moment: Vec::with_capacity(ids.len()),
                    second_moment: Vec::with_capacity(ids.len()),
                    step_count: om.step,
                };
                for id in ids {
                    let name = model.param_name(id);
                    let dims = model.tensor(id).dims().to_vec();
                    adam.first_moment.push(take(&format!("adam.m.{name}"), &dims)?);
                    adam.second_moment.push(take(&format!("adam.v.{name}"), &dims)?);
                }
                tr.adam = adam;
                Some(tr)
            }
        };
        if let Some(name) = table.keys().min() {
            return Err(Error::Format(format!("unexpected tensor {name} in checkpoint")));
        }
        Ok(Self { model, trainer })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode(&std::fs::read(path)?)
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
            .ok_or_else(|| Error::Format(format!("checkpoint truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn tensor(&mut self) -> Result<(String, Tensor)> {
        let len = self.u32()? as usize;
        let name = std::str::from_utf8(self.take(len)?)
            .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?
            .to_owned();
        let rank = self.u32()? as usize;
        let dims = (0..rank).map(|_| self.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = dims.iter().product();
        let raw = self.take(n.checked_mul(8).ok_or_else(|| Error::Format("tensor too large".into()))?)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        Ok((name, Tensor::new(dims, data)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn small() -> ModelConfig {
        ModelConfig {
            image_h: 12,
            image_w: 12,
            d_model: 8,
            heads: 2,
            num_layers: 2,
            early_count: 0,
            late_count: 0,
            embed_dim: 4,
            time_dim: 4,
            utility_len: 2,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn bitwise_round_trip() {
        let mut m = ModelState::random(small(), 3).unwrap();
        m.lora_attach(&[1], 2, 4.0, 9).unwrap();
        let ck = Checkpoint { model: m, trainer: None };
        let bytes = ck.encode();
        let back = Checkpoint::decode(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.encode(), bytes);
    }

    #[test]
    fn round_trip_with_optimizer() {
        let m = ModelState::random(small(), 3).unwrap();
        let mut tr = Trainer::new(&m, TrainMode::Full, AttentionMode::Unmasked, AdamConfig::default());
        tr.adam.step_count = 7;
        tr.adam.first_moment[0].data_mut()[0] = -0.5;
        let ck = Checkpoint { model: m, trainer: Some(tr) };
        let back = Checkpoint::decode(&ck.encode()).unwrap();
        assert_eq!(back, ck);
    }

    #[test]
    fn header_layout() {
        let ck = Checkpoint {
            model: ModelState::random(small(), 1).unwrap(),
            trainer: None,
        };
        let bytes = ck.encode();
        assert_eq!(&bytes[..4], b"IDFM");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), VERSION);
        let len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let meta: serde_json::Value = serde_json::from_slice(&bytes[16..16 + len]).unwrap();
        assert_eq!(meta["model"]["d_model"], 8);
        let name_len = u32::from_le_bytes(bytes[16 + len..20 + len].try_into().unwrap()) as usize;
        assert_eq!(&bytes[20 + len..20 + len + name_len], b"tok_embed");
    }

    #[test]
    fn corrupt_input_rejected() {
        let ck = Checkpoint {
            model: ModelState::random(small(), 1).unwrap(),
            trainer: None,
        };
        let bytes = ck.encode();
        assert!(Checkpoint::decode(&bytes[..bytes.len() - 3]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::decode(&bad).is_err());
    }
}
