//! Checkpoint file: magic, format version, a JSON header, then every block as
//! little-endian f32 in header order.

use std::collections::BTreeMap;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use super::model::Primed;
use super::optim::AdamW;
use crate::error::{Error, Result};
use crate::io::{encode, Array};
use crate::synthscene::EncoderConfig;

const MAGIC: &[u8; 8] = b"PRIMEDCK";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct BlockEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    version: u32,
    epoch: usize,
    optimizer_step: u64,
    config: RunConfig,
    encoder: EncoderConfig,
    blocks: Vec<BlockEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub epoch: usize,
    pub config: RunConfig,
    pub encoder: EncoderConfig,
    pub params: BTreeMap<String, Array<f32>>,
    pub optimizer_step: u64,
    /// First and second moments keyed by parameter name.
    pub moments: BTreeMap<String, (Array<f32>, Array<f32>)>,
}

fn to_array(t: &Tensor) -> Result<Array<f32>> {
    let data = t.flatten_all()?.to_dtype(DType::F32)?.to_vec1::<f32>()?;
    Array::new(t.dims().to_vec(), data)
}

fn to_tensor(a: &Array<f32>, dtype: DType) -> Result<Tensor> {
    Ok(Tensor::from_slice(&a.data, a.shape.as_slice(), &Device::Cpu)?.to_dtype(dtype)?)
}

impl Checkpoint {
    pub fn capture(model: &Primed, opt: &AdamW, epoch: usize, config: &RunConfig) -> Result<Self> {
        let mut params = BTreeMap::new();
        for (name, v) in model.ps.vars() {
            params.insert(name.clone(), to_array(v.as_tensor())?);
        }
        let mut moments = BTreeMap::new();
        for (name, (m, v)) in &opt.moments {
            moments.insert(name.clone(), (to_array(m)?, to_array(v)?));
        }
        Ok(Self {
            epoch,
            config: config.clone(),
            encoder: model.encoder.clone(),
            params,
            optimizer_step: opt.step,
            moments,
        })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut blocks = Vec::new();
        let mut payload = Vec::new();
        for (name, a) in &self.params {
            blocks.push(BlockEntry {
                name: format!("param/{name}"),
                shape: a.shape.clone(),
            });
            payload.extend(encode(a));
        }
        for (name, (m, v)) in &self.moments {
            for (tag, a) in [("adam_m", m), ("adam_v", v)] {
                blocks.push(BlockEntry {
                    name: format!("{tag}/{name}"),
                    shape: a.shape.clone(),
                });
                payload.extend(encode(a));
            }
        }
        let header = Header {
            version: FORMAT_VERSION,
            epoch: self.epoch,
            optimizer_step: self.optimizer_step,
            config: self.config.clone(),
            encoder: self.encoder.clone(),
            blocks,
        };
        let hj = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(20 + hj.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(hj.len() as u64).to_le_bytes());
        out.extend(hj);
        out.extend(payload);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |reason: &str| Error::Checkpoint {
            name: "<file>".into(),
            reason: reason.to_string(),
        };
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(bad(&format!(
                "format version {version}, expected {FORMAT_VERSION}"
            )));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let hend = 20usize
            .checked_add(hlen)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(&bytes[20..hend])?;
        let mut pos = hend;
        let mut params = BTreeMap::new();
        let mut m_raw: BTreeMap<String, Array<f32>> = BTreeMap::new();
        let mut v_raw: BTreeMap<String, Array<f32>> = BTreeMap::new();
        for b in header.blocks {
            let n: usize = b.shape.iter().product();
            let end = pos + 4 * n;
            if end > bytes.len() {
                return Err(bad(&format!("block {} truncated", b.name)));
            }
            let data = bytes[pos..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            pos = end;
            let a = Array::new(b.shape, data)?;
            let (tag, name) = b
                .name
                .split_once('/')
                .ok_or_else(|| bad("malformed block name"))?;
            let target = match tag {
                "param" => &mut params,
                "adam_m" => &mut m_raw,
                "adam_v" => &mut v_raw,
                _ => return Err(bad(&format!("unknown block kind {tag}"))),
            };
            target.insert(name.to_string(), a);
        }
        if pos != bytes.len() {
            return Err(bad("trailing bytes"));
        }
        let mut moments = BTreeMap::new();
        for (name, m) in m_raw {
            let v = v_raw
                .remove(&name)
                .ok_or_else(|| bad(&format!("missing second moment for {name}")))?;
            moments.insert(name, (m, v));
        }
        Ok(Self {
            epoch: header.epoch,
            config: header.config,
            encoder: header.encoder,
            params,
            optimizer_step: header.optimizer_step,
            moments,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
    }

    /// Copy parameters into an existing model; every block must be present
    /// with the same shape.
    pub fn load_into(&self, model: &Primed) -> Result<()> {
        for (name, var) in model.ps.vars() {
            let a = self.params.get(name).ok_or_else(|| Error::Checkpoint {
                name: name.clone(),
                reason: "missing from checkpoint".into(),
            })?;
            if a.shape != var.dims() {
                return Err(Error::Checkpoint {
                    name: name.clone(),
                    reason: format!(
                        "checkpoint shape {:?}, model shape {:?}",
                        a.shape,
                        var.dims()
                    ),
                });
            }
            model.ps.set(name, &to_tensor(a, model.dtype())?)?;
        }
        if let Some(extra) = self.params.keys().find(|k| model.ps.get(k).is_none()) {
            return Err(Error::Checkpoint {
                name: extra.clone(),
                reason: "not a parameter of this model".into(),
            });
        }
        Ok(())
    }

    /// Rebuild the model and optimizer state.
    pub fn restore(&self, dtype: DType) -> Result<(Primed, AdamW)> {
        let model = Primed::new(&self.config, &self.encoder, dtype)?;
        self.load_into(&model)?;
        let mut opt = AdamW::new();
        opt.step = self.optimizer_step;
        for (name, (m, v)) in &self.moments {
            opt.moments
                .insert(name.clone(), (to_tensor(m, dtype)?, to_tensor(v, dtype)?));
        }
        Ok((model, opt))
    }
}
