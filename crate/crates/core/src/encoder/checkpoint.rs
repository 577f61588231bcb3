//! Binary checkpoints.
//!
//! Layout (all integers little-endian): magic `GRMD`, u32 version, u64
//! training step, u64 optimizer step, u64 length + UTF-8 bytes of the run
//! config text, u64 record count, then records of u32 name length, name
//! bytes, u64 rows, u64 cols and rows·cols f64 values in row-major order.
//! Optimizer moments are records named `adam.m.<param>` / `adam.v.<param>`;
//! its hyperparameters are the 1×5 record `adam.config`
//! (lr, beta1, beta2, eps, weight decay). Nothing may follow the last record.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use super::{EncoderConfig, TripleNetState};
use crate::numkit::{AdamConfig, AdamState, Matrix};
use crate::{Error, Result};

const MAGIC: &[u8; 4] = b"GRMD";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointData {
    pub step: u64,
    pub adam_step: u64,
    pub config_text: String,
    pub tensors: Vec<(String, Matrix)>,
}

pub fn encode(state: &TripleNetState, adam: &AdamState, step: u64, config_text: &str) -> Vec<u8> {
    let mut records: Vec<(String, &Matrix)> = state.named_tensors();
    let names: Vec<String> = state.trainable().into_iter().map(|(n, _)| n).collect();
    for (k, name) in names.iter().enumerate() {
        records.push((format!("adam.m.{name}"), &adam.m[k]));
        records.push((format!("adam.v.{name}"), &adam.v[k]));
    }
    let c = adam.config;
    let adam_cfg = Matrix::from_shape_vec((1, 5), vec![c.lr, c.beta1, c.beta2, c.eps, c.weight_decay]).unwrap();
    records.push(("adam.config".into(), &adam_cfg));

    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&step.to_le_bytes());
    out.extend_from_slice(&adam.step.to_le_bytes());
    out.extend_from_slice(&(config_text.len() as u64).to_le_bytes());
    out.extend_from_slice(config_text.as_bytes());
    out.extend_from_slice(&(records.len() as u64).to_le_bytes());
    for (name, m) in records {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(m.nrows() as u64).to_le_bytes());
        out.extend_from_slice(&(m.ncols() as u64).to_le_bytes());
        for v in m.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn write(path: &Path, state: &TripleNetState, adam: &AdamState, step: u64, config_text: &str) -> Result<()> {
    fs::write(path, encode(state, adam, step, config_text)).map_err(|e| Error::io(path, e))
}

pub fn read(path: &Path) -> Result<CheckpointData> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|msg| Error::Data(format!("{}: {msg}", path.display())))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(format!("truncated at byte {}", self.pos)),
        }
    }

    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn len(&mut self) -> std::result::Result<usize, String> {
        let v = self.u64()?;
        usize::try_from(v).ok().filter(|&v| v <= self.bytes.len()).ok_or_else(|| format!("implausible length {v}"))
    }
}

pub fn decode(bytes: &[u8]) -> std::result::Result<CheckpointData, String> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err("not a checkpoint (bad magic)".into());
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(format!("unsupported checkpoint version {version}"));
    }
    let step = r.u64()?;
    let adam_step = r.u64()?;
    let n = r.len()?;
    let config_text = String::from_utf8(r.take(n)?.to_vec()).map_err(|_| "config text is not UTF-8".to_string())?;
    let count = r.len()?;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec()).map_err(|_| "record name is not UTF-8".to_string())?;
        let rows = r.len()?;
        let cols = r.len()?;
        let size = rows.checked_mul(cols).and_then(|s| s.checked_mul(8)).ok_or("implausible record shape")?;
        let values = r.take(size)?.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        tensors.push((name, Matrix::from_shape_vec((rows, cols), values).unwrap()));
    }
    if r.pos != bytes.len() {
        return Err(format!("{} bytes of trailing garbage", bytes.len() - r.pos));
    }
    Ok(CheckpointData {
        step,
        adam_step,
        config_text,
        tensors,
    })
}

impl CheckpointData {
    /// Rebuilds the network and optimizer state for `config`.
    pub fn restore(&self, in_dim: usize, config: EncoderConfig) -> Result<(TripleNetState, AdamState)> {
        let mut by_name: HashMap<&str, &Matrix> = HashMap::new();
        for (name, m) in &self.tensors {
            if by_name.insert(name.as_str(), m).is_some() {
                return Err(Error::Data(format!("checkpoint record {name:?} appears twice")));
            }
        }
        let mut take = |name: &str, shape: (usize, usize)| -> Result<Matrix> {
            let m = by_name
                .remove(name)
                .ok_or_else(|| Error::Data(format!("checkpoint lacks record {name:?}")))?;
            if m.dim() != shape {
                return Err(Error::Data(format!("checkpoint record {name:?} is {:?}, expected {shape:?}", m.dim())));
            }
            Ok(m.clone())
        };
        let mut state = TripleNetState::init(in_dim, config, 0)?;
        let names: Vec<String> = state.trainable().into_iter().map(|(n, _)| n).collect();
        for (name, t) in state.named_tensors_mut() {
            *t = take(&name, t.dim())?;
        }
        let shapes: Vec<(usize, usize)> = state.trainable().iter().map(|(_, m)| m.dim()).collect();
        let c = take("adam.config", (1, 5))?;
        let mut adam = AdamState::new(
            AdamConfig {
                lr: c[[0, 0]],
                beta1: c[[0, 1]],
                beta2: c[[0, 2]],
                eps: c[[0, 3]],
                weight_decay: c[[0, 4]],
            },
            &shapes,
        );
        adam.step = self.adam_step;
        for (k, name) in names.iter().enumerate() {
            adam.m[k] = take(&format!("adam.m.{name}"), shapes[k])?;
            adam.v[k] = take(&format!("adam.v.{name}"), shapes[k])?;
        }
        if let Some(extra) = by_name.keys().next() {
            return Err(Error::Data(format!("unexpected checkpoint record {extra:?}")));
        }
        Ok((state, adam))
    }
}
