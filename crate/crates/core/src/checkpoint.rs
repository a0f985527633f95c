//! Binary checkpoint format.
//!
//! ```text
//! "SSMF"                      4 bytes
//! version                     u32 LE
//! config length               u64 LE, then that many bytes of UTF-8 config text
//! tensor count                u64 LE
//! per tensor:
//!   name length               u64 LE, then the UTF-8 name
//!   rank                      u64 LE
//!   dims                      rank × u64 LE
//!   payload                   product(dims) × f64 LE
//! ```
//!
//! Tensor names: model parameters under their own names, Adam moments under
//! `adam.m.<name>` and `adam.v.<name>`, the cost graph as `vast.cost`,
//! data statistics as `data.mean` / `data.std`, and the scalar counters as
//! `train.counters` (optimizer step, completed epochs, epochs without
//! improvement, cost-graph updates) and `train.best_val`.

use std::collections::BTreeMap;
use std::path::Path;

use crate::config::Config;
use crate::data::Standardization;
use crate::error::{Error, Result};
use crate::numerics::{ParamStore, Tensor};
use crate::pipeline::Model;
use crate::train::{AdamState, TrainState};
use crate::vast::CostGraph;

pub const MAGIC: &[u8; 4] = b"SSMF";
pub const VERSION: u32 = 1;

fn ckpt(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_tensor(out: &mut Vec<u8>, name: &str, t: &Tensor) {
    put_u64(out, name.len() as u64);
    out.extend_from_slice(name.as_bytes());
    put_u64(out, t.rank() as u64);
    for &d in t.shape() {
        put_u64(out, d as u64);
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

/// Serializes the full training state.
pub fn encode_checkpoint(state: &TrainState) -> Vec<u8> {
    let mut tensors: Vec<(String, &Tensor)> = Vec::new();
    for (name, p) in state.params.iter() {
        tensors.push((name.to_string(), &p.value));
    }
    for (name, m) in &state.adam.m {
        tensors.push((format!("adam.m.{name}"), m));
    }
    for (name, v) in &state.adam.v {
        tensors.push((format!("adam.v.{name}"), v));
    }
    tensors.push(("vast.cost".into(), &state.graph.cost));
    let stats = state.standardization.as_ref().map(|s| {
        let k = s.mean.len();
        (
            Tensor::new(&[k], s.mean.clone()).expect("mean length"),
            Tensor::new(&[k], s.std.clone()).expect("std length"),
        )
    });
    if let Some((mean, std)) = &stats {
        tensors.push(("data.mean".into(), mean));
        tensors.push(("data.std".into(), std));
    }
    let counters = Tensor::new(
        &[4],
        vec![
            state.adam.step as f64,
            state.epochs_completed as f64,
            state.epochs_without_improvement as f64,
            state.graph.update_count as f64,
        ],
    )
    .expect("counter length");
    let best = Tensor::new(&[1], vec![state.best_val]).expect("scalar");
    tensors.push(("train.counters".into(), &counters));
    tensors.push(("train.best_val".into(), &best));

    let config = state.config.to_text();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    put_u64(&mut out, config.len() as u64);
    out.extend_from_slice(config.as_bytes());
    put_u64(&mut out, tensors.len() as u64);
    for (name, t) in tensors {
        put_tensor(&mut out, &name, t);
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| ckpt(format!("truncated while reading {what} at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    /// A length field that must fit in the bytes that remain.
    fn len(&mut self, what: &str, elem: usize) -> Result<usize> {
        let n = self.u64(what)?;
        let remaining = (self.buf.len() - self.pos) as u64;
        if n.checked_mul(elem as u64).map_or(true, |b| b > remaining) {
            return Err(ckpt(format!("{what} {n} exceeds the remaining {remaining} bytes")));
        }
        Ok(n as usize)
    }
}

/// Decodes raw records without interpreting them.
pub fn decode_records(bytes: &[u8]) -> Result<(String, BTreeMap<String, Tensor>)> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(ckpt("not a checkpoint (bad magic)"));
    }
    let version = u32::from_le_bytes(r.take(4, "version")?.try_into().unwrap());
    if version != VERSION {
        return Err(ckpt(format!("unsupported format version {version}, expected {VERSION}")));
    }
    let n = r.len("config length", 1)?;
    let config = std::str::from_utf8(r.take(n, "config")?)
        .map_err(|_| ckpt("config block is not UTF-8"))?
        .to_string();
    // every record needs at least 16 header bytes
    let count = r.len("tensor count", 16)?;
    let mut tensors = BTreeMap::new();
    for i in 0..count {
        let n = r.len("name length", 1)?;
        let name = std::str::from_utf8(r.take(n, "name")?)
            .map_err(|_| ckpt(format!("tensor {i} name is not UTF-8")))?
            .to_string();
        let rank = r.len("rank", 8)?;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(r.u64("dimension")? as usize);
        }
        let numel = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .filter(|&n| n.checked_mul(8).map_or(false, |b| b <= bytes.len() - r.pos))
            .ok_or_else(|| ckpt(format!("tensor {name:?} with dims {dims:?} exceeds the file")))?;
        let payload = r.take(numel * 8, "payload")?;
        let data = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let t = Tensor::new(&dims, data).map_err(|e| ckpt(format!("tensor {name:?}: {e}")))?;
        if tensors.insert(name.clone(), t).is_some() {
            return Err(ckpt(format!("duplicate tensor {name:?}")));
        }
    }
    if r.pos != bytes.len() {
        return Err(ckpt(format!("{} trailing bytes after the last tensor", bytes.len() - r.pos)));
    }
    Ok((config, tensors))
}

/// Decodes and validates a checkpoint against the model its config describes.
pub fn decode_checkpoint(bytes: &[u8]) -> Result<TrainState> {
    let (config_text, mut tensors) = decode_records(bytes)?;
    let config = Config::parse(&config_text).map_err(|e| ckpt(format!("embedded config: {e}")))?;
    let model = Model::new(&config.model).map_err(|e| ckpt(format!("embedded config: {e}")))?;
    // parameters and both moments must fit in the file before anything is allocated
    let m = &config.model;
    let lower_bound = (m.depth as u128 * 3 * m.d_inner() as u128 * m.d_model as u128
        + m.horizon as u128 * m.n_patches() as u128 * m.d_model as u128)
        * 3
        * 8;
    if lower_bound > bytes.len() as u128 {
        return Err(ckpt(format!("embedded config needs at least {lower_bound} bytes of tensors")));
    }
    let template = model.init_params(0)?;
    fn take_from(tensors: &mut BTreeMap<String, Tensor>, name: &str, shape: &[usize]) -> Result<Tensor> {
        let t = tensors
            .remove(name)
            .ok_or_else(|| ckpt(format!("missing tensor {name:?}")))?;
        if t.shape() != shape {
            return Err(ckpt(format!("tensor {name:?} has shape {:?}, expected {shape:?}", t.shape())));
        }
        Ok(t)
    }
    let mut take = |name: &str, shape: &[usize]| take_from(&mut tensors, name, shape);
    let mut params = ParamStore::new();
    let mut adam = AdamState::default();
    for (name, p) in template.iter() {
        let shape = p.value.shape();
        params.insert(name, take(name, shape)?)?;
        adam.m.insert(name.to_string(), take(&format!("adam.m.{name}"), shape)?);
        adam.v.insert(name.to_string(), take(&format!("adam.v.{name}"), shape)?);
    }
    let k = config.model.n_vars;
    let cost = take("vast.cost", &[k, k])?;
    let counters = take("train.counters", &[4])?;
    let best_val = take("train.best_val", &[1])?.data()[0];
    let standardization = match (tensors.contains_key("data.mean"), tensors.contains_key("data.std")) {
        (false, false) => None,
        (true, true) => Some(Standardization {
            mean: take_from(&mut tensors, "data.mean", &[k])?.into_data(),
            std: take_from(&mut tensors, "data.std", &[k])?.into_data(),
        }),
        _ => return Err(ckpt("data.mean and data.std must appear together")),
    };
    if let Some(extra) = tensors.keys().next() {
        return Err(ckpt(format!("unexpected tensor {extra:?}")));
    }
    let count = |i: usize, what: &str| -> Result<u64> {
        let v = counters.data()[i];
        if v >= 0.0 && v.fract() == 0.0 && v < 2f64.powi(53) {
            Ok(v as u64)
        } else {
            Err(ckpt(format!("counter {what} = {v} is not a non-negative integer")))
        }
    };
    adam.step = count(0, "optimizer step")?;
    let mut graph = CostGraph::from_costs(cost, config.model.beta).map_err(|e| ckpt(e.to_string()))?;
    graph.update_count = count(3, "cost-graph updates")?;
    Ok(TrainState {
        params,
        adam,
        graph,
        best_val,
        epochs_completed: count(1, "epochs completed")? as usize,
        epochs_without_improvement: count(2, "epochs without improvement")? as usize,
        standardization,
        config,
    })
}

pub fn save_checkpoint(state: &TrainState, path: &Path) -> Result<()> {
    std::fs::write(path, encode_checkpoint(state))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<TrainState> {
    let bytes = std::fs::read(path)?;
    decode_checkpoint(&bytes)
}
