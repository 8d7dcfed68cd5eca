//! Single-file binary weights. All integers and floats are little-endian.
//!
//! | field          | size        | content                                  |
//! |----------------|-------------|------------------------------------------|
//! | magic          | 8           | `DYNCPWT\0`                              |
//! | version        | u32         | 1                                        |
//! | config length  | u32         | byte length `C` of the next field        |
//! | config         | C           | UTF-8 `key = value` lines                |
//! | tensor count   | u32         |                                          |
//! | per tensor     |             | u16 name length, name, u8 rank, u32 dims, f32 data |
//! | checksum       | u32         | CRC-32 of every preceding byte           |
//!
//! Tensors are the parameters (`front.weight`, `blocks.3.bn1.gamma`, ...),
//! the running statistics (`stats.3.bn1.mean`, ...) and, after static
//! pruning, channel roles (`roles.3`, 0 dynamic, 1 always on, 2 removed).

use std::collections::BTreeMap;
use std::path::Path;

use super::config::{apply_model_key, model_entries, parse_pairs};
use crate::error::{Error, Result};
use crate::gating::ChannelRole;
use crate::model::{init_weights, ModelConfig, ModelWeights};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"DYNCPWT\0";
pub const VERSION: u32 = 1;

fn bad(msg: impl Into<String>) -> Error {
    Error::WeightsFormat(msg.into())
}

fn named_tensors(w: &ModelWeights<f32>) -> Vec<(String, Tensor<f32>)> {
    let mut out = Vec::new();
    w.params.visit(|name, t| out.push((name, t.clone())));
    for (i, s) in w.stats.iter().enumerate() {
        for (norm, r) in [("bn1", &s.bn1), ("bn2", &s.bn2)] {
            out.push((format!("stats.{i}.{norm}.mean"), r.mean.clone()));
            out.push((format!("stats.{i}.{norm}.var"), r.var.clone()));
        }
    }
    if let Some(roles) = &w.roles {
        for (i, block) in roles.iter().enumerate() {
            let v = block
                .iter()
                .map(|r| match r {
                    ChannelRole::Dynamic => 0.0,
                    ChannelRole::AlwaysOn => 1.0,
                    ChannelRole::Removed => 2.0,
                })
                .collect();
            out.push((format!("roles.{i}"), Tensor::new(&[block.len()], v).expect("rank 1")));
        }
    }
    out
}

pub fn encode_weights(w: &ModelWeights<f32>) -> Result<Vec<u8>> {
    w.validate()?;
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    let cfg: String = model_entries(&w.config)
        .into_iter()
        .map(|(k, v)| format!("{k} = {v}\n"))
        .collect();
    buf.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
    buf.extend_from_slice(cfg.as_bytes());
    let tensors = named_tensors(w);
    buf.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in &tensors {
        buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.push(t.shape().len() as u8);
        for &d in t.shape() {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    Ok(buf)
}

struct Cursor<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.data.len()).ok_or_else(|| bad("truncated file"))?;
        let s = &self.data[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

pub fn decode_weights(bytes: &[u8]) -> Result<ModelWeights<f32>> {
    if bytes.len() < MAGIC.len() + 8 || &bytes[..8] != MAGIC {
        return Err(bad("not a weights file (bad magic)"));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
    if crc32fast::hash(body) != stored {
        return Err(bad("checksum mismatch"));
    }
    let mut c = Cursor { data: body, pos: 8 };
    let version = c.u32()?;
    if version != VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let cfg_len = c.u32()? as usize;
    let cfg_text = std::str::from_utf8(c.take(cfg_len)?).map_err(|_| bad("config is not UTF-8"))?;
    let mut config = ModelConfig::default();
    for (k, v) in parse_pairs(cfg_text)? {
        if !apply_model_key(&mut config, &k, &v)? {
            return Err(bad(format!("unknown config key {k}")));
        }
    }
    let count = c.u32()? as usize;
    let mut tensors = BTreeMap::new();
    for _ in 0..count {
        let n = u16::from_le_bytes(c.take(2)?.try_into().expect("2 bytes")) as usize;
        let name = std::str::from_utf8(c.take(n)?).map_err(|_| bad("tensor name is not UTF-8"))?.to_string();
        let rank = c.take(1)?[0] as usize;
        let shape = (0..rank).map(|_| c.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let len: usize = shape.iter().product();
        let raw = c.take(len.checked_mul(4).ok_or_else(|| bad("tensor too large"))?)?;
        let data = raw.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes"))).collect();
        let t = Tensor::new(&shape, data).map_err(|e| bad(format!("{name}: {e}")))?;
        if tensors.insert(name.clone(), t).is_some() {
            return Err(bad(format!("duplicate tensor {name}")));
        }
    }
    if c.pos != body.len() {
        return Err(bad("trailing bytes"));
    }
    assemble(config, tensors)
}

fn take(tensors: &mut BTreeMap<String, Tensor<f32>>, name: &str, expected: &[usize]) -> Result<Tensor<f32>> {
    let t = tensors.remove(name).ok_or_else(|| bad(format!("missing tensor {name}")))?;
    if t.shape() != expected {
        return Err(bad(format!("{name}: shape {:?}, config needs {:?}", t.shape(), expected)));
    }
    Ok(t)
}

fn assemble(config: ModelConfig, mut tensors: BTreeMap<String, Tensor<f32>>) -> Result<ModelWeights<f32>> {
    let mut w = init_weights::<f32>(&config, 0)?;
    let mut failure = None;
    w.params.visit_mut(|name, slot| {
        if failure.is_none() {
            match take(&mut tensors, &name, slot.shape()) {
                Ok(t) => *slot = t,
                Err(e) => failure = Some(e),
            }
        }
    });
    if let Some(e) = failure {
        return Err(e);
    }
    for (i, s) in w.stats.iter_mut().enumerate() {
        for (norm, r) in [("bn1", &mut s.bn1), ("bn2", &mut s.bn2)] {
            r.mean = take(&mut tensors, &format!("stats.{i}.{norm}.mean"), &[config.c_conv])?;
            r.var = take(&mut tensors, &format!("stats.{i}.{norm}.var"), &[config.c_conv])?;
        }
    }
    if tensors.contains_key("roles.0") {
        let mut roles = Vec::new();
        for i in 0..config.total_blocks() {
            let t = take(&mut tensors, &format!("roles.{i}"), &[config.c_res])?;
            let block = t
                .data()
                .iter()
                .map(|&v| match v as u8 {
                    0 => Ok(ChannelRole::Dynamic),
                    1 => Ok(ChannelRole::AlwaysOn),
                    2 => Ok(ChannelRole::Removed),
                    _ => Err(bad(format!("roles.{i}: invalid role {v}"))),
                })
                .collect::<Result<Vec<_>>>()?;
            roles.push(block);
        }
        w.roles = Some(roles);
    }
    if let Some(extra) = tensors.keys().next() {
        return Err(bad(format!("unexpected tensor {extra}")));
    }
    Ok(w)
}

pub fn save_weights(path: impl AsRef<Path>, w: &ModelWeights<f32>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_weights(w)?).map_err(|e| Error::io(path, e))
}

pub fn load_weights(path: impl AsRef<Path>) -> Result<ModelWeights<f32>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_weights(&bytes)
}

/// Loads weights for `target`. A baseline file loads into a gated target
/// with freshly initialized gating subnets.
pub fn load_weights_for(path: impl AsRef<Path>, target: &ModelConfig, seed: u64) -> Result<ModelWeights<f32>> {
    let w = load_weights(path)?;
    if &w.config == target {
        return Ok(w);
    }
    let mut stored = w.config.clone();
    stored.gating_enabled = target.gating_enabled;
    stored.pool_frames = target.pool_frames;
    if &stored != target {
        return Err(Error::Config(format!(
            "weights were trained for {:?}, run config asks for {:?}",
            w.config, target
        )));
    }
    if target.gating_enabled && !w.config.gating_enabled {
        let mut g = w.with_gating(seed)?;
        g.config = target.clone();
        return Ok(g);
    }
    if !target.gating_enabled && w.config.gating_enabled {
        return Err(Error::Config("gated weights cannot run as a baseline".into()));
    }
    let mut w = w;
    w.config = target.clone();
    Ok(w)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(gating: bool) -> ModelConfig {
        ModelConfig {
            c_res: 4,
            c_conv: 6,
            c_gate: 2,
            freq_bins: 9,
            blocks_per_stack: 2,
            stacks: 2,
            gating_enabled: gating,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let mut w = init_weights::<f32>(&cfg(true), 3).unwrap();
        w.stats[1].bn2.var.data_mut()[2] = 0.123_456_79;
        w.roles = Some(vec![vec![ChannelRole::Removed, ChannelRole::Dynamic, ChannelRole::AlwaysOn, ChannelRole::Dynamic]; 4]);
        let bytes = encode_weights(&w).unwrap();
        assert_eq!(decode_weights(&bytes).unwrap(), w);
        assert_eq!(encode_weights(&decode_weights(&bytes).unwrap()).unwrap(), bytes);
    }

    #[test]
    fn corruption_is_detected() {
        let w = init_weights::<f32>(&cfg(false), 3).unwrap();
        let mut bytes = encode_weights(&w).unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 1;
        assert!(decode_weights(&bytes).unwrap_err().to_string().contains("checksum"));
        assert!(decode_weights(b"nonsense").is_err());
    }

    #[test]
    fn baseline_loads_into_gated_model() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("base.bin");
        let base = init_weights::<f32>(&cfg(false), 3).unwrap();
        save_weights(&p, &base).unwrap();
        let g = load_weights_for(&p, &cfg(true), 9).unwrap();
        assert!(g.config.gating_enabled);
        assert_eq!(g.params.gates.len(), 4);
        assert_eq!(g.params.blocks, base.params.blocks);
        let mut wrong = cfg(true);
        wrong.c_conv = 8;
        assert!(load_weights_for(&p, &wrong, 0).is_err());
    }
}
