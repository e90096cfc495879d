//! Binary checkpoint: magic, format version, a JSON header, then one
//! shape-prefixed little-endian f64 blob per tensor in header order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::nnet::Tensor;
use crate::preprocess::NormStats;

use super::{Result, TrainConfig, TrainError, TrainState};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"FUSETEN\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    config: TrainConfig,
    config_hash: String,
    norm: NormStats,
    step: u64,
    adam_g_step: u64,
    adam_d_step: u64,
    tensors: Vec<String>,
}

/// Hex SHA-256 of the config's JSON form.
pub fn config_hash(config: &TrainConfig) -> String {
    let json = serde_json::to_string(config).expect("config serializes");
    Sha256::digest(json.as_bytes())
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

fn write_tensor(w: &mut impl Write, t: &Tensor) -> std::io::Result<()> {
    w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
    for &d in t.shape() {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    for v in t.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_u32(r: &mut impl Read) -> std::io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> std::io::Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_tensor(r: &mut impl Read) -> Result<Tensor> {
    let ndim = read_u32(r)? as usize;
    if ndim > 8 {
        return Err(TrainError::Checkpoint(format!("tensor rank {ndim} is implausible")));
    }
    let shape = (0..ndim)
        .map(|_| read_u64(r).map(|d| d as usize))
        .collect::<std::io::Result<Vec<_>>>()?;
    let n: usize = shape.iter().product();
    let mut bytes = vec![0u8; n * 8];
    r.read_exact(&mut bytes)?;
    let data = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    Ok(Tensor::new(&shape, data)?)
}

fn named_tensors(s: &TrainState) -> Vec<(String, &Tensor)> {
    let mut out = Vec::new();
    for (n, t) in s.generator.params.iter().chain(s.discriminator.params.iter()) {
        out.push((n.to_string(), t));
    }
    for (tag, adam, names) in [
        ("adam_g", &s.adam_g, s.generator.params.names()),
        ("adam_d", &s.adam_d, s.discriminator.params.names()),
    ] {
        for (kind, moments) in [("m", &adam.m), ("v", &adam.v)] {
            for (n, t) in names.iter().zip(moments) {
                out.push((format!("{tag}.{kind}.{n}"), t));
            }
        }
    }
    out
}

impl TrainState {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let tensors = named_tensors(self);
        let header = Header {
            config: self.config.clone(),
            config_hash: config_hash(&self.config),
            norm: self.norm.clone(),
            step: self.step,
            adam_g_step: self.adam_g.step,
            adam_d_step: self.adam_d.step,
            tensors: tensors.iter().map(|(n, _)| n.clone()).collect(),
        };
        let json = serde_json::to_vec(&header)?;
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        w.write_all(&(json.len() as u64).to_le_bytes())?;
        w.write_all(&json)?;
        for (_, t) in &tensors {
            write_tensor(&mut w, t)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Rebuilds the networks from the stored configs, then checks every
    /// stored tensor against the expected name and shape.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(TrainError::Checkpoint("not a checkpoint file".into()));
        }
        let version = read_u32(&mut r)?;
        if version != CHECKPOINT_VERSION {
            return Err(TrainError::Checkpoint(format!("unsupported version {version}")));
        }
        let len = read_u64(&mut r)? as usize;
        let mut json = vec![0u8; len];
        r.read_exact(&mut json)?;
        let header: Header = serde_json::from_slice(&json)?;
        if config_hash(&header.config) != header.config_hash {
            return Err(TrainError::Checkpoint(
                "config hash does not match the stored config".into(),
            ));
        }

        let mut state = TrainState::new(header.config, header.norm)?;
        let expected: Vec<String> = named_tensors(&state).into_iter().map(|(n, _)| n).collect();
        if expected != header.tensors {
            return Err(TrainError::Checkpoint(format!(
                "stored tensors do not match the configured networks ({} vs {} entries)",
                header.tensors.len(),
                expected.len()
            )));
        }
        let mut loaded = Vec::with_capacity(expected.len());
        for name in expected {
            loaded.push((name, read_tensor(&mut r)?));
        }
        let mut it = loaded.into_iter();
        let ng = state.generator.params.len();
        let nd = state.discriminator.params.len();
        state.generator.params.load(it.by_ref().take(ng).collect())?;
        state.discriminator.params.load(it.by_ref().take(nd).collect())?;
        for (adam, n) in [(&mut state.adam_g, ng), (&mut state.adam_d, nd)] {
            for moments in [&mut adam.m, &mut adam.v] {
                for (slot, (name, t)) in moments.iter_mut().zip(it.by_ref().take(n)) {
                    if slot.shape() != t.shape() {
                        return Err(TrainError::Checkpoint(format!(
                            "{name}: shape {:?} != {:?}",
                            t.shape(),
                            slot.shape()
                        )));
                    }
                    *slot = t;
                }
            }
        }
        state.adam_g.step = header.adam_g_step;
        state.adam_d.step = header.adam_d_step;
        state.step = header.step;
        let mut rest = Vec::new();
        r.read_to_end(&mut rest)?;
        if !rest.is_empty() {
            return Err(TrainError::Checkpoint(format!("{} trailing bytes", rest.len())));
        }
        Ok(state)
    }
}
