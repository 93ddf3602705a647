//! Binary checkpoint format. Little-endian throughout. Layout:
//!
//! ```text
//! "FREGAN1\0"  u32 count  count x entry          parameters and buffers
//! "ADAMST1\0"  u32 count  count x entry          optimizer moments and step
//! entry := u16 name_len | name utf-8 | u8 rank(=4) | 4 x u32 extents | f32 values
//! ```
//!
//! Parameter names carry a `gen.` or `disc.` prefix. Optimizer entries use
//! `<prefix>.<param>.m` / `.v`, and the step counters ride along as
//! single-value tensors named `gen.t` / `disc.t`. Round trips are bit-exact.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::ParameterSet;
use crate::optim::AdamState;
use crate::tensor::{Shape, Tensor};

type TensorMap = BTreeMap<String, Tensor<f32>>;

const PARAM_MAGIC: &[u8; 8] = b"FREGAN1\0";
const ADAM_MAGIC: &[u8; 8] = b"ADAMST1\0";

#[derive(Clone, Debug, PartialEq)]
pub struct TrainingSnapshot {
    pub gen_params: ParameterSet,
    pub disc_params: ParameterSet,
    pub gen_state: AdamState,
    pub disc_state: AdamState,
}

fn is_buffer_name(name: &str) -> bool {
    name.ends_with(".running_mean") || name.ends_with(".running_var")
}

// -- writing ----------------------------------------------------------------

fn push_entry(buf: &mut Vec<u8>, name: &str, tensor: &Tensor<f32>) -> Result<()> {
    if name.len() > u16::MAX as usize {
        return Err(Error::Contract(format!("parameter name too long: {name}")));
    }
    buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
    buf.extend_from_slice(name.as_bytes());
    buf.push(4u8);
    let s = tensor.shape();
    for extent in [s.n, s.c, s.h, s.w] {
        if extent > u32::MAX as usize {
            return Err(Error::Contract(format!("extent {extent} of {name} too large")));
        }
        buf.extend_from_slice(&(extent as u32).to_le_bytes());
    }
    for &v in tensor.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    Ok(())
}

fn push_section(
    buf: &mut Vec<u8>,
    magic: &[u8; 8],
    entries: &BTreeMap<String, &Tensor<f32>>,
) -> Result<()> {
    buf.extend_from_slice(magic);
    buf.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, tensor) in entries {
        push_entry(buf, name, tensor)?;
    }
    Ok(())
}

fn step_tensor(t: u64) -> Result<Tensor<f32>> {
    if t > (1 << 24) {
        return Err(Error::Contract(format!("step counter {t} exceeds exact f32 range")));
    }
    Ok(Tensor::from_vec(Shape::new(1, 1, 1, 1), vec![t as f32]).expect("one value"))
}

pub fn save_checkpoint(snapshot: &TrainingSnapshot, path: &Path) -> Result<()> {
    let mut params: BTreeMap<String, &Tensor<f32>> = BTreeMap::new();
    for (prefix, set) in [("gen", &snapshot.gen_params), ("disc", &snapshot.disc_params)] {
        for (name, entry) in set.iter() {
            params.insert(format!("{prefix}.{name}"), &entry.tensor);
        }
    }
    let gen_t = step_tensor(snapshot.gen_state.t)?;
    let disc_t = step_tensor(snapshot.disc_state.t)?;
    let mut opt: BTreeMap<String, &Tensor<f32>> = BTreeMap::new();
    opt.insert("gen.t".into(), &gen_t);
    opt.insert("disc.t".into(), &disc_t);
    for (prefix, state) in [("gen", &snapshot.gen_state), ("disc", &snapshot.disc_state)] {
        for (name, tensor) in &state.m {
            opt.insert(format!("{prefix}.{name}.m"), tensor);
        }
        for (name, tensor) in &state.v {
            opt.insert(format!("{prefix}.{name}.v"), tensor);
        }
    }
    let mut buf = Vec::new();
    push_section(&mut buf, PARAM_MAGIC, &params)?;
    push_section(&mut buf, ADAM_MAGIC, &opt)?;
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

// -- reading ----------------------------------------------------------------

struct Cursor<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn fail(&self, detail: impl Into<String>) -> Error {
        Error::Format { offset: self.pos as u64, detail: detail.into() }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.data.len() {
            return Err(self.fail(format!(
                "truncated: wanted {n} bytes, {} remain",
                self.data.len() - self.pos
            )));
        }
        let slice = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn expect_magic(&mut self, magic: &[u8; 8], what: &str) -> Result<()> {
        let at = self.pos;
        let got = self.take(8)?;
        if got != magic {
            return Err(Error::Format {
                offset: at as u64,
                detail: format!("bad {what} magic: {got:02x?}"),
            });
        }
        Ok(())
    }

    fn entry(&mut self) -> Result<(String, Tensor<f32>)> {
        let name_len = self.u16()? as usize;
        let name_at = self.pos;
        let name = std::str::from_utf8(self.take(name_len)?)
            .map_err(|_| Error::Format {
                offset: name_at as u64,
                detail: "parameter name is not UTF-8".into(),
            })?
            .to_string();
        let rank = self.u8()?;
        if rank != 4 {
            return Err(self.fail(format!("unsupported rank {rank} for {name}")));
        }
        let mut extents = [0usize; 4];
        for e in &mut extents {
            *e = self.u32()? as usize;
        }
        let numel: u128 = extents.iter().map(|&e| e as u128).product();
        let bytes = numel.checked_mul(4).filter(|&b| b <= (self.data.len() - self.pos) as u128);
        let byte_len = bytes.ok_or_else(|| {
            self.fail(format!("truncated: {numel} values promised for {name}"))
        })? as usize;
        let raw = self.take(byte_len)?;
        let values = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        let shape = Shape::new(extents[0], extents[1], extents[2], extents[3]);
        Ok((name, Tensor::from_vec(shape, values).expect("sized above")))
    }

    fn section(&mut self, magic: &[u8; 8], what: &str) -> Result<TensorMap> {
        self.expect_magic(magic, what)?;
        let count = self.u32()?;
        let mut entries = BTreeMap::new();
        for _ in 0..count {
            let at = self.pos;
            let (name, tensor) = self.entry()?;
            if entries.insert(name.clone(), tensor).is_some() {
                return Err(Error::Format {
                    offset: at as u64,
                    detail: format!("duplicate entry {name}"),
                });
            }
        }
        Ok(entries)
    }
}

fn strip_prefix(name: &str, pos: usize) -> Result<(&str, &str)> {
    name.split_once('.')
        .filter(|(p, rest)| (*p == "gen" || *p == "disc") && !rest.is_empty())
        .ok_or_else(|| Error::Format {
            offset: pos as u64,
            detail: format!("entry {name} lacks a gen./disc. prefix"),
        })
}

fn split_networks(entries: TensorMap) -> Result<(TensorMap, TensorMap)> {
    let mut gen = BTreeMap::new();
    let mut disc = BTreeMap::new();
    for (name, tensor) in entries {
        let (prefix, rest) = strip_prefix(&name, 0)?;
        let rest = rest.to_string();
        if prefix == "gen" {
            gen.insert(rest, tensor);
        } else {
            disc.insert(rest, tensor);
        }
    }
    Ok((gen, disc))
}

fn param_set(entries: TensorMap) -> Result<ParameterSet> {
    let mut set = ParameterSet::new();
    for (name, tensor) in entries {
        if is_buffer_name(&name) {
            set.insert_buffer(name, tensor)?;
        } else {
            set.insert_trainable(name, tensor)?;
        }
    }
    Ok(set)
}

fn adam_state(entries: TensorMap) -> Result<AdamState> {
    let mut m = BTreeMap::new();
    let mut v = BTreeMap::new();
    let mut t = None;
    for (name, tensor) in entries {
        if name == "t" {
            let value = tensor.data().first().copied().unwrap_or(-1.0);
            if value < 0.0 || value.fract() != 0.0 || tensor.numel() != 1 {
                return Err(Error::Format {
                    offset: 0,
                    detail: format!("step counter entry holds {value}, not a step count"),
                });
            }
            t = Some(value as u64);
        } else if let Some(param) = name.strip_suffix(".m") {
            m.insert(param.to_string(), tensor);
        } else if let Some(param) = name.strip_suffix(".v") {
            v.insert(param.to_string(), tensor);
        } else {
            return Err(Error::Format {
                offset: 0,
                detail: format!("unrecognized optimizer entry {name}"),
            });
        }
    }
    if m.keys().ne(v.keys()) {
        return Err(Error::Format {
            offset: 0,
            detail: "optimizer m/v entries do not pair up".into(),
        });
    }
    let t = t.ok_or(Error::Format { offset: 0, detail: "missing step counter entry".into() })?;
    Ok(AdamState { m, v, t })
}

pub fn load_checkpoint(path: &Path) -> Result<TrainingSnapshot> {
    let data = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut cur = Cursor { data: &data, pos: 0 };
    let params = cur.section(PARAM_MAGIC, "parameter section")?;
    let opt = cur.section(ADAM_MAGIC, "optimizer section")?;
    if cur.pos != data.len() {
        return Err(cur.fail(format!("{} trailing bytes", data.len() - cur.pos)));
    }
    let (gen_entries, disc_entries) = split_networks(params)?;
    let (gen_opt, disc_opt) = split_networks(opt)?;
    Ok(TrainingSnapshot {
        gen_params: param_set(gen_entries)?,
        disc_params: param_set(disc_entries)?,
        gen_state: adam_state(gen_opt)?,
        disc_state: adam_state(disc_opt)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Discriminator, DiscriminatorConfig, Generator, GeneratorConfig};

    fn sample_snapshot() -> TrainingSnapshot {
        let gen = Generator::build(GeneratorConfig::new(32, 2), 1).unwrap();
        let disc = Discriminator::build(DiscriminatorConfig::new(32, 2), 2).unwrap();
        let mut gen_state = AdamState::for_params(&gen.params);
        let mut disc_state = AdamState::for_params(&disc.params);
        gen_state.t = 17;
        disc_state.t = 34;
        // Non-trivial moments so the round trip covers real content.
        for (i, tensor) in gen_state.m.values_mut().enumerate() {
            for (j, slot) in tensor.data_mut().iter_mut().enumerate() {
                *slot = (i as f32 + 1.0) * 0.01 + j as f32 * 1e-4;
            }
        }
        for tensor in disc_state.v.values_mut() {
            for slot in tensor.data_mut() {
                *slot = 0.5;
            }
        }
        TrainingSnapshot {
            gen_params: gen.params,
            disc_params: disc.params,
            gen_state,
            disc_state,
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let snapshot = sample_snapshot();
        save_checkpoint(&snapshot, &path).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded, snapshot);
    }

    #[test]
    fn loaded_buffers_stay_non_trainable() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&sample_snapshot(), &path).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        let trainable: Vec<&String> =
            loaded.gen_params.trainable_iter().map(|(n, _)| n).collect();
        assert!(trainable.iter().all(|n| !n.contains("running_")));
        assert!(loaded.gen_params.get("enc1.bn.running_var").is_ok());
    }

    #[test]
    fn bad_magic_is_rejected_with_offset() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&sample_snapshot(), &path).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes[0] ^= 0xff;
        fs::write(&path, &bytes).unwrap();
        match load_checkpoint(&path).unwrap_err() {
            Error::Format { offset, .. } => assert_eq!(offset, 0),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn truncation_anywhere_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&sample_snapshot(), &path).unwrap();
        let bytes = fs::read(&path).unwrap();
        for cut in [4usize, 9, 13, 40, bytes.len() / 2, bytes.len() - 1] {
            fs::write(&path, &bytes[..cut]).unwrap();
            assert!(
                matches!(load_checkpoint(&path), Err(Error::Format { .. })),
                "cut at {cut} was accepted"
            );
        }
    }

    #[test]
    fn trailing_bytes_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&sample_snapshot(), &path).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes.push(0);
        fs::write(&path, &bytes).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Format { .. })));
    }

    #[test]
    fn loaded_parameters_rebuild_working_models() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&sample_snapshot(), &path).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        let gen = Generator::from_params(loaded.gen_params).unwrap();
        assert_eq!(gen.config.image_size, 32);
        let disc = Discriminator::from_params(loaded.disc_params, 32).unwrap();
        assert_eq!(disc.config.base_filters, 2);
    }
}
