//! Single-file checkpoints: magic `LAPC`, version, config hash, the resolved
//! config text, speaker list, progress counters and a named tensor table
//! holding parameters and Adam moments. Everything is little-endian.

use std::path::Path;

use super::config::{KeyValueConfig, RunConfig};
use super::optim::{AdamConfig, OptimizerState};
use super::SpeakerModel;
use crate::error::{Error, Result};
use crate::store::write_atomic;
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"LAPC";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    /// Speaker ids in classifier order.
    pub speakers: Vec<String>,
    /// Completed epochs, counting both stages.
    pub epoch: usize,
    /// Completed optimizer steps.
    pub step: u64,
    pub model: SpeakerModel,
    pub optimizer: OptimizerState,
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u32(out, s.len() as u32);
    out.extend_from_slice(s.as_bytes());
}

fn put_tensor(out: &mut Vec<u8>, name: &str, flags: u8, t: &Tensor) {
    put_str(out, name);
    out.push(flags);
    put_u32(out, t.rank() as u32);
    for &d in t.shape() {
        put_u64(out, d as u64);
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    path: &'a Path,
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn corrupt(&self, offset: usize, msg: impl Into<String>) -> Error {
        Error::Corrupt {
            path: self.path.to_path_buf(),
            offset: offset as u64,
            msg: msg.into(),
        }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(self.corrupt(self.pos, format!("unexpected end of file reading {what}"))),
        }
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4, what)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8, what)?.try_into().expect("8 bytes"),
        ))
    }

    fn string(&mut self, what: &str) -> Result<String> {
        let at = self.pos;
        let n = self.u32(what)? as usize;
        let raw = self.take(n, what)?;
        String::from_utf8(raw.to_vec())
            .map_err(|_| self.corrupt(at, format!("{what} is not UTF-8")))
    }

    fn tensor(&mut self) -> Result<(String, u8, Tensor, usize)> {
        let at = self.pos;
        let name = self.string("tensor name")?;
        let flags = self.u8("tensor flags")?;
        let rank = self.u32("tensor rank")? as usize;
        if rank > 8 {
            return Err(self.corrupt(at, format!("tensor `{name}` has implausible rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(self.u64("tensor dims")? as usize);
        }
        let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let numel = numel
            .filter(|&n| n <= (self.bytes.len() - self.pos) / 8)
            .ok_or_else(|| {
                self.corrupt(at, format!("tensor `{name}` shape {shape:?} exceeds file"))
            })?;
        let raw = self.take(8 * numel, "tensor data")?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| self.corrupt(at, e.to_string()))?;
        Ok((name, flags, t, at))
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let store = &self.model.backend.store;
        let mut out = Vec::new();
        out.extend_from_slice(&MAGIC);
        put_u32(&mut out, VERSION);
        out.extend_from_slice(&self.config.hash());
        put_str(&mut out, &self.config.to_text());
        put_u32(&mut out, self.speakers.len() as u32);
        for s in &self.speakers {
            put_str(&mut out, s);
        }
        put_u64(&mut out, self.epoch as u64);
        put_u64(&mut out, self.step);
        put_u64(&mut out, self.optimizer.step);
        put_u32(&mut out, 3 * store.len() as u32);
        for p in store.iter() {
            put_tensor(&mut out, &p.name, u8::from(p.decay), &p.value);
        }
        for (p, m) in store.iter().zip(&self.optimizer.m) {
            put_tensor(&mut out, &format!("adam.m.{}", p.name), 0, m);
        }
        for (p, v) in store.iter().zip(&self.optimizer.v) {
            put_tensor(&mut out, &format!("adam.v.{}", p.name), 0, v);
        }
        out
    }

    /// Parses a checkpoint image; `path` only labels errors. When `expected`
    /// is given its hash must match the stored one.
    pub fn from_bytes(path: &Path, bytes: &[u8], expected: Option<&RunConfig>) -> Result<Self> {
        let mut r = Reader {
            path,
            bytes,
            pos: 0,
        };
        let magic = r.take(4, "magic")?;
        if magic != MAGIC {
            return Err(Error::BadMagic {
                path: path.to_path_buf(),
                found: magic.try_into().expect("4 bytes"),
                expected: MAGIC,
            });
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(Error::BadVersion {
                path: path.to_path_buf(),
                found: version,
            });
        }
        let hash_at = r.pos;
        let hash: [u8; 32] = r.take(32, "config hash")?.try_into().expect("32 bytes");
        let text_at = r.pos;
        let text = r.string("config text")?;
        let config = RunConfig::from_text(&text, &format!("{} (embedded config)", path.display()))
            .map_err(|e| r.corrupt(text_at, e.to_string()))?;
        if config.hash() != hash {
            return Err(r.corrupt(hash_at, "config hash does not match embedded config"));
        }
        if let Some(exp) = expected {
            if exp.hash() != hash {
                return Err(Error::Config(format!(
                    "{}: checkpoint was written for a different configuration",
                    path.display()
                )));
            }
        }
        let n_speakers = r.u32("speaker count")? as usize;
        let mut speakers = Vec::with_capacity(n_speakers.min(1 << 20));
        for _ in 0..n_speakers {
            speakers.push(r.string("speaker id")?);
        }
        let epoch = r.u64("epoch")? as usize;
        let step = r.u64("step")?;
        let adam_step = r.u64("optimizer step")?;

        let count_at = r.pos;
        let count = r.u32("tensor count")? as usize;
        let mut model = SpeakerModel::init(&config, speakers.len())
            .map_err(|e| r.corrupt(text_at, e.to_string()))?;
        let store = &mut model.backend.store;
        if count != 3 * store.len() {
            return Err(r.corrupt(
                count_at,
                format!(
                    "expected {} tensors for this config, found {count}",
                    3 * store.len()
                ),
            ));
        }
        let mut optimizer = OptimizerState::new(store, AdamConfig::default());
        optimizer.config.weight_decay = if epoch > config.epochs {
            config.large_margin_weight_decay
        } else {
            config.adam.weight_decay
        };
        optimizer.step = adam_step;
        for section in 0..3 {
            for id in store.ids().collect::<Vec<_>>() {
                let (name, flags, t, at) = r.tensor()?;
                let p = store.get_mut(id);
                let want = match section {
                    0 => p.name.clone(),
                    1 => format!("adam.m.{}", p.name),
                    _ => format!("adam.v.{}", p.name),
                };
                if name != want {
                    return Err(r.corrupt(at, format!("expected tensor `{want}`, found `{name}`")));
                }
                if t.shape() != p.value.shape() {
                    return Err(r.corrupt(
                        at,
                        format!(
                            "tensor `{name}` has shape {:?}, expected {:?}",
                            t.shape(),
                            p.value.shape()
                        ),
                    ));
                }
                match section {
                    0 => {
                        if flags != u8::from(p.decay) {
                            return Err(r.corrupt(
                                at,
                                format!("decay flag of `{name}` disagrees with config"),
                            ));
                        }
                        p.value = t;
                    }
                    1 => optimizer.m[id.index()] = t,
                    _ => optimizer.v[id.index()] = t,
                }
            }
        }
        if r.pos != bytes.len() {
            return Err(r.corrupt(r.pos, "trailing bytes after tensor table"));
        }
        Ok(Self {
            config,
            speakers,
            epoch,
            step,
            model,
            optimizer,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path, expected: Option<&RunConfig>) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(path, &bytes, expected)
    }
}
