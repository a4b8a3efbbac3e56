//! Binary checkpoints.
//!
//! Layout, all little-endian: the magic `HRGN1`, a `u32` format version, a
//! `u64` manifest byte length, the manifest (`u32` entry count, then per entry
//! `u32` name length, name bytes, `u8` dtype (0 = f64), `u32` rank, `u64`
//! dims), then every tensor's f64 payload in manifest order.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use priorscan_autodiff::{AdamW, AdamWConfig, ParamStore, Tensor};

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::model::Stage;

pub const MAGIC: &[u8; 5] = b"HRGN1";
pub const VERSION: u32 = 1;
const DTYPE_F64: u8 = 0;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub stage: Stage,
    pub epoch: u64,
    pub best_bleu4: f64,
    pub seed: u64,
    pub model: ModelConfig,
    pub vocab_size: usize,
    pub vocab_fingerprint: u32,
    pub max_offset: usize,
    pub params: ParamStore,
    pub optimizer: AdamW,
}

fn format_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Format(msg.into()))
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return format_err("checkpoint truncated");
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

/// Serializes named tensors in the given order.
pub fn encode_tensors(entries: &[(String, Tensor)]) -> Vec<u8> {
    let mut manifest = Vec::new();
    manifest.extend((entries.len() as u32).to_le_bytes());
    for (name, t) in entries {
        manifest.extend((name.len() as u32).to_le_bytes());
        manifest.extend(name.as_bytes());
        manifest.push(DTYPE_F64);
        manifest.extend((t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            manifest.extend((d as u64).to_le_bytes());
        }
    }
    let mut out = Vec::with_capacity(manifest.len() + 17);
    out.extend(MAGIC);
    out.extend(VERSION.to_le_bytes());
    out.extend((manifest.len() as u64).to_le_bytes());
    out.extend(manifest);
    for (_, t) in entries {
        for x in t.data() {
            out.extend(x.to_le_bytes());
        }
    }
    out
}

pub fn decode_tensors(bytes: &[u8]) -> Result<Vec<(String, Tensor)>> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(5)? != MAGIC {
        return format_err("not a checkpoint (bad magic)");
    }
    let version = r.u32()?;
    if version != VERSION {
        return format_err(format!("unsupported checkpoint version {version}"));
    }
    let manifest_len = r.u64()? as usize;
    let manifest_end = r.pos + manifest_len;
    let count = r.u32()? as usize;
    let mut heads = Vec::with_capacity(count);
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = String::from_utf8(r.take(len)?.to_vec()).map_err(|e| Error::Format(e.to_string()))?;
        if r.u8()? != DTYPE_F64 {
            return format_err(format!("tensor {name} has an unsupported dtype"));
        }
        let rank = r.u32()? as usize;
        let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        heads.push((name, shape));
    }
    if r.pos != manifest_end {
        return format_err("manifest length mismatch");
    }
    let mut out = Vec::with_capacity(count);
    for (name, shape) in heads {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        let t = Tensor::new(shape, data).map_err(|e| Error::Format(format!("{name}: {e}")))?;
        out.push((name, t));
    }
    if r.pos != bytes.len() {
        return format_err("trailing bytes after checkpoint payload");
    }
    Ok(out)
}

fn values(v: Vec<f64>) -> Tensor {
    Tensor::vector(v).expect("non-empty")
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut entries = vec![
            (
                "meta.run".to_string(),
                values(vec![
                    self.stage.number() as f64,
                    self.epoch as f64,
                    self.best_bleu4,
                    (self.seed & 0xffff_ffff) as f64,
                    (self.seed >> 32) as f64,
                    self.vocab_size as f64,
                    self.vocab_fingerprint as f64,
                    self.max_offset as f64,
                ]),
            ),
            ("meta.model".to_string(), values(self.model.to_values())),
        ];
        let c = self.optimizer.config;
        entries.push((
            "meta.optim".to_string(),
            values(vec![
                self.optimizer.step_count() as f64,
                c.lr,
                c.beta1,
                c.beta2,
                c.eps,
                c.weight_decay,
            ]),
        ));
        for (name, t) in self.params.iter() {
            entries.push((format!("param.{name}"), t.clone()));
        }
        for (name, m, v) in self.optimizer.moments() {
            entries.push((format!("optim.m.{name}"), values(m.to_vec())));
            entries.push((format!("optim.v.{name}"), values(v.to_vec())));
        }
        encode_tensors(&entries)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut meta: BTreeMap<String, Tensor> = BTreeMap::new();
        let mut params = ParamStore::new();
        let mut moments: BTreeMap<String, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
        for (name, t) in decode_tensors(bytes)? {
            if let Some(p) = name.strip_prefix("param.") {
                params.insert(p, t);
            } else if let Some(p) = name.strip_prefix("optim.m.") {
                moments.entry(p.to_string()).or_default().0 = t.into_data();
            } else if let Some(p) = name.strip_prefix("optim.v.") {
                moments.entry(p.to_string()).or_default().1 = t.into_data();
            } else if name.starts_with("meta.") {
                meta.insert(name, t);
            } else {
                return format_err(format!("unexpected checkpoint entry {name}"));
            }
        }
        let get = |k: &str, n: usize| -> Result<Vec<f64>> {
            match meta.get(k) {
                Some(t) if t.len() == n => Ok(t.data().to_vec()),
                _ => format_err(format!("checkpoint lacks a valid {k}")),
            }
        };
        let run = get("meta.run", 8)?;
        let model = ModelConfig::from_values(meta.get("meta.model").map(Tensor::data).unwrap_or(&[]))?;
        let o = get("meta.optim", 6)?;
        for (name, (m, v)) in &moments {
            let expected = params.get(name).map(Tensor::len);
            if expected != Some(m.len()) || expected != Some(v.len()) {
                return format_err(format!("optimizer moments for {name} do not match its parameter"));
            }
        }
        let stage = Stage::from_number(run[0] as u64).map_err(|e| Error::Format(e.to_string()))?;
        Ok(Checkpoint {
            stage,
            epoch: run[1] as u64,
            best_bleu4: run[2],
            seed: run[3] as u64 | ((run[4] as u64) << 32),
            vocab_size: run[5] as usize,
            vocab_fingerprint: run[6] as u32,
            max_offset: run[7] as usize,
            model,
            params,
            optimizer: AdamW::restore(
                AdamWConfig {
                    lr: o[1],
                    beta1: o[2],
                    beta2: o[3],
                    eps: o[4],
                    weight_decay: o[5],
                },
                o[0] as u64,
                moments,
            ),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tensor_codec_round_trip() {
        let entries = vec![
            ("a".to_string(), Tensor::matrix(2, 3, vec![1., 2., 3., 4., 5., -6.5]).unwrap()),
            ("b.c".to_string(), Tensor::scalar(f64::MIN_POSITIVE)),
        ];
        let bytes = encode_tensors(&entries);
        assert_eq!(&bytes[..5], b"HRGN1");
        assert_eq!(decode_tensors(&bytes).unwrap(), entries);
        assert!(decode_tensors(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_tensors(&bad), Err(Error::Format(_))));
    }
}
