//! Binary checkpoint container.
//!
//! Layout (little-endian): `"VAGC"`, version `u32`, tensor count `u32`, then
//! per tensor a `u16` name length, the UTF-8 name, a `u8` rank, `u32` dims
//! and row-major `f32` data; finally a `u32`-prefixed UTF-8 JSON trailer.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ForwardSettings, Model};
use crate::tensor::{ParamStore, Tensor};
use crate::text::{TextProcessor, TextProcessorRecord};
use crate::train::TrainConfig;

pub const MAGIC: &[u8; 4] = b"VAGC";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub train: TrainConfig,
    pub src_vocab_size: usize,
    pub tgt_vocab_size: usize,
    pub epoch: usize,
    pub step: u64,
    pub best_bleu: f64,
    pub text: TextProcessorRecord,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub params: ParamStore<f32>,
    pub meta: CheckpointMeta,
}

impl Checkpoint {
    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        let count = u32::try_from(self.params.len())
            .map_err(|_| Error::Format("too many tensors".into()))?;
        w.write_all(&count.to_le_bytes())?;
        for (_, name, t) in self.params.iter() {
            let len = u16::try_from(name.len())
                .map_err(|_| Error::Format(format!("name too long: {name}")))?;
            w.write_all(&len.to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            let rank = u8::try_from(t.shape().len())
                .map_err(|_| Error::Format("rank too large".into()))?;
            w.write_all(&[rank])?;
            for &d in t.shape() {
                let d =
                    u32::try_from(d).map_err(|_| Error::Format("dimension too large".into()))?;
                w.write_all(&d.to_le_bytes())?;
            }
            let mut buf = Vec::with_capacity(t.numel() * 4);
            for v in t.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        let json = serde_json::to_vec(&self.meta)?;
        let len =
            u32::try_from(json.len()).map_err(|_| Error::Format("trailer too large".into()))?;
        w.write_all(&len.to_le_bytes())?;
        w.write_all(&json)?;
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut f)?;
        f.flush()?;
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        let mut cur = Cursor {
            bytes: &bytes,
            pos: 0,
        };
        if cur.take(4)? != MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let version = cur.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!(
                "unsupported checkpoint version {version}"
            )));
        }
        let count = cur.u32()?;
        let mut params = ParamStore::new();
        for _ in 0..count {
            let len = u16::from_le_bytes(cur.take(2)?.try_into().expect("2 bytes")) as usize;
            let name = std::str::from_utf8(cur.take(len)?)
                .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?
                .to_string();
            let rank = cur.take(1)?[0] as usize;
            let shape = (0..rank)
                .map(|_| cur.u32().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let numel = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| Error::Format("tensor size overflows".into()))?;
            let raw = cur.take(
                numel
                    .checked_mul(4)
                    .ok_or_else(|| Error::Format("tensor size overflows".into()))?,
            )?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            params
                .add(name, Tensor::new(shape, data)?)
                .map_err(|e| Error::Format(e.to_string()))?;
        }
        let len = cur.u32()? as usize;
        let meta: CheckpointMeta = serde_json::from_slice(cur.take(len)?)?;
        if cur.pos != bytes.len() {
            return Err(Error::Format(format!(
                "{} trailing bytes after checkpoint",
                bytes.len() - cur.pos
            )));
        }
        Ok(Checkpoint { params, meta })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path)
            .map_err(|e| Error::Input(format!("{}: {e}", path.display())))?;
        Self::read_from(std::io::BufReader::new(f))
    }

    /// Rebuilds the model layout and text pipeline, checking every tensor.
    pub fn restore(&self) -> Result<(Model, TextProcessor)> {
        let m = &self.meta;
        let model = Model::new(m.train.model.clone(), m.src_vocab_size, m.tgt_vocab_size)?;
        model.check_params(&self.params)?;
        let text = TextProcessor::from_record(&m.text)?;
        if text.src_vocab.len() != m.src_vocab_size || text.tgt_vocab.len() != m.tgt_vocab_size {
            return Err(Error::Format(
                "vocabulary sizes disagree with the stored parameters".into(),
            ));
        }
        Ok((model, text))
    }

    pub fn settings(&self) -> ForwardSettings {
        self.meta.train.forward_settings()
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format("checkpoint is truncated".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }
}
