//! Binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic "CPGECKPT" | u32 version
//! u64 len | model config (key=value text)
//! u64 len | vocabulary (one regular token per line)
//! u64 len | optimizer header (key=value text, empty when absent)
//! u32 n   | n × parameter record
//! u32 m   | m × velocity record (m == 0 without optimizer state)
//!
//! record: u32 name_len | name | u32 ndim | ndim × u64 dim | numel × f64
//! ```

use std::fs;
use std::path::Path;

use super::Vocabulary;
use crate::error::{Error, Result};
use crate::model::{parse_key_values, CopyGecModel, ModelConfig, ParamStore};
use crate::tensor::Tensor;
use crate::train::OptimizerState;

const MAGIC: &[u8; 8] = b"CPGECKPT";
const VERSION: u32 = 1;

/// Everything persisted by [`save_checkpoint`].
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub vocab: Vocabulary,
    pub params: ParamStore,
    pub optimizer: Option<OptimizerState>,
}

impl Checkpoint {
    /// Rebuilds the model, checking that every parameter is present with the
    /// shape the configuration implies.
    pub fn into_model(self) -> Result<(CopyGecModel, Vocabulary, Option<OptimizerState>)> {
        let mut model = CopyGecModel::new(self.config, 0)?;
        load_params_checked(&mut model, &self.params)?;
        Ok((model, self.vocab, self.optimizer))
    }
}

/// Copies `params` into `model`, failing with a per-parameter diff when the
/// names or shapes disagree.
pub fn load_params_checked(model: &mut CopyGecModel, params: &ParamStore) -> Result<()> {
    let mut diffs = Vec::new();
    for (_, name, t) in model.params.iter() {
        match params.id(name).map(|i| params.get(i)) {
            None => diffs.push(format!("{name}: missing from checkpoint")),
            Some(src) if src.shape() != t.shape() => diffs.push(format!("{name}: checkpoint {:?} vs model {:?}", src.shape(), t.shape())),
            Some(_) => {}
        }
    }
    for (_, name, _) in params.iter() {
        if model.params.id(name).is_none() {
            diffs.push(format!("{name}: not in model"));
        }
    }
    if !diffs.is_empty() {
        return Err(Error::Checkpoint(format!("parameter mismatch: {}", diffs.join("; "))));
    }
    model.load_params_from(params, |_| true)?;
    Ok(())
}

struct Writer(Vec<u8>);

impl Writer {
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn text(&mut self, s: &str) {
        self.u64(s.len() as u64);
        self.0.extend_from_slice(s.as_bytes());
    }
    fn record(&mut self, name: &str, shape: &[usize], data: &[f64]) {
        self.u32(name.len() as u32);
        self.0.extend_from_slice(name.as_bytes());
        self.u32(shape.len() as u32);
        for &d in shape {
            self.u64(d as u64);
        }
        for &x in data {
            self.0.extend_from_slice(&x.to_le_bytes());
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn text(&mut self) -> Result<String> {
        let n = self.u64()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Checkpoint("section is not UTF-8".into()))
    }
    fn record(&mut self) -> Result<(String, Tensor)> {
        let n = self.u32()? as usize;
        let name = String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))?;
        let ndim = self.u32()? as usize;
        let shape = (0..ndim).map(|_| self.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let numel: usize = shape.iter().product();
        let bytes = self.take(numel.checked_mul(8).ok_or_else(|| Error::Checkpoint(format!("{name}: absurd shape {shape:?}")))?)?;
        let data = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        Ok((name, Tensor::new(shape, data)?))
    }
}

pub fn encode_checkpoint(model: &CopyGecModel, vocab: &Vocabulary, optimizer: Option<&OptimizerState>) -> Vec<u8> {
    let mut w = Writer(Vec::new());
    w.0.extend_from_slice(MAGIC);
    w.u32(VERSION);
    w.text(&model.config.to_text());
    w.text(&vocab.to_text());
    w.text(&optimizer.map(OptimizerState::header_text).unwrap_or_default());
    w.u32(model.params.len() as u32);
    for (_, name, t) in model.params.iter() {
        w.record(name, t.shape(), t.data());
    }
    match optimizer {
        Some(o) => {
            w.u32(o.velocity.len() as u32);
            for ((_, name, t), v) in model.params.iter().zip(&o.velocity) {
                w.record(name, t.shape(), v);
            }
        }
        None => w.u32(0),
    }
    w.0
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported checkpoint version {version} (expected {VERSION})")));
    }
    let config = ModelConfig::from_text(&r.text()?)?;
    let vocab = Vocabulary::from_text(&r.text()?)?;
    let opt_header = r.text()?;
    let n = r.u32()? as usize;
    let mut params = ParamStore::new();
    for _ in 0..n {
        let (name, t) = r.record()?;
        if params.id(&name).is_some() {
            return Err(Error::Checkpoint(format!("duplicate parameter {name}")));
        }
        params.insert(name, t);
    }
    let m = r.u32()? as usize;
    let mut velocity = Vec::with_capacity(m);
    for i in 0..m {
        let (name, t) = r.record()?;
        let expect = params.iter().nth(i).map(|(_, n, p)| (n.to_string(), p.shape().to_vec()));
        if expect.as_ref().map(|(n, s)| (n.as_str(), s.as_slice())) != Some((name.as_str(), t.shape())) {
            return Err(Error::Checkpoint(format!("velocity record {name} does not match parameter {i}")));
        }
        velocity.push(t.into_data());
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    if config.vocab_size != vocab.len() {
        return Err(Error::Checkpoint(format!("config vocab_size {} but vocabulary has {} entries", config.vocab_size, vocab.len())));
    }
    let optimizer = if opt_header.is_empty() {
        None
    } else {
        Some(OptimizerState::from_header(&parse_key_values(&opt_header)?, velocity)?)
    };
    Ok(Checkpoint {
        config,
        vocab,
        params,
        optimizer,
    })
}

pub fn save_checkpoint(path: &Path, model: &CopyGecModel, vocab: &Vocabulary, optimizer: Option<&OptimizerState>) -> Result<()> {
    fs::write(path, encode_checkpoint(model, vocab, optimizer)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}
