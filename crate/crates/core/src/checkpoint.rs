//! Binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      8 bytes  "LRDNCKPT"
//! version    u32
//! header     u32 length, UTF-8 JSON, u32 CRC32 of the JSON bytes
//! count      u32 number of tensor records
//! record     u16 name length, name, u8 dtype (1 = f32, 2 = f64),
//!            u8 rank, u64 per dim, u64 payload length, payload
//!            (row-major), u32 CRC32 over everything from the name length on
//! ```
//!
//! Tensor names: `param/<name>`, `buffer/<name>`, `center/c`,
//! `center/c_prev`, `adam/m/<name>`, `adam/v/<name>`.

use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::model::LrdNet;
use crate::tensor::{numel, DType, Scalar};
use crate::train::{Adam, TrainState};

pub const MAGIC: &[u8; 8] = b"LRDNCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    step: u64,
    center_step: u64,
    center_mu: f64,
    center_last_drift: f64,
    adam_t: u64,
    adam_lr: f64,
    adam_beta1: f64,
    adam_beta2: f64,
    adam_eps: f64,
    adam_weight_decay: f64,
    rng_seed: String,
    rng_stream: u64,
    rng_word_pos: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
    pub payload: Vec<u8>,
}

impl Record {
    fn new<T: Scalar>(name: impl Into<String>, shape: &[usize], data: &[T]) -> Self {
        let mut payload = Vec::with_capacity(data.len() * T::DTYPE.size());
        for &v in data {
            v.write_le(&mut payload);
        }
        Self {
            name: name.into(),
            dtype: T::DTYPE,
            shape: shape.to_vec(),
            payload,
        }
    }

    fn values<T: Scalar>(&self) -> Result<Vec<T>> {
        if self.dtype != T::DTYPE {
            return Err(Error::Checkpoint(format!(
                "tensor `{}` has dtype {:?}, expected {:?}",
                self.name,
                self.dtype,
                T::DTYPE
            )));
        }
        Ok(self.payload.chunks_exact(T::DTYPE.size()).map(T::read_le).collect())
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn unhex(s: &str) -> Result<[u8; 32]> {
    let bad = || Error::Checkpoint(format!("malformed rng seed `{s}`"));
    if s.len() != 64 {
        return Err(bad());
    }
    let mut out = [0u8; 32];
    for (i, o) in out.iter_mut().enumerate() {
        *o = u8::from_str_radix(&s[2 * i..2 * i + 2], 16).map_err(|_| bad())?;
    }
    Ok(out)
}

/// Serializes a training state.
pub fn to_bytes(state: &TrainState) -> Result<Vec<u8>> {
    let model = &state.model;
    let opt = &state.optimizer;
    let header = Header {
        config: model.cfg.clone(),
        step: state.step,
        center_step: model.center.step,
        center_mu: model.center.mu,
        center_last_drift: model.center.last_drift,
        adam_t: opt.t,
        adam_lr: opt.lr,
        adam_beta1: opt.beta1,
        adam_beta2: opt.beta2,
        adam_eps: opt.eps,
        adam_weight_decay: opt.weight_decay,
        rng_seed: hex(&state.rng.get_seed()),
        rng_stream: state.rng.get_stream(),
        rng_word_pos: state.rng.get_word_pos().to_string(),
    };
    let mut records = Vec::new();
    for p in model.store.params() {
        records.push(Record::new(format!("param/{}", p.name), p.tensor.shape(), p.tensor.data()));
    }
    for b in model.store.buffers() {
        records.push(Record::new(format!("buffer/{}", b.name), b.tensor.shape(), b.tensor.data()));
    }
    let d = model.center.dim();
    records.push(Record::new("center/c", &[d], &model.center.c));
    records.push(Record::new("center/c_prev", &[d], &model.center.c_prev));
    for (i, p) in model.store.params().iter().enumerate() {
        records.push(Record::new(format!("adam/m/{}", p.name), p.tensor.shape(), &opt.m[i]));
        records.push(Record::new(format!("adam/v/{}", p.name), p.tensor.shape(), &opt.v[i]));
    }

    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&crc32fast::hash(&json).to_le_bytes());
    out.extend_from_slice(&(records.len() as u32).to_le_bytes());
    for r in &records {
        let start = out.len();
        out.extend_from_slice(&(r.name.len() as u16).to_le_bytes());
        out.extend_from_slice(r.name.as_bytes());
        out.push(r.dtype.code());
        out.push(r.shape.len() as u8);
        for &dim in &r.shape {
            out.extend_from_slice(&(dim as u64).to_le_bytes());
        }
        out.extend_from_slice(&(r.payload.len() as u64).to_le_bytes());
        out.extend_from_slice(&r.payload);
        let crc = crc32fast::hash(&out[start..]);
        out.extend_from_slice(&crc.to_le_bytes());
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Checkpoint(format!("truncated file while reading {what} at byte {}", self.pos))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

/// Parsed but not yet applied checkpoint.
pub struct RawCheckpoint {
    header: Header,
    pub records: Vec<Record>,
}

impl RawCheckpoint {
    pub fn config(&self) -> &ModelConfig {
        &self.header.config
    }

    fn record(&self, name: &str) -> Result<&Record> {
        self.records
            .iter()
            .find(|r| r.name == name)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{name}`")))
    }

    fn tensor<T: Scalar>(&self, name: &str, expected: &[usize]) -> Result<Vec<T>> {
        let r = self.record(name)?;
        if r.shape != expected {
            return Err(Error::TensorShape {
                name: name.to_string(),
                expected: expected.to_vec(),
                found: r.shape.clone(),
            });
        }
        r.values()
    }

    /// Rebuilds the training state on the stored configuration.
    pub fn restore(&self) -> Result<TrainState> {
        self.restore_with(&self.header.config)
    }

    /// Rebuilds the training state on `cfg`, checking every tensor shape
    /// against the architecture it implies.
    pub fn restore_with(&self, cfg: &ModelConfig) -> Result<TrainState> {
        let h = &self.header;
        let mut model = LrdNet::<f32>::new(cfg)?;
        for p in model.store.params_mut() {
            let shape = p.tensor.shape().to_vec();
            let data = self.tensor::<f32>(&format!("param/{}", p.name), &shape)?;
            p.tensor.data_mut().copy_from_slice(&data);
        }
        for b in model.store.buffers_mut() {
            let shape = b.tensor.shape().to_vec();
            let data = self.tensor::<f32>(&format!("buffer/{}", b.name), &shape)?;
            b.tensor.data_mut().copy_from_slice(&data);
        }
        let d = model.center.dim();
        model.center.c = self.tensor("center/c", &[d])?;
        model.center.c_prev = self.tensor("center/c_prev", &[d])?;
        model.center.step = h.center_step;
        model.center.mu = h.center_mu;
        model.center.last_drift = h.center_last_drift;

        let mut optimizer = Adam::new(&model.store, h.adam_lr, h.adam_beta1, h.adam_beta2, h.adam_weight_decay);
        optimizer.eps = h.adam_eps;
        optimizer.t = h.adam_t;
        for (i, p) in model.store.params().iter().enumerate() {
            optimizer.m[i] = self.tensor(&format!("adam/m/{}", p.name), p.tensor.shape())?;
            optimizer.v[i] = self.tensor(&format!("adam/v/{}", p.name), p.tensor.shape())?;
        }

        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::from_seed(unhex(&h.rng_seed)?);
        rng.set_stream(h.rng_stream);
        rng.set_word_pos(
            h.rng_word_pos
                .parse()
                .map_err(|_| Error::Checkpoint(format!("malformed rng position `{}`", h.rng_word_pos)))?,
        );
        Ok(TrainState {
            model,
            optimizer,
            rng,
            step: h.step,
        })
    }
}

/// Parses and integrity-checks a checkpoint.
pub fn parse(bytes: &[u8]) -> Result<RawCheckpoint> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(MAGIC.len(), "magic")? != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
    }
    let version = r.u32("version")?;
    if version != FORMAT_VERSION {
        return Err(Error::VersionMismatch {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let len = r.u32("header length")? as usize;
    let json = r.take(len, "header")?;
    if r.u32("header checksum")? != crc32fast::hash(json) {
        return Err(Error::Checksum { name: "header".into() });
    }
    let header: Header = serde_json::from_slice(json)?;
    let count = r.u32("record count")?;
    let mut records = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let start = r.pos;
        let name_len = r.u16("record name length")? as usize;
        let name = String::from_utf8(r.take(name_len, "record name")?.to_vec())
            .map_err(|_| Error::Checkpoint(format!("record name at byte {start} is not UTF-8")))?;
        let code = r.u8("dtype")?;
        let dtype = DType::from_code(code)
            .ok_or_else(|| Error::Checkpoint(format!("tensor `{name}` has unknown dtype code {code}")))?;
        let rank = r.u8("rank")? as usize;
        let shape = (0..rank)
            .map(|_| r.u64("shape").map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let plen = r.u64("payload length")? as usize;
        let payload = r.take(plen, "payload")?.to_vec();
        let end = r.pos;
        let crc = r.u32("record checksum")?;
        if crc != crc32fast::hash(&bytes[start..end]) {
            return Err(Error::Checksum { name });
        }
        if plen != numel(&shape) * dtype.size() {
            return Err(Error::Checkpoint(format!(
                "tensor `{name}` payload of {plen} bytes does not match shape {shape:?}"
            )));
        }
        records.push(Record {
            name,
            dtype,
            shape,
            payload,
        });
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(RawCheckpoint { header, records })
}

pub fn save_checkpoint(path: &Path, state: &TrainState) -> Result<()> {
    std::fs::write(path, to_bytes(state)?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<TrainState> {
    parse(&std::fs::read(path)?)?.restore()
}
