//! Binary checkpoints.
//!
//! Layout (little endian): magic `GMTC`, `u32` version, the training config as
//! length-prefixed TOML, `u64` epoch, `f64` best validation score, `u64` Adam
//! step, the DCS state (`u64` step, `u32` length, `f64` weights), then a `u32`
//! count of named tensors. Each tensor is a `u8` kind (parameter, buffer,
//! first moment, second moment), a length-prefixed name, a `u32` rank, `u64`
//! dimensions and `f64` values.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use super::{Adam, TrainConfig, TrainState};
use crate::class_balance::DcsState;
use crate::error::{Error, Result};
use crate::network::{ParamStore, Tensor};

const MAGIC: &[u8; 4] = b"GMTC";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    /// Epochs completed when the snapshot was taken.
    pub epoch: usize,
    pub best_score: f64,
    pub state: TrainState,
}

#[derive(Clone, Copy)]
enum Kind {
    Param = 0,
    Buffer = 1,
    AdamM = 2,
    AdamV = 3,
}

struct Writer(Vec<u8>);

impl Writer {
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn bytes(&mut self, b: &[u8]) {
        self.u32(b.len() as u32);
        self.0.extend_from_slice(b);
    }
    fn tensors(&mut self, kind: Kind, map: &BTreeMap<String, Tensor>) {
        for (name, t) in map {
            self.0.push(kind as u8);
            self.bytes(name.as_bytes());
            self.u32(t.shape().len() as u32);
            for &d in t.shape() {
                self.u64(d as u64);
            }
            for &v in t.data() {
                self.f64(v);
            }
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::format(self.path, "checkpoint is truncated"));
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::format(self.path, "invalid utf-8 in checkpoint"))
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let config = toml::to_string(&self.config).map_err(|e| Error::Config(format!("cannot serialize config: {e}")))?;
        let mut w = Writer(Vec::new());
        w.0.extend_from_slice(MAGIC);
        w.u32(VERSION);
        w.bytes(config.as_bytes());
        w.u64(self.epoch as u64);
        w.f64(self.best_score);
        w.u64(self.state.adam.step);
        w.u64(self.state.dcs.step);
        w.u32(self.state.dcs.weights.len() as u32);
        for &v in &self.state.dcs.weights {
            w.f64(v);
        }
        let s = &self.state;
        let count = s.params.params.len() + s.params.buffers.len() + s.adam.m.len() + s.adam.v.len();
        w.u32(count as u32);
        w.tensors(Kind::Param, &s.params.params);
        w.tensors(Kind::Buffer, &s.params.buffers);
        w.tensors(Kind::AdamM, &s.adam.m);
        w.tensors(Kind::AdamV, &s.adam.v);
        Ok(w.0)
    }

    pub fn from_bytes(path: &Path, bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes, pos: 0, path };
        if r.take(4)? != MAGIC {
            return Err(Error::format(path, "not a checkpoint (bad magic)"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::format(path, format!("unsupported checkpoint version {version}")));
        }
        let config: TrainConfig =
            toml::from_str(&r.string()?).map_err(|e| Error::format(path, format!("embedded config: {e}")))?;
        let epoch = r.u64()? as usize;
        let best_score = r.f64()?;
        let adam_step = r.u64()?;
        let dcs_step = r.u64()?;
        let n = r.u32()? as usize;
        let weights = (0..n).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        let mut params = ParamStore::default();
        let mut adam = Adam { step: adam_step, ..Adam::default() };
        for _ in 0..r.u32()? {
            let kind = r.u8()?;
            let name = r.string()?;
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let len: usize = shape.iter().product();
            let data = (0..len).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
            let t = Tensor::from_vec(&shape, data)?;
            let map = match kind {
                0 => &mut params.params,
                1 => &mut params.buffers,
                2 => &mut adam.m,
                3 => &mut adam.v,
                k => return Err(Error::format(path, format!("unknown tensor kind {k}"))),
            };
            map.insert(name, t);
        }
        if r.pos != bytes.len() {
            return Err(Error::format(path, "trailing bytes after checkpoint"));
        }
        Ok(Self { config, epoch, best_score, state: TrainState { params, adam, dcs: DcsState { weights, step: dcs_step } } })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(path, &bytes)
    }
}
