//! Versioned binary checkpoints.
//!
//! Layout, little-endian: magic `ACPCCKPT`, u32 format version, u32 dtype
//! (bytes per value), u32 config length + config text, u64 step, u64 epoch,
//! u64 batch within epoch, RNG state (32-byte seed, u64 stream, u128 word
//! position), u32 tensor count, then per tensor u32 name length + name,
//! u32 rank, u32 dims and the values; finally u64 optimizer step count and
//! the first and second moments of every tensor in the same order.

use std::fs;
use std::path::Path;

use rand_chacha::ChaCha8Rng;

use super::{Adam, RunConfig};
use crate::data::Reader;
use crate::error::{Error, Result};
use crate::math::{Real, Tensor};
use crate::model::Model;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"ACPCCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self { seed: rng.get_seed(), stream: rng.get_stream(), word_pos: rng.get_word_pos() }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T> {
    pub config: RunConfig,
    pub step: u64,
    pub epoch: u64,
    pub batch: u64,
    pub rng: RngState,
    pub model: Model<T>,
    pub adam: Adam<T>,
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_values<T: Real>(out: &mut Vec<u8>, t: &Tensor<T>) {
    t.data().iter().for_each(|v| v.write_le(out));
}

fn read_values<T: Real>(r: &mut Reader, shape: &[usize]) -> Result<Tensor<T>> {
    let n: usize = shape.iter().product();
    let bytes = r.take(n * T::BYTES)?;
    Tensor::new(shape.to_vec(), bytes.chunks_exact(T::BYTES).map(T::read_le).collect())
}

impl<T: Real> Checkpoint<T> {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        put_u32(&mut out, CHECKPOINT_VERSION);
        put_u32(&mut out, T::DTYPE);
        let cfg = self.config.to_text();
        put_u32(&mut out, cfg.len() as u32);
        out.extend_from_slice(cfg.as_bytes());
        put_u64(&mut out, self.step);
        put_u64(&mut out, self.epoch);
        put_u64(&mut out, self.batch);
        out.extend_from_slice(&self.rng.seed);
        put_u64(&mut out, self.rng.stream);
        out.extend_from_slice(&self.rng.word_pos.to_le_bytes());
        let params = self.model.parameters();
        put_u32(&mut out, params.len() as u32);
        for (name, t) in &params {
            put_u32(&mut out, name.len() as u32);
            out.extend_from_slice(name.as_bytes());
            put_u32(&mut out, t.rank() as u32);
            t.shape().iter().for_each(|&d| put_u32(&mut out, d as u32));
            put_values(&mut out, t);
        }
        put_u64(&mut out, self.adam.t);
        for (m, v) in self.adam.first.iter().zip(&self.adam.second) {
            put_values(&mut out, m);
            put_values(&mut out, v);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        r.magic(CHECKPOINT_MAGIC)?;
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Version { expected: CHECKPOINT_VERSION, found: version });
        }
        let dtype = r.u32()?;
        if dtype != T::DTYPE {
            return Err(Error::Invalid(format!("checkpoint stores {dtype}-byte values, expected {} ({})", T::DTYPE, T::NAME)));
        }
        let cfg_len = r.u32()? as usize;
        let text = std::str::from_utf8(r.take(cfg_len)?).map_err(|_| Error::Invalid("config text is not UTF-8".into()))?;
        let config = RunConfig::parse(text)?;
        let step = r.u64()?;
        let epoch = r.u64()?;
        let batch = r.u64()?;
        let seed: [u8; 32] = r.take(32)?.try_into().unwrap();
        let stream = r.u64()?;
        let word_pos = u128::from_le_bytes(r.take(16)?.try_into().unwrap());

        let mut model = Model::<T>::init(config.model.clone(), 0)?;
        let expected: Vec<(String, Vec<usize>)> =
            model.parameters().iter().map(|(n, t)| (n.clone(), t.shape().to_vec())).collect();
        let count = r.u32()? as usize;
        if count != expected.len() {
            return Err(Error::Invalid(format!("checkpoint has {count} tensors, model needs {}", expected.len())));
        }
        let mut tensors = Vec::with_capacity(count);
        for (name, shape) in &expected {
            let len = r.u32()? as usize;
            let found = String::from_utf8_lossy(r.take(len)?).into_owned();
            let rank = r.u32()? as usize;
            let dims = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            if &found != name || &dims != shape {
                return Err(Error::Invalid(format!("tensor {found} {dims:?} does not match {name} {shape:?}")));
            }
            tensors.push(read_values::<T>(&mut r, &dims)?);
        }
        for (dst, src) in model.parameters_mut().into_iter().zip(tensors) {
            *dst = src;
        }
        let shapes: Vec<&[usize]> = expected.iter().map(|(_, s)| s.as_slice()).collect();
        let mut adam = Adam::new(config.optimizer, &shapes);
        adam.t = r.u64()?;
        for (i, (_, shape)) in expected.iter().enumerate() {
            adam.first[i] = read_values(&mut r, shape)?;
            adam.second[i] = read_values(&mut r, shape)?;
        }
        if r.remaining() != 0 {
            return Err(Error::Invalid(format!("{} trailing bytes after checkpoint", r.remaining())));
        }
        Ok(Self { config, step, epoch, batch, rng: RngState { seed, stream, word_pos }, model, adam })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        // write-then-rename so a crash never leaves a half-written checkpoint
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.to_bytes())?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::Invalid(format!("cannot read checkpoint {}: {e}", path.display())))?;
        Self::from_bytes(&bytes)
    }
}
