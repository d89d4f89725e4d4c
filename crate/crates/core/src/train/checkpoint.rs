//! The `WFK1` checkpoint archive.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "WFK1"                      magic
//! u32                         format version
//! u64, bytes                  JSON metadata (configs, counters, dtype)
//! u32                         tensor count
//! per tensor: u32, bytes, 4 x u64   name and shape, in name order
//! parameters, first moments, second moments: raw element data
//! [u8; 32]                    SHA-256 of everything above
//! ```

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{TrainConfig, TrainState};
use crate::error::{Error, Result};
use crate::losses::LossParts;
use crate::net::ModelConfig;
use crate::params::ParamStore;
use crate::tensor::{DType, Real, Tensor};

pub const MAGIC: &[u8; 4] = b"WFK1";
pub const FORMAT_VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Meta {
    dtype: DType,
    model: ModelConfig,
    train: TrainConfig,
    epoch: usize,
    cursor: usize,
    step: u64,
    best_val_psnr: Option<f64>,
    last: LossParts,
}

/// A training state with the configuration that produced it.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T> {
    /// The architecture actually built (after applying the variant).
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub state: TrainState<T>,
}

/// A checkpoint of either precision.
#[derive(Clone, Debug)]
pub enum AnyCheckpoint {
    F32(Checkpoint<f32>),
    F64(Checkpoint<f64>),
}

impl AnyCheckpoint {
    pub fn model(&self) -> &ModelConfig {
        match self {
            AnyCheckpoint::F32(c) => &c.model,
            AnyCheckpoint::F64(c) => &c.model,
        }
    }

    pub fn dtype(&self) -> DType {
        match self {
            AnyCheckpoint::F32(_) => DType::F32,
            AnyCheckpoint::F64(_) => DType::F64,
        }
    }
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

pub fn encode<T: Real>(ck: &Checkpoint<T>) -> Result<Vec<u8>> {
    let s = &ck.state;
    let meta = Meta {
        dtype: T::DTYPE,
        model: ck.model.clone(),
        train: ck.train.clone(),
        epoch: s.epoch,
        cursor: s.cursor,
        step: s.step,
        best_val_psnr: s.best_val_psnr,
        last: s.last,
    };
    let meta = serde_json::to_vec(&meta).map_err(|e| Error::Integrity(format!("metadata: {e}")))?;
    for (name, t) in s.params.iter() {
        let same = |store: &ParamStore<T>| store.get(name).map(|x| x.shape() == t.shape()).unwrap_or(false);
        if !same(&s.m) || !same(&s.v) || s.m.len() != s.params.len() || s.v.len() != s.params.len() {
            return Err(Error::Dimension(format!("optimizer moments do not match parameter `{name}`")));
        }
    }

    let mut out = Vec::with_capacity(64 + meta.len() + 3 * s.params.num_scalars() * T::DTYPE.size());
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, FORMAT_VERSION);
    put_u64(&mut out, meta.len() as u64);
    out.extend_from_slice(&meta);
    put_u32(&mut out, s.params.len() as u32);
    for (name, t) in s.params.iter() {
        put_u32(&mut out, name.len() as u32);
        out.extend_from_slice(name.as_bytes());
        for d in t.shape() {
            put_u64(&mut out, d as u64);
        }
    }
    for store in [&s.params, &s.m, &s.v] {
        for (_, t) in store.iter() {
            for &x in t.data() {
                x.to_bits_le(&mut out);
            }
        }
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    Ok(out)
}

/// Writes through a temporary file in the same directory, then renames, so
/// an interrupted save never leaves a half-written archive behind.
pub fn save_checkpoint<T: Real>(path: &Path, ck: &Checkpoint<T>) -> Result<()> {
    let bytes = encode(ck)?;
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir)?;
    let tmp = dir.join(format!(
        ".{}.tmp",
        path.file_name().and_then(|n| n.to_str()).unwrap_or("checkpoint")
    ));
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Integrity("archive ends early".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn usize(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::Integrity("length overflows".into()))
    }
}

/// Checks magic, version and digest; returns the payload without the digest.
fn verified_payload(bytes: &[u8]) -> Result<&[u8]> {
    if bytes.len() < 8 || &bytes[..4] != MAGIC {
        return Err(Error::Integrity("not a WFK1 checkpoint (bad magic)".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(Error::Incompatible(format!("format version {version}, this build reads {FORMAT_VERSION}")));
    }
    if bytes.len() < 8 + DIGEST_LEN {
        return Err(Error::Integrity("archive is truncated".into()));
    }
    let (payload, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
    if Sha256::digest(payload).as_slice() != digest {
        return Err(Error::Integrity("checksum mismatch (truncated or corrupted archive)".into()));
    }
    Ok(payload)
}

fn decode_as<T: Real>(payload: &[u8], meta: Meta, mut r: Reader<'_>) -> Result<Checkpoint<T>> {
    debug_assert!(std::ptr::eq(payload, r.buf));
    let count = r.u32()? as usize;
    let mut specs = Vec::with_capacity(count);
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?).map_err(|_| Error::Integrity("tensor name is not UTF-8".into()))?;
        let shape = [r.usize()?, r.usize()?, r.usize()?, r.usize()?];
        specs.push((name.to_string(), shape));
    }
    let size = T::DTYPE.size();
    let read_store = |r: &mut Reader<'_>| -> Result<ParamStore<T>> {
        let mut store = ParamStore::new();
        for (name, shape) in &specs {
            let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            let n = n.ok_or_else(|| Error::Integrity(format!("shape of `{name}` overflows")))?;
            let raw = r.take(n.checked_mul(size).ok_or_else(|| Error::Integrity("size overflows".into()))?)?;
            let data = raw.chunks_exact(size).map(T::from_bits_le).collect();
            store.insert(name.clone(), Tensor::from_vec(*shape, data)?);
        }
        Ok(store)
    };
    let params = read_store(&mut r)?;
    let m = read_store(&mut r)?;
    let v = read_store(&mut r)?;
    if r.pos != payload.len() {
        return Err(Error::Integrity(format!("{} unexpected trailing bytes", payload.len() - r.pos)));
    }
    Ok(Checkpoint {
        model: meta.model,
        train: meta.train,
        state: TrainState {
            params,
            m,
            v,
            epoch: meta.epoch,
            cursor: meta.cursor,
            step: meta.step,
            best_val_psnr: meta.best_val_psnr,
            last: meta.last,
        },
    })
}

pub fn decode_any(bytes: &[u8]) -> Result<AnyCheckpoint> {
    let payload = verified_payload(bytes)?;
    let mut r = Reader { buf: payload, pos: 8 };
    let len = r.usize()?;
    let meta: Meta = serde_json::from_slice(r.take(len)?).map_err(|e| Error::Integrity(format!("metadata: {e}")))?;
    Ok(match meta.dtype {
        DType::F32 => AnyCheckpoint::F32(decode_as(payload, meta, r)?),
        DType::F64 => AnyCheckpoint::F64(decode_as(payload, meta, r)?),
    })
}

pub fn load_any_checkpoint(path: &Path) -> Result<AnyCheckpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::ingestion(path, e))?;
    decode_any(&bytes)
}

/// Loads a checkpoint stored in precision `T`.
pub fn load_checkpoint<T: Real>(path: &Path) -> Result<Checkpoint<T>> {
    let any = load_any_checkpoint(path)?;
    let found = any.dtype();
    let boxed: Box<dyn std::any::Any> = match any {
        AnyCheckpoint::F32(c) => Box::new(c),
        AnyCheckpoint::F64(c) => Box::new(c),
    };
    boxed
        .downcast::<Checkpoint<T>>()
        .map(|b| *b)
        .map_err(|_| Error::Incompatible(format!("checkpoint holds {found:?} values, {:?} requested", T::DTYPE)))
}
