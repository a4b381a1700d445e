//! Binary checkpoint container.
//!
//! All integers are little-endian.
//!
//! ```text
//! header   magic  b"FANCKPT\0"        8 bytes
//!          version                    u32 (currently 1)
//!          kind                       u8  (0 = FAN model, 1 = discriminator)
//!          variant                    u8  (0 joint, 1 separation, 2 concatenation, 3 full; 255 for discriminators)
//!          domain width, task width   u32, u32 (0, 0 for discriminators)
//!          record count               u32
//! record   role                       u8  (0 = parameter, 1 = batch-norm running statistics)
//!          trainable                  u8  (0 or 1; always 0 for statistics)
//!          name length, name          u32, UTF-8 bytes
//!          rank, dims                 u32, rank × u32
//!          payload                    product(dims) × f32
//! ```
//!
//! Records appear in registration order: parameters first, then statistics.
//! Loading checks names and shapes against a freshly built architecture.

use std::fs;
use std::path::Path;

use fan_tensor::{ParamStore, Tensor};
use sha2::{Digest, Sha256};

use crate::error::{FanError, Result};
use crate::model::{Discriminator, FanModel, LatentSplit, Variant};

pub const MAGIC: &[u8; 8] = b"FANCKPT\0";
pub const VERSION: u32 = 1;

const KIND_MODEL: u8 = 0;
const KIND_DISCRIMINATOR: u8 = 1;
const NO_VARIANT: u8 = 255;
const ROLE_PARAM: u8 = 0;
const ROLE_STATS: u8 = 1;

/// Contents of a checkpoint file.
#[derive(Clone, Debug)]
pub enum Checkpoint {
    Model(FanModel),
    Discriminator(Discriminator),
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| FanError::Format(format!("{v} does not fit in u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn put_tensor(out: &mut Vec<u8>, role: u8, trainable: bool, name: &str, t: &Tensor) -> Result<()> {
    out.push(role);
    out.push(trainable as u8);
    put_u32(out, name.len())?;
    out.extend_from_slice(name.as_bytes());
    put_u32(out, t.rank())?;
    for &d in t.shape() {
        put_u32(out, d)?;
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(())
}

fn encode(kind: u8, variant: u8, split: (usize, usize), store: &ParamStore) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(64 + 4 * store.numel());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(kind);
    out.push(variant);
    put_u32(&mut out, split.0)?;
    put_u32(&mut out, split.1)?;
    put_u32(&mut out, store.len() + store.buffers().count())?;
    for p in store.params() {
        put_tensor(&mut out, ROLE_PARAM, p.trainable, &p.name, &p.value)?;
    }
    for (name, t) in store.buffers() {
        put_tensor(&mut out, ROLE_STATS, false, name, t)?;
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| FanError::Format(format!("checkpoint truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }
}

/// Serializes a FAN model.
pub fn encode_model(model: &FanModel) -> Result<Vec<u8>> {
    let s = model.split();
    encode(KIND_MODEL, model.variant().code(), (s.domain, s.task), model.store())
}

/// Serializes a discriminator.
pub fn encode_discriminator(d: &Discriminator) -> Result<Vec<u8>> {
    encode(KIND_DISCRIMINATOR, NO_VARIANT, (0, 0), d.store())
}

/// Parses checkpoint bytes.
pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(MAGIC.len())? != MAGIC {
        return Err(FanError::Format("not a checkpoint (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != VERSION as usize {
        return Err(FanError::Format(format!("unsupported checkpoint version {version}")));
    }
    let kind = r.u8()?;
    let variant = r.u8()?;
    let split = LatentSplit {
        domain: r.u32()?,
        task: r.u32()?,
    };
    let count = r.u32()?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let role = r.u8()?;
        let trainable = match r.u8()? {
            0 => false,
            1 => true,
            t => return Err(FanError::Format(format!("bad trainable flag {t}"))),
        };
        let name_len = r.u32()?;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| FanError::Format("record name is not UTF-8".into()))?
            .to_string();
        let rank = r.u32()?;
        let dims = (0..rank).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        let numel = dims
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| FanError::Format(format!("record {name} is too large")))?;
        let payload = r.take(numel.checked_mul(4).ok_or_else(|| FanError::Format("payload overflow".into()))?)?;
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let t = Tensor::new(&dims, data).map_err(|e| FanError::Format(format!("record {name}: {e}")))?;
        match role {
            ROLE_PARAM => {
                let id = store.add(name, t);
                store.set_trainable(id, trainable);
            }
            ROLE_STATS => {
                store.add_buffer(name, t);
            }
            _ => return Err(FanError::Format(format!("unknown record role {role}"))),
        }
    }
    if r.pos != bytes.len() {
        return Err(FanError::Format(format!(
            "{} trailing bytes after the last record",
            bytes.len() - r.pos
        )));
    }
    match kind {
        KIND_MODEL => {
            let v = Variant::from_code(variant)
                .ok_or_else(|| FanError::Format(format!("unknown variant code {variant}")))?;
            Ok(Checkpoint::Model(FanModel::from_store(v, split, store)?))
        }
        KIND_DISCRIMINATOR => Ok(Checkpoint::Discriminator(Discriminator::from_store(store)?)),
        _ => Err(FanError::Format(format!("unknown checkpoint kind {kind}"))),
    }
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| FanError::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| FanError::io(path, e))
}

pub fn save_model(path: impl AsRef<Path>, model: &FanModel) -> Result<()> {
    write(path.as_ref(), &encode_model(model)?)
}

pub fn save_discriminator(path: impl AsRef<Path>, d: &Discriminator) -> Result<()> {
    write(path.as_ref(), &encode_discriminator(d)?)
}

pub fn load(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| FanError::io(path, e))?;
    decode(&bytes)
}

pub fn load_model(path: impl AsRef<Path>) -> Result<FanModel> {
    match load(path.as_ref())? {
        Checkpoint::Model(m) => Ok(m),
        Checkpoint::Discriminator(_) => Err(FanError::Format(format!(
            "{} holds a discriminator, not a FAN model",
            path.as_ref().display()
        ))),
    }
}

pub fn load_discriminator(path: impl AsRef<Path>) -> Result<Discriminator> {
    match load(path.as_ref())? {
        Checkpoint::Discriminator(d) => Ok(d),
        Checkpoint::Model(_) => Err(FanError::Format(format!(
            "{} holds a FAN model, not a discriminator",
            path.as_ref().display()
        ))),
    }
}

/// SHA-256 over every parameter and running statistic: names, shapes and
/// exact bit patterns. Trainability flags are not hashed.
pub fn fingerprint(store: &ParamStore) -> String {
    let mut h = Sha256::new();
    let mut feed = |tag: u8, name: &str, t: &Tensor| {
        h.update([tag]);
        h.update((name.len() as u64).to_le_bytes());
        h.update(name.as_bytes());
        h.update((t.rank() as u64).to_le_bytes());
        for &d in t.shape() {
            h.update((d as u64).to_le_bytes());
        }
        for v in t.data() {
            h.update(v.to_le_bytes());
        }
    };
    for p in store.params() {
        feed(ROLE_PARAM, &p.name, &p.value);
    }
    for (name, t) in store.buffers() {
        feed(ROLE_STATS, name, t);
    }
    hex::encode(h.finalize())
}
