//! Named-tensor container:
//!
//! ```text
//! "TCVE" | version u32 | count u32 |
//!   { name_len u32 | name | dtype u8 | rank u32 | dims u64* | values }* |
//! crc32 u32
//! ```
//!
//! All integers and values little-endian; the CRC covers every byte before it.

use std::path::{Path, PathBuf};

use crate::config::TcveConfig;
use crate::error::{file_err, Error, Result};
use crate::model::TcveModel;
use crate::params::ParamStore;
use crate::tensor::{DType, Scalar};

pub const MAGIC: &[u8; 4] = b"TCVE";
pub const FORMAT_VERSION: u32 = 1;

fn put_value<T: Scalar>(out: &mut Vec<u8>, v: T) {
    match T::DTYPE {
        DType::F32 => out.extend_from_slice(&(v.to_f64_lossy() as f32).to_le_bytes()),
        DType::F64 => out.extend_from_slice(&v.to_f64_lossy().to_le_bytes()),
    }
}

pub fn encode_checkpoint<T: Scalar>(store: &ParamStore<T>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for p in store.iter() {
        out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        out.push(T::DTYPE.code());
        out.extend_from_slice(&(p.shape.len() as u32).to_le_bytes());
        for &d in &p.shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in p.data.iter() {
            put_value(&mut out, v);
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Format(format!("truncated checkpoint while reading {what} at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}

/// Parses a container. Loaded tensors are marked frozen; values stored
/// in the other precision are converted.
pub fn decode_checkpoint<T: Scalar>(bytes: &[u8]) -> Result<ParamStore<T>> {
    if bytes.len() < MAGIC.len() + 12 {
        return Err(Error::Format(format!("truncated checkpoint: {} bytes", bytes.len())));
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::Format("not a checkpoint: bad magic".into()));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
    let actual = crc32fast::hash(body);
    if stored != actual {
        return Err(Error::Format(format!("checkpoint CRC mismatch: stored {stored:08x}, computed {actual:08x}")));
    }
    let mut r = Reader { buf: body, pos: 4 };
    let version = r.u32("version")?;
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let count = r.u32("tensor count")?;
    let mut store = ParamStore::new();
    for i in 0..count {
        let len = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| Error::Format(format!("tensor {i}: name is not UTF-8")))?
            .to_string();
        let code = r.take(1, "dtype")?[0];
        let dtype = DType::from_code(code).ok_or_else(|| Error::Format(format!("`{name}`: unknown dtype code {code}")))?;
        let rank = r.u32("rank")? as usize;
        let mut shape = Vec::with_capacity(rank.min(16));
        for _ in 0..rank {
            shape.push(usize::try_from(r.u64("dims")?).map_err(|_| Error::Format(format!("`{name}`: dimension overflow")))?);
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .and_then(|n| n.checked_mul(dtype.size()).map(|b| (n, b)));
        let (numel, nbytes) = numel.ok_or_else(|| Error::Format(format!("`{name}`: size overflow")))?;
        let raw = r.take(nbytes, "values")?;
        let data: Vec<T> = match dtype {
            DType::F32 => raw
                .chunks_exact(4)
                .map(|c| T::from_f64_lossy(f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64))
                .collect(),
            DType::F64 => raw
                .chunks_exact(8)
                .map(|c| T::from_f64_lossy(f64::from_le_bytes(c.try_into().expect("8 bytes"))))
                .collect(),
        };
        debug_assert_eq!(data.len(), numel);
        store.insert(&name, &shape, data, false).map_err(|e| Error::Format(e.to_string()))?;
    }
    if r.pos != body.len() {
        return Err(Error::Format(format!("{} trailing bytes before CRC", body.len() - r.pos)));
    }
    Ok(store)
}

pub fn write_checkpoint<T: Scalar>(path: &Path, store: &ParamStore<T>) -> Result<()> {
    std::fs::write(path, encode_checkpoint(store)).map_err(|e| file_err(path, e))
}

pub fn read_checkpoint<T: Scalar>(path: &Path) -> Result<ParamStore<T>> {
    let bytes = std::fs::read(path).map_err(|e| file_err(path, e))?;
    decode_checkpoint(&bytes).map_err(|e| file_err(path, e))
}

/// `<ckpt>.config.json`, written next to every model checkpoint.
pub fn config_sidecar(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".config.json");
    PathBuf::from(s)
}

pub fn save_model<T: Scalar>(path: &Path, model: &TcveModel<T>) -> Result<()> {
    write_checkpoint(path, &model.params)?;
    let sidecar = config_sidecar(path);
    std::fs::write(&sidecar, model.config.to_json()).map_err(|e| file_err(&sidecar, e))
}

/// Rebuilds the architecture from the sidecar config, then overwrites
/// every tensor from the container.
pub fn load_model<T: Scalar>(path: &Path) -> Result<TcveModel<T>> {
    let sidecar = config_sidecar(path);
    let text = std::fs::read_to_string(&sidecar)
        .map_err(|e| file_err(&sidecar, e))?;
    load_model_with(path, TcveConfig::from_json(&text)?)
}

pub fn load_model_with<T: Scalar>(path: &Path, config: TcveConfig) -> Result<TcveModel<T>> {
    let stored = read_checkpoint::<T>(path)?;
    let mut model = TcveModel::new(&config, config.train.seed)?;
    model.params.load_from(&stored)?;
    Ok(model)
}
