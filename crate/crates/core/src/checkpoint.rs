//! Versioned binary archive: magic, format version, config text, metadata JSON, RNG state, a
//! named tensor table and a SHA-256 trailer over everything before it. Little-endian throughout.

use std::path::Path;

use diffmath::{DType, Scalar, Tensor};
use sha2::{Digest, Sha256};

use crate::error::{io_err, Error, Result};
use crate::params::ParamSet;

pub const MAGIC: &[u8; 4] = b"FNRF";
pub const VERSION: u32 = 1;
const TRAILER: usize = 32;

#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
    /// Little-endian values.
    pub payload: Vec<u8>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Archive {
    pub config: String,
    pub meta: String,
    pub rng: String,
    pub tensors: Vec<Entry>,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|e| *e <= self.buf.len()).ok_or_else(|| bad("truncated"))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn text(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| bad("text field is not utf-8"))
    }
}

fn put_text(out: &mut Vec<u8>, s: &str) {
    out.extend((s.len() as u32).to_le_bytes());
    out.extend(s.as_bytes());
}

impl Archive {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend(MAGIC);
        out.extend(VERSION.to_le_bytes());
        put_text(&mut out, &self.config);
        put_text(&mut out, &self.meta);
        put_text(&mut out, &self.rng);
        out.extend((self.tensors.len() as u32).to_le_bytes());
        for e in &self.tensors {
            out.extend((e.name.len() as u16).to_le_bytes());
            out.extend(e.name.as_bytes());
            out.push(e.dtype.code());
            out.push(e.shape.len() as u8);
            for d in &e.shape {
                out.extend((*d as u64).to_le_bytes());
            }
            out.extend(&e.payload);
        }
        let digest = Sha256::digest(&out);
        out.extend(digest);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 4 + TRAILER {
            return Err(bad("truncated"));
        }
        if &bytes[..4] != MAGIC {
            return Err(bad("bad magic"));
        }
        let (body, trailer) = bytes.split_at(bytes.len() - TRAILER);
        let version = u32::from_le_bytes(body[4..8].try_into().unwrap());
        if version != VERSION {
            return Err(bad(format!("unsupported format version {version}")));
        }
        if Sha256::digest(body).as_slice() != trailer {
            return Err(bad("checksum mismatch"));
        }
        let mut r = Reader { buf: body, pos: 8 };
        let (config, meta, rng) = (r.text()?, r.text()?, r.text()?);
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count.min(4096));
        for _ in 0..count {
            let n = r.u16()? as usize;
            let name = String::from_utf8(r.take(n)?.to_vec()).map_err(|_| bad("tensor name is not utf-8"))?;
            let dtype = DType::from_code(r.u8()?).ok_or_else(|| bad(format!("{name}: unknown dtype")))?;
            let rank = r.u8()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u64()? as usize);
            }
            let len = shape
                .iter()
                .try_fold(dtype.size(), |a, d| a.checked_mul(*d))
                .ok_or_else(|| bad(format!("{name}: shape overflows")))?;
            let payload = r.take(len)?.to_vec();
            tensors.push(Entry { name, dtype, shape, payload });
        }
        if r.pos != body.len() {
            return Err(bad("trailing bytes after tensor table"));
        }
        Ok(Self { config, meta, rng, tensors })
    }

    /// Writes to a sibling temporary file and renames it into place.
    pub fn write_atomic(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(io_err(dir))?;
        }
        let mut tmp = path.as_os_str().to_owned();
        tmp.push(".tmp");
        std::fs::write(&tmp, self.to_bytes()).map_err(io_err(&tmp))?;
        std::fs::rename(&tmp, path).map_err(io_err(path))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(io_err(path))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn push<T: Scalar>(&mut self, name: impl Into<String>, t: &Tensor<T>) {
        let mut payload = Vec::with_capacity(t.numel() * T::DTYPE.size());
        for v in t.data() {
            v.to_le_bytes_into(&mut payload);
        }
        self.tensors.push(Entry { name: name.into(), dtype: T::DTYPE, shape: t.shape().to_vec(), payload });
    }

    pub fn get<T: Scalar>(&self, name: &str) -> Result<Tensor<T>> {
        let e = self.tensors.iter().find(|e| e.name == name).ok_or_else(|| bad(format!("missing tensor {name}")))?;
        decode(e)
    }

    /// Stores every tensor of `set` as `prefix/name`.
    pub fn push_set<T: Scalar>(&mut self, prefix: &str, set: &ParamSet<T>) {
        for (name, t) in set.iter() {
            self.push(format!("{prefix}/{name}"), t);
        }
    }

    /// All tensors under `prefix/`, in stored order.
    pub fn take_set<T: Scalar>(&self, prefix: &str) -> Result<ParamSet<T>> {
        let lead = format!("{prefix}/");
        let mut set = ParamSet::default();
        for e in self.tensors.iter().filter(|e| e.name.starts_with(&lead)) {
            set.push(&e.name[lead.len()..], decode(e)?);
        }
        Ok(set)
    }
}

fn decode<T: Scalar>(e: &Entry) -> Result<Tensor<T>> {
    if e.dtype != T::DTYPE {
        return Err(bad(format!("{}: stored as {:?}, requested {:?}", e.name, e.dtype, T::DTYPE)));
    }
    let data = e.payload.chunks_exact(T::DTYPE.size()).map(T::from_le_slice).collect();
    Ok(Tensor::new(e.shape.clone(), data)?)
}
