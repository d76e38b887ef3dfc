//! Versioned checkpoint container.
//!
//! Layout, little-endian:
//!
//! ```text
//! b"VXCK" | version u32 | kind: str | arch_config (TOML): str | n_params u32
//! repeated n_params times:
//!     name: str | ndim u32 | dims u32 * ndim | MELS record [dims[0], prod(dims[1..])]
//! ```
//!
//! where `str` is a `u32` byte length followed by UTF-8. Parameter values are
//! stored as `f32`.

use std::path::Path;

use crate::audio::{decode_mels, encode_mels};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"VXCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub kind: String,
    pub arch_toml: String,
    pub params: ParamStore,
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Format("checkpoint truncated".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| Error::Format("checkpoint string is not UTF-8".into()))
    }
}

pub fn encode_checkpoint(ckpt: &Checkpoint) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    put_str(&mut out, &ckpt.kind);
    put_str(&mut out, &ckpt.arch_toml);
    out.extend_from_slice(&(ckpt.params.len() as u32).to_le_bytes());
    for (name, t) in ckpt.params.iter() {
        put_str(&mut out, name);
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        encode_mels(t, &mut out);
    }
    out
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != CHECKPOINT_MAGIC {
        return Err(Error::Format("not a checkpoint (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let kind = r.string()?;
    let arch_toml = r.string()?;
    let n = r.u32()? as usize;
    let mut params = ParamStore::new();
    for _ in 0..n {
        let name = r.string()?;
        let ndim = r.u32()? as usize;
        let dims = (0..ndim)
            .map(|_| r.u32().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let (t, used) = decode_mels(&bytes[r.pos..])?;
        r.pos += used;
        if t.len() != dims.iter().product::<usize>() {
            return Err(Error::Format(format!("parameter {name}: shape/data mismatch")));
        }
        if params.id(&name).is_some() {
            return Err(Error::Format(format!("duplicate parameter {name}")));
        }
        params.add(name, t.reshape(&dims));
    }
    if r.pos != bytes.len() {
        return Err(Error::Format("trailing bytes after checkpoint".into()));
    }
    Ok(Checkpoint {
        kind,
        arch_toml,
        params,
    })
}

pub fn save_checkpoint(path: impl AsRef<Path>, ckpt: &Checkpoint) -> Result<()> {
    let path = path.as_ref();
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, encode_checkpoint(ckpt)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

/// Copies checkpoint values into `target`, which must have identical names and shapes.
pub(crate) fn fill_params(target: &mut ParamStore, source: &ParamStore) -> Result<()> {
    if target.len() != source.len() {
        return Err(Error::config(format!(
            "architecture mismatch: checkpoint has {} parameters, model expects {}",
            source.len(),
            target.len()
        )));
    }
    for ((tn, tt), (sn, st)) in target
        .names()
        .to_vec()
        .iter()
        .zip(target.tensors_mut())
        .zip(source.iter())
    {
        if tn != sn || tt.shape() != st.shape() {
            return Err(Error::config(format!(
                "architecture mismatch at {tn} {:?} vs checkpoint {sn} {:?}",
                tt.shape(),
                st.shape()
            )));
        }
        *tt = Tensor::new(st.shape().to_vec(), st.data().to_vec());
    }
    Ok(())
}

pub(crate) fn ensure_kind(ckpt: &Checkpoint, kind: &str) -> Result<()> {
    if ckpt.kind != kind {
        return Err(Error::config(format!(
            "expected a {kind} checkpoint, found {}",
            ckpt.kind
        )));
    }
    Ok(())
}
