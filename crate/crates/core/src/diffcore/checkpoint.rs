//! Binary parameter checkpoints.
//!
//! Layout: the 8-byte magic `MODFUSE1`, then one record per tensor until end
//! of file. A record is the name length (u64 LE), the UTF-8 name, the rank
//! (u64 LE), each dimension (u64 LE) and the raw values (f64 LE).

use std::fs;
use std::path::Path;

use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"MODFUSE1";

pub fn encode(entries: &[(String, &Tensor)]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    for (name, tensor) in entries {
        out.extend_from_slice(&(name.len() as u64).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(tensor.rank() as u64).to_le_bytes());
        for &d in tensor.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in tensor.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> std::result::Result<&[u8], String> {
        if self.bytes.len() - self.pos < n {
            return Err(format!("truncated at byte {}", self.pos));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u64(&mut self) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn decode(bytes: &[u8]) -> std::result::Result<Vec<(String, Tensor)>, String> {
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err("missing MODFUSE1 magic".into());
    }
    let mut r = Reader {
        bytes,
        pos: MAGIC.len(),
    };
    let mut entries = Vec::new();
    while r.pos < bytes.len() {
        let name_len = r.u64()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec()).map_err(|e| e.to_string())?;
        let rank = r.u64()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64()? as usize);
        }
        let n: usize = shape.iter().product();
        let raw = r.take(n.checked_mul(8).ok_or("tensor too large")?)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let tensor = Tensor::new(shape, data).map_err(|e| e.to_string())?;
        entries.push((name, tensor));
    }
    Ok(entries)
}

pub fn save(path: &Path, store: &ParamStore) -> Result<()> {
    let entries: Vec<(String, &Tensor)> = store.ids().map(|id| (store.qualified_name(id), store.value(id))).collect();
    fs::write(path, encode(&entries)).map_err(|e| Error::io(path, e))
}

pub fn read(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|reason| Error::format(path, reason))
}

/// Loads values into an existing store whose layout must match exactly.
pub fn load_into(path: &Path, store: &mut ParamStore) -> Result<()> {
    let entries = read(path)?;
    if entries.len() != store.len() {
        return Err(Error::format(
            path,
            format!("{} tensors in file, model has {}", entries.len(), store.len()),
        ));
    }
    for (name, tensor) in entries {
        let id = store
            .find(&name)
            .ok_or_else(|| Error::format(path, format!("unknown parameter {name}")))?;
        if store.value(id).shape() != tensor.shape() {
            return Err(Error::format(
                path,
                format!(
                    "parameter {name} has shape {:?}, model expects {:?}",
                    tensor.shape(),
                    store.value(id).shape()
                ),
            ));
        }
        store.get_mut(id).value = tensor;
    }
    Ok(())
}
