//! Binary parameter container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic   8 bytes  "MVITCKPT"
//! version u32      1
//! count   u32      number of records
//! record  name_len u32, name (utf-8), ndim u32, dims u64 × ndim, values f64 × numel
//! ```

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"MVITCKPT";
pub const VERSION: u32 = 1;

pub fn encode(store: &ParamStore) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for (_, p) in store.iter() {
        out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        out.extend_from_slice(&(p.value.ndim() as u32).to_le_bytes());
        for &d in p.value.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in p.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Format {
            offset: self.pos,
            reason: format!("truncated {what}"),
        })?;
        let s = &self.bytes[self.pos..end];
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

/// Parses every record as `(name, tensor)`, in file order.
pub fn decode(bytes: &[u8]) -> Result<Vec<(String, Tensor)>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8, "magic")? != MAGIC {
        return Err(Error::Format {
            offset: 0,
            reason: "bad magic".into(),
        });
    }
    let at = r.pos;
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::Format {
            offset: at,
            reason: format!("unsupported version {version}"),
        });
    }
    let count = r.u32("record count")? as usize;
    let mut out = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let len = r.u32("name length")? as usize;
        let at = r.pos;
        let name = core::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| Error::Format {
                offset: at,
                reason: "name is not utf-8".into(),
            })?
            .into();
        let ndim = r.u32("rank")? as usize;
        let mut shape = Vec::with_capacity(ndim.min(16));
        for _ in 0..ndim {
            let at = r.pos;
            let d = r.u64("extent")?;
            if d == 0 || d > u32::MAX as u64 {
                return Err(Error::Format {
                    offset: at,
                    reason: format!("bad extent {d}"),
                });
            }
            shape.push(d as usize);
        }
        let n: usize = shape.iter().product();
        let raw = r.take(n.saturating_mul(8), "values")?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        out.push((name, Tensor::new(&shape, data)?));
    }
    if r.pos != bytes.len() {
        return Err(Error::Format {
            offset: r.pos,
            reason: "trailing bytes".into(),
        });
    }
    Ok(out)
}

/// Overwrites `store` from a checkpoint holding exactly its parameters.
pub fn load_into(store: &mut ParamStore, bytes: &[u8]) -> Result<()> {
    let records = decode(bytes)?;
    if records.len() != store.len() {
        return Err(Error::config(format!(
            "checkpoint has {} tensors, model has {}",
            records.len(),
            store.len()
        )));
    }
    for (name, t) in records {
        let id = store
            .id(&name)
            .ok_or_else(|| Error::config(format!("checkpoint tensor {name} is not a model parameter")))?;
        let p = store.get_mut(id);
        if p.value.shape() != t.shape() {
            return Err(Error::dim("checkpoint", p.value.shape(), t.shape()));
        }
        p.value = t;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store() -> ParamStore {
        let mut s = ParamStore::new();
        s.add("a.weight", Tensor::from_fn(&[2, 3], |i| i as f64 - 2.5), true).unwrap();
        s.add("b", Tensor::full(&[1], -0.0), false).unwrap();
        s
    }

    #[test]
    fn round_trip_bitwise() {
        let s = store();
        let bytes = encode(&s);
        let mut t = store();
        t.get_mut(t.id("b").unwrap()).value = Tensor::full(&[1], 9.0);
        load_into(&mut t, &bytes).unwrap();
        assert_eq!(encode(&t), bytes);
        assert_eq!(bytes.len(), 8 + 4 + 4 + (4 + 8 + 4 + 16 + 48) + (4 + 1 + 4 + 8 + 8));
    }

    #[test]
    fn corrupt_files_report_offsets() {
        let bytes = encode(&store());
        let err = decode(&bytes[..bytes.len() - 3]).unwrap_err();
        assert!(matches!(err, Error::Format { .. }), "{err}");
        let mut bad = bytes.clone();
        bad[8] = 2;
        assert!(matches!(decode(&bad), Err(Error::Format { offset: 8, .. })));
        assert!(matches!(decode(b"NOTACKPT"), Err(Error::Format { offset: 0, .. })));
    }
}
