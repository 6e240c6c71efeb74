//! Binary parameter checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic   b"BMIP"
//! u32     version
//! u32 n, n bytes   config digest (hex)
//! u32 n, n bytes   namespace ("backbone" | "tunable")
//! u32     parameter count
//! per parameter:
//!   u32 n, n bytes name
//!   u32 rank, rank × u64 extents
//!   numel × f64 values
//! ```

use std::path::Path;

use super::{io_err, write_atomic, ExperimentError, Result};
use crate::tensor::{Namespace, ParamStore, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"BMIP";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub digest: String,
    pub params: ParamStore,
}

fn put_bytes(out: &mut Vec<u8>, b: &[u8]) {
    out.extend_from_slice(&(b.len() as u32).to_le_bytes());
    out.extend_from_slice(b);
}

pub fn encode(store: &ParamStore, digest: &str) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    put_bytes(&mut out, digest.as_bytes());
    put_bytes(&mut out, store.namespace().as_str().as_bytes());
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for (name, t) in store.iter() {
        put_bytes(&mut out, name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &e in t.shape() {
            out.extend_from_slice(&(e as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or("truncated checkpoint")?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> std::result::Result<String, String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| "non-UTF-8 string".to_string())
    }
}

pub fn decode(buf: &[u8]) -> std::result::Result<Checkpoint, String> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(4)? != CHECKPOINT_MAGIC {
        return Err("not a checkpoint (bad magic)".into());
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(format!("unsupported checkpoint version {version}"));
    }
    let digest = r.string()?;
    let ns_name = r.string()?;
    let ns = Namespace::parse(&ns_name).ok_or_else(|| format!("unknown namespace {ns_name:?}"))?;
    let count = r.u32()?;
    let mut params = ParamStore::new(ns);
    for _ in 0..count {
        let name = r.string()?;
        let rank = r.u32()? as usize;
        let shape = (0..rank).map(|_| r.u64().map(|e| e as usize)).collect::<std::result::Result<Vec<_>, _>>()?;
        let numel = shape.iter().try_fold(1usize, |a, &e| a.checked_mul(e)).ok_or("extent overflow")?;
        let raw = r.take(numel.checked_mul(8).ok_or("extent overflow")?)?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        let t = Tensor::new(shape, data).map_err(|e| e.to_string())?;
        if params.find(&name).is_some() {
            return Err(format!("duplicate parameter {name:?}"));
        }
        params.insert(name, t);
    }
    if r.pos != buf.len() {
        return Err("trailing bytes after checkpoint".into());
    }
    Ok(Checkpoint { digest, params })
}

pub fn write_checkpoint(path: &Path, store: &ParamStore, digest: &str) -> Result<()> {
    write_atomic(path, &encode(store, digest))
}

/// Read a checkpoint and insist on the expected digest and namespace.
pub fn read_checkpoint(path: &Path, expected_digest: &str, ns: Namespace) -> Result<Checkpoint> {
    let buf = std::fs::read(path).map_err(|e| io_err(path, e))?;
    let ck = decode(&buf).map_err(|message| ExperimentError::Checkpoint {
        path: path.to_path_buf(),
        message,
    })?;
    if ck.digest != expected_digest {
        return Err(ExperimentError::Digest {
            path: path.to_path_buf(),
            expected: expected_digest.to_string(),
            found: ck.digest,
        });
    }
    if ck.params.namespace() != ns {
        return Err(ExperimentError::Checkpoint {
            path: path.to_path_buf(),
            message: format!(
                "holds {} parameters, expected {}",
                ck.params.namespace().as_str(),
                ns.as_str()
            ),
        });
    }
    Ok(ck)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_exact() {
        let mut s = ParamStore::new(Namespace::Tunable);
        s.insert("a", Tensor::new(vec![2, 2], vec![1.0, -0.0, f64::MIN_POSITIVE, 1e300]).unwrap());
        s.insert("b", Tensor::scalar(0.1));
        let ck = decode(&encode(&s, "abc")).unwrap();
        assert_eq!(ck.digest, "abc");
        assert_eq!(ck.params.digest(), s.digest());
    }

    #[test]
    fn corrupt_input_is_rejected() {
        let mut s = ParamStore::new(Namespace::Backbone);
        s.insert("w", Tensor::scalar(2.0));
        let bytes = encode(&s, "d");
        assert!(decode(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode(&bad).is_err());
        let mut long = bytes;
        long.push(0);
        assert!(decode(&long).is_err());
    }
}
