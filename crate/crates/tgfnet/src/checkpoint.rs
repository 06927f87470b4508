//! Binary checkpoint format.
//!
//! Layout (all integers little-endian):
//!   magic "TGFN", format version u32, then one record per parameter in
//!   lexicographic name order: name length u32, UTF-8 name, rank u32,
//!   dims u32 each, then the values as little-endian f64.
//!
//! The format is bit-exact: saving the same parameter store twice yields
//! byte-identical files.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::params::ParamStore;

pub const MAGIC: &[u8; 4] = b"TGFN";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic: expected \"TGFN\"")]
    BadMagic,
    #[error("unsupported format version {0}")]
    BadVersion(u32),
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
}

pub fn save(store: &ParamStore, path: &Path) -> Result<(), CheckpointError> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    for (name, p) in store.iter() {
        let bytes = name.as_bytes();
        w.write_all(&(bytes.len() as u32).to_le_bytes())?;
        w.write_all(bytes)?;
        w.write_all(&(p.shape.len() as u32).to_le_bytes())?;
        for &d in &p.shape {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        for &v in &p.values {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load(path: &Path) -> Result<ParamStore, CheckpointError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = read_u32(&mut r)?;
    if version != FORMAT_VERSION {
        return Err(CheckpointError::BadVersion(version));
    }
    let mut store = ParamStore::new();
    loop {
        let name_len = match read_u32_eof(&mut r)? {
            Some(n) => n as usize,
            None => break,
        };
        let mut name_bytes = vec![0u8; name_len];
        r.read_exact(&mut name_bytes)?;
        let name = String::from_utf8(name_bytes)
            .map_err(|_| CheckpointError::Malformed("parameter name is not UTF-8".into()))?;
        let rank = read_u32(&mut r)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u32(&mut r)? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut values = Vec::with_capacity(numel);
        let mut buf = [0u8; 8];
        for _ in 0..numel {
            r.read_exact(&mut buf)?;
            values.push(f64::from_le_bytes(buf));
        }
        if store.contains(&name) {
            return Err(CheckpointError::Malformed(format!(
                "duplicate parameter {name}"
            )));
        }
        store.insert(&name, values, shape);
    }
    Ok(store)
}

fn read_u32(r: &mut impl Read) -> Result<u32, CheckpointError> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

/// Read a u32 or report clean end-of-file before the first byte.
fn read_u32_eof(r: &mut impl Read) -> Result<Option<u32>, CheckpointError> {
    let mut buf = [0u8; 4];
    let mut filled = 0;
    while filled < 4 {
        let n = r.read(&mut buf[filled..])?;
        if n == 0 {
            if filled == 0 {
                return Ok(None);
            }
            return Err(CheckpointError::Malformed(
                "truncated record header".into(),
            ));
        }
        filled += n;
    }
    Ok(Some(u32::from_le_bytes(buf)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn sample_store() -> ParamStore {
        let mut store = ParamStore::new();
        let mut rng = Rng::new(5);
        store.insert("b.weight", rng.uniform_vec(6, -1.0, 1.0), vec![2, 3]);
        store.insert("a.bias", rng.uniform_vec(4, -1.0, 1.0), vec![4]);
        store
    }

    #[test]
    fn roundtrip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.tgfn");
        let store = sample_store();
        save(&store, &path).unwrap();
        let loaded = load(&path).unwrap();
        assert_eq!(store, loaded);
    }

    #[test]
    fn save_is_byte_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let (p1, p2) = (dir.path().join("a.tgfn"), dir.path().join("b.tgfn"));
        let store = sample_store();
        save(&store, &p1).unwrap();
        save(&store, &p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn header_layout_is_pinned() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.tgfn");
        let mut store = ParamStore::new();
        store.insert("w", vec![1.0], vec![1]);
        save(&store, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(&bytes[0..4], b"TGFN");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 1); // name len
        assert_eq!(bytes[12], b'w');
        assert_eq!(u32::from_le_bytes(bytes[13..17].try_into().unwrap()), 1); // rank
        assert_eq!(u32::from_le_bytes(bytes[17..21].try_into().unwrap()), 1); // dim
        assert_eq!(f64::from_le_bytes(bytes[21..29].try_into().unwrap()), 1.0);
        assert_eq!(bytes.len(), 29);
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.tgfn");
        std::fs::write(&path, b"NOPE\x01\x00\x00\x00").unwrap();
        assert!(matches!(load(&path), Err(CheckpointError::BadMagic)));
        let path2 = dir.path().join("trunc.tgfn");
        let store = sample_store();
        save(&store, &path2).unwrap();
        let mut bytes = std::fs::read(&path2).unwrap();
        bytes.truncate(bytes.len() - 3);
        std::fs::write(&path2, &bytes).unwrap();
        assert!(load(&path2).is_err());
    }
}
