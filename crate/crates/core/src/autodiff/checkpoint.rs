//! Binary parameter checkpoint.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   8 bytes  "FASRCKPT"
//! version u32      currently 1
//! count   u64      number of records
//! record:
//!   id_len    u32, id bytes (UTF-8)
//!   trainable u8 (0/1)
//!   ndims     u32, dims u64 each
//!   values    f64 bit patterns, row-major
//! ```
//!
//! Records are written in registration order, so re-saving an unchanged
//! store is byte-identical.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::params::ParamStore;
use super::tensor::Tensor;

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"FASRCKPT";

pub fn save_checkpoint(store: &ParamStore, path: &Path) -> io::Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&CHECKPOINT_FORMAT_VERSION.to_le_bytes())?;
    w.write_all(&(store.len() as u64).to_le_bytes())?;
    for p in store.iter() {
        w.write_all(&(p.id.len() as u32).to_le_bytes())?;
        w.write_all(p.id.as_bytes())?;
        w.write_all(&[p.trainable as u8])?;
        w.write_all(&(p.value.shape().len() as u32).to_le_bytes())?;
        for &d in p.value.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for &v in p.value.data() {
            w.write_all(&v.to_bits().to_le_bytes())?;
        }
    }
    w.flush()
}

fn bad(msg: &str) -> io::Error {
    io::Error::new(io::ErrorKind::InvalidData, msg.to_string())
}

pub fn load_checkpoint(path: &Path) -> io::Result<ParamStore> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(bad("not a checkpoint file (bad magic)"));
    }
    let version = read_u32(&mut r)?;
    if version != CHECKPOINT_FORMAT_VERSION {
        return Err(bad(&format!("unsupported checkpoint version {version}")));
    }
    let count = read_u64(&mut r)?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let id_len = read_u32(&mut r)? as usize;
        let mut id = vec![0u8; id_len];
        r.read_exact(&mut id)?;
        let id = String::from_utf8(id).map_err(|_| bad("parameter id is not UTF-8"))?;
        let mut flag = [0u8; 1];
        r.read_exact(&mut flag)?;
        let ndims = read_u32(&mut r)? as usize;
        let mut shape = Vec::with_capacity(ndims);
        for _ in 0..ndims {
            shape.push(read_u64(&mut r)? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        let mut buf = [0u8; 8];
        for _ in 0..numel {
            r.read_exact(&mut buf)?;
            data.push(f64::from_bits(u64::from_le_bytes(buf)));
        }
        let tensor = Tensor::new(shape, data).map_err(|e| bad(&e.to_string()))?;
        store.register(&id, tensor, flag[0] != 0).map_err(|e| bad(&e.to_string()))?;
    }
    Ok(store)
}

fn read_u32(r: &mut impl Read) -> io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> io::Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_is_bit_exact() {
        let mut store = ParamStore::new();
        store.register("model/w", Tensor::matrix(2, 3, vec![1.5, -2.25, 0.0, 1e-300, 3.7, -0.5]).unwrap(), true).unwrap();
        store.register("adapt/spk/a", Tensor::vector(vec![0.1, 0.2]), false).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.bin");
        save_checkpoint(&store, &path).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.len(), 2);
        for p in store.iter() {
            let q = loaded.get(&p.id).unwrap();
            assert_eq!(p.value, q.value);
            assert_eq!(p.trainable, q.trainable);
        }
        // identical bytes on re-save
        let path2 = dir.path().join("ck2.bin");
        save_checkpoint(&loaded, &path2).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn rejects_bad_magic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.bin");
        std::fs::write(&path, b"NOTACKPTxxxxxxxx").unwrap();
        assert!(load_checkpoint(&path).is_err());
    }
}
