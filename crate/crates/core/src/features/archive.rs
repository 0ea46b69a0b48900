//! Feature archive container: every utterance of a corpus in one file.
//!
//! Layout (integers little-endian):
//!
//! ```text
//! magic   8 bytes "FASRFEAT"
//! version u32     currently 1
//! count   u64
//! record:
//!   utt_id, speaker_id, env_id   (u32 length + UTF-8 bytes each)
//!   has_transcript u8, transcript (u32 length + bytes, if present)
//!   T u64, F u64
//!   frames  T*F f64 bit patterns, row-major
//! ```

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use indexmap::IndexMap;

use super::{FeatureError, FeatureSequence};
use crate::autodiff::Tensor;

pub const FEATURE_ARCHIVE_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"FASRFEAT";

fn write_str(w: &mut impl Write, s: &str) -> io::Result<()> {
    w.write_all(&(s.len() as u32).to_le_bytes())?;
    w.write_all(s.as_bytes())
}

fn read_str(r: &mut impl Read) -> io::Result<String> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    let len = u32::from_le_bytes(b) as usize;
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|_| io::Error::new(io::ErrorKind::InvalidData, "non-UTF-8 string"))
}

pub fn save_archive(features: &[FeatureSequence], path: &Path) -> Result<(), FeatureError> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&FEATURE_ARCHIVE_VERSION.to_le_bytes())?;
    w.write_all(&(features.len() as u64).to_le_bytes())?;
    for f in features {
        write_str(&mut w, &f.utterance_id)?;
        write_str(&mut w, &f.speaker_id)?;
        write_str(&mut w, &f.env_id)?;
        match &f.transcript {
            Some(t) => {
                w.write_all(&[1])?;
                write_str(&mut w, t)?;
            }
            None => w.write_all(&[0])?,
        }
        w.write_all(&(f.num_frames() as u64).to_le_bytes())?;
        w.write_all(&(f.dim() as u64).to_le_bytes())?;
        for &v in f.frames.data() {
            w.write_all(&v.to_bits().to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Load an archive, keyed and ordered by utterance id as stored.
pub fn load_archive(path: &Path) -> Result<IndexMap<String, FeatureSequence>, FeatureError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(FeatureError::Malformed { what: "feature archive", line: 0, reason: "bad magic".into() });
    }
    let mut b4 = [0u8; 4];
    r.read_exact(&mut b4)?;
    let version = u32::from_le_bytes(b4);
    if version != FEATURE_ARCHIVE_VERSION {
        return Err(FeatureError::Malformed { what: "feature archive", line: 0, reason: format!("unsupported version {version}") });
    }
    let mut b8 = [0u8; 8];
    r.read_exact(&mut b8)?;
    let count = u64::from_le_bytes(b8);
    let mut out = IndexMap::new();
    for _ in 0..count {
        let utterance_id = read_str(&mut r)?;
        let speaker_id = read_str(&mut r)?;
        let env_id = read_str(&mut r)?;
        let mut flag = [0u8; 1];
        r.read_exact(&mut flag)?;
        let transcript = if flag[0] == 1 { Some(read_str(&mut r)?) } else { None };
        r.read_exact(&mut b8)?;
        let t = u64::from_le_bytes(b8) as usize;
        r.read_exact(&mut b8)?;
        let f = u64::from_le_bytes(b8) as usize;
        let mut data = Vec::with_capacity(t * f);
        for _ in 0..t * f {
            r.read_exact(&mut b8)?;
            data.push(f64::from_bits(u64::from_le_bytes(b8)));
        }
        let frames = Tensor::matrix(t, f, data)?;
        out.insert(utterance_id.clone(), FeatureSequence { utterance_id, speaker_id, env_id, frames, transcript });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_preserves_everything() {
        let feats = vec![
            FeatureSequence {
                utterance_id: "u1".into(),
                speaker_id: "s1".into(),
                env_id: "e1".into(),
                frames: Tensor::matrix(3, 2, vec![0.5, -1.25, 2.0, 1e-300, 0.0, 7.5]).unwrap(),
                transcript: Some("ab".into()),
            },
            FeatureSequence {
                utterance_id: "u2".into(),
                speaker_id: "s2".into(),
                env_id: "e2".into(),
                frames: Tensor::matrix(1, 2, vec![1.0, 2.0]).unwrap(),
                transcript: None,
            },
        ];
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.fb");
        save_archive(&feats, &path).unwrap();
        let back = load_archive(&path).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back["u1"], feats[0]);
        assert_eq!(back["u2"], feats[1]);
    }
}
