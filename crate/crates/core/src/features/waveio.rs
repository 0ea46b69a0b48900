//! Raw waveform container: `FASRWAVE`, version, sample rate, length, f64
//! samples (little-endian).

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{FeatureError, Waveform};

pub const WAVEFORM_FORMAT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"FASRWAVE";

pub fn write_waveform(wave: &Waveform, path: &Path) -> Result<(), FeatureError> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&WAVEFORM_FORMAT_VERSION.to_le_bytes())?;
    w.write_all(&wave.sample_rate.to_le_bytes())?;
    w.write_all(&(wave.samples.len() as u64).to_le_bytes())?;
    for &s in &wave.samples {
        w.write_all(&s.to_bits().to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_waveform(path: &Path) -> Result<Waveform, FeatureError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(FeatureError::Malformed { what: "waveform", line: 0, reason: "bad magic".into() });
    }
    let mut b4 = [0u8; 4];
    r.read_exact(&mut b4)?;
    let version = u32::from_le_bytes(b4);
    if version != WAVEFORM_FORMAT_VERSION {
        return Err(FeatureError::Malformed { what: "waveform", line: 0, reason: format!("unsupported version {version}") });
    }
    r.read_exact(&mut b4)?;
    let sample_rate = u32::from_le_bytes(b4);
    let mut b8 = [0u8; 8];
    r.read_exact(&mut b8)?;
    let len = u64::from_le_bytes(b8) as usize;
    let mut samples = Vec::with_capacity(len);
    for _ in 0..len {
        r.read_exact(&mut b8)?;
        samples.push(f64::from_bits(u64::from_le_bytes(b8)));
    }
    Waveform::new(samples, sample_rate)
}
