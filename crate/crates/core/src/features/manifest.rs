//! Line-oriented manifests.
//!
//! Base columns: `utt_id<TAB>speaker_id<TAB>env_id<TAB>path<TAB>transcript`
//! (transcript may be empty). Corrupted manifests append
//! `noise_id<TAB>snr_db<TAB>seen_flag`.

use std::fs;
use std::path::Path;

use super::FeatureError;

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub utt_id: String,
    pub speaker_id: String,
    pub env_id: String,
    pub path: String,
    pub transcript: Option<String>,
    pub noise_id: Option<String>,
    pub snr_db: Option<f64>,
    pub seen_flag: Option<bool>,
}

impl ManifestEntry {
    pub fn new(utt_id: &str, speaker_id: &str, env_id: &str, path: &str, transcript: Option<&str>) -> Self {
        ManifestEntry {
            utt_id: utt_id.to_string(),
            speaker_id: speaker_id.to_string(),
            env_id: env_id.to_string(),
            path: path.to_string(),
            transcript: transcript.map(str::to_string),
            noise_id: None,
            snr_db: None,
            seen_flag: None,
        }
    }
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>, FeatureError> {
    let text = fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 5 && cols.len() != 8 {
            return Err(FeatureError::Malformed { what: "manifest", line: i + 1, reason: format!("expected 5 or 8 tab-separated columns, got {}", cols.len()) });
        }
        let mut entry = ManifestEntry::new(cols[0], cols[1], cols[2], cols[3], if cols[4].is_empty() { None } else { Some(cols[4]) });
        if cols.len() == 8 {
            entry.noise_id = Some(cols[5].to_string());
            entry.snr_db = Some(cols[6].parse().map_err(|_| FeatureError::Malformed { what: "manifest", line: i + 1, reason: format!("bad snr_db {:?}", cols[6]) })?);
            entry.seen_flag = Some(match cols[7] {
                "seen" => true,
                "unseen" => false,
                other => return Err(FeatureError::Malformed { what: "manifest", line: i + 1, reason: format!("bad seen_flag {other:?}") }),
            });
        }
        out.push(entry);
    }
    Ok(out)
}

pub fn write_manifest(entries: &[ManifestEntry], path: &Path) -> Result<(), FeatureError> {
    let mut text = String::new();
    for e in entries {
        text.push_str(&format!("{}\t{}\t{}\t{}\t{}", e.utt_id, e.speaker_id, e.env_id, e.path, e.transcript.as_deref().unwrap_or("")));
        if let (Some(noise), Some(snr), Some(seen)) = (&e.noise_id, e.snr_db, e.seen_flag) {
            text.push_str(&format!("\t{}\t{}\t{}", noise, snr, if seen { "seen" } else { "unseen" }));
        }
        text.push('\n');
    }
    fs::write(path, text)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_both_widths() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.tsv");
        let mut corrupted = ManifestEntry::new("u1", "s1", "white@5", "feats.fb", Some("abc"));
        corrupted.noise_id = Some("white".into());
        corrupted.snr_db = Some(5.0);
        corrupted.seen_flag = Some(true);
        let entries = vec![ManifestEntry::new("u0", "s0", "clean", "feats.fb", None), corrupted];
        write_manifest(&entries, &path).unwrap();
        let back = read_manifest(&path).unwrap();
        assert_eq!(entries, back);
    }

    #[test]
    fn rejects_wrong_column_count() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.tsv");
        std::fs::write(&path, "a\tb\tc\n").unwrap();
        assert!(read_manifest(&path).is_err());
    }
}
