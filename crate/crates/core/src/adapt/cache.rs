//! Transform cache file.
//!
//! Text format, one transform per record line:
//!
//! ```text
//! fasr-transform-cache v1
//! dim = 48
//! layer = subsample
//! spk_kind = hub
//! env_kind = hub
//! parameterization = variational
//! corpus = synth-default
//! epochs = 3
//! objective = 1.2345
//! ---
//! speaker s01 [0.1 -0.2 ...] [0.001 0.001 ...]
//! env e02 [0.3 ...] [0.002 ...]
//! ```
//!
//! Deterministic records carry one bracket group (the vector), variational
//! records two (mean, deviation). Floats use Rust's shortest round-trip
//! formatting, so save/load is exact at 64-bit precision.

use std::fs;
use std::path::Path;

use indexmap::IndexMap;

use super::{AdaptError, FactorTransform, OwnerType, Result, TransformKind, TransformParam};

pub const TRANSFORM_CACHE_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Default)]
pub struct CacheProvenance {
    pub corpus: String,
    pub epochs: usize,
    pub objective: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CacheEntry {
    pub transform: FactorTransform,
}

/// Estimated transforms keyed by (owner type, owner id). Read-only once an
/// estimation run commits it to disk.
#[derive(Debug, Clone, PartialEq)]
pub struct TransformCache {
    pub dim: usize,
    pub layer: String,
    pub spk_kind: Option<TransformKind>,
    pub env_kind: Option<TransformKind>,
    pub variational: bool,
    pub provenance: CacheProvenance,
    entries: IndexMap<(OwnerType, String), FactorTransform>,
}

impl TransformCache {
    pub fn new(dim: usize, spk_kind: Option<TransformKind>, env_kind: Option<TransformKind>, variational: bool, provenance: CacheProvenance) -> Self {
        TransformCache { dim, layer: "subsample".to_string(), spk_kind, env_kind, variational, provenance, entries: IndexMap::new() }
    }

    pub fn insert(&mut self, transform: FactorTransform) {
        self.entries.insert((transform.owner_type, transform.owner_id.clone()), transform);
    }

    pub fn get(&self, owner_type: OwnerType, owner_id: &str) -> Result<&FactorTransform> {
        self.entries
            .get(&(owner_type, owner_id.to_string()))
            .ok_or_else(|| AdaptError::MissingCacheKey { owner_type: owner_type.as_str(), owner_id: owner_id.to_string() })
    }

    pub fn contains(&self, owner_type: OwnerType, owner_id: &str) -> bool {
        self.entries.contains_key(&(owner_type, owner_id.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = &FactorTransform> {
        self.entries.values()
    }

    pub fn owner_ids(&self, owner_type: OwnerType) -> Vec<String> {
        self.entries.keys().filter(|(t, _)| *t == owner_type).map(|(_, id)| id.clone()).collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = format!("fasr-transform-cache v{TRANSFORM_CACHE_VERSION}\n");
        text.push_str(&format!("dim = {}\n", self.dim));
        text.push_str(&format!("layer = {}\n", self.layer));
        text.push_str(&format!("spk_kind = {}\n", self.spk_kind.map_or("-", |k| k.as_str())));
        text.push_str(&format!("env_kind = {}\n", self.env_kind.map_or("-", |k| k.as_str())));
        text.push_str(&format!("parameterization = {}\n", if self.variational { "variational" } else { "deterministic" }));
        text.push_str(&format!("corpus = {}\n", self.provenance.corpus));
        text.push_str(&format!("epochs = {}\n", self.provenance.epochs));
        text.push_str(&format!("objective = {}\n", self.provenance.objective));
        text.push_str("---\n");
        for t in self.entries.values() {
            text.push_str(&format!("{} {} ", t.owner_type.as_str(), t.owner_id));
            match &t.param {
                TransformParam::Deterministic { vector } => {
                    text.push_str(&bracket(vector));
                }
                TransformParam::Variational { mean, log_dev } => {
                    text.push_str(&bracket(mean));
                    text.push(' ');
                    let dev: Vec<f64> = log_dev.iter().map(|l| l.exp()).collect();
                    text.push_str(&bracket(&dev));
                }
            }
            text.push('\n');
        }
        fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let mut lines = text.lines().enumerate();
        let bad = |line: usize, reason: &str| AdaptError::MalformedCache { line: line + 1, reason: reason.to_string() };

        let (i, header) = lines.next().ok_or_else(|| bad(0, "empty file"))?;
        if header != format!("fasr-transform-cache v{TRANSFORM_CACHE_VERSION}") {
            return Err(bad(i, &format!("unsupported header {header:?}")));
        }
        let mut dim = None;
        let mut layer = "subsample".to_string();
        let mut spk_kind = None;
        let mut env_kind = None;
        let mut variational = false;
        let mut provenance = CacheProvenance::default();
        let mut entries = IndexMap::new();
        let mut in_body = false;
        for (i, line) in lines {
            if line.is_empty() {
                continue;
            }
            if line == "---" {
                in_body = true;
                continue;
            }
            if !in_body {
                let (key, value) = line.split_once(" = ").ok_or_else(|| bad(i, "expected `key = value`"))?;
                match key {
                    "dim" => dim = Some(value.parse::<usize>().map_err(|_| bad(i, "bad dim"))?),
                    "layer" => layer = value.to_string(),
                    "spk_kind" => spk_kind = TransformKind::parse(value),
                    "env_kind" => env_kind = TransformKind::parse(value),
                    "parameterization" => variational = value == "variational",
                    "corpus" => provenance.corpus = value.to_string(),
                    "epochs" => provenance.epochs = value.parse().map_err(|_| bad(i, "bad epochs"))?,
                    "objective" => provenance.objective = value.parse().map_err(|_| bad(i, "bad objective"))?,
                    other => return Err(bad(i, &format!("unknown header key {other:?}"))),
                }
                continue;
            }
            let (owner_type, rest) = line.split_once(' ').ok_or_else(|| bad(i, "expected owner type"))?;
            let owner_type = OwnerType::parse(owner_type).ok_or_else(|| bad(i, "bad owner type"))?;
            let (owner_id, rest) = rest.split_once(' ').ok_or_else(|| bad(i, "expected owner id"))?;
            let groups = parse_brackets(rest).map_err(|r| bad(i, &r))?;
            let kind = match owner_type {
                OwnerType::Speaker | OwnerType::Joint => spk_kind,
                OwnerType::Env => env_kind,
            }
            .ok_or_else(|| bad(i, "record present but kind header is `-`"))?;
            let param = if variational {
                if groups.len() != 2 {
                    return Err(bad(i, "variational record needs [mean] [dev]"));
                }
                for &d in &groups[1] {
                    if d <= 0.0 {
                        return Err(bad(i, "deviation entries must be positive"));
                    }
                }
                TransformParam::Variational { mean: groups[0].clone(), log_dev: groups[1].iter().map(|d| d.ln()).collect() }
            } else {
                if groups.len() != 1 {
                    return Err(bad(i, "deterministic record needs one [vector]"));
                }
                TransformParam::Deterministic { vector: groups[0].clone() }
            };
            let t = FactorTransform { owner_type, owner_id: owner_id.to_string(), kind, param };
            if let Some(d) = dim {
                if t.dim() != d {
                    return Err(bad(i, &format!("vector length {} does not match dim {d}", t.dim())));
                }
            }
            entries.insert((owner_type, owner_id.to_string()), t);
        }
        Ok(TransformCache {
            dim: dim.ok_or_else(|| bad(0, "missing dim header"))?,
            layer,
            spk_kind,
            env_kind,
            variational,
            provenance,
            entries,
        })
    }
}

fn bracket(values: &[f64]) -> String {
    let inner: Vec<String> = values.iter().map(|v| format!("{v}")).collect();
    format!("[{}]", inner.join(" "))
}

fn parse_brackets(s: &str) -> std::result::Result<Vec<Vec<f64>>, String> {
    let mut groups = Vec::new();
    let mut rest = s.trim();
    while !rest.is_empty() {
        if !rest.starts_with('[') {
            return Err(format!("expected '[' at {rest:?}"));
        }
        let end = rest.find(']').ok_or("unclosed bracket")?;
        let inner = &rest[1..end];
        let values: std::result::Result<Vec<f64>, _> = inner.split_whitespace().map(str::parse::<f64>).collect();
        groups.push(values.map_err(|e| format!("bad float: {e}"))?);
        rest = rest[end + 1..].trim_start();
    }
    Ok(groups)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_is_exact_at_64_bit() {
        let mut cache = TransformCache::new(
            3,
            Some(TransformKind::Hub),
            Some(TransformKind::Hub),
            true,
            CacheProvenance { corpus: "synth".into(), epochs: 3, objective: 1.25 },
        );
        cache.insert(FactorTransform {
            owner_type: OwnerType::Speaker,
            owner_id: "s01".into(),
            kind: TransformKind::Hub,
            param: TransformParam::Variational {
                mean: vec![0.1, -0.25, 1.0 / 3.0],
                log_dev: vec![0.001f64.ln(), 0.37f64.ln(), 2.0f64.ln()],
            },
        });
        cache.insert(FactorTransform {
            owner_type: OwnerType::Env,
            owner_id: "e02".into(),
            kind: TransformKind::Hub,
            param: TransformParam::Variational { mean: vec![0.0; 3], log_dev: vec![-3.0; 3] },
        });
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cache.txt");
        cache.save(&path).unwrap();
        let loaded = TransformCache::load(&path).unwrap();
        assert_eq!(loaded.dim, 3);
        assert_eq!(loaded.len(), 2);
        let a = cache.get(OwnerType::Speaker, "s01").unwrap();
        let b = loaded.get(OwnerType::Speaker, "s01").unwrap();
        match (&a.param, &b.param) {
            (TransformParam::Variational { mean: m1, log_dev: d1 }, TransformParam::Variational { mean: m2, log_dev: d2 }) => {
                assert_eq!(m1, m2);
                for (x, y) in d1.iter().zip(d2) {
                    // stored as dev = exp(log_dev); exp/ln round-trip wobble only
                    assert!((x - y).abs() < 1e-15);
                }
            }
            _ => panic!("wrong parameterization"),
        }
    }

    #[test]
    fn deterministic_roundtrip_bitwise() {
        let mut cache = TransformCache::new(2, Some(TransformKind::Lhuc), None, false, CacheProvenance::default());
        cache.insert(FactorTransform {
            owner_type: OwnerType::Speaker,
            owner_id: "spk".into(),
            kind: TransformKind::Lhuc,
            param: TransformParam::Deterministic { vector: vec![0.1 + 0.2, -1e-17] },
        });
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cache.txt");
        cache.save(&path).unwrap();
        let loaded = TransformCache::load(&path).unwrap();
        assert_eq!(loaded, cache);
    }

    #[test]
    fn missing_key_names_owner() {
        let cache = TransformCache::new(2, Some(TransformKind::Hub), None, false, CacheProvenance::default());
        match cache.get(OwnerType::Speaker, "ghost") {
            Err(AdaptError::MissingCacheKey { owner_type, owner_id }) => {
                assert_eq!(owner_type, "speaker");
                assert_eq!(owner_id, "ghost");
            }
            other => panic!("{other:?}"),
        }
    }
}
