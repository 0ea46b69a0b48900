//! Speaker-by-environment partitioned corpus.

use indexmap::IndexMap;

use super::{PipelineError, Result};
use crate::features::FeatureSequence;

/// Utterances grouped into (speaker, environment) cells. Each utterance
/// lives in exactly one cell, keyed by its own labels. The union views used
/// for estimation fall out of iteration: every utterance of speaker `s`
/// contributes to `s`-owned transforms and every utterance of environment
/// `e` to `e`-owned ones.
#[derive(Debug, Clone, Default)]
pub struct AdaptationDataset {
    cells: IndexMap<(String, String), Vec<FeatureSequence>>,
}

impl AdaptationDataset {
    pub fn from_features(features: Vec<FeatureSequence>) -> Result<Self> {
        if features.is_empty() {
            return Err(PipelineError::EmptyDataset);
        }
        let mut cells: IndexMap<(String, String), Vec<FeatureSequence>> = IndexMap::new();
        for f in features {
            cells.entry((f.speaker_id.clone(), f.env_id.clone())).or_default().push(f);
        }
        Ok(AdaptationDataset { cells })
    }

    /// Sorted unique speaker ids.
    pub fn speakers(&self) -> Vec<String> {
        let mut out: Vec<String> = self.cells.keys().map(|(s, _)| s.clone()).collect();
        out.sort();
        out.dedup();
        out
    }

    /// Sorted unique environment ids.
    pub fn envs(&self) -> Vec<String> {
        let mut out: Vec<String> = self.cells.keys().map(|(_, e)| e.clone()).collect();
        out.sort();
        out.dedup();
        out
    }

    /// Sorted (speaker, env) cell keys.
    pub fn cell_keys(&self) -> Vec<(String, String)> {
        let mut out: Vec<(String, String)> = self.cells.keys().cloned().collect();
        out.sort();
        out
    }

    pub fn cell(&self, speaker: &str, env: &str) -> Option<&[FeatureSequence]> {
        self.cells.get(&(speaker.to_string(), env.to_string())).map(|v| v.as_slice())
    }

    /// All utterances in a stable order (sorted by cell, then insertion).
    pub fn utterances(&self) -> Vec<&FeatureSequence> {
        let mut keys = self.cell_keys();
        keys.sort();
        let mut out = Vec::new();
        for k in keys {
            out.extend(self.cells[&k].iter());
        }
        out
    }

    /// Union of speaker `s`'s data across environments and environment `e`'s
    /// data across speakers.
    pub fn union(&self, speaker: &str, env: &str) -> Vec<&FeatureSequence> {
        self.utterances().into_iter().filter(|f| f.speaker_id == speaker || f.env_id == env).collect()
    }

    pub fn len(&self) -> usize {
        self.cells.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    /// Subset containing a single cell.
    pub fn restrict_to_cell(&self, speaker: &str, env: &str) -> Result<AdaptationDataset> {
        let cell = self.cell(speaker, env).ok_or_else(|| PipelineError::EmptyCell(format!("{speaker}/{env}")))?;
        AdaptationDataset::from_features(cell.to_vec())
    }
}
