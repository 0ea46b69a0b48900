//! Transform parameters inside a `ParamStore`, one set per adaptation run.
//!
//! Identifiers live under the `adapt/` prefix, disjoint from the canonical
//! `model/` namespace. Deterministic transforms store one vector (`v`),
//! variational ones a mean (`mu`) and a log-deviation (`logdev`).

use std::collections::HashMap;

use super::{PipelineError, Result};
use crate::adapt::{
    cfa_apply, hub_apply, lfa_apply, lhuc_apply, sample_node, AdaptationMode, FactorTransform, OwnerType, TransformKind, TransformParam,
    TransformValues,
};
use crate::autodiff::{Graph, NodeId, ParamStore, Tensor};

/// Per-owner standard-normal draws for one reparameterised sample.
pub type EpsMap = HashMap<String, Vec<f64>>;

/// The set of transforms an estimation or adaptive-training run owns.
#[derive(Debug, Clone)]
pub struct TransformParams {
    pub mode: AdaptationMode,
    pub variational: bool,
    pub dim: usize,
    pub speakers: Vec<String>,
    pub envs: Vec<String>,
    pub joints: Vec<(String, String)>,
    /// Initial log-deviation per kind, matching the prior scales.
    pub lhuc_dev_init: f64,
    pub hub_dev_init: f64,
}

fn owner_prefix(owner_type: OwnerType, owner_id: &str) -> String {
    format!("adapt/{}/{}", owner_type.as_str(), owner_id)
}

pub fn joint_owner_id(speaker: &str, env: &str) -> String {
    format!("{speaker}+{env}")
}

impl TransformParams {
    pub fn for_dataset(mode: AdaptationMode, variational: bool, dim: usize, speakers: Vec<String>, envs: Vec<String>) -> Result<Self> {
        mode.validate()?;
        let joints = if mode.joint_kind().is_some() {
            let mut out = Vec::new();
            for s in &speakers {
                for e in &envs {
                    out.push((s.clone(), e.clone()));
                }
            }
            out
        } else {
            Vec::new()
        };
        Ok(TransformParams {
            mode,
            variational,
            dim,
            speakers: if mode.speaker_kind().is_some() { speakers } else { Vec::new() },
            envs: if mode.env_kind().is_some() { envs } else { Vec::new() },
            joints,
            lhuc_dev_init: 0.1,
            hub_dev_init: 0.001,
        })
    }

    fn owners(&self) -> Vec<(OwnerType, String, TransformKind)> {
        let mut out = Vec::new();
        if let Some(kind) = self.mode.speaker_kind() {
            for s in &self.speakers {
                out.push((OwnerType::Speaker, s.clone(), kind));
            }
        }
        if let Some(kind) = self.mode.env_kind() {
            for e in &self.envs {
                out.push((OwnerType::Env, e.clone(), kind));
            }
        }
        if let Some(kind) = self.mode.joint_kind() {
            for (s, e) in &self.joints {
                out.push((OwnerType::Joint, joint_owner_id(s, e), kind));
            }
        }
        out
    }

    fn dev_init(&self, kind: TransformKind) -> f64 {
        match kind {
            TransformKind::Lhuc => self.lhuc_dev_init,
            TransformKind::Hub => self.hub_dev_init,
        }
    }

    /// Register every transform at its identity initialisation.
    pub fn register(&self, store: &mut ParamStore) -> Result<()> {
        for (ot, id, kind) in self.owners() {
            let p = owner_prefix(ot, &id);
            if self.variational {
                store.register(&format!("{p}/mu"), Tensor::zeros(vec![self.dim]), true)?;
                store.register(&format!("{p}/logdev"), Tensor::full(vec![self.dim], self.dev_init(kind).ln()), true)?;
            } else {
                store.register(&format!("{p}/v"), Tensor::zeros(vec![self.dim]), true)?;
            }
        }
        Ok(())
    }

    /// All parameter identifiers owned by this set, in a stable order.
    pub fn param_ids(&self) -> Vec<String> {
        let mut out = Vec::new();
        for (ot, id, _) in self.owners() {
            let p = owner_prefix(ot, &id);
            if self.variational {
                out.push(format!("{p}/mu"));
                out.push(format!("{p}/logdev"));
            } else {
                out.push(format!("{p}/v"));
            }
        }
        out
    }

    /// Owner prefixes of the variational posteriors (for KL terms and
    /// epsilon draws).
    pub fn owner_entries(&self) -> Vec<(OwnerType, String, TransformKind)> {
        self.owners()
    }

    /// The concrete vector node for one owner: the parameter itself when
    /// deterministic, the reparameterised sample when variational.
    fn vector_node(&self, g: &mut Graph, store: &ParamStore, ot: OwnerType, id: &str, eps: Option<&EpsMap>) -> Result<NodeId> {
        let p = owner_prefix(ot, id);
        if self.variational {
            let mu = g.param(store, &format!("{p}/mu"))?;
            let logdev = g.param(store, &format!("{p}/logdev"))?;
            match eps {
                Some(map) => {
                    let e = map.get(&p).ok_or_else(|| PipelineError::EmptyCell(p.clone()))?;
                    Ok(sample_node(g, mu, logdev, e)?)
                }
                // posterior mean when no draw is supplied
                None => Ok(mu),
            }
        } else {
            Ok(g.param(store, &format!("{p}/v"))?)
        }
    }

    /// Apply this set's transforms for an utterance of (speaker, env) to the
    /// hidden node `h`.
    pub fn apply(&self, g: &mut Graph, store: &ParamStore, h: NodeId, speaker: &str, env: &str, eps: Option<&EpsMap>) -> Result<NodeId> {
        let adapted = match self.mode {
            AdaptationMode::SpeakerOnly { kind } => {
                let r = self.vector_node(g, store, OwnerType::Speaker, speaker, eps)?;
                match kind {
                    TransformKind::Lhuc => lhuc_apply(g, h, r)?,
                    TransformKind::Hub => hub_apply(g, h, r)?,
                }
            }
            AdaptationMode::EnvOnly { kind } => {
                let n = self.vector_node(g, store, OwnerType::Env, env, eps)?;
                match kind {
                    TransformKind::Lhuc => lhuc_apply(g, h, n)?,
                    TransformKind::Hub => hub_apply(g, h, n)?,
                }
            }
            AdaptationMode::JointSingle { kind } => {
                let id = joint_owner_id(speaker, env);
                let j = self.vector_node(g, store, OwnerType::Joint, &id, eps)?;
                match kind {
                    TransformKind::Lhuc => lhuc_apply(g, h, j)?,
                    TransformKind::Hub => hub_apply(g, h, j)?,
                }
            }
            AdaptationMode::Lfa { beta } => {
                let r = self.vector_node(g, store, OwnerType::Speaker, speaker, eps)?;
                let n = self.vector_node(g, store, OwnerType::Env, env, eps)?;
                lfa_apply(g, h, r, n, beta)?
            }
            AdaptationMode::Cfa { spk, env: env_kind } => {
                let r = self.vector_node(g, store, OwnerType::Speaker, speaker, eps)?;
                let n = self.vector_node(g, store, OwnerType::Env, env, eps)?;
                cfa_apply(g, h, r, spk, n, env_kind)?
            }
        };
        Ok(adapted)
    }

    /// Extract the current transform values as value objects.
    pub fn extract(&self, store: &ParamStore) -> Result<Vec<FactorTransform>> {
        let mut out = Vec::new();
        for (ot, id, kind) in self.owners() {
            let p = owner_prefix(ot, &id);
            let param = if self.variational {
                TransformParam::Variational {
                    mean: store.value(&format!("{p}/mu"))?.data().to_vec(),
                    log_dev: store.value(&format!("{p}/logdev"))?.data().to_vec(),
                }
            } else {
                TransformParam::Deterministic { vector: store.value(&format!("{p}/v"))?.data().to_vec() }
            };
            out.push(FactorTransform { owner_type: ot, owner_id: id, kind, param });
        }
        Ok(out)
    }

    /// Concrete decode-time values for an utterance of (speaker, env) from a
    /// lookup of posterior-mean transforms.
    pub fn decode_values(&self, lookup: &dyn Fn(OwnerType, &str) -> Result<Vec<f64>>, speaker: &str, env: &str) -> Result<TransformValues> {
        Ok(match self.mode {
            AdaptationMode::SpeakerOnly { kind } => TransformValues::Single { kind, vector: lookup(OwnerType::Speaker, speaker)? },
            AdaptationMode::EnvOnly { kind } => TransformValues::Single { kind, vector: lookup(OwnerType::Env, env)? },
            AdaptationMode::JointSingle { kind } => {
                TransformValues::Single { kind, vector: lookup(OwnerType::Joint, &joint_owner_id(speaker, env))? }
            }
            AdaptationMode::Lfa { beta } => TransformValues::Lfa {
                beta,
                speaker: lookup(OwnerType::Speaker, speaker)?,
                env: lookup(OwnerType::Env, env)?,
            },
            AdaptationMode::Cfa { spk, env: env_kind } => TransformValues::Cfa {
                spk_kind: spk,
                env_kind,
                speaker: lookup(OwnerType::Speaker, speaker)?,
                env: lookup(OwnerType::Env, env)?,
            },
        })
    }
}
