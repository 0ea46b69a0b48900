//! Speaker/environment transform algebra: LHUC and HUB transforms, their
//! linear (LFA) and cascaded (CFA) factorised combinations, and the
//! deterministic/variational parameterisations with KL regularisation.

mod apply;
mod bayes;
mod cache;

pub use apply::{cfa_apply, hub_apply, lfa_apply, lhuc_apply, lhuc_scale_node, TransformValues};
pub use bayes::{kl_node, kl_to_prior, sample_node, sample_transform, PriorSpec};
pub use cache::{TransformCache, CacheEntry, CacheProvenance, TRANSFORM_CACHE_VERSION};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum AdaptError {
    #[error("transform dim {transform} does not match hidden dim {hidden}")]
    DimMismatch { transform: usize, hidden: usize },
    #[error("beta {0} out of [0, 1]")]
    BetaOutOfRange(f64),
    #[error("deviation must be strictly positive, got {0}")]
    NonPositiveDeviation(f64),
    #[error("sample count K must be at least 1")]
    BadSampleCount,
    #[error("malformed transform cache at line {line}: {reason}")]
    MalformedCache { line: usize, reason: String },
    #[error("cache is missing a transform for {owner_type} {owner_id}")]
    MissingCacheKey { owner_type: &'static str, owner_id: String },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Ad(#[from] crate::autodiff::AdError),
}

pub type Result<T> = std::result::Result<T, AdaptError>;

/// LHUC re-scales hidden activations through `2*sigmoid`; HUB adds a bias
/// through the identity activation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TransformKind {
    Lhuc,
    Hub,
}

impl TransformKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            TransformKind::Lhuc => "lhuc",
            TransformKind::Hub => "hub",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "lhuc" => Some(TransformKind::Lhuc),
            "hub" => Some(TransformKind::Hub),
            _ => None,
        }
    }
}

/// Who a transform belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum OwnerType {
    Speaker,
    Env,
    /// One transform per (speaker, environment) pair; the non-factorised
    /// baseline.
    Joint,
}

impl OwnerType {
    pub fn as_str(&self) -> &'static str {
        match self {
            OwnerType::Speaker => "speaker",
            OwnerType::Env => "env",
            OwnerType::Joint => "joint",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "speaker" => Some(OwnerType::Speaker),
            "env" => Some(OwnerType::Env),
            "joint" => Some(OwnerType::Joint),
            _ => None,
        }
    }
}

/// Deterministic vector or Gaussian posterior (mean plus log-deviation, so
/// deviations stay strictly positive).
#[derive(Debug, Clone, PartialEq)]
pub enum TransformParam {
    Deterministic { vector: Vec<f64> },
    Variational { mean: Vec<f64>, log_dev: Vec<f64> },
}

/// One speaker-dependent or environment-dependent transform.
#[derive(Debug, Clone, PartialEq)]
pub struct FactorTransform {
    pub owner_type: OwnerType,
    pub owner_id: String,
    pub kind: TransformKind,
    pub param: TransformParam,
}

impl FactorTransform {
    pub fn identity_deterministic(owner_type: OwnerType, owner_id: &str, kind: TransformKind, dim: usize) -> Self {
        FactorTransform { owner_type, owner_id: owner_id.to_string(), kind, param: TransformParam::Deterministic { vector: vec![0.0; dim] } }
    }

    pub fn dim(&self) -> usize {
        match &self.param {
            TransformParam::Deterministic { vector } => vector.len(),
            TransformParam::Variational { mean, .. } => mean.len(),
        }
    }

    /// Decoding uses the posterior mean; a deterministic transform passes
    /// through unchanged. The deviation plays no role at inference.
    pub fn posterior_mean_inference(&self) -> FactorTransform {
        match &self.param {
            TransformParam::Deterministic { .. } => self.clone(),
            TransformParam::Variational { mean, .. } => FactorTransform {
                owner_type: self.owner_type,
                owner_id: self.owner_id.clone(),
                kind: self.kind,
                param: TransformParam::Deterministic { vector: mean.clone() },
            },
        }
    }

    /// The vector used when this transform is applied deterministically.
    pub fn point_vector(&self) -> &[f64] {
        match &self.param {
            TransformParam::Deterministic { vector } => vector,
            TransformParam::Variational { mean, .. } => mean,
        }
    }
}

/// How speaker and environment factors combine.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AdaptationMode {
    SpeakerOnly { kind: TransformKind },
    EnvOnly { kind: TransformKind },
    JointSingle { kind: TransformKind },
    /// Linear factorised adaptation: convex combination of two LHUC scales.
    Lfa { beta: f64 },
    /// Cascaded factorised adaptation: speaker first, then environment.
    Cfa { spk: TransformKind, env: TransformKind },
}

impl AdaptationMode {
    pub fn validate(&self) -> Result<()> {
        if let AdaptationMode::Lfa { beta } = self {
            if !(0.0..=1.0).contains(beta) {
                return Err(AdaptError::BetaOutOfRange(*beta));
            }
        }
        Ok(())
    }

    pub fn speaker_kind(&self) -> Option<TransformKind> {
        match self {
            AdaptationMode::SpeakerOnly { kind } => Some(*kind),
            AdaptationMode::EnvOnly { .. } => None,
            AdaptationMode::JointSingle { .. } => None,
            AdaptationMode::Lfa { .. } => Some(TransformKind::Lhuc),
            AdaptationMode::Cfa { spk, .. } => Some(*spk),
        }
    }

    pub fn env_kind(&self) -> Option<TransformKind> {
        match self {
            AdaptationMode::SpeakerOnly { .. } => None,
            AdaptationMode::EnvOnly { kind } => Some(*kind),
            AdaptationMode::JointSingle { .. } => None,
            AdaptationMode::Lfa { .. } => Some(TransformKind::Lhuc),
            AdaptationMode::Cfa { env, .. } => Some(*env),
        }
    }

    pub fn joint_kind(&self) -> Option<TransformKind> {
        match self {
            AdaptationMode::JointSingle { kind } => Some(*kind),
            _ => None,
        }
    }
}
