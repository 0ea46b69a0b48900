//! Model hyperparameters.

use super::vocab::Vocab;
use super::{ModelError, Result};

/// Desk-scale defaults: 2 encoder blocks, 1 decoder block, 64-dim model with
/// 4 heads. The adaptation machinery is dimension-agnostic, so these shrink
/// or grow freely.
#[derive(Debug, Clone)]
pub struct ModelConfig {
    pub feature_dim: usize,
    pub encoder_blocks: usize,
    pub decoder_blocks: usize,
    pub model_dim: usize,
    pub heads: usize,
    pub ff_dim: usize,
    /// Depthwise convolution kernel inside encoder blocks; odd.
    pub conv_kernel: usize,
    /// Channels of the two subsampling convolutions.
    pub subsample_channels: usize,
    pub vocab: Vocab,
    pub lambda_train: f64,
    pub lambda_decode: f64,
    pub dropout: f64,
    pub label_smoothing: f64,
}

impl ModelConfig {
    pub fn desk_default(feature_dim: usize, vocab: Vocab) -> Self {
        ModelConfig {
            feature_dim,
            encoder_blocks: 2,
            decoder_blocks: 1,
            model_dim: 64,
            heads: 4,
            ff_dim: 256,
            conv_kernel: 7,
            subsample_channels: 32,
            vocab,
            lambda_train: 0.2,
            lambda_decode: 0.3,
            dropout: 0.1,
            label_smoothing: 0.1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.model_dim == 0 || self.heads == 0 || self.model_dim % self.heads != 0 {
            return Err(ModelError::BadConfig(format!("model dim {} not divisible by {} heads", self.model_dim, self.heads)));
        }
        for (name, l) in [("lambda_train", self.lambda_train), ("lambda_decode", self.lambda_decode)] {
            if !(0.0..=1.0).contains(&l) {
                return Err(ModelError::BadConfig(format!("{name} = {l} out of [0,1]")));
            }
        }
        if self.conv_kernel % 2 == 0 {
            return Err(ModelError::BadConfig(format!("conv kernel {} must be odd", self.conv_kernel)));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(ModelError::BadConfig(format!("dropout {} out of [0,1)", self.dropout)));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(ModelError::BadConfig(format!("label smoothing {} out of [0,1)", self.label_smoothing)));
        }
        if self.encoder_blocks == 0 || self.decoder_blocks == 0 {
            return Err(ModelError::BadConfig("need at least one encoder and one decoder block".into()));
        }
        if self.feature_dim < 7 {
            return Err(ModelError::BadConfig(format!("feature dim {} below subsampling minimum 7", self.feature_dim)));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_validates() {
        let cfg = ModelConfig::desk_default(40, Vocab::new("abc").unwrap());
        cfg.validate().unwrap();
    }

    #[test]
    fn bad_heads_rejected() {
        let mut cfg = ModelConfig::desk_default(40, Vocab::new("abc").unwrap());
        cfg.heads = 5;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn lambda_out_of_range_rejected() {
        let mut cfg = ModelConfig::desk_default(40, Vocab::new("abc").unwrap());
        cfg.lambda_train = 1.2;
        assert!(cfg.validate().is_err());
    }
}
