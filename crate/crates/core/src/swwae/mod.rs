//! The stacked what-where auto-encoder: a Convnet encoder and classifier
//! head joined to a mirrored Deconvnet decoder through lateral where
//! connections, trained on one joint objective
//!
//! ```text
//! L = lambda_NLL * L_NLL + lambda_L2rec * L_L2rec + lambda_L2M * L_L2M
//! ```
//!
//! Zeroing weights switches modality: no reconstruction terms and the model
//! is a plain Convnet; no NLL term and it is a deep auto-encoder; all three
//! active and it trains semi-supervised.

mod checkpoint;
mod model;

pub use checkpoint::{
    load_checkpoint, load_checkpoint_file, save_checkpoint, save_checkpoint_file,
};
pub use model::{ForwardTrace, LateralKind, SwwaeModel};

use crate::error::{Error, Result};
use crate::pooling::PoolMode;

/// Which loss terms are live. Selecting a modality only masks weights; the
/// configured values are kept and restored when switching back.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Modality {
    Supervised,
    Unsupervised,
    Semi,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SwwaeConfig {
    pub lambda_nll: f64,
    pub lambda_l2rec: f64,
    pub lambda_l2m: f64,
    pub pool_mode: PoolMode,
    /// Dropout probability on each fully-connected layer input.
    pub dropout: f64,
    /// Dropout probability after each encoder convolution.
    pub conv_dropout: f64,
    /// L1 sparsity weight on encoder hidden activations.
    pub l1_weight: f64,
    /// Spatial batchnorm after each encoder convolution.
    pub batchnorm: bool,
    /// Batchnorm in the decoder pathway too (off: decoder stays plain).
    pub decoder_batchnorm: bool,
}

impl Default for SwwaeConfig {
    fn default() -> Self {
        SwwaeConfig {
            lambda_nll: 1.0,
            lambda_l2rec: 0.0,
            lambda_l2m: 0.0,
            pool_mode: PoolMode::Hard,
            dropout: 0.0,
            conv_dropout: 0.0,
            l1_weight: 0.0,
            batchnorm: false,
            decoder_batchnorm: false,
        }
    }
}

impl SwwaeConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_nll", self.lambda_nll),
            ("lambda_l2rec", self.lambda_l2rec),
            ("lambda_l2m", self.lambda_l2m),
            ("l1_weight", self.l1_weight),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::invalid(format!(
                    "{name} must be finite and non-negative, got {v}"
                )));
            }
        }
        for (name, q) in [("dropout", self.dropout), ("conv_dropout", self.conv_dropout)] {
            if !(0.0..1.0).contains(&q) {
                return Err(Error::invalid(format!("{name} must be in [0,1), got {q}")));
            }
        }
        if let PoolMode::Soft { beta } = self.pool_mode {
            if !beta.is_finite() || beta < 0.0 {
                return Err(Error::invalid(format!(
                    "soft pooling beta must be finite and non-negative, got {beta}"
                )));
            }
        }
        Ok(())
    }
}

/// Per-batch loss values. The component terms are unweighted; `l_total`
/// applies the lambda weights (and includes the L1 term, whose weight is
/// already part of its definition).
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub l_nll: f64,
    pub l_l2rec: f64,
    pub l_l2m: f64,
    pub l_l1: f64,
    pub l_total: f64,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_validates() {
        assert!(SwwaeConfig::default().validate().is_ok());
    }

    #[test]
    fn invalid_configs_rejected() {
        let mut c = SwwaeConfig::default();
        c.lambda_l2rec = -1.0;
        assert!(c.validate().is_err());

        let mut c = SwwaeConfig::default();
        c.lambda_nll = f64::NAN;
        assert!(c.validate().is_err());

        let mut c = SwwaeConfig::default();
        c.dropout = 1.0;
        assert!(c.validate().is_err());

        let mut c = SwwaeConfig::default();
        c.pool_mode = PoolMode::Soft { beta: -2.0 };
        assert!(c.validate().is_err());
    }
}
