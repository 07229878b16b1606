use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::objectives::LossWeights;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Pretrain1,
    Pretrain2,
    Finetune,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Pretrain1 => "pretrain1",
            Stage::Pretrain2 => "pretrain2",
            Stage::Finetune => "finetune",
        }
    }

    pub(crate) fn tag(self) -> u64 {
        match self {
            Stage::Pretrain1 => 1,
            Stage::Pretrain2 => 2,
            Stage::Finetune => 3,
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Optimisation settings. The defaults follow the BART fine-tuning row
/// (lr 5e-6, batch 64, dropout 0.1, 40 epochs) with a desk-scale length cap.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub dropout_rate: f64,
    pub epochs: usize,
    /// Prompt length cap, in encoder positions.
    pub max_len: usize,
    pub seed: u64,
    pub stage: Stage,
    /// Steps between centroid rebuilds in stage two.
    pub centroid_refresh_every: usize,
    pub loss_weights: LossWeights,
    /// Token and frame masking rate of the context-reconstruction loss.
    pub mask_prob: f64,
    /// Randomly drop acoustic and/or visual inputs per sample.
    pub modal_mask: bool,
    /// Upper bound on optimizer steps, whatever `epochs` gives.
    pub max_steps: Option<usize>,
    pub clip_norm: f64,
    /// Write an intermediate checkpoint every this many steps.
    pub checkpoint_every: Option<usize>,
    /// Validate every this many epochs during fine-tuning; 0 disables.
    pub validate_every: usize,
    pub eval_batch_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 5e-6,
            batch_size: 64,
            dropout_rate: 0.1,
            epochs: 40,
            max_len: 128,
            seed: 0,
            stage: Stage::Finetune,
            centroid_refresh_every: 200,
            loss_weights: LossWeights::default(),
            mask_prob: 0.5,
            modal_mask: true,
            max_steps: None,
            clip_norm: 1.0,
            checkpoint_every: None,
            validate_every: 1,
            eval_batch_size: 32,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return bad(format!("learning_rate {} must be positive", self.learning_rate));
        }
        if self.batch_size < 4 {
            return bad(format!("batch_size {} must cover the four tasks", self.batch_size));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad(format!("dropout_rate {} outside [0, 1)", self.dropout_rate));
        }
        if !(0.0..=1.0).contains(&self.mask_prob) {
            return bad(format!("mask_prob {} outside [0, 1]", self.mask_prob));
        }
        if self.max_len == 0 || self.centroid_refresh_every == 0 || self.eval_batch_size == 0 {
            return bad("max_len, centroid_refresh_every and eval_batch_size must be positive".into());
        }
        if !(self.clip_norm > 0.0) {
            return bad(format!("clip_norm {} must be positive", self.clip_norm));
        }
        if self.checkpoint_every == Some(0) {
            return bad("checkpoint_every must be positive".into());
        }
        let w = &self.loss_weights;
        if [w.mcm, w.spp, w.ccl, w.cep].iter().any(|v| !v.is_finite() || *v < 0.0) {
            return bad("loss weights must be finite and non-negative".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_and_validation() {
        let c = TrainConfig::default();
        c.validate().unwrap();
        assert_eq!((c.learning_rate, c.batch_size, c.dropout_rate, c.epochs), (5e-6, 64, 0.1, 40));
        assert!(TrainConfig { batch_size: 3, ..c.clone() }.validate().is_err());
        assert!(TrainConfig { learning_rate: 0.0, ..c.clone() }.validate().is_err());
        assert!(TrainConfig { dropout_rate: 1.0, ..c.clone() }.validate().is_err());
        let parsed: TrainConfig = serde_json::from_str(r#"{"stage": "pretrain2", "epochs": 2}"#).unwrap();
        assert_eq!((parsed.stage, parsed.epochs), (Stage::Pretrain2, 2));
        assert!(serde_json::from_str::<TrainConfig>(r#"{"epoch": 2}"#).is_err());
    }
}
