use serde::{Deserialize, Serialize};

use crate::data::Registry;
use crate::error::{Error, Result};
use crate::prompt::Vocab;

/// Architecture hyperparameters. `vocab_size` and `num_datasets` are filled
/// in from the vocabulary and registry by [`ModelConfig::resolve`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub text_embed_dim: usize,
    pub acoustic_dim: usize,
    pub visual_dim: usize,
    pub model_dim: usize,
    pub layers_enc: usize,
    pub layers_dec: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    /// Encoder positions (tokens plus frames); also bounds decoder length.
    pub max_len: usize,
    pub vocab_size: usize,
    pub num_datasets: usize,
    /// Reference rate only; a training run applies its own configured rate.
    pub dropout_rate: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        // Full-size reference: 768-wide BART-base backbone with 12+12 layers.
        ModelConfig {
            text_embed_dim: 64,
            acoustic_dim: 64,
            visual_dim: 64,
            model_dim: 64,
            layers_enc: 2,
            layers_dec: 2,
            heads: 4,
            ffn_dim: 256,
            max_len: 128,
            vocab_size: 0,
            num_datasets: 0,
            dropout_rate: 0.1,
        }
    }
}

impl ModelConfig {
    /// Copies vocabulary and registry sizes in, then validates against both.
    pub fn resolve(mut self, vocab: &Vocab, registry: &Registry) -> Result<Self> {
        self.vocab_size = vocab.len();
        self.num_datasets = registry.len();
        if vocab.datasets().iter().map(String::as_str).ne(registry.ids()) {
            return Err(Error::Config("vocabulary dataset tokens do not follow registry order".into()));
        }
        for (id, spec) in registry.iter() {
            for (name, dim, want) in [
                ("acoustic", spec.acoustic_dim, self.acoustic_dim),
                ("visual", spec.visual_dim, self.visual_dim),
            ] {
                if dim != 0 && dim != want {
                    return Err(Error::Config(format!(
                        "dataset {id} declares {name} width {dim}; the model projects {want}"
                    )));
                }
            }
        }
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        let extents = [
            ("text_embed_dim", self.text_embed_dim),
            ("acoustic_dim", self.acoustic_dim),
            ("visual_dim", self.visual_dim),
            ("model_dim", self.model_dim),
            ("layers_enc", self.layers_enc),
            ("layers_dec", self.layers_dec),
            ("heads", self.heads),
            ("ffn_dim", self.ffn_dim),
            ("max_len", self.max_len),
            ("vocab_size", self.vocab_size),
            ("num_datasets", self.num_datasets),
        ];
        if let Some((name, _)) = extents.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("model {name} must be positive")));
        }
        if self.model_dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "model_dim {} not divisible by heads {}",
                self.model_dim, self.heads
            )));
        }
        // Token embeddings double as the tied output projection, so they live
        // in model space directly.
        if self.text_embed_dim != self.model_dim {
            return Err(Error::Config("text_embed_dim must equal model_dim".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config(format!("dropout_rate {} outside [0, 1)", self.dropout_rate)));
        }
        Ok(())
    }
}
