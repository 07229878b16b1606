use crate::data::{Registry, SaevalRecord};
use crate::error::{Error, Result};
use crate::prompt::{build_prompt, PromptSequence, Vocab};

/// Training records with their prompts prebuilt, plus the records used for
/// per-epoch validation (the training records themselves when none are given).
#[derive(Clone, Debug)]
pub struct TrainCorpus {
    pub registry: Registry,
    pub vocab: Vocab,
    pub records: Vec<SaevalRecord>,
    pub prompts: Vec<PromptSequence>,
    pub validation: Vec<SaevalRecord>,
    pub max_len: usize,
}

impl TrainCorpus {
    pub fn new(registry: Registry, vocab: Vocab, records: Vec<SaevalRecord>, max_len: usize) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::Config("empty training corpus".into()));
        }
        let prompts = records
            .iter()
            .map(|r| build_prompt(r, &vocab, &registry, max_len))
            .collect::<Result<Vec<_>>>()?;
        Ok(TrainCorpus { registry, vocab, records, prompts, validation: Vec::new(), max_len })
    }

    /// Builds the vocabulary from the records themselves.
    pub fn from_records(registry: Registry, records: Vec<SaevalRecord>, max_len: usize) -> Result<Self> {
        let vocab = Vocab::build(&registry, &records, crate::prompt::DEFAULT_SPEAKER_SLOTS)?;
        Self::new(registry, vocab, records, max_len)
    }

    pub fn with_validation(mut self, records: Vec<SaevalRecord>) -> Self {
        self.validation = records;
        self
    }

    pub fn validation_records(&self) -> &[SaevalRecord] {
        if self.validation.is_empty() {
            &self.records
        } else {
            &self.validation
        }
    }
}
