use super::vocab::{Vocab, ANS_CLOSE, ANS_OPEN, SEP};
use crate::data::{msa_bin_labels, FeatureMatrix, Registry, SaevalRecord, TaskType};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Modality {
    Acoustic,
    Visual,
}

impl Modality {
    /// Row of the modality-type embedding table; row 0 is text.
    pub fn type_index(self) -> usize {
        match self {
            Modality::Acoustic => 1,
            Modality::Visual => 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModalSegment {
    pub modality: Modality,
    pub frames: FeatureMatrix,
}

/// The prompt `{Z, Y, X}` of one record.
///
/// Flattened token order is `Z Y context [<sep>] query`; modal frames follow
/// the tokens in the encoder stream, acoustic before visual.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptSequence {
    pub task_type: TaskType,
    pub z_tokens: Vec<usize>,
    pub y_tokens: Vec<usize>,
    /// Context turns, each a speaker token followed by the turn's words.
    pub x_context: Vec<usize>,
    /// Query words; combined queries append `<sep>` plus the joined text.
    pub x_tokens: Vec<usize>,
    pub modal_segments: Vec<ModalSegment>,
    pub dataset_index: usize,
    pub truncated: bool,
}

/// Spans recovered from a flattened token sequence.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PromptSpans {
    pub z: Vec<usize>,
    pub y: Vec<usize>,
    pub context: Vec<usize>,
    pub x: Vec<usize>,
}

impl PromptSequence {
    pub fn flatten(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.token_len());
        out.extend_from_slice(&self.z_tokens);
        out.extend_from_slice(&self.y_tokens);
        out.extend_from_slice(&self.x_context);
        if !self.x_context.is_empty() {
            out.push(SEP);
        }
        out.extend_from_slice(&self.x_tokens);
        out
    }

    pub fn token_len(&self) -> usize {
        self.z_tokens.len()
            + self.y_tokens.len()
            + self.x_context.len()
            + usize::from(!self.x_context.is_empty())
            + self.x_tokens.len()
    }

    pub fn frame_count(&self) -> usize {
        self.modal_segments.iter().map(|s| s.frames.rows()).sum()
    }

    /// Encoder stream length: tokens plus modal frames.
    pub fn encoder_len(&self) -> usize {
        self.token_len() + self.frame_count()
    }

    pub fn segment(&self, m: Modality) -> Option<&ModalSegment> {
        self.modal_segments.iter().find(|s| s.modality == m)
    }

    /// Flattened positions open to token masking: context and query words,
    /// excluding speaker and separator tokens.
    pub fn maskable_positions(&self, vocab: &Vocab) -> Vec<usize> {
        let start = self.z_tokens.len() + self.y_tokens.len();
        self.flatten()
            .iter()
            .enumerate()
            .skip(start)
            .filter(|&(_, &t)| !vocab.is_structural(t))
            .map(|(i, _)| i)
            .collect()
    }
}

/// Splits a flattened sequence back into its spans using structural tokens only.
pub fn resegment(tokens: &[usize], vocab: &Vocab) -> Result<PromptSpans> {
    let z_len = tokens
        .iter()
        .take_while(|&&t| Vocab::is_task_token(t) || vocab.is_data_token(t) || vocab.is_speaker_token(t))
        .count();
    let rest = &tokens[z_len..];
    if rest.first() != Some(&ANS_OPEN) {
        return Err(Error::Contract("answer span must follow the task identifier".into()));
    }
    let close = rest
        .iter()
        .position(|&t| t == ANS_CLOSE)
        .ok_or_else(|| Error::Contract("unterminated answer span".into()))?;
    let y = rest[..=close].to_vec();
    let rest = &rest[close + 1..];
    let (context, x) = match rest.first() {
        Some(&t) if vocab.is_speaker_token(t) => {
            let sep = rest
                .iter()
                .position(|&t| t == SEP)
                .ok_or_else(|| Error::Contract("context without separator".into()))?;
            (rest[..sep].to_vec(), rest[sep + 1..].to_vec())
        }
        _ => (Vec::new(), rest.to_vec()),
    };
    Ok(PromptSpans { z: tokens[..z_len].to_vec(), y, context, x })
}

/// Answer-set span `<ans> a | b | ... </ans>` of a dataset. MSA datasets show
/// the two ends of the score range.
pub fn answer_span(task: TaskType, answers: &[String], vocab: &Vocab) -> Vec<usize> {
    let owned;
    let labels: &[String] = if task == TaskType::MSA {
        owned = vec!["-3.0".to_string(), "+3.0".to_string()];
        &owned
    } else {
        answers
    };
    let bar = vocab.id("|").expect("ASCII characters are always in the vocabulary");
    let mut out = vec![ANS_OPEN];
    for (i, l) in labels.iter().enumerate() {
        if i > 0 {
            out.push(bar);
        }
        out.extend(vocab.tokenize(l));
    }
    out.push(ANS_CLOSE);
    out
}

/// Builds the prompt for a validated record and truncates it to `max_len`
/// encoder positions. Oldest context turns go first, then trailing modal
/// frames, then the query tail.
pub fn build_prompt(record: &SaevalRecord, vocab: &Vocab, registry: &Registry, max_len: usize) -> Result<PromptSequence> {
    let spec = registry.spec(&record.dataset_id)?;
    let dataset_index = registry
        .index_of(&record.dataset_id)
        .expect("spec lookup succeeded");
    let mut z_tokens = vec![Vocab::task_token(record.task_type), vocab.data_token(&record.dataset_id)?];
    if let Some(s) = &record.speaker_id {
        z_tokens.push(vocab.speaker_token(s)?);
    }
    let y_tokens = answer_span(record.task_type, &spec.answer_set, vocab);

    let mut turns = Vec::with_capacity(record.context.len());
    for turn in &record.context {
        let mut t = vec![vocab.speaker_token(&turn.speaker_id)?];
        t.extend(vocab.tokenize(&turn.text));
        turns.push(t);
    }
    let mut x_tokens = vocab.tokenize(&record.text);
    for joined in &record.joined_texts {
        x_tokens.push(SEP);
        x_tokens.extend(vocab.tokenize(joined));
    }
    let mut modal_segments = Vec::new();
    for (modality, feats) in [(Modality::Acoustic, &record.audio), (Modality::Visual, &record.image)] {
        if let Some(f) = feats {
            modal_segments.push(ModalSegment { modality, frames: f.clone() });
        }
    }

    let mut prompt = PromptSequence {
        task_type: record.task_type,
        z_tokens,
        y_tokens,
        x_context: turns.concat(),
        x_tokens,
        modal_segments,
        dataset_index,
        truncated: false,
    };
    if prompt.encoder_len() <= max_len {
        return Ok(prompt);
    }
    prompt.truncated = true;
    let mut start = 0;
    while prompt.encoder_len() > max_len && start < turns.len() {
        start += 1;
        prompt.x_context = turns[start..].concat();
    }
    while prompt.encoder_len() > max_len {
        let over = prompt.encoder_len() - max_len;
        let Some(last) = prompt.modal_segments.last_mut() else { break };
        if over >= last.frames.rows() {
            prompt.modal_segments.pop();
        } else {
            let keep = last.frames.rows() - over;
            let cols = last.frames.cols();
            last.frames = FeatureMatrix::new(keep, cols, last.frames.data()[..keep * cols].to_vec())?;
        }
    }
    let over = prompt.encoder_len().saturating_sub(max_len);
    if over > 0 {
        if over >= prompt.x_tokens.len() {
            return Err(Error::Contract(format!(
                "max_len {max_len} cannot hold the task identifier, answer set and one query token"
            )));
        }
        let keep = prompt.x_tokens.len() - over;
        prompt.x_tokens.truncate(keep);
    }
    Ok(prompt)
}

/// Label strings a task can produce, in the order used for constrained heads.
pub fn task_label_space(registry: &Registry, task: TaskType) -> Vec<String> {
    if task == TaskType::MSA {
        return msa_bin_labels();
    }
    registry.task_labels(task)
}
