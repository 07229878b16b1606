use super::vocab::{Vocab, EOS};
use crate::data::{DatasetSpec, LabelValue, TaskType};
use crate::error::{Error, Result};

/// What a dataset's generations are decoded against.
#[derive(Clone, Debug, PartialEq)]
pub enum AnswerSet {
    Categorical(Vec<String>),
    /// Signed one-decimal literal in `[-3.0, +3.0]`.
    Score,
}

impl AnswerSet {
    pub fn for_dataset(spec: &DatasetSpec) -> Self {
        if spec.task_type == TaskType::MSA {
            AnswerSet::Score
        } else {
            AnswerSet::Categorical(spec.answer_set.clone())
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Decoded {
    pub label: LabelValue,
    /// Set when the text matched no answer exactly (nearest answer chosen) or
    /// an MSA generation did not parse.
    pub fallback: bool,
}

/// Maps generated ids to a label. Generation is cut at the first `<eos>`.
pub fn decode_label(generated: &[usize], answers: &AnswerSet, vocab: &Vocab) -> Result<Decoded> {
    let end = generated.iter().position(|&t| t == EOS).unwrap_or(generated.len());
    let text = vocab.detokenize(&generated[..end]);
    let text = text.trim();
    if text.is_empty() {
        return Err(Error::Decode("empty generation".into()));
    }
    match answers {
        AnswerSet::Score => Ok(match parse_score(text) {
            Some(v) => Decoded { label: LabelValue::Scalar(v.clamp(-3.0, 3.0)), fallback: false },
            None => Decoded { label: LabelValue::Scalar(0.0), fallback: true },
        }),
        AnswerSet::Categorical(labels) => {
            if labels.is_empty() {
                return Err(Error::Decode("empty answer set".into()));
            }
            if let Some(l) = labels.iter().find(|l| normalize(l) == text) {
                return Ok(Decoded { label: LabelValue::Categorical(l.clone()), fallback: false });
            }
            let best = labels
                .iter()
                .enumerate()
                .min_by_key(|(i, l)| (edit_distance(text, &normalize(l)), *i))
                .map(|(_, l)| l.clone())
                .expect("non-empty");
            Ok(Decoded { label: LabelValue::Categorical(best), fallback: true })
        }
    }
}

fn normalize(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn parse_score(text: &str) -> Option<f64> {
    let t: String = text.chars().filter(|c| !c.is_whitespace()).collect();
    let t = t.replace('\u{2212}', "-");
    let ok = t.chars().all(|c| c.is_ascii_digit() || matches!(c, '+' | '-' | '.'));
    if !ok {
        return None;
    }
    t.parse::<f64>().ok().filter(|v| v.is_finite())
}

/// Levenshtein distance over chars.
pub fn edit_distance(a: &str, b: &str) -> usize {
    let b: Vec<char> = b.chars().collect();
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, ca) in a.chars().enumerate() {
        cur[0] = i + 1;
        for (j, &cb) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(ca != cb);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}
