use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use crate::data::{msa_bin_labels, render_score, Polarity, Registry, SaevalRecord, TaskType};
use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const BOS: usize = 2;
pub const EOS: usize = 3;
pub const MASK: usize = 4;
pub const SEP: usize = 5;
pub const ANS_OPEN: usize = 6;
pub const ANS_CLOSE: usize = 7;
const TASK_BASE: usize = 8;
const FIXED: [&str; 12] = [
    "<pad>", "<unk>", "<bos>", "<eos>", "<mask>", "<sep>", "<ans>", "</ans>", "<task_absa>", "<task_msa>",
    "<task_erc>", "<task_ca>",
];

pub const DEFAULT_SPEAKER_SLOTS: usize = 8;
const CONT: &str = "##";

/// Token table. Layout, by id: the twelve fixed specials, one `<data:ID>` per
/// dataset in registry order, `<speaker_k>` slots, printable ASCII characters
/// plus the minus sign (plain then `##` forms), then corpus words in sorted order.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocab {
    tokens: Vec<String>,
    ids: HashMap<String, usize>,
    datasets: Vec<String>,
    speaker_slots: usize,
}

impl Vocab {
    /// Builds the vocabulary from every text, context turn and label of the
    /// corpus, plus each registry answer set and the rendered MSA literals.
    pub fn build(registry: &Registry, records: &[SaevalRecord], speaker_slots: usize) -> Result<Self> {
        let mut words = BTreeSet::new();
        let mut add = |text: &str| {
            for (piece, cont) in pieces(text) {
                words.insert(render_piece(piece, cont));
            }
        };
        for r in records {
            add(&r.text);
            r.joined_texts.iter().for_each(|t| add(t));
            r.context.iter().for_each(|t| add(&t.text));
            add(&r.label.render());
        }
        for (_, spec) in registry.iter() {
            spec.answer_set.iter().for_each(|a| add(a));
        }
        Polarity::ALL.iter().for_each(|p| add(p.name()));
        for tenth in -30..=30 {
            add(&render_score(tenth as f64 / 10.0));
        }
        msa_bin_labels().iter().for_each(|b| add(b));

        let mut tokens: Vec<String> = FIXED.iter().map(|s| s.to_string()).collect();
        let datasets: Vec<String> = registry.ids().map(str::to_string).collect();
        tokens.extend(datasets.iter().map(|d| format!("<data:{d}>")));
        tokens.extend((0..speaker_slots).map(|k| format!("<speaker_{k}>")));
        let ascii: Vec<String> = (0x21u8..0x7f)
            .map(char::from)
            .chain(['\u{2212}'])
            .map(|c| c.to_string())
            .collect();
        tokens.extend(ascii.iter().cloned());
        tokens.extend(ascii.iter().map(|c| format!("{CONT}{c}")));
        let mut seen: BTreeSet<String> = tokens.iter().cloned().collect();
        for w in words {
            if seen.insert(w.clone()) {
                tokens.push(w);
            }
        }
        Self::from_parts(tokens, datasets, speaker_slots)
    }

    fn from_parts(tokens: Vec<String>, datasets: Vec<String>, speaker_slots: usize) -> Result<Self> {
        let mut ids = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.chars().any(char::is_whitespace) {
                return Err(Error::Vocabulary(format!("invalid token {t:?} at id {i}")));
            }
            if ids.insert(t.clone(), i).is_some() {
                return Err(Error::Vocabulary(format!("duplicate token {t:?}")));
            }
        }
        Ok(Vocab { tokens, ids, datasets, speaker_slots })
    }

    /// Rebuilds a vocabulary from its token list, checking the fixed layout.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < FIXED.len() || tokens[..FIXED.len()].iter().zip(FIXED).any(|(a, b)| a != b) {
            return Err(Error::Vocabulary("fixed special tokens missing or out of order".into()));
        }
        let mut i = FIXED.len();
        let mut datasets = Vec::new();
        while let Some(id) = tokens.get(i).and_then(|t| t.strip_prefix("<data:")?.strip_suffix('>')) {
            datasets.push(id.to_string());
            i += 1;
        }
        let mut slots = 0;
        while tokens.get(i).is_some_and(|t| *t == format!("<speaker_{slots}>")) {
            slots += 1;
            i += 1;
        }
        Self::from_parts(tokens, datasets, slots)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_tokens(text.lines().map(str::to_string).collect())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut body = self.tokens.join("\n");
        body.push('\n');
        std::fs::write(path, body).map_err(|e| Error::io(path, e))
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.ids.get(token).copied()
    }

    pub fn token(&self, id: usize) -> &str {
        self.tokens.get(id).map_or("<unk>", String::as_str)
    }

    pub fn datasets(&self) -> &[String] {
        &self.datasets
    }

    pub fn speaker_slots(&self) -> usize {
        self.speaker_slots
    }

    pub fn task_token(task: TaskType) -> usize {
        TASK_BASE + task.index()
    }

    pub fn data_token(&self, dataset_id: &str) -> Result<usize> {
        self.datasets
            .iter()
            .position(|d| d == dataset_id)
            .map(|i| FIXED.len() + i)
            .ok_or_else(|| Error::Vocabulary(format!("no dataset token for {dataset_id:?}")))
    }

    /// Speaker ids are small non-negative integers addressing the reserved slots.
    pub fn speaker_token(&self, speaker_id: &str) -> Result<usize> {
        match speaker_id.trim().parse::<usize>() {
            Ok(k) if k < self.speaker_slots => Ok(FIXED.len() + self.datasets.len() + k),
            _ => Err(Error::Vocabulary(format!(
                "speaker id {speaker_id:?} outside the {} reserved slots",
                self.speaker_slots
            ))),
        }
    }

    pub fn is_task_token(id: usize) -> bool {
        (TASK_BASE..TASK_BASE + 4).contains(&id)
    }

    pub fn is_data_token(&self, id: usize) -> bool {
        (FIXED.len()..FIXED.len() + self.datasets.len()).contains(&id)
    }

    pub fn is_speaker_token(&self, id: usize) -> bool {
        let base = FIXED.len() + self.datasets.len();
        (base..base + self.speaker_slots).contains(&id)
    }

    /// Specials, dataset tokens and speaker tokens: never produced from raw text.
    pub fn is_structural(&self, id: usize) -> bool {
        id < FIXED.len() + self.datasets.len() + self.speaker_slots
    }

    /// Splits raw text into ids. Total: pieces outside the vocabulary fall back
    /// to characters, and characters outside it to `<unk>`.
    pub fn tokenize(&self, text: &str) -> Vec<usize> {
        let mut out = Vec::new();
        for (piece, cont) in pieces(text) {
            if let Some(id) = self.id(&render_piece(piece, cont)) {
                out.push(id);
                continue;
            }
            for (k, ch) in piece.chars().enumerate() {
                let s = if k == 0 && !cont { ch.to_string() } else { format!("{CONT}{ch}") };
                out.push(self.id(&s).unwrap_or(UNK));
            }
        }
        out
    }

    /// Inverse of [`Vocab::tokenize`] up to whitespace normalization.
    /// Padding and sequence delimiters are dropped.
    pub fn detokenize(&self, ids: &[usize]) -> String {
        let mut out = String::new();
        for &id in ids {
            if matches!(id, PAD | BOS | EOS) {
                continue;
            }
            let tok = self.token(id);
            match tok.strip_prefix(CONT) {
                Some(rest) if !rest.is_empty() => out.push_str(rest),
                _ => {
                    if !out.is_empty() {
                        out.push(' ');
                    }
                    out.push_str(tok);
                }
            }
        }
        out
    }
}

fn render_piece(piece: &str, cont: bool) -> String {
    if cont {
        format!("{CONT}{piece}")
    } else {
        piece.to_string()
    }
}

fn is_sign(c: char) -> bool {
    matches!(c, '-' | '+' | '\u{2212}')
}

/// Pre-tokenization into alphanumeric runs, signed decimal literals and single
/// punctuation characters. The flag marks pieces glued to the previous one.
pub(crate) fn pieces(text: &str) -> Vec<(&str, bool)> {
    let chars: Vec<(usize, char)> = text.char_indices().collect();
    let end_of = |i: usize| chars.get(i).map_or(text.len(), |&(b, _)| b);
    let digit_at = |i: usize| chars.get(i).is_some_and(|&(_, c)| c.is_ascii_digit());
    let mut out = Vec::new();
    let mut prev_ws = true;
    let mut i = 0;
    while i < chars.len() {
        let (start, c) = chars[i];
        if c.is_whitespace() {
            prev_ws = true;
            i += 1;
            continue;
        }
        let mut j = i + 1;
        if c.is_ascii_digit() || (is_sign(c) && prev_ws && digit_at(i + 1)) {
            while digit_at(j) {
                j += 1;
            }
            if chars.get(j).is_some_and(|&(_, c)| c == '.') && digit_at(j + 1) {
                j += 1;
                while digit_at(j) {
                    j += 1;
                }
            }
        } else if c.is_alphanumeric() {
            while chars.get(j).is_some_and(|&(_, c)| c.is_alphanumeric() && !c.is_ascii_digit()) {
                j += 1;
            }
        }
        out.push((&text[start..end_of(j)], !prev_ws));
        prev_ws = false;
        i = j;
    }
    out
}
