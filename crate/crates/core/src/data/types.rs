use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// The four sentiment subtasks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TaskType {
    ABSA,
    MSA,
    ERC,
    CA,
}

impl TaskType {
    pub const ALL: [TaskType; 4] = [TaskType::ABSA, TaskType::MSA, TaskType::ERC, TaskType::CA];

    pub fn index(self) -> usize {
        match self {
            TaskType::ABSA => 0,
            TaskType::MSA => 1,
            TaskType::ERC => 2,
            TaskType::CA => 3,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            TaskType::ABSA => "ABSA",
            TaskType::MSA => "MSA",
            TaskType::ERC => "ERC",
            TaskType::CA => "CA",
        }
    }
}

impl fmt::Display for TaskType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Polarity {
    Positive,
    Negative,
    Neutral,
}

impl Polarity {
    pub const ALL: [Polarity; 3] = [Polarity::Positive, Polarity::Negative, Polarity::Neutral];

    pub fn name(self) -> &'static str {
        match self {
            Polarity::Positive => "positive",
            Polarity::Negative => "negative",
            Polarity::Neutral => "neutral",
        }
    }

    pub fn index(self) -> usize {
        match self {
            Polarity::Positive => 0,
            Polarity::Negative => 1,
            Polarity::Neutral => 2,
        }
    }
}

impl fmt::Display for Polarity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// A gold label: a categorical answer string, or an MSA sentiment score.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum LabelValue {
    Scalar(f64),
    Categorical(String),
}

impl LabelValue {
    pub fn as_str(&self) -> Option<&str> {
        match self {
            LabelValue::Categorical(s) => Some(s),
            LabelValue::Scalar(_) => None,
        }
    }

    pub fn as_scalar(&self) -> Option<f64> {
        match self {
            LabelValue::Scalar(v) => Some(*v),
            LabelValue::Categorical(_) => None,
        }
    }

    /// The string the decoder is trained to generate for this label.
    pub fn render(&self) -> String {
        match self {
            LabelValue::Categorical(s) => s.clone(),
            LabelValue::Scalar(v) => render_score(*v),
        }
    }

    /// Discrete key used for clustering: the categorical label itself or the
    /// 7-way bin of an MSA score.
    pub fn class_key(&self) -> String {
        match self {
            LabelValue::Categorical(s) => s.clone(),
            LabelValue::Scalar(v) => render_bin(score_bin(*v)),
        }
    }
}

/// Signed one-decimal literal, e.g. `+2.4`, `-0.6`, `+0.0`.
pub fn render_score(v: f64) -> String {
    let v = v.clamp(-3.0, 3.0);
    let r = (v * 10.0).round() / 10.0;
    if r == 0.0 {
        "+0.0".to_string()
    } else {
        format!("{r:+.1}")
    }
}

/// Nearest integer (half away from zero) clamped to `[-3, 3]`.
pub fn score_bin(v: f64) -> i32 {
    v.round().clamp(-3.0, 3.0) as i32
}

pub fn render_bin(bin: i32) -> String {
    if bin == 0 {
        "0".to_string()
    } else {
        format!("{bin:+}")
    }
}

/// The seven MSA bin labels, ascending.
pub fn msa_bin_labels() -> Vec<String> {
    (-3..=3).map(render_bin).collect()
}

/// A `[frames × dim]` feature array.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl FeatureMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 || rows * cols != data.len() {
            return Err(Error::Dimension(format!(
                "feature matrix {rows}x{cols} with {} values",
                data.len()
            )));
        }
        Ok(FeatureMatrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Dimension("ragged feature rows".into()));
        }
        FeatureMatrix::new(rows.len(), cols, rows.concat())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        self.data.chunks(self.cols).map(<[f64]>::to_vec).collect()
    }

    /// Stacks `other` below `self` along the frame axis.
    pub fn concat_frames(&self, other: &FeatureMatrix) -> Result<FeatureMatrix> {
        if self.cols != other.cols {
            return Err(Error::Dimension(format!(
                "frame width {} vs {}",
                self.cols, other.cols
            )));
        }
        let mut data = self.data.clone();
        data.extend_from_slice(&other.data);
        FeatureMatrix::new(self.rows + other.rows, self.cols, data)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContextTurn {
    pub speaker_id: String,
    pub text: String,
}

/// One unified sample.
#[derive(Clone, Debug, PartialEq)]
pub struct SaevalRecord {
    pub task_type: TaskType,
    pub dataset_id: String,
    pub text: String,
    pub audio: Option<FeatureMatrix>,
    pub image: Option<FeatureMatrix>,
    pub context: Vec<ContextTurn>,
    pub speaker_id: Option<String>,
    pub utterance_index: Option<u32>,
    pub label: LabelValue,
    /// Texts appended by query combination; each is preceded by the
    /// separator token in the prompt. Never read from or written to corpus files.
    pub joined_texts: Vec<String>,
}

impl SaevalRecord {
    pub fn has_audio(&self) -> bool {
        self.audio.is_some()
    }

    pub fn has_image(&self) -> bool {
        self.image.is_some()
    }
}
