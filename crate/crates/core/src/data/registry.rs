use std::collections::BTreeSet;
use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use super::types::{msa_bin_labels, TaskType};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MetricKind {
    Wa,
    Wf1,
    Mf1,
    Mae,
    Acc7,
    Acc2,
}

impl MetricKind {
    pub fn name(self) -> &'static str {
        match self {
            MetricKind::Wa => "WA",
            MetricKind::Wf1 => "WF1",
            MetricKind::Mf1 => "MF1",
            MetricKind::Mae => "MAE",
            MetricKind::Acc7 => "ACC-7",
            MetricKind::Acc2 => "ACC-2",
        }
    }

    fn is_regression(self) -> bool {
        matches!(self, MetricKind::Mae | MetricKind::Acc7 | MetricKind::Acc2)
    }
}

/// Declaration of one dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub task_type: TaskType,
    /// Empty for MSA, whose answers are rendered scores.
    #[serde(default)]
    pub answer_set: Vec<String>,
    /// 0 when the dataset carries no acoustic features.
    #[serde(default)]
    pub acoustic_dim: usize,
    #[serde(default)]
    pub visual_dim: usize,
    pub metrics: Vec<MetricKind>,
    /// Class excluded from MF1.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub neutral_label: Option<String>,
}

/// Ordered dataset declarations. Declaration order fixes the dataset-embedding index.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct Registry {
    datasets: IndexMap<String, DatasetSpec>,
}

impl Registry {
    pub fn new(datasets: IndexMap<String, DatasetSpec>) -> Result<Self> {
        let reg = Registry { datasets };
        reg.validate()?;
        Ok(reg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Json(j) => Error::Config(format!("{}: {j}", path.display())),
            other => other,
        })
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let datasets: IndexMap<String, DatasetSpec> = serde_json::from_str(text)?;
        Registry::new(datasets)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.datasets).expect("registry serializes")
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json() + "\n").map_err(|e| Error::io(path, e))
    }

    fn validate(&self) -> Result<()> {
        for (id, spec) in &self.datasets {
            let bad = |msg: String| Err(Error::Config(format!("dataset {id}: {msg}")));
            if id.is_empty() || id.chars().any(|c| c.is_whitespace() || c == '>' || c == '<') {
                return bad("id must be non-empty without whitespace or angle brackets".into());
            }
            if spec.metrics.is_empty() {
                return bad("no metrics declared".into());
            }
            if spec.task_type == TaskType::MSA {
                if !spec.answer_set.is_empty() {
                    return bad("MSA datasets use the score rendering rule, not an answer set".into());
                }
                if spec.metrics.iter().any(|m| !m.is_regression()) {
                    return bad("MSA datasets take MAE / ACC-7 / ACC-2 only".into());
                }
                continue;
            }
            if spec.answer_set.is_empty() {
                return bad("empty answer set".into());
            }
            let mut seen = BTreeSet::new();
            for label in &spec.answer_set {
                if label.trim().is_empty() || label.contains('|') || label.trim() != label {
                    return bad(format!("invalid answer {label:?}"));
                }
                if !seen.insert(label) {
                    return bad(format!("duplicate answer {label:?}"));
                }
            }
            if spec.metrics.iter().any(|m| m.is_regression()) {
                return bad("regression metrics on a categorical dataset".into());
            }
            if spec.metrics.contains(&MetricKind::Mf1) {
                match &spec.neutral_label {
                    Some(n) if spec.answer_set.contains(n) => {}
                    _ => return bad("MF1 needs a neutral_label from the answer set".into()),
                }
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.datasets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.datasets.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&DatasetSpec> {
        self.datasets.get(id)
    }

    pub fn spec(&self, id: &str) -> Result<&DatasetSpec> {
        self.get(id)
            .ok_or_else(|| Error::Config(format!("unknown dataset_id {id:?}")))
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.datasets.get_index_of(id)
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.datasets.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &DatasetSpec)> {
        self.datasets.iter().map(|(k, v)| (k.as_str(), v))
    }

    /// Label vocabulary of a task: the 7 score bins for MSA, otherwise the
    /// sorted union of the task's answer sets.
    pub fn task_labels(&self, task: TaskType) -> Vec<String> {
        if task == TaskType::MSA {
            return if self.datasets.values().any(|s| s.task_type == TaskType::MSA) {
                msa_bin_labels()
            } else {
                Vec::new()
            };
        }
        self.datasets
            .values()
            .filter(|s| s.task_type == task)
            .flat_map(|s| s.answer_set.iter().cloned())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    }
}
