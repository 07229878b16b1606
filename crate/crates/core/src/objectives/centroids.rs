use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::TaskType;
use crate::error::{Error, Result};
use crate::numerics::euclidean;

/// Per-task label centroids of pooled representations. The generation
/// counter identifies the snapshot that pseudo labels were assigned from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CentroidIndex {
    pub generation: u64,
    pub tasks: BTreeMap<TaskType, BTreeMap<String, Vec<f64>>>,
}

/// One gold label plus one nearest-centroid label for every other task.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PseudoLabelSet {
    pub generation: u64,
    pub labels: BTreeMap<TaskType, String>,
}

/// A labelled representation for clustering.
#[derive(Clone, Copy, Debug)]
pub struct LabelledVector<'a> {
    pub task: TaskType,
    pub label: &'a str,
    pub vector: &'a [f64],
}

/// Exact arithmetic mean of each label's vectors, summed in input order.
pub fn label_centroids<'a, I>(items: I) -> Result<BTreeMap<String, Vec<f64>>>
where
    I: IntoIterator<Item = (&'a str, &'a [f64])>,
{
    let mut sums: BTreeMap<String, (Vec<f64>, usize)> = BTreeMap::new();
    let mut dim = None;
    for (label, v) in items {
        let d = *dim.get_or_insert(v.len());
        if v.len() != d {
            return Err(Error::Dimension(format!("vector of width {} among width {d}", v.len())));
        }
        let entry = sums.entry(label.to_string()).or_insert_with(|| (vec![0.0; d], 0));
        entry.0.iter_mut().zip(v).for_each(|(a, b)| *a += b);
        entry.1 += 1;
    }
    Ok(sums
        .into_iter()
        .map(|(label, (sum, n))| (label, sum.into_iter().map(|v| v / n as f64).collect()))
        .collect())
}

/// Per-task [`label_centroids`] of the samples' `(label, vector)` pairs.
pub fn build_centroids(samples: &[LabelledVector<'_>], generation: u64) -> Result<CentroidIndex> {
    if let Some(first) = samples.first() {
        if let Some(s) = samples.iter().find(|s| s.vector.len() != first.vector.len()) {
            return Err(Error::Dimension(format!(
                "vector of width {} among width {}",
                s.vector.len(),
                first.vector.len()
            )));
        }
    }
    let mut tasks = BTreeMap::new();
    for task in TaskType::ALL {
        let mut mine = samples.iter().filter(|s| s.task == task).map(|s| (s.label, s.vector)).peekable();
        if mine.peek().is_some() {
            tasks.insert(task, label_centroids(mine)?);
        }
    }
    Ok(CentroidIndex { generation, tasks })
}

/// Label of the closest centroid; equal distances go to the
/// lexicographically smaller label.
pub fn nearest_label<'a>(v: &[f64], centroids: &'a BTreeMap<String, Vec<f64>>) -> Option<&'a str> {
    let mut best: Option<(&str, f64)> = None;
    for (label, c) in centroids {
        let d = euclidean(v, c);
        if best.is_none_or(|(_, bd)| d < bd) {
            best = Some((label, d));
        }
    }
    best.map(|(l, _)| l)
}

/// Gold label for `own_task`, nearest centroid for every other task.
pub fn assign_pseudo_labels(
    pooled: &[f64],
    centroids: &CentroidIndex,
    own_task: TaskType,
    gold: &str,
) -> Result<PseudoLabelSet> {
    let mut labels = BTreeMap::new();
    for task in TaskType::ALL {
        if task == own_task {
            labels.insert(task, gold.to_string());
            continue;
        }
        let label = centroids
            .tasks
            .get(&task)
            .and_then(|c| nearest_label(pooled, c))
            .ok_or_else(|| Error::Assignment(format!("no centroids for task {task}")))?;
        labels.insert(task, label.to_string());
    }
    Ok(PseudoLabelSet { generation: centroids.generation, labels })
}
