use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::AccuracyMatrix;
use crate::data::{Registry, SaevalRecord};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::objectives::{label_centroids, nearest_label};
use crate::prompt::{build_prompt, Vocab};

/// One line of an embedding dump.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmbeddingRecord {
    pub dataset_id: String,
    pub sample_id: String,
    pub label: String,
    pub vector: Vec<f64>,
}

pub fn write_embeddings(path: impl AsRef<Path>, records: &[EmbeddingRecord]) -> Result<()> {
    let path = path.as_ref();
    let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| Error::io(path, e))?);
    for r in records {
        let line = serde_json::to_string(r)?;
        writeln!(f, "{line}").map_err(|e| Error::io(path, e))?;
    }
    f.flush().map_err(|e| Error::io(path, e))
}

pub fn read_embeddings(path: impl AsRef<Path>) -> Result<Vec<EmbeddingRecord>> {
    let path = path.as_ref();
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: EmbeddingRecord = serde_json::from_str(&line).map_err(|e| Error::Data {
            path: path.display().to_string(),
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(rec);
    }
    Ok(out)
}

/// Pooled encoder representation of every record. Sample ids number the
/// records of each dataset in corpus order; labels are class keys.
pub fn embed_records(
    model: &Model,
    vocab: &Vocab,
    registry: &Registry,
    records: &[SaevalRecord],
    max_len: usize,
    chunk: usize,
) -> Result<Vec<EmbeddingRecord>> {
    let prompts = records
        .iter()
        .map(|r| build_prompt(r, vocab, registry, max_len))
        .collect::<Result<Vec<_>>>()?;
    let pooled = model.pooled(&prompts, chunk)?;
    let mut seen: BTreeMap<&str, usize> = BTreeMap::new();
    Ok(records
        .iter()
        .zip(pooled)
        .map(|(r, vector)| {
            let n = seen.entry(&r.dataset_id).or_default();
            let sample_id = format!("{}-{:05}", r.dataset_id, *n);
            *n += 1;
            EmbeddingRecord { dataset_id: r.dataset_id.clone(), sample_id, label: r.label.class_key(), vector }
        })
        .collect())
}

/// Maps each dataset's labels onto shared names so that labels of different
/// systems can be compared. Unlisted labels map to themselves.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Correspondence {
    pub maps: BTreeMap<String, BTreeMap<String, String>>,
}

impl Correspondence {
    pub fn canonical<'a>(&'a self, dataset_id: &str, label: &'a str) -> &'a str {
        self.maps
            .get(dataset_id)
            .and_then(|m| m.get(label))
            .map_or(label, String::as_str)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CrossAnnotation {
    /// Nearest target cluster of each source sample.
    pub pseudo_labels: Vec<String>,
    /// Percent of samples whose pseudo label corresponds to their gold label.
    pub accuracy: f64,
}

/// Labels every source sample with its nearest target centroid and scores
/// the result through the correspondence map.
pub fn cross_annotate(
    source: &[&EmbeddingRecord],
    target_dataset: &str,
    target_centroids: &BTreeMap<String, Vec<f64>>,
    correspondence: &Correspondence,
) -> Result<CrossAnnotation> {
    if target_centroids.is_empty() {
        return Err(Error::Assignment(format!("{target_dataset} has no label clusters")));
    }
    if source.is_empty() {
        return Err(Error::UndefinedMetric("no source samples".into()));
    }
    let mut pseudo_labels = Vec::with_capacity(source.len());
    let mut hits = 0;
    for s in source {
        let label = nearest_label(&s.vector, target_centroids).expect("non-empty centroids");
        if correspondence.canonical(&s.dataset_id, &s.label) == correspondence.canonical(target_dataset, label) {
            hits += 1;
        }
        pseudo_labels.push(label.to_string());
    }
    Ok(CrossAnnotation { pseudo_labels, accuracy: 100.0 * hits as f64 / source.len() as f64 })
}

/// Gold-label clusters per dataset, then every dataset cross-annotated
/// against every other, in the order of `datasets`.
pub fn accuracy_matrix(
    records: &[EmbeddingRecord],
    datasets: &[String],
    correspondence: &Correspondence,
) -> Result<AccuracyMatrix> {
    let by_dataset: Vec<Vec<&EmbeddingRecord>> = datasets
        .iter()
        .map(|d| records.iter().filter(|r| &r.dataset_id == d).collect())
        .collect();
    let centroids = by_dataset
        .iter()
        .map(|rs| label_centroids(rs.iter().map(|r| (r.label.as_str(), r.vector.as_slice()))))
        .collect::<Result<Vec<_>>>()?;
    let mut acc = vec![vec![0.0; datasets.len()]; datasets.len()];
    for (i, src) in by_dataset.iter().enumerate() {
        for (j, target) in datasets.iter().enumerate() {
            acc[i][j] = cross_annotate(src, target, &centroids[j], correspondence)?.accuracy;
        }
    }
    AccuracyMatrix::new(datasets.to_vec(), acc)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(d: &str, label: &str, x: f64) -> EmbeddingRecord {
        EmbeddingRecord { dataset_id: d.into(), sample_id: format!("{d}-{x}"), label: label.into(), vector: vec![x] }
    }

    #[test]
    fn separable_clusters_are_perfect() {
        let rs = vec![rec("A", "lo", -2.0), rec("A", "lo", -1.0), rec("A", "hi", 1.0), rec("A", "hi", 2.0)];
        let m = accuracy_matrix(&rs, &["A".into()], &Correspondence::default()).unwrap();
        assert_eq!(m.acc, vec![vec![100.0]]);
    }

    #[test]
    fn correspondence_bridges_label_systems() {
        let rs = vec![
            rec("A", "joy", 1.0),
            rec("A", "sad", -1.0),
            rec("B", "happy", 0.9),
            rec("B", "unhappy", -0.9),
        ];
        let ds = ["A".to_string(), "B".to_string()];
        let plain = accuracy_matrix(&rs, &ds, &Correspondence::default()).unwrap();
        assert_eq!(plain.acc[0][1], 0.0);
        let corr: Correspondence =
            serde_json::from_str(r#"{"B": {"happy": "joy", "unhappy": "sad"}}"#).unwrap();
        let mapped = accuracy_matrix(&rs, &ds, &corr).unwrap();
        assert_eq!(mapped.acc, vec![vec![100.0, 100.0], vec![100.0, 100.0]]);
    }

    #[test]
    fn empty_target_is_an_error() {
        let r = rec("A", "x", 0.0);
        assert!(matches!(
            cross_annotate(&[&r], "B", &BTreeMap::new(), &Correspondence::default()),
            Err(Error::Assignment(_))
        ));
    }

    #[test]
    fn dump_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("emb.jsonl");
        let rs = vec![rec("A", "x", 0.1), rec("B", "y", -0.3)];
        write_embeddings(&p, &rs).unwrap();
        assert_eq!(read_embeddings(&p).unwrap(), rs);
        std::fs::write(&p, "{\"dataset_id\": 1}\n").unwrap();
        assert!(matches!(read_embeddings(&p), Err(Error::Data { line: 1, .. })));
    }
}
