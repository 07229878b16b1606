//! Deterministic toy corpus covering all four tasks. Each label has planted
//! signature words, so the corpus is learnable by construction.

use std::path::{Path, PathBuf};

use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{
    record_to_json, write_sidecar, ContextTurn, DatasetSpec, FeatureMatrix, LabelValue, MetricKind, Registry,
    SaevalRecord, TaskType,
};
use crate::error::{Error, Result};

pub const ABSA_ID: &str = "semeval14";
pub const MSA_ID: &str = "mosi";
pub const ERC_ID: &str = "meld";
pub const CA_ID: &str = "sst2";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSizes {
    pub absa: usize,
    pub msa: usize,
    pub erc: usize,
    pub ca: usize,
    /// Width of the acoustic and visual features.
    pub feature_dim: usize,
}

impl Default for SynthSizes {
    fn default() -> Self {
        SynthSizes { absa: 4, msa: 4, erc: 4, ca: 4, feature_dim: 64 }
    }
}

impl SynthSizes {
    pub fn uniform(n: usize, feature_dim: usize) -> Self {
        SynthSizes { absa: n, msa: n, erc: n, ca: n, feature_dim }
    }
}

const FILLER: [&str; 8] = ["honestly", "today", "this", "really", "it", "so", "we", "that"];
const ASPECTS: [&str; 5] = ["food", "service", "staff", "price", "ambience"];
const ABSA_LABELS: [(&str, [&str; 3]); 4] = [
    ("positive", ["excellent", "superb", "delightful"]),
    ("negative", ["terrible", "awful", "bland"]),
    ("neutral", ["ordinary", "standard", "typical"]),
    ("conflict", ["mixed", "uneven", "inconsistent"]),
];
const ERC_LABELS: [(&str, [&str; 2]); 7] = [
    ("neutral", ["fine", "alright"]),
    ("joy", ["yay", "wonderful"]),
    ("surprise", ["whoa", "really?"]),
    ("anger", ["furious", "outrageous"]),
    ("sadness", ["sigh", "miss"]),
    ("disgust", ["gross", "yuck"]),
    ("fear", ["scared", "afraid"]),
];
const CA_LABELS: [(&str, [&str; 2]); 2] = [("positive", ["loved", "brilliant"]), ("negative", ["hated", "boring"])];
const MSA_WORDS: [&str; 7] = ["dreadful", "poor", "meh", "okay", "decent", "good", "fantastic"];

fn strings(xs: &[&str]) -> Vec<String> {
    xs.iter().map(|s| s.to_string()).collect()
}

pub fn synthetic_registry(feature_dim: usize) -> Result<Registry> {
    let mut d = IndexMap::new();
    d.insert(
        ABSA_ID.to_string(),
        DatasetSpec {
            task_type: TaskType::ABSA,
            answer_set: ABSA_LABELS.iter().map(|(l, _)| l.to_string()).collect(),
            acoustic_dim: 0,
            visual_dim: 0,
            metrics: vec![MetricKind::Wa, MetricKind::Wf1],
            neutral_label: None,
        },
    );
    d.insert(
        MSA_ID.to_string(),
        DatasetSpec {
            task_type: TaskType::MSA,
            answer_set: vec![],
            acoustic_dim: feature_dim,
            visual_dim: feature_dim,
            metrics: vec![MetricKind::Mae, MetricKind::Acc7, MetricKind::Acc2],
            neutral_label: None,
        },
    );
    d.insert(
        ERC_ID.to_string(),
        DatasetSpec {
            task_type: TaskType::ERC,
            answer_set: ERC_LABELS.iter().map(|(l, _)| l.to_string()).collect(),
            acoustic_dim: feature_dim,
            visual_dim: feature_dim,
            metrics: vec![MetricKind::Wa, MetricKind::Wf1, MetricKind::Mf1],
            neutral_label: Some("neutral".into()),
        },
    );
    d.insert(
        CA_ID.to_string(),
        DatasetSpec {
            task_type: TaskType::CA,
            answer_set: strings(&CA_LABELS.map(|(l, _)| l)),
            acoustic_dim: 0,
            visual_dim: 0,
            metrics: vec![MetricKind::Wa],
            neutral_label: None,
        },
    );
    Registry::new(d)
}

fn pick<'a, R: Rng>(rng: &mut R, xs: &[&'a str]) -> &'a str {
    xs[rng.random_range(0..xs.len())]
}

/// Features whose mean tracks `signal`; values are f32-representable so
/// sidecars roundtrip exactly.
fn features<R: Rng>(rng: &mut R, frames: usize, dim: usize, signal: f64) -> Result<FeatureMatrix> {
    let data = (0..frames * dim)
        .map(|_| (signal * 0.5 + rng.random_range(-0.5..0.5)) as f32 as f64)
        .collect();
    FeatureMatrix::new(frames, dim, data)
}

fn base(task: TaskType, id: &str, text: String, label: LabelValue) -> SaevalRecord {
    SaevalRecord {
        task_type: task,
        dataset_id: id.to_string(),
        text,
        audio: None,
        image: None,
        context: vec![],
        speaker_id: None,
        utterance_index: None,
        label,
        joined_texts: vec![],
    }
}

/// Records in task order ABSA, MSA, ERC, CA. Label `i % n` of the answer set
/// goes to the `i`-th record of a dataset, so every label appears once the
/// dataset is at least as large as its answer set.
pub fn make_synthetic_corpus(seed: u64, sizes: &SynthSizes) -> Result<(Registry, Vec<SaevalRecord>)> {
    if [sizes.absa, sizes.msa, sizes.erc, sizes.ca].contains(&0) || sizes.feature_dim == 0 {
        return Err(Error::Config("synthetic sizes and feature_dim must be at least 1".into()));
    }
    let registry = synthetic_registry(sizes.feature_dim)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dim = sizes.feature_dim;
    let mut out = Vec::new();

    for i in 0..sizes.absa {
        let (label, sig) = ABSA_LABELS[i % ABSA_LABELS.len()];
        let text = format!(
            "{} the {} was {} {}",
            pick(&mut rng, &FILLER),
            pick(&mut rng, &ASPECTS),
            pick(&mut rng, &sig),
            pick(&mut rng, &FILLER)
        );
        out.push(base(TaskType::ABSA, ABSA_ID, text, LabelValue::Categorical(label.into())));
    }
    for _ in 0..sizes.msa {
        let score = (rng.random_range(-30..=30) as f64) / 10.0;
        let word = MSA_WORDS[(score.round() + 3.0) as usize];
        let text = format!("{} {} {}", pick(&mut rng, &FILLER), word, pick(&mut rng, &FILLER));
        let mut r = base(TaskType::MSA, MSA_ID, text, LabelValue::Scalar(score));
        let (fa, fv) = (rng.random_range(2..=4), rng.random_range(1..=3));
        r.audio = Some(features(&mut rng, fa, dim, score / 3.0)?);
        r.image = Some(features(&mut rng, fv, dim, score / 3.0)?);
        out.push(r);
    }
    for i in 0..sizes.erc {
        let (label, sig) = ERC_LABELS[i % ERC_LABELS.len()];
        let turns = rng.random_range(0..=2);
        let context: Vec<ContextTurn> = (0..turns)
            .map(|t| ContextTurn {
                speaker_id: (t % 2).to_string(),
                text: format!("{} {}", pick(&mut rng, &FILLER), pick(&mut rng, &FILLER)),
            })
            .collect();
        let text = format!("{} {}", pick(&mut rng, &sig), pick(&mut rng, &FILLER));
        let mut r = base(TaskType::ERC, ERC_ID, text, LabelValue::Categorical(label.into()));
        r.speaker_id = Some((turns % 2).to_string());
        r.utterance_index = Some(turns as u32);
        r.context = context;
        let signal = i as f64 / ERC_LABELS.len() as f64;
        let (fa, fv) = (rng.random_range(1..=3), rng.random_range(1..=2));
        r.audio = Some(features(&mut rng, fa, dim, signal)?);
        if i % 2 == 0 {
            r.image = Some(features(&mut rng, fv, dim, signal)?);
        }
        out.push(r);
    }
    for i in 0..sizes.ca {
        let (label, sig) = CA_LABELS[i % CA_LABELS.len()];
        let text = format!(
            "i {} this {} {}",
            pick(&mut rng, &sig),
            pick(&mut rng, &["film", "movie", "book"]),
            pick(&mut rng, &FILLER)
        );
        out.push(base(TaskType::CA, CA_ID, text, LabelValue::Categorical(label.into())));
    }
    Ok((registry, out))
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SynthFiles {
    pub corpus: PathBuf,
    pub registry: PathBuf,
}

/// Writes `corpus.jsonl`, `registry.json` and, for every other MSA record,
/// the acoustic features as a sidecar under `features/`.
pub fn write_synthetic_corpus(dir: impl AsRef<Path>, seed: u64, sizes: &SynthSizes) -> Result<SynthFiles> {
    let dir = dir.as_ref();
    let (registry, records) = make_synthetic_corpus(seed, sizes)?;
    let feat_dir = dir.join("features");
    std::fs::create_dir_all(&feat_dir).map_err(|e| Error::io(&feat_dir, e))?;
    let mut body = String::new();
    let mut msa_seen = 0;
    for r in &records {
        let mut line = record_to_json(r);
        if r.task_type == TaskType::MSA {
            if msa_seen % 2 == 0 {
                let rel = format!("features/{MSA_ID}_{msa_seen:04}_audio.saev");
                write_sidecar(dir.join(&rel), r.audio.as_ref().expect("MSA records carry audio"))?;
                let mut v: serde_json::Map<String, serde_json::Value> = serde_json::from_str(&line)?;
                v.insert("audio".into(), serde_json::Value::String(rel));
                line = serde_json::to_string(&v)?;
            }
            msa_seen += 1;
        }
        body.push_str(&line);
        body.push('\n');
    }
    let files = SynthFiles { corpus: dir.join("corpus.jsonl"), registry: dir.join("registry.json") };
    std::fs::write(&files.corpus, body).map_err(|e| Error::io(&files.corpus, e))?;
    registry.save(&files.registry)?;
    Ok(files)
}
