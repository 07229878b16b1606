//! JSON Lines corpus files and binary feature sidecars.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::registry::Registry;
use super::types::{ContextTurn, FeatureMatrix, LabelValue, SaevalRecord, TaskType};
use crate::error::{Error, Result};

pub const SIDECAR_MAGIC: &[u8; 4] = b"SAEV";

#[derive(Deserialize)]
#[serde(untagged)]
enum FeatureField {
    Inline(Vec<Vec<f64>>),
    Path(String),
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRecord {
    task_type: TaskType,
    dataset_id: String,
    text: String,
    #[serde(default)]
    audio: Option<FeatureField>,
    #[serde(default)]
    image: Option<FeatureField>,
    #[serde(default)]
    context: Option<Vec<ContextTurn>>,
    #[serde(default)]
    speaker_id: Option<String>,
    #[serde(default)]
    utterance_index: Option<u32>,
    label: LabelValue,
}

#[derive(Serialize)]
struct RecordOut<'a> {
    task_type: TaskType,
    dataset_id: &'a str,
    text: &'a str,
    audio: Option<Vec<Vec<f64>>>,
    image: Option<Vec<Vec<f64>>>,
    context: &'a [ContextTurn],
    speaker_id: Option<&'a str>,
    utterance_index: Option<u32>,
    label: &'a LabelValue,
}

/// Reads and validates every record of a JSON Lines corpus, preserving file order.
/// Sidecar paths are resolved relative to the corpus file.
pub fn load_corpus(path: impl AsRef<Path>, registry: &Registry) -> Result<Vec<SaevalRecord>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let shown = path.display().to_string();
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let lineno = i + 1;
        let data_err = |message: String| Error::Data {
            path: shown.clone(),
            line: lineno,
            message,
        };
        let raw: RawRecord = serde_json::from_str(&line).map_err(|e| data_err(format!("malformed record: {e}")))?;
        let record = resolve(raw, &base).map_err(|e| data_err(e.to_string()))?;
        validate_record(&record, registry).map_err(|e| data_err(e.to_string()))?;
        out.push(record);
    }
    Ok(out)
}

fn resolve(raw: RawRecord, base: &Path) -> Result<SaevalRecord> {
    let features = |f: Option<FeatureField>| -> Result<Option<FeatureMatrix>> {
        match f {
            None => Ok(None),
            Some(FeatureField::Inline(rows)) => FeatureMatrix::from_rows(&rows).map(Some),
            Some(FeatureField::Path(p)) => read_sidecar(base.join(p)).map(Some),
        }
    };
    Ok(SaevalRecord {
        task_type: raw.task_type,
        dataset_id: raw.dataset_id,
        text: raw.text,
        audio: features(raw.audio)?,
        image: features(raw.image)?,
        context: raw.context.unwrap_or_default(),
        speaker_id: raw.speaker_id,
        utterance_index: raw.utterance_index,
        label: raw.label,
        joined_texts: Vec::new(),
    })
}

/// Checks one record against its dataset declaration.
pub fn validate_record(r: &SaevalRecord, registry: &Registry) -> Result<()> {
    let spec = registry.spec(&r.dataset_id)?;
    let fail = |m: String| Err(Error::Contract(m));
    if spec.task_type != r.task_type {
        return fail(format!(
            "task_type {} but dataset {} is {}",
            r.task_type, r.dataset_id, spec.task_type
        ));
    }
    if r.text.trim().is_empty() {
        return fail("empty text".into());
    }
    if r.task_type == TaskType::ERC {
        if r.utterance_index.is_none() {
            return fail("ERC record without utterance_index".into());
        }
        if r.context.iter().any(|t| t.text.trim().is_empty()) {
            return fail("empty context utterance".into());
        }
    } else if !r.context.is_empty() || r.speaker_id.is_some() || r.utterance_index.is_some() {
        return fail("context / speaker_id / utterance_index only allowed for ERC".into());
    }
    for (name, feat, dim) in [
        ("audio", &r.audio, spec.acoustic_dim),
        ("image", &r.image, spec.visual_dim),
    ] {
        if let Some(f) = feat {
            if dim == 0 {
                return fail(format!("{name} present but dataset {} declares none", r.dataset_id));
            }
            if f.cols() != dim {
                return fail(format!("{name} has width {} but dataset declares {dim}", f.cols()));
            }
        }
    }
    match (&r.label, r.task_type) {
        (LabelValue::Scalar(v), TaskType::MSA) => {
            if !v.is_finite() || !(-3.0..=3.0).contains(v) {
                return fail(format!("MSA score {v} outside [-3, 3]"));
            }
        }
        (LabelValue::Categorical(s), t) if t != TaskType::MSA => {
            if !spec.answer_set.contains(s) {
                return fail(format!("label {s:?} not in the answer set of {}", r.dataset_id));
            }
        }
        (l, t) => return fail(format!("label {l:?} has the wrong kind for {t}")),
    }
    Ok(())
}

pub fn record_to_json(r: &SaevalRecord) -> String {
    let out = RecordOut {
        task_type: r.task_type,
        dataset_id: &r.dataset_id,
        text: &r.text,
        audio: r.audio.as_ref().map(FeatureMatrix::to_rows),
        image: r.image.as_ref().map(FeatureMatrix::to_rows),
        context: &r.context,
        speaker_id: r.speaker_id.as_deref(),
        utterance_index: r.utterance_index,
        label: &r.label,
    };
    serde_json::to_string(&out).expect("record serializes")
}

/// Writes records as JSON Lines with inline feature arrays.
pub fn write_corpus(path: impl AsRef<Path>, records: &[SaevalRecord]) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for r in records {
        writeln!(w, "{}", record_to_json(r)).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// `SAEV` magic, u32 rows, u32 cols, then `rows*cols` f32, all little-endian.
pub fn read_sidecar(path: impl AsRef<Path>) -> Result<FeatureMatrix> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    let bad = |m: &str| Error::Contract(format!("sidecar {}: {m}", path.display()));
    if bytes.len() < 12 || &bytes[..4] != SIDECAR_MAGIC {
        return Err(bad("missing SAEV header"));
    }
    let rows = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let cols = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    if bytes.len() != 12 + rows * cols * 4 {
        return Err(bad("payload length does not match header"));
    }
    let data = bytes[12..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    FeatureMatrix::new(rows, cols, data)
}

pub fn write_sidecar(path: impl AsRef<Path>, m: &FeatureMatrix) -> Result<()> {
    let path = path.as_ref();
    let mut bytes = Vec::with_capacity(12 + m.data().len() * 4);
    bytes.extend_from_slice(SIDECAR_MAGIC);
    bytes.extend_from_slice(&(m.rows() as u32).to_le_bytes());
    bytes.extend_from_slice(&(m.cols() as u32).to_le_bytes());
    for &v in m.data() {
        bytes.extend_from_slice(&(v as f32).to_le_bytes());
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Loads several corpus files in order and concatenates them.
pub fn load_corpora(paths: &[PathBuf], registry: &Registry) -> Result<Vec<SaevalRecord>> {
    let mut all = Vec::new();
    for p in paths {
        all.extend(load_corpus(p, registry)?);
    }
    Ok(all)
}
