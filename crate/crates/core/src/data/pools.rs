use std::collections::BTreeMap;

use super::types::{LabelValue, Polarity, SaevalRecord};
use crate::error::{Error, Result};

/// Fine-grained label → polarity. Labels are matched case-insensitively.
pub fn to_polarity(label: &LabelValue, dataset_id: &str) -> Result<Polarity> {
    match label {
        LabelValue::Scalar(v) if v.is_nan() => Err(Error::Config(format!("NaN score in {dataset_id}"))),
        LabelValue::Scalar(v) if *v > 0.0 => Ok(Polarity::Positive),
        LabelValue::Scalar(v) if *v < 0.0 => Ok(Polarity::Negative),
        LabelValue::Scalar(_) => Ok(Polarity::Neutral),
        LabelValue::Categorical(s) => polarity_of_name(s).ok_or_else(|| {
            Error::Config(format!("label {s:?} of {dataset_id} has no polarity mapping"))
        }),
    }
}

fn polarity_of_name(label: &str) -> Option<Polarity> {
    let l = label.trim().to_lowercase();
    let p = match l.as_str() {
        "positive" | "joy" | "happy" | "happiness" | "excited" => Polarity::Positive,
        "negative" | "anger" | "angry" | "sad" | "sadness" | "fear" | "fearful" | "disgust"
        | "frustrated" | "hate" => Polarity::Negative,
        // surprise is valence-ambiguous and ABSA "conflict" is mixed; both park on neutral
        "neutral" | "no-emotion" | "no emotion" | "surprise" | "surprised" | "conflict" => Polarity::Neutral,
        _ => return None,
    };
    Some(p)
}

/// Indices into the corpus of every record sharing one polarity.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DataPool {
    pub polarity: Polarity,
    pub records: Vec<usize>,
}

/// Partitions the corpus by polarity. All three pools are always present.
pub fn build_pools(records: &[SaevalRecord]) -> Result<BTreeMap<Polarity, DataPool>> {
    let mut pools: BTreeMap<Polarity, DataPool> = Polarity::ALL
        .iter()
        .map(|&p| (p, DataPool { polarity: p, records: Vec::new() }))
        .collect();
    for (i, r) in records.iter().enumerate() {
        let p = to_polarity(&r.label, &r.dataset_id)?;
        pools.get_mut(&p).expect("all polarities present").records.push(i);
    }
    Ok(pools)
}

/// Joins two same-polarity queries into one stage-one training query.
///
/// The result keeps `a`'s task, dataset and conversation metadata; `b`'s
/// text follows `a`'s behind a separator. Feature arrays are stacked along
/// the frame axis; a modality missing on one side keeps the other side's frames.
pub fn combine_queries(a: &SaevalRecord, b: &SaevalRecord) -> Result<SaevalRecord> {
    let pa = to_polarity(&a.label, &a.dataset_id)?;
    let pb = to_polarity(&b.label, &b.dataset_id)?;
    if pa != pb {
        return Err(Error::Contract(format!("cannot combine {pa} with {pb} queries")));
    }
    let merge = |x: &Option<_>, y: &Option<_>| -> Result<Option<super::FeatureMatrix>> {
        Ok(match (x, y) {
            (Some(x), Some(y)) => Some(super::FeatureMatrix::concat_frames(x, y)?),
            (Some(x), None) => Some(x.clone()),
            (None, Some(y)) => Some(y.clone()),
            (None, None) => None,
        })
    };
    let mut joined = a.joined_texts.clone();
    joined.push(b.text.clone());
    joined.extend(b.joined_texts.iter().cloned());
    Ok(SaevalRecord {
        task_type: a.task_type,
        dataset_id: a.dataset_id.clone(),
        text: a.text.clone(),
        audio: merge(&a.audio, &b.audio)?,
        image: merge(&a.image, &b.image)?,
        context: a.context.clone(),
        speaker_id: a.speaker_id.clone(),
        utterance_index: a.utterance_index,
        label: LabelValue::Categorical(pa.name().to_string()),
        joined_texts: joined,
    })
}
