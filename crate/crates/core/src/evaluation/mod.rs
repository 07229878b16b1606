//! Decoding generations to labels and the per-dataset metric suite.

mod metrics;

use std::fmt::Write as _;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

pub use metrics::{metric_mf1_excl_neutral, metric_wa, metric_wf1, metrics_msa, MsaMetrics};

use crate::data::{DatasetSpec, LabelValue, MetricKind, Registry, SaevalRecord};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::prompt::{build_prompt, decode_label, AnswerSet, PromptSequence, Vocab};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplePrediction {
    pub gold: LabelValue,
    pub predicted: LabelValue,
    /// The generation matched no answer exactly, or was empty.
    pub fallback: bool,
}

/// Metrics of one dataset. Keys follow the registry's declaration order;
/// a metric that is undefined on these samples maps to `null`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub dataset_id: String,
    pub metrics: IndexMap<String, Option<f64>>,
    pub samples: Vec<SamplePrediction>,
}

fn defined(r: Result<f64>) -> Result<Option<f64>> {
    match r {
        Ok(v) => Ok(Some(v)),
        Err(Error::UndefinedMetric(_)) => Ok(None),
        Err(e) => Err(e),
    }
}

/// Computes every metric the dataset declares. Categorical metrics compare
/// class keys, so MSA scores are compared by their 7-way bin.
pub fn score_predictions(dataset_id: &str, spec: &DatasetSpec, samples: Vec<SamplePrediction>) -> Result<EvalResult> {
    let golds: Vec<String> = samples.iter().map(|s| s.gold.class_key()).collect();
    let preds: Vec<String> = samples.iter().map(|s| s.predicted.class_key()).collect();
    let wants_msa = spec.metrics.iter().any(|m| matches!(m, MetricKind::Mae | MetricKind::Acc7 | MetricKind::Acc2));
    let msa = if wants_msa && !samples.is_empty() {
        let g: Option<Vec<f64>> = samples.iter().map(|s| s.gold.as_scalar()).collect();
        let p: Option<Vec<f64>> = samples.iter().map(|s| s.predicted.as_scalar()).collect();
        match (g, p) {
            (Some(g), Some(p)) => Some(metrics_msa(&g, &p)?),
            _ => return Err(Error::Contract(format!("{dataset_id}: regression metrics need scalar labels"))),
        }
    } else {
        None
    };
    let mut out = IndexMap::new();
    for &m in &spec.metrics {
        let v = match m {
            MetricKind::Wa => defined(metric_wa(&golds, &preds))?,
            MetricKind::Wf1 => defined(metric_wf1(&golds, &preds))?,
            MetricKind::Mf1 => {
                let neutral = spec.neutral_label.clone().unwrap_or_default();
                defined(metric_mf1_excl_neutral(&golds, &preds, &neutral))?
            }
            MetricKind::Mae => msa.map(|x| x.mae),
            MetricKind::Acc7 => msa.map(|x| x.acc7),
            MetricKind::Acc2 => msa.and_then(|x| x.acc2),
        };
        out.insert(m.name().to_string(), v);
    }
    Ok(EvalResult { dataset_id: dataset_id.to_string(), metrics: out, samples })
}

/// Longest answer the dataset can need, in tokens, plus `<eos>`.
pub fn generation_budget(spec: &DatasetSpec, vocab: &Vocab) -> usize {
    let longest = match AnswerSet::for_dataset(spec) {
        AnswerSet::Score => vocab.tokenize("-3.0").len(),
        AnswerSet::Categorical(labels) => labels.iter().map(|l| vocab.tokenize(l).len()).max().unwrap_or(1),
    };
    longest + 1
}

/// Greedy-decodes each prompt and scores the decoded labels. An empty
/// generation counts as a fallback to the first answer (or a zero score).
pub fn evaluate_prompts(
    model: &Model,
    vocab: &Vocab,
    dataset_id: &str,
    spec: &DatasetSpec,
    prompts: &[PromptSequence],
    golds: &[LabelValue],
    batch_size: usize,
) -> Result<EvalResult> {
    if prompts.len() != golds.len() {
        return Err(Error::Dimension("one gold label per prompt".into()));
    }
    let answers = AnswerSet::for_dataset(spec);
    let budget = generation_budget(spec, vocab);
    let mut samples = Vec::with_capacity(prompts.len());
    for (chunk, gold) in prompts.chunks(batch_size.max(1)).zip(golds.chunks(batch_size.max(1))) {
        for (ids, gold) in model.generate_batch(chunk, budget)?.into_iter().zip(gold) {
            let (predicted, fallback) = match decode_label(&ids, &answers, vocab) {
                Ok(d) => (d.label, d.fallback),
                Err(Error::Decode(_)) => (empty_answer(&answers), true),
                Err(e) => return Err(e),
            };
            samples.push(SamplePrediction { gold: gold.clone(), predicted, fallback });
        }
    }
    score_predictions(dataset_id, spec, samples)
}

fn empty_answer(answers: &AnswerSet) -> LabelValue {
    match answers {
        AnswerSet::Score => LabelValue::Scalar(0.0),
        AnswerSet::Categorical(l) => LabelValue::Categorical(l.first().cloned().unwrap_or_default()),
    }
}

/// Builds prompts for the dataset's records and evaluates them.
pub fn evaluate_dataset(
    model: &Model,
    vocab: &Vocab,
    registry: &Registry,
    dataset_id: &str,
    records: &[SaevalRecord],
    max_len: usize,
    batch_size: usize,
) -> Result<EvalResult> {
    let spec = registry.spec(dataset_id)?;
    let mine: Vec<&SaevalRecord> = records.iter().filter(|r| r.dataset_id == dataset_id).collect();
    let prompts = mine
        .iter()
        .map(|r| build_prompt(r, vocab, registry, max_len))
        .collect::<Result<Vec<_>>>()?;
    let golds: Vec<LabelValue> = mine.iter().map(|r| r.label.clone()).collect();
    evaluate_prompts(model, vocab, dataset_id, spec, &prompts, &golds, batch_size)
}

/// Every registered dataset, in registry order.
pub fn evaluate_all(
    model: &Model,
    vocab: &Vocab,
    registry: &Registry,
    records: &[SaevalRecord],
    max_len: usize,
    batch_size: usize,
) -> Result<Vec<EvalResult>> {
    registry
        .ids()
        .map(|id| evaluate_dataset(model, vocab, registry, id, records, max_len, batch_size))
        .collect()
}

/// One row per dataset. Accuracies and F1 scores are shown in percent, MAE
/// as is.
pub fn render_table(results: &[EvalResult]) -> String {
    let width = results.iter().map(|r| r.dataset_id.len()).max().unwrap_or(7).max(7);
    let mut out = String::new();
    for r in results {
        let _ = write!(out, "{:<width$}  n={:<5}", r.dataset_id, r.samples.len());
        for (name, v) in &r.metrics {
            let cell = match v {
                None => "n/a".to_string(),
                Some(v) if name == MetricKind::Mae.name() => format!("{v:.3}"),
                Some(v) => format!("{:.2}", v * 100.0),
            };
            let _ = write!(out, "  {name} {cell:>7}");
        }
        out.push('\n');
    }
    out
}
