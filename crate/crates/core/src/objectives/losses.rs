use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::centroids::{CentroidIndex, PseudoLabelSet};
use crate::data::{Polarity, Registry, TaskType};
use crate::error::{Error, Result};
use crate::masking::MaskPlan;
use crate::model::{Bound, Encoded};
use crate::numerics::{Dropout, Graph, Tensor, Var};
use crate::prompt::{task_label_space, PromptSequence, Vocab, BOS, EOS};

/// Component losses of one step and their weighted total.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub mcm: f64,
    pub spp: f64,
    pub ccl: f64,
    pub cep: f64,
    pub total: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub mcm: f64,
    pub spp: f64,
    pub ccl: f64,
    pub cep: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { mcm: 1.0, spp: 1.0, ccl: 1.0, cep: 1.0 }
    }
}

/// Token ids of the three polarity words, in [`Polarity::index`] order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PolarityTokens(pub [usize; 3]);

impl PolarityTokens {
    pub fn new(vocab: &Vocab) -> Result<Self> {
        let mut ids = [0; 3];
        for p in Polarity::ALL {
            match vocab.tokenize(p.name()).as_slice() {
                [id] => ids[p.index()] = *id,
                _ => return Err(Error::Vocabulary(format!("polarity word {p} is not a single token"))),
            }
        }
        Ok(PolarityTokens(ids))
    }
}

/// Constrained head of one task: its label space and each label's first token.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TaskHead {
    pub labels: Vec<String>,
    pub first_tokens: Vec<usize>,
}

/// Heads for cross-task prediction. Tasks without datasets have none.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CepHeads {
    pub heads: BTreeMap<TaskType, TaskHead>,
}

impl CepHeads {
    pub fn new(registry: &Registry, vocab: &Vocab) -> Result<Self> {
        let mut heads = BTreeMap::new();
        for task in TaskType::ALL {
            let labels = task_label_space(registry, task);
            if labels.is_empty() {
                continue;
            }
            let first_tokens: Vec<usize> = labels.iter().map(|l| vocab.tokenize(l)[0]).collect();
            if first_tokens.iter().collect::<BTreeSet<_>>().len() != labels.len() {
                return Err(Error::Config(format!(
                    "{task} labels must start with distinct tokens for cross-task prediction"
                )));
            }
            heads.insert(task, TaskHead { labels, first_tokens });
        }
        Ok(CepHeads { heads })
    }

    pub fn label_index(&self, task: TaskType, label: &str) -> Option<usize> {
        self.heads.get(&task)?.labels.iter().position(|l| l == label)
    }
}

fn zero(g: &mut Graph) -> Var {
    g.constant(Tensor::scalar(0.0))
}

/// Cross-entropy of every masked text token against the full vocabulary,
/// summed per sample and averaged over the batch.
pub fn loss_mcm(g: &mut Graph, bound: &Bound, enc: &Encoded, prompts: &[&PromptSequence], plans: &[MaskPlan]) -> Result<Var> {
    if prompts.len() != enc.batch || plans.len() != enc.batch {
        return Err(Error::Dimension("mcm batch layout".into()));
    }
    let mut rows = Vec::new();
    let mut targets = Vec::new();
    for (s, (p, plan)) in prompts.iter().zip(plans).enumerate() {
        let flat = p.flatten();
        for &pos in &plan.masked_token_positions {
            rows.push(s * enc.len + pos);
            targets.push(flat[pos]);
        }
    }
    if rows.is_empty() {
        return Ok(zero(g));
    }
    let h = g.gather_rows(enc.states, &rows)?;
    let logits = bound.logits(g, h)?;
    let w = vec![1.0 / enc.batch as f64; rows.len()];
    g.cross_entropy(logits, &targets, &w)
}

/// Polarity of each sample read from the decoder's first position, scored
/// over the three polarity words only.
pub fn loss_spp(
    g: &mut Graph,
    bound: &Bound,
    enc: &Encoded,
    polarities: &[Polarity],
    tokens: &PolarityTokens,
    drop: &mut Dropout,
) -> Result<Var> {
    if polarities.len() != enc.batch {
        return Err(Error::Dimension("one polarity per sample".into()));
    }
    let (hidden, _) = bound.decode(g, enc, &vec![vec![BOS]; enc.batch], drop)?;
    let logits = bound.restricted_logits(g, hidden, &tokens.0)?;
    let targets: Vec<usize> = polarities.iter().map(|p| p.index()).collect();
    g.softmax_cross_entropy(logits, &targets)
}

/// Same-polarity distance-ratio contrast over pooled representations.
pub fn loss_ccl(g: &mut Graph, pooled: Var, polarities: &[Polarity]) -> Result<Var> {
    let labels: Vec<usize> = polarities.iter().map(|p| p.index()).collect();
    g.ccl_loss(pooled, &labels)
}

/// One constrained cross-entropy per task head: decoder position `d` is fed
/// the task token of task `d` and scored over that task's label first tokens.
/// Summed over tasks, averaged over the batch.
pub fn loss_cep(
    g: &mut Graph,
    bound: &Bound,
    enc: &Encoded,
    pseudo: &[PseudoLabelSet],
    heads: &CepHeads,
    drop: &mut Dropout,
) -> Result<Var> {
    if pseudo.len() != enc.batch {
        return Err(Error::Dimension("one pseudo-label set per sample".into()));
    }
    let inputs: Vec<usize> = TaskType::ALL.iter().map(|&t| Vocab::task_token(t)).collect();
    let (hidden, t_len) = bound.decode(g, enc, &vec![inputs; enc.batch], drop)?;
    let mut total: Option<Var> = None;
    for (&task, head) in &heads.heads {
        let rows: Vec<usize> = (0..enc.batch).map(|s| s * t_len + task.index()).collect();
        let mut targets = Vec::with_capacity(enc.batch);
        for p in pseudo {
            let label = p
                .labels
                .get(&task)
                .ok_or_else(|| Error::Contract(format!("pseudo labels lack task {task}")))?;
            targets.push(
                heads
                    .label_index(task, label)
                    .ok_or_else(|| Error::Contract(format!("label {label:?} outside the {task} label space")))?,
            );
        }
        let h = g.gather_rows(hidden, &rows)?;
        let logits = bound.restricted_logits(g, h, &head.first_tokens)?;
        let term = g.softmax_cross_entropy(logits, &targets)?;
        total = Some(match total {
            Some(acc) => g.add(acc, term)?,
            None => term,
        });
    }
    Ok(match total {
        Some(v) => v,
        None => zero(g),
    })
}

/// Teacher-forced cross-entropy of each target sequence (label tokens then
/// `<eos>`), summed over positions and averaged over the batch.
pub fn generation_loss(g: &mut Graph, bound: &Bound, enc: &Encoded, targets: &[Vec<usize>], drop: &mut Dropout) -> Result<Var> {
    if targets.len() != enc.batch || targets.iter().any(Vec::is_empty) {
        return Err(Error::Dimension("one non-empty target per sample".into()));
    }
    let inputs: Vec<Vec<usize>> = targets
        .iter()
        .map(|t| std::iter::once(BOS).chain(t[..t.len() - 1].iter().copied()).collect())
        .collect();
    let (hidden, t_len) = bound.decode(g, enc, &inputs, drop)?;
    let mut rows = Vec::new();
    let mut flat = Vec::new();
    for (s, t) in targets.iter().enumerate() {
        rows.extend((0..t.len()).map(|i| s * t_len + i));
        flat.extend_from_slice(t);
    }
    let h = g.gather_rows(hidden, &rows)?;
    let logits = bound.logits(g, h)?;
    let w = vec![1.0 / enc.batch as f64; rows.len()];
    g.cross_entropy(logits, &flat, &w)
}

/// Decoder target ids for a rendered label.
pub fn label_target(vocab: &Vocab, rendered: &str) -> Vec<usize> {
    let mut t = vocab.tokenize(rendered);
    t.push(EOS);
    t
}

/// Inputs to a stage-one step: combined same-polarity queries.
pub struct Stage1Batch<'a> {
    pub prompts: Vec<&'a PromptSequence>,
    pub plans: Vec<MaskPlan>,
    pub polarities: Vec<Polarity>,
}

pub struct Stage2Batch<'a> {
    pub prompts: Vec<&'a PromptSequence>,
    pub plans: Vec<MaskPlan>,
    pub pseudo: Vec<PseudoLabelSet>,
}

fn weighted_sum(g: &mut Graph, terms: &[(Var, f64)]) -> Result<Var> {
    let mut acc: Option<Var> = None;
    for &(v, w) in terms {
        let t = if w == 1.0 { v } else { g.scale(v, w)? };
        acc = Some(match acc {
            Some(a) => g.add(a, t)?,
            None => t,
        });
    }
    acc.ok_or_else(|| Error::Contract("no loss terms".into()))
}

/// `mcm + spp + ccl` (weighted), all read from one encoding of the corrupted batch.
pub fn stage1_loss(
    g: &mut Graph,
    bound: &Bound,
    batch: &Stage1Batch<'_>,
    tokens: &PolarityTokens,
    weights: &LossWeights,
    drop: &mut Dropout,
) -> Result<(Var, LossReport)> {
    let enc = bound.encode(g, &batch.prompts, Some(&batch.plans), drop)?;
    let mcm = loss_mcm(g, bound, &enc, &batch.prompts, &batch.plans)?;
    let spp = loss_spp(g, bound, &enc, &batch.polarities, tokens, drop)?;
    let ccl = loss_ccl(g, enc.pooled, &batch.polarities)?;
    let total = weighted_sum(g, &[(mcm, weights.mcm), (spp, weights.spp), (ccl, weights.ccl)])?;
    let report = LossReport {
        mcm: g.scalar(mcm),
        spp: g.scalar(spp),
        ccl: g.scalar(ccl),
        cep: 0.0,
        total: g.scalar(total),
    };
    Ok((total, report))
}

/// `mcm + cep` (weighted). Pseudo labels must come from `centroids`' generation.
pub fn stage2_loss(
    g: &mut Graph,
    bound: &Bound,
    batch: &Stage2Batch<'_>,
    centroids: &CentroidIndex,
    heads: &CepHeads,
    weights: &LossWeights,
    drop: &mut Dropout,
) -> Result<(Var, LossReport)> {
    if let Some(p) = batch.pseudo.iter().find(|p| p.generation != centroids.generation) {
        return Err(Error::Contract(format!(
            "pseudo labels from centroid generation {} but the index is at {}",
            p.generation, centroids.generation
        )));
    }
    let enc = bound.encode(g, &batch.prompts, Some(&batch.plans), drop)?;
    let mcm = loss_mcm(g, bound, &enc, &batch.prompts, &batch.plans)?;
    let cep = loss_cep(g, bound, &enc, &batch.pseudo, heads, drop)?;
    let total = weighted_sum(g, &[(mcm, weights.mcm), (cep, weights.cep)])?;
    let report = LossReport {
        mcm: g.scalar(mcm),
        spp: 0.0,
        ccl: 0.0,
        cep: g.scalar(cep),
        total: g.scalar(total),
    };
    Ok((total, report))
}
