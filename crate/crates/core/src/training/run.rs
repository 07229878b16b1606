use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use indexmap::IndexMap;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{Stage, TrainConfig};
use super::corpus::TrainCorpus;
use super::optim::{clip_global_norm, Adam, Grads};
use super::sampler::{derive_seed, stage1_pairs, task_average_sample, SamplerState, TaskPools};
use crate::data::{combine_queries, Polarity};
use crate::error::{Error, Result};
use crate::evaluation::evaluate_all;
use crate::masking::{apply_modal_setting, sample_mcm_plan, sample_prompt_setting, MaskPlan, ModalitySetting};
use crate::model::{Bound, Checkpoint, Model, ModelConfig};
use crate::numerics::{Dropout, Graph};
use crate::objectives::{
    assign_pseudo_labels, build_centroids, generation_loss, label_target, stage1_loss, stage2_loss, CentroidIndex,
    CepHeads, LabelledVector, LossReport, PolarityTokens, PseudoLabelSet, Stage1Batch, Stage2Batch,
};
use crate::prompt::{build_prompt, Modality, PromptSequence, Vocab};

const STEP_TAG: u64 = 0x5354_4550;
const DROPOUT_TAG: u64 = 0x4452_4f50;

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const VALIDATION_FILE: &str = "validation.jsonl";
pub const CHECKPOINT_FILE: &str = "checkpoint.ck";

/// One optimizer step. Fine-tuning reports its generation loss as `total`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub stage: Stage,
    pub mcm: f64,
    pub spp: f64,
    pub ccl: f64,
    pub cep: f64,
    pub total: f64,
    pub lr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValidationLog {
    pub epoch: usize,
    pub step: usize,
    pub dataset_id: String,
    pub samples: usize,
    pub fallbacks: usize,
    pub metrics: IndexMap<String, Option<f64>>,
}

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    /// Receives the metric logs and checkpoints.
    pub out_dir: Option<PathBuf>,
    /// Stop after this many completed steps, leaving a resumable checkpoint.
    pub halt_at: Option<usize>,
}

#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub checkpoint: Checkpoint,
    /// Steps run by this invocation.
    pub log: Vec<StepLog>,
    pub validation: Vec<ValidationLog>,
    pub complete: bool,
}

/// Everything beyond the weights that a resumed run needs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct RunState {
    stage: Stage,
    step: usize,
    total_steps: usize,
    complete: bool,
    adam_t: u64,
    train_config: TrainConfig,
    sampler: Option<SamplerState>,
    centroids: Option<CentroidIndex>,
    pseudo: Option<Vec<PseudoLabelSet>>,
}

struct Logs {
    metrics: Option<BufWriter<File>>,
    validation: Option<BufWriter<File>>,
}

impl Logs {
    fn open(dir: Option<&Path>, append: bool) -> Result<Self> {
        let Some(dir) = dir else {
            return Ok(Logs { metrics: None, validation: None });
        };
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let open = |name: &str| -> Result<BufWriter<File>> {
            let p = dir.join(name);
            let f = OpenOptions::new()
                .create(true)
                .write(true)
                .append(append)
                .truncate(!append)
                .open(&p)
                .map_err(|e| Error::io(&p, e))?;
            Ok(BufWriter::new(f))
        };
        Ok(Logs { metrics: Some(open(METRICS_FILE)?), validation: Some(open(VALIDATION_FILE)?) })
    }

    fn write<T: Serialize>(w: &mut Option<BufWriter<File>>, v: &T) -> Result<()> {
        if let Some(w) = w {
            let line = serde_json::to_string(v)?;
            writeln!(w, "{line}").map_err(|e| Error::io("<log>", e))?;
        }
        Ok(())
    }

    fn flush(&mut self) -> Result<()> {
        for w in [&mut self.metrics, &mut self.validation].into_iter().flatten() {
            w.flush().map_err(|e| Error::io("<log>", e))?;
        }
        Ok(())
    }
}

/// Largest modality setting the prompt supports.
fn full_setting(prompt: &PromptSequence) -> ModalitySetting {
    let has = |m| prompt.segment(m).is_some();
    *ModalitySetting::available(has(Modality::Acoustic), has(Modality::Visual))
        .last()
        .expect("T is always available")
}

fn corrupt(
    prompt: &PromptSequence,
    cfg: &TrainConfig,
    vocab: &Vocab,
    rng: &mut ChaCha8Rng,
    mcm: bool,
) -> Result<(PromptSequence, MaskPlan)> {
    let setting = if cfg.modal_mask { sample_prompt_setting(prompt, rng) } else { full_setting(prompt) };
    let p = apply_modal_setting(prompt, setting)?;
    let plan = if mcm { sample_mcm_plan(&p, vocab, setting, cfg.mask_prob, rng)? } else { MaskPlan::empty(setting) };
    Ok((p, plan))
}

fn steps_per_epoch(stage: Stage, corpus: &TrainCorpus, cfg: &TrainConfig) -> Result<usize> {
    let n = match stage {
        Stage::Pretrain1 => stage1_pairs(&corpus.records, cfg.seed, 0)?.len(),
        _ => corpus.records.len(),
    };
    Ok(n.div_ceil(cfg.batch_size).max(1))
}

fn snapshot(model: &Model, vocab: &Vocab, adam: &Adam, state: &RunState) -> Result<Checkpoint> {
    let mut ck = Checkpoint::from_model(model, vocab, serde_json::to_value(state)?);
    ck.arrays.extend(adam.to_arrays());
    Ok(ck)
}

fn resumable(ck: &Checkpoint, stage: Stage) -> Option<RunState> {
    serde_json::from_value::<RunState>(ck.meta.clone())
        .ok()
        .filter(|s| s.stage == stage && !s.complete)
}

/// Stage-two centroids and pseudo labels from the current weights.
fn refresh_centroids(model: &Model, corpus: &TrainCorpus, generation: u64, chunk: usize) -> Result<(CentroidIndex, Vec<PseudoLabelSet>)> {
    let pooled = model.pooled(&corpus.prompts, chunk)?;
    let keys: Vec<String> = corpus.records.iter().map(|r| r.label.class_key()).collect();
    let samples: Vec<LabelledVector> = corpus
        .records
        .iter()
        .zip(&keys)
        .zip(&pooled)
        .map(|((r, k), v)| LabelledVector { task: r.task_type, label: k, vector: v })
        .collect();
    let index = build_centroids(&samples, generation)?;
    let pseudo = corpus
        .records
        .iter()
        .zip(&keys)
        .zip(&pooled)
        .map(|((r, k), v)| assign_pseudo_labels(v, &index, r.task_type, k))
        .collect::<Result<Vec<_>>>()?;
    Ok((index, pseudo))
}

/// Runs one training stage. Without `init` the model starts from a seeded
/// random initialisation of `model_config`; a checkpoint from an unfinished
/// run of the same stage resumes it exactly, any other checkpoint only
/// supplies the starting weights.
pub fn run_stage(
    stage: Stage,
    corpus: &TrainCorpus,
    model_config: &ModelConfig,
    cfg: &TrainConfig,
    init: Option<&Checkpoint>,
    opts: &RunOptions,
) -> Result<RunOutcome> {
    cfg.validate()?;
    if cfg.max_len != corpus.max_len {
        return Err(Error::Config(format!(
            "corpus prompts were built for max_len {} but the run uses {}",
            corpus.max_len, cfg.max_len
        )));
    }
    let (mut model, resume) = match init {
        None => (Model::new(model_config.clone().resolve(&corpus.vocab, &corpus.registry)?, cfg.seed)?, None),
        Some(ck) => {
            if ck.vocab != corpus.vocab.tokens() {
                return Err(Error::Checkpoint("checkpoint vocabulary differs from the corpus vocabulary".into()));
            }
            (ck.model()?, resumable(ck, stage))
        }
    };
    if corpus.max_len > model.config.max_len {
        return Err(Error::Config(format!(
            "max_len {} exceeds the model's {} positions",
            corpus.max_len, model.config.max_len
        )));
    }
    let spe = steps_per_epoch(stage, corpus, cfg)?;
    let total = (cfg.epochs * spe).min(cfg.max_steps.unwrap_or(usize::MAX));
    let vocab = &corpus.vocab;

    let mut pools = match stage {
        Stage::Pretrain1 => None,
        _ => Some(TaskPools::new(&corpus.records, cfg.seed)?),
    };
    let mut adam = Adam::new(cfg.learning_rate, &model.params);
    let mut centroids: Option<CentroidIndex> = None;
    let mut pseudo: Vec<PseudoLabelSet> = Vec::new();
    let mut start = 0;
    if let (Some(state), Some(ck)) = (&resume, init) {
        if &state.train_config != cfg {
            return Err(Error::Config("resuming with a different training configuration".into()));
        }
        adam = Adam::from_arrays(cfg.learning_rate, state.adam_t, &model.params, &ck.arrays)?;
        if let (Some(p), Some(s)) = (pools.as_mut(), &state.sampler) {
            p.restore(s)?;
        }
        centroids = state.centroids.clone();
        pseudo = state.pseudo.clone().unwrap_or_default();
        start = state.step;
    }
    let end = opts.halt_at.map_or(total, |h| h.min(total)).max(start);
    let mut logs = Logs::open(opts.out_dir.as_deref(), resume.is_some())?;
    log::info!("{stage}: steps {start}..{end} of {total} ({spe} per epoch)");

    let tokens = PolarityTokens::new(vocab)?;
    let heads = if stage == Stage::Pretrain2 { Some(CepHeads::new(&corpus.registry, vocab)?) } else { None };
    let mut pair_cache: Option<(usize, Vec<(usize, usize, Polarity)>)> = None;
    let mut step_logs = Vec::new();
    let mut validation = Vec::new();

    for step in start..end {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[cfg.seed, STEP_TAG, stage.tag(), step as u64]));
        let mut drop = if cfg.dropout_rate > 0.0 {
            let seed = derive_seed(&[cfg.seed, DROPOUT_TAG, stage.tag(), step as u64]);
            Dropout::new(cfg.dropout_rate, ChaCha8Rng::seed_from_u64(seed))
        } else {
            Dropout::disabled()
        };
        let mut g = Graph::new();
        let bound = Bound::new(&mut g, &model.config, &model.params, true);

        let (loss, report) = match stage {
            Stage::Pretrain1 => {
                let epoch = step / spe;
                if pair_cache.as_ref().is_none_or(|(e, _)| *e != epoch) {
                    pair_cache = Some((epoch, stage1_pairs(&corpus.records, cfg.seed, epoch as u64)?));
                }
                let pairs = &pair_cache.as_ref().expect("filled above").1;
                let lo = (step % spe) * cfg.batch_size;
                let chosen = &pairs[lo..(lo + cfg.batch_size).min(pairs.len())];
                let mut prompts = Vec::with_capacity(chosen.len());
                let mut plans = Vec::with_capacity(chosen.len());
                for &(a, b, _) in chosen {
                    let joined = combine_queries(&corpus.records[a], &corpus.records[b])?;
                    let base = build_prompt(&joined, vocab, &corpus.registry, corpus.max_len)?;
                    let (p, plan) = corrupt(&base, cfg, vocab, &mut rng, true)?;
                    prompts.push(p);
                    plans.push(plan);
                }
                let batch = Stage1Batch {
                    prompts: prompts.iter().collect(),
                    plans,
                    polarities: chosen.iter().map(|c| c.2).collect(),
                };
                stage1_loss(&mut g, &bound, &batch, &tokens, &cfg.loss_weights, &mut drop)?
            }
            Stage::Pretrain2 => {
                let generation = (step / cfg.centroid_refresh_every) as u64;
                if centroids.as_ref().map(|c| c.generation) != Some(generation) {
                    let (c, p) = refresh_centroids(&model, corpus, generation, cfg.eval_batch_size)?;
                    log::debug!("centroids refreshed at step {step} (generation {generation})");
                    centroids = Some(c);
                    pseudo = p;
                }
                let idx = task_average_sample(pools.as_mut().expect("stage two samples by task"), cfg.batch_size)?;
                let mut prompts = Vec::with_capacity(idx.len());
                let mut plans = Vec::with_capacity(idx.len());
                for &i in &idx {
                    let (p, plan) = corrupt(&corpus.prompts[i], cfg, vocab, &mut rng, true)?;
                    prompts.push(p);
                    plans.push(plan);
                }
                let batch = Stage2Batch {
                    prompts: prompts.iter().collect(),
                    plans,
                    pseudo: idx.iter().map(|&i| pseudo[i].clone()).collect(),
                };
                let index = centroids.as_ref().expect("refreshed above");
                let heads = heads.as_ref().expect("built for stage two");
                stage2_loss(&mut g, &bound, &batch, index, heads, &cfg.loss_weights, &mut drop)?
            }
            Stage::Finetune => {
                let idx = task_average_sample(pools.as_mut().expect("fine-tuning samples by task"), cfg.batch_size)?;
                let mut prompts = Vec::with_capacity(idx.len());
                for &i in &idx {
                    prompts.push(corrupt(&corpus.prompts[i], cfg, vocab, &mut rng, false)?.0);
                }
                let targets: Vec<Vec<usize>> =
                    idx.iter().map(|&i| label_target(vocab, &corpus.records[i].label.render())).collect();
                let refs: Vec<&PromptSequence> = prompts.iter().collect();
                let enc = bound.encode(&mut g, &refs, None, &mut drop)?;
                let loss = generation_loss(&mut g, &bound, &enc, &targets, &mut drop)?;
                let total = g.scalar(loss);
                (loss, LossReport { total, ..LossReport::default() })
            }
        };
        if !report.total.is_finite() {
            return Err(Error::Numeric(format!(
                "{stage} step {step}: loss is not finite (mcm {}, spp {}, ccl {}, cep {}, total {})",
                report.mcm, report.spp, report.ccl, report.cep, report.total
            )));
        }
        g.backward(loss)?;
        let mut grads: Grads = bound
            .vars()
            .iter()
            .map(|(k, &v)| {
                let grad = g.grad(v).map_or_else(|| vec![0.0; model.params[k].numel()], <[f64]>::to_vec);
                (k.clone(), grad)
            })
            .collect();
        if let Some((k, _)) = grads.iter().find(|(_, v)| v.iter().any(|x| !x.is_finite())) {
            return Err(Error::Numeric(format!("{stage} step {step}: non-finite gradient for {k}")));
        }
        clip_global_norm(&mut grads, cfg.clip_norm);
        adam.step(&mut model.params, &grads)?;

        let entry = StepLog {
            step,
            stage,
            mcm: report.mcm,
            spp: report.spp,
            ccl: report.ccl,
            cep: report.cep,
            total: report.total,
            lr: cfg.learning_rate,
        };
        log::debug!("{stage} step {step}: total {:.6}", entry.total);
        Logs::write(&mut logs.metrics, &entry)?;
        step_logs.push(entry);

        let done = step + 1;
        let epoch_end = done % spe == 0;
        if stage == Stage::Finetune && epoch_end && cfg.validate_every > 0 && (done / spe) % cfg.validate_every == 0 {
            let results = evaluate_all(
                &model,
                vocab,
                &corpus.registry,
                corpus.validation_records(),
                corpus.max_len,
                cfg.eval_batch_size,
            )?;
            for r in results {
                let v = ValidationLog {
                    epoch: done / spe,
                    step,
                    dataset_id: r.dataset_id,
                    samples: r.samples.len(),
                    fallbacks: r.samples.iter().filter(|s| s.fallback).count(),
                    metrics: r.metrics,
                };
                Logs::write(&mut logs.validation, &v)?;
                validation.push(v);
            }
        }
        if let (Some(every), Some(dir)) = (cfg.checkpoint_every, &opts.out_dir) {
            if done % every == 0 && done < end {
                let state = run_state(stage, done, total, &adam, cfg, &pools, &centroids, &pseudo);
                snapshot(&model, vocab, &adam, &state)?.save(dir.join(format!("checkpoint-{done:06}.ck")))?;
            }
        }
    }
    logs.flush()?;
    let state = run_state(stage, end, total, &adam, cfg, &pools, &centroids, &pseudo);
    let checkpoint = snapshot(&model, vocab, &adam, &state)?;
    if let Some(dir) = &opts.out_dir {
        checkpoint.save(dir.join(CHECKPOINT_FILE))?;
    }
    Ok(RunOutcome { checkpoint, log: step_logs, validation, complete: state.complete })
}

#[allow(clippy::too_many_arguments)]
fn run_state(
    stage: Stage,
    step: usize,
    total: usize,
    adam: &Adam,
    cfg: &TrainConfig,
    pools: &Option<TaskPools>,
    centroids: &Option<CentroidIndex>,
    pseudo: &[PseudoLabelSet],
) -> RunState {
    RunState {
        stage,
        step,
        total_steps: total,
        complete: step >= total,
        adam_t: adam.t,
        train_config: cfg.clone(),
        sampler: pools.as_ref().map(TaskPools::state),
        centroids: centroids.clone(),
        pseudo: (!pseudo.is_empty()).then(|| pseudo.to_vec()),
    }
}

/// Stage one: context reconstruction, polarity prediction and polarity
/// contrast over pairs of same-polarity queries.
pub fn run_pretrain_stage1(
    corpus: &TrainCorpus,
    model_config: &ModelConfig,
    cfg: &TrainConfig,
    init: Option<&Checkpoint>,
    opts: &RunOptions,
) -> Result<RunOutcome> {
    run_stage(Stage::Pretrain1, corpus, model_config, cfg, init, opts)
}

/// Stage two: context reconstruction plus cross-task pseudo-label prediction.
pub fn run_pretrain_stage2(
    corpus: &TrainCorpus,
    model_config: &ModelConfig,
    cfg: &TrainConfig,
    init: Option<&Checkpoint>,
    opts: &RunOptions,
) -> Result<RunOutcome> {
    run_stage(Stage::Pretrain2, corpus, model_config, cfg, init, opts)
}

/// Joint fine-tuning on gold label generation with task-average batches.
pub fn run_finetune(
    corpus: &TrainCorpus,
    model_config: &ModelConfig,
    cfg: &TrainConfig,
    init: Option<&Checkpoint>,
    opts: &RunOptions,
) -> Result<RunOutcome> {
    run_stage(Stage::Finetune, corpus, model_config, cfg, init, opts)
}
