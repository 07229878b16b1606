use std::path::{Path, PathBuf};

use serde::Serialize;

use sentio_core::bias::{accuracy_matrix, bias_report, embed_records, read_embeddings, write_embeddings, AccuracyMatrix, Correspondence};
use sentio_core::data::{load_corpora, load_corpus, Registry};
use sentio_core::evaluation::{evaluate_all, render_table};
use sentio_core::model::Checkpoint;
use sentio_core::synth::{write_synthetic_corpus, SynthSizes};
use sentio_core::training::{run_stage, RunOptions, Stage, TrainCorpus, CHECKPOINT_FILE};

use crate::args::{BiasArgs, Common, SynthArgs, TrainArgs};
use crate::config::{require_exists, CliError, CliResult, RunConfig};
use crate::manifest::{io_error, write_manifest};

pub const EVAL_FILE: &str = "eval.json";
pub const EMBEDDINGS_FILE: &str = "embeddings.jsonl";
pub const BIAS_JSON_FILE: &str = "bias_report.json";
pub const BIAS_TEXT_FILE: &str = "bias_report.txt";

fn create_dir(dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(dir).map_err(|e| io_error(dir, e))
}

fn write_file(path: &Path, body: &str) -> CliResult<()> {
    std::fs::write(path, body).map_err(|e| io_error(path, e))
}

fn to_json<T: Serialize>(v: &T) -> CliResult<String> {
    Ok(serde_json::to_string_pretty(v).map_err(sentio_core::Error::from)? + "\n")
}

pub fn validate(common: &Common) -> CliResult<()> {
    let cfg = RunConfig::resolve("validate", common, &[])?;
    let registry = Registry::load(cfg.registry()?)?;
    let mut total = 0;
    for path in cfg.corpus()? {
        let n = load_corpus(path, &registry)?.len();
        println!("{}: {n} records", path.display());
        total += n;
    }
    println!("total: {total} records in {} file(s)", cfg.corpus.len());
    if let Some(out) = &cfg.out {
        create_dir(out)?;
        write_manifest(out, "validate", Some(cfg.seed), &cfg)?;
    }
    Ok(())
}

pub fn synth(args: &SynthArgs) -> CliResult<()> {
    let sizes = SynthSizes::uniform(args.size, args.feature_dim);
    if args.size == 0 || args.feature_dim == 0 {
        return Err(CliError::Config("--size and --feature-dim must be at least 1".into()));
    }
    create_dir(&args.out)?;
    let files = write_synthetic_corpus(&args.out, args.seed, &sizes)?;
    println!("corpus: {}", files.corpus.display());
    println!("registry: {}", files.registry.display());
    let config = serde_json::json!({ "command": "synth", "seed": args.seed, "sizes": sizes });
    write_manifest(&args.out, "synth", Some(args.seed), &config)
}

pub fn train(stage: Stage, args: &TrainArgs) -> CliResult<()> {
    let command = match stage {
        Stage::Pretrain1 => "pretrain1",
        Stage::Pretrain2 => "pretrain2",
        Stage::Finetune => "finetune",
    };
    let mut cfg = RunConfig::resolve(command, &args.common, &args.validation)?;
    if cfg.train.stage != stage {
        log::info!("config stage {} overridden by the {command} command", cfg.train.stage);
        cfg.train.stage = stage;
    }
    let out = cfg.out()?.to_path_buf();
    let registry = Registry::load(cfg.registry()?)?;
    let records = load_corpora(cfg.corpus()?, &registry)?;
    let init = cfg.checkpoint.as_deref().map(Checkpoint::load).transpose()?;
    let mut corpus = match &init {
        Some(ck) => TrainCorpus::new(registry.clone(), ck.vocab()?, records, cfg.train.max_len)?,
        None => TrainCorpus::from_records(registry.clone(), records, cfg.train.max_len)?,
    };
    if !cfg.validation.is_empty() {
        corpus = corpus.with_validation(load_corpora(&cfg.validation, &registry)?);
    }
    let model = match &init {
        Some(ck) if cfg.model == Default::default() => ck.model()?.config,
        _ => cfg.model.clone(),
    };
    cfg.model = model.clone();

    create_dir(&out)?;
    write_manifest(&out, command, Some(cfg.seed), &cfg)?;
    let opts = RunOptions { out_dir: Some(out.clone()), halt_at: args.halt_at };
    let outcome = run_stage(stage, &corpus, &model, &cfg.train, init.as_ref(), &opts)?;
    if let Some(last) = outcome.log.last() {
        let parts = if stage == Stage::Finetune {
            String::from("generation")
        } else {
            format!("mcm {:.4} spp {:.4} ccl {:.4} cep {:.4}", last.mcm, last.spp, last.ccl, last.cep)
        };
        println!(
            "{command}: {} steps, last step {} total {:.6} ({parts})",
            outcome.log.len(),
            last.step,
            last.total
        );
    } else {
        println!("{command}: no steps run");
    }
    println!(
        "checkpoint: {}{}",
        out.join(CHECKPOINT_FILE).display(),
        if outcome.complete { "" } else { " (halted; resumable)" }
    );
    Ok(())
}

fn load_for_inference(cfg: &RunConfig) -> CliResult<(Checkpoint, Registry, Vec<sentio_core::data::SaevalRecord>)> {
    let ck = Checkpoint::load(cfg.checkpoint()?)?;
    let registry = Registry::load(cfg.registry()?)?;
    let records = load_corpora(cfg.corpus()?, &registry)?;
    Ok((ck, registry, records))
}

#[derive(Serialize)]
struct EvalOutput<'a> {
    seed: u64,
    checkpoint: &'a Path,
    results: &'a [sentio_core::evaluation::EvalResult],
}

pub fn eval(common: &Common) -> CliResult<()> {
    let mut cfg = RunConfig::resolve("eval", common, &[])?;
    let (ck, registry, records) = load_for_inference(&cfg)?;
    let model = ck.model()?;
    let vocab = ck.vocab()?;
    cfg.model = model.config.clone();
    let results = evaluate_all(&model, &vocab, &registry, &records, model.config.max_len, cfg.train.eval_batch_size)?;
    print!("{}", render_table(&results));
    if let Some(out) = &cfg.out {
        create_dir(out)?;
        let body = to_json(&EvalOutput { seed: cfg.seed, checkpoint: cfg.checkpoint()?, results: &results })?;
        write_file(&out.join(EVAL_FILE), &body)?;
        write_manifest(out, "eval", Some(cfg.seed), &cfg)?;
    }
    Ok(())
}

pub fn export_embeddings(common: &Common) -> CliResult<()> {
    let mut cfg = RunConfig::resolve("export-embeddings", common, &[])?;
    let out = cfg.out()?.to_path_buf();
    let (ck, registry, records) = load_for_inference(&cfg)?;
    let model = ck.model()?;
    cfg.model = model.config.clone();
    let dump = embed_records(&model, &ck.vocab()?, &registry, &records, model.config.max_len, cfg.train.eval_batch_size)?;
    create_dir(&out)?;
    let path = out.join(EMBEDDINGS_FILE);
    write_embeddings(&path, &dump)?;
    write_manifest(&out, "export-embeddings", Some(cfg.seed), &cfg)?;
    println!("{}: {} vectors", path.display(), dump.len());
    Ok(())
}

#[derive(Serialize)]
struct BiasConfig<'a> {
    embeddings: Option<&'a PathBuf>,
    matrix: Option<&'a PathBuf>,
    correspondence: Option<&'a PathBuf>,
    datasets: &'a [String],
}

pub fn bias(args: &BiasArgs) -> CliResult<()> {
    for p in [&args.embeddings, &args.matrix, &args.correspondence].into_iter().flatten() {
        require_exists(p)?;
    }
    let matrix = if let Some(path) = &args.embeddings {
        let records = read_embeddings(path)?;
        let corr = match &args.correspondence {
            Some(p) => Correspondence::load(p)?,
            None => Correspondence::default(),
        };
        let mut datasets = args.datasets.clone();
        if datasets.is_empty() {
            for r in &records {
                if !datasets.contains(&r.dataset_id) {
                    datasets.push(r.dataset_id.clone());
                }
            }
        }
        accuracy_matrix(&records, &datasets, &corr)?
    } else if let Some(path) = &args.matrix {
        AccuracyMatrix::load(path)?
    } else {
        AccuracyMatrix::table6()
    };
    let report = bias_report(&matrix);
    let text = report.to_text();
    print!("{text}");
    if let Some(out) = &args.out {
        create_dir(out)?;
        write_file(&out.join(BIAS_JSON_FILE), &to_json(&report)?)?;
        write_file(&out.join(BIAS_TEXT_FILE), &text)?;
        let config = BiasConfig {
            embeddings: args.embeddings.as_ref(),
            matrix: args.matrix.as_ref(),
            correspondence: args.correspondence.as_ref(),
            datasets: &args.datasets,
        };
        write_manifest(out, "bias-report", None, &config)?;
    }
    Ok(())
}
