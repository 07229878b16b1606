use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use sentio_core::model::ModelConfig;
use sentio_core::training::TrainConfig;

use crate::args::Common;

/// A failure with its exit status: 2 for configuration problems, 1 otherwise.
#[derive(Debug)]
pub enum CliError {
    Config(String),
    Run(sentio_core::Error),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) | CliError::Run(sentio_core::Error::Config(_)) => 2,
            CliError::Run(_) => 1,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Config(_) => "config",
            CliError::Run(e) => e.kind(),
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(m) => f.write_str(m),
            CliError::Run(e) => write!(f, "{e}"),
        }
    }
}

impl From<sentio_core::Error> for CliError {
    fn from(e: sentio_core::Error) -> Self {
        CliError::Run(e)
    }
}

pub type CliResult<T> = Result<T, CliError>;

/// Contents of a `--config` file. Relative paths resolve against the file's
/// directory.
#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct FileConfig {
    registry: Option<PathBuf>,
    corpus: Vec<PathBuf>,
    validation: Vec<PathBuf>,
    checkpoint: Option<PathBuf>,
    out: Option<PathBuf>,
    train: TrainConfig,
    model: ModelConfig,
}

/// Fully resolved settings of one invocation; hashed into the manifest.
#[derive(Clone, Debug, Serialize)]
pub struct RunConfig {
    pub command: String,
    pub registry: Option<PathBuf>,
    pub corpus: Vec<PathBuf>,
    pub validation: Vec<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub seed: u64,
    pub train: TrainConfig,
    pub model: ModelConfig,
}

impl RunConfig {
    pub fn resolve(command: &str, common: &Common, validation: &[PathBuf]) -> CliResult<Self> {
        let file = match &common.config {
            Some(path) => read_config(path)?,
            None => FileConfig::default(),
        };
        let mut train = file.train;
        if let Some(seed) = common.seed {
            train.seed = seed;
        }
        train.validate().map_err(|e| CliError::Config(e.to_string()))?;
        let cfg = RunConfig {
            command: command.to_string(),
            registry: common.registry.clone().or(file.registry),
            corpus: if common.corpus.is_empty() { file.corpus } else { common.corpus.clone() },
            validation: if validation.is_empty() { file.validation } else { validation.to_vec() },
            checkpoint: common.checkpoint.clone().or(file.checkpoint),
            out: common.out.clone().or(file.out),
            seed: train.seed,
            train,
            model: file.model,
        };
        for p in cfg.corpus.iter().chain(&cfg.validation).chain(&cfg.registry).chain(&cfg.checkpoint) {
            require_exists(p)?;
        }
        Ok(cfg)
    }

    pub fn registry(&self) -> CliResult<&Path> {
        self.registry
            .as_deref()
            .ok_or_else(|| CliError::Config(format!("{} needs --registry", self.command)))
    }

    pub fn corpus(&self) -> CliResult<&[PathBuf]> {
        if self.corpus.is_empty() {
            return Err(CliError::Config(format!("{} needs at least one --corpus", self.command)));
        }
        Ok(&self.corpus)
    }

    pub fn checkpoint(&self) -> CliResult<&Path> {
        self.checkpoint
            .as_deref()
            .ok_or_else(|| CliError::Config(format!("{} needs --checkpoint", self.command)))
    }

    pub fn out(&self) -> CliResult<&Path> {
        self.out
            .as_deref()
            .ok_or_else(|| CliError::Config(format!("{} needs --out", self.command)))
    }
}

pub fn require_exists(p: &Path) -> CliResult<()> {
    if p.exists() {
        Ok(())
    } else {
        Err(CliError::Config(format!("path does not exist: {}", p.display())))
    }
}

fn read_config(path: &Path) -> CliResult<FileConfig> {
    require_exists(path)?;
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    let mut cfg: FileConfig =
        toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {}", path.display(), e.message())))?;
    let base = path.parent().unwrap_or(Path::new(""));
    let fix = |p: &mut PathBuf| {
        if p.is_relative() {
            *p = base.join(&*p);
        }
    };
    cfg.corpus.iter_mut().for_each(fix);
    cfg.validation.iter_mut().for_each(fix);
    cfg.registry.iter_mut().for_each(fix);
    cfg.checkpoint.iter_mut().for_each(fix);
    cfg.out.iter_mut().for_each(fix);
    Ok(cfg)
}
