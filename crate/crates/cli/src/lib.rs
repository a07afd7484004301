//! Command plumbing behind the `weaksig` binary: flag resolution, run
//! manifests, per-stage execution and replay.

pub mod manifest;
pub mod population;
pub mod run;

use std::fmt;
use std::path::Path;

use anyhow::Result;
use weaksig::kv::KvMap;
use weaksig::pdvfn::{PdvfnConfig, Task};
use weaksig::preprocess::PipelineConfig;
use weaksig::spectra_synth::GeneratorConfig;
use weaksig::train_eval::TrainConfig;

use run::{derive_seed, Invocation, SplitSel};

/// Process exit codes.
pub mod exit {
    pub const OK: u8 = 0;
    pub const IO: u8 = 1;
    pub const USAGE: u8 = 2;
    pub const VALIDATION: u8 = 3;
    pub const INTEGRITY: u8 = 4;
    pub const DIVERGENCE: u8 = 5;
}

/// Bad command-line use that clap itself cannot detect.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

/// Exit code for the first classified error in the chain.
pub fn exit_code(e: &anyhow::Error) -> u8 {
    for cause in e.chain() {
        if cause.downcast_ref::<UsageError>().is_some() {
            return exit::USAGE;
        }
        if let Some(w) = cause.downcast_ref::<weaksig::Error>() {
            return match w.root() {
                weaksig::Error::Validation(_) => exit::VALIDATION,
                weaksig::Error::Integrity(_) => exit::INTEGRITY,
                weaksig::Error::Divergence { .. } => exit::DIVERGENCE,
                weaksig::Error::Tensor(weaksig_tensor::TensorError::Checkpoint(_)) => exit::INTEGRITY,
                weaksig::Error::Tensor(weaksig_tensor::TensorError::Io(_)) | weaksig::Error::Io(_) => exit::IO,
                weaksig::Error::Tensor(_) => exit::VALIDATION,
                weaksig::Error::Stage { .. } => unreachable!("root strips stage tags"),
            };
        }
    }
    exit::IO
}

/// Key/value config from `path`; an absent flag yields an empty map.
pub fn read_config(path: Option<&Path>) -> Result<KvMap> {
    match path {
        None => Ok(KvMap::default()),
        Some(p) if !p.is_file() => Err(UsageError(format!("config file {} does not exist", p.display())).into()),
        Some(p) => Ok(KvMap::read(p)?),
    }
}

pub fn resolve_generate(config: Option<&Path>, seed: Option<u64>) -> Result<Invocation> {
    let mut generator = GeneratorConfig::from_kv(read_config(config)?)?;
    if let Some(s) = seed {
        generator.seed = s;
    }
    let split_seed = derive_seed(generator.seed, "split");
    Ok(Invocation::Generate { generator, split_seed })
}

pub fn resolve_preprocess(data: &Path, pipeline_config: Option<&Path>) -> Result<Invocation> {
    let pipeline = PipelineConfig::from_kv(read_config(pipeline_config)?)?;
    Ok(Invocation::Preprocess { data: data.to_path_buf(), pipeline })
}

/// Flags of `train` after parsing.
#[derive(Clone, Debug, Default)]
pub struct TrainFlags<'a> {
    pub model_config: Option<&'a Path>,
    pub train_config: Option<&'a Path>,
    pub task: Option<&'a str>,
    pub targets: Option<&'a str>,
    pub seed: Option<u64>,
}

pub fn resolve_train(data: &Path, f: &TrainFlags) -> Result<Invocation> {
    let mut model = PdvfnConfig::from_kv(read_config(f.model_config)?)?;
    match (f.task, f.targets) {
        (Some(task), targets) => model.task = Task::parse(task, targets.unwrap_or("all"))?,
        (None, Some(targets)) => match model.task {
            Task::Regression { .. } => model.task = Task::parse("regression", targets)?,
            Task::Classification => {
                return Err(UsageError("--targets applies to regression; add --task regression".into()).into())
            }
        },
        (None, None) => {}
    }
    model.validate()?;
    let mut train = TrainConfig::from_kv(read_config(f.train_config)?)?;
    if let Some(s) = f.seed {
        train.seed = s;
    }
    let model_seed = derive_seed(train.seed, "model");
    Ok(Invocation::Train { data: data.to_path_buf(), model, train, model_seed })
}

pub fn resolve_evaluate(data: &Path, checkpoint: &Path, split: &str) -> Result<Invocation> {
    let split = SplitSel::parse(split).map_err(|_| UsageError(format!("unknown split {split:?} (train, val, test or all)")))?;
    Ok(Invocation::Evaluate { data: data.to_path_buf(), checkpoint: checkpoint.to_path_buf(), split })
}
