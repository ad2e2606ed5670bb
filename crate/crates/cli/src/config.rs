//! Experiment configuration: one TOML file per experiment, patched by
//! `--set key=value` overrides before validation.

use std::path::{Path, PathBuf};

use motiongen_core::decompose::{DecomposerConfig, DecomposerKind};
use motiongen_core::denoiser::ModelConfig;
use motiongen_core::diffusion::{make_schedule, ScheduleParams};
use motiongen_core::metrics::{derive_seed, EvaluatorConfig, ProtocolConfig};
use motiongen_core::motion::Skeleton;
use motiongen_core::retrieval::HashTfEmbedder;
use motiongen_core::sampler::{BranchMode, GuidanceConfig};
use motiongen_core::synth::MAX_STEPS;
use motiongen_core::train::{DataOptions, TrainConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::CliError;

/// The shipped default configuration.
pub const DEFAULT_CONFIG: &str = include_str!("../../../configs/default.toml");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Root seed; every other seed is derived from it.
    pub seed: u64,
    pub paths: Paths,
    pub dataset: DatasetParams,
    pub decomposer: DecomposerParams,
    pub retrieval: RetrievalParams,
    pub schedule: ScheduleParams,
    pub model: ModelParams,
    pub train: TrainParams,
    pub guidance: GuidanceParams,
    pub eval: EvalParams,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    /// Artifact root; relative paths resolve against the working directory.
    pub root: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetParams {
    pub count: usize,
    pub max_steps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecomposerParams {
    /// `rule-based`, `identity` (the NTD variant) or `external-llm`.
    pub kind: DecomposerKind,
    #[serde(default)]
    pub llm_endpoint: Option<String>,
    #[serde(default)]
    pub prompt_template: Option<String>,
    pub llm_timeout_secs: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RetrievalParams {
    /// `false` is the NTDS variant: no references in training or sampling.
    pub enabled: bool,
    pub dim: usize,
    pub top_k: usize,
    pub reference_frames: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelParams {
    pub width: usize,
    pub heads: usize,
    pub encoder_layers: usize,
    pub fusion_layers: usize,
    pub ff_hidden: usize,
    pub patch: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainParams {
    pub frames: usize,
    pub mask_prob: f64,
    pub branch_prob: f64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub final_lr_fraction: f64,
    pub epochs: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GuidanceParams {
    pub scale: f64,
    pub lambda: f64,
    pub steps: usize,
    pub branch_mode: BranchMode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalParams {
    /// Reverse steps used when generating for the protocol.
    pub steps: usize,
    pub runs: usize,
    pub multimodality_runs: usize,
    pub pool_size: usize,
    pub diversity_pairs: usize,
    pub multimodality_texts: usize,
    pub multimodality_reps: usize,
    pub sweep_lambdas: Vec<f64>,
    pub evaluator_dim: usize,
    pub evaluator_hidden: usize,
    pub evaluator_epochs: usize,
    pub evaluator_batch: usize,
    pub evaluator_lr: f64,
    pub temperature: f64,
}

// Streams for seeds derived from the root.
const SEED_DATASET: u64 = 11;
const SEED_MODEL: u64 = 12;
const SEED_TRAIN: u64 = 13;
const SEED_EVALUATOR: u64 = 14;
const SEED_PROTOCOL: u64 = 15;
const SEED_SAMPLE: u64 = 16;

fn config_err(e: impl std::fmt::Display) -> CliError {
    CliError::Config(e.to_string())
}

/// Sets `dotted.key` in a TOML table, creating intermediate tables.
fn apply_override(root: &mut toml::Value, assignment: &str) -> Result<(), CliError> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("override `{assignment}` is not key=value")))?;
    let value = match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    let parts: Vec<&str> = key.trim().split('.').collect();
    let mut node = root;
    for (i, part) in parts.iter().enumerate() {
        let table = node
            .as_table_mut()
            .ok_or_else(|| CliError::Config(format!("`{key}`: `{part}` is not inside a table")))?;
        if i + 1 == parts.len() {
            table.insert(part.to_string(), value);
            return Ok(());
        }
        node = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(Default::default()));
    }
    Err(CliError::Config(format!("empty override key in `{assignment}`")))
}

impl ExperimentConfig {
    /// Parses TOML text, applies overrides, and validates.
    pub fn from_toml(text: &str, overrides: &[String]) -> Result<Self, CliError> {
        let mut value: toml::Value = text
            .parse::<toml::Table>()
            .map(toml::Value::Table)
            .map_err(config_err)?;
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        let cfg: Self = value.try_into().map_err(config_err)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads `path`, or the shipped default when `None`.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self, CliError> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p)
                .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", p.display())))?,
            None => DEFAULT_CONFIG.to_string(),
        };
        Self::from_toml(&text, overrides)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if self.dataset.count < 10 {
            return Err(CliError::Config(
                "dataset.count must be ≥ 10 so every split is non-empty".into(),
            ));
        }
        if !(1..=MAX_STEPS).contains(&self.dataset.max_steps) {
            return Err(CliError::Config(format!(
                "dataset.max_steps must lie in 1..={MAX_STEPS}"
            )));
        }
        self.decomposer_config().validate().map_err(config_err)?;
        if self.retrieval.dim == 0 || self.retrieval.top_k == 0 || self.retrieval.reference_frames == 0 {
            return Err(CliError::Config(
                "retrieval dim, top_k and reference_frames must be positive".into(),
            ));
        }
        let schedule = make_schedule(&self.schedule).map_err(config_err)?;
        self.model_config().validate().map_err(config_err)?;
        if self.train.frames < 8 {
            return Err(CliError::Config("train.frames must be ≥ 8".into()));
        }
        self.train_config().validate().map_err(config_err)?;
        self.guidance_config().validate(schedule.len()).map_err(config_err)?;
        let e = &self.eval;
        if e.steps == 0 || e.steps > schedule.len() {
            return Err(CliError::Config(format!(
                "eval.steps must lie in 1..={}",
                schedule.len()
            )));
        }
        if e.runs == 0 || e.pool_size < 2 || e.diversity_pairs == 0 {
            return Err(CliError::Config(
                "eval.runs, eval.diversity_pairs must be positive and eval.pool_size ≥ 2".into(),
            ));
        }
        if e.evaluator_dim == 0 || e.evaluator_hidden == 0 || e.evaluator_epochs == 0 || e.evaluator_batch < 2 {
            return Err(CliError::Config("evaluator sizes must be positive, batch ≥ 2".into()));
        }
        if !(e.evaluator_lr > 0.0 && e.temperature > 0.0) {
            return Err(CliError::Config(
                "eval.evaluator_lr and eval.temperature must be positive".into(),
            ));
        }
        if e.sweep_lambdas.iter().any(|l| !(0.0..=1.0).contains(l)) {
            return Err(CliError::Config("eval.sweep_lambdas must lie in [0, 1]".into()));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(serde_json::to_vec(self).expect("config serializes")))
    }

    pub fn derived_seed(&self, stream: u64) -> u64 {
        derive_seed(self.seed, stream, 0)
    }

    pub fn dataset_seed(&self) -> u64 {
        self.derived_seed(SEED_DATASET)
    }

    pub fn sample_seed(&self) -> u64 {
        self.derived_seed(SEED_SAMPLE)
    }

    pub fn skeleton(&self) -> Skeleton {
        Skeleton::stick_figure()
    }

    pub fn embedder(&self) -> HashTfEmbedder {
        HashTfEmbedder {
            dim: self.retrieval.dim,
        }
    }

    pub fn decomposer_config(&self) -> DecomposerConfig {
        let mut cfg = DecomposerConfig {
            llm_endpoint: self.decomposer.llm_endpoint.clone(),
            llm_timeout_secs: self.decomposer.llm_timeout_secs,
            ..Default::default()
        };
        if let Some(t) = &self.decomposer.prompt_template {
            cfg.prompt_template = t.clone();
        }
        cfg
    }

    pub fn model_config(&self) -> ModelConfig {
        let m = &self.model;
        ModelConfig {
            width: m.width,
            heads: m.heads,
            encoder_layers: m.encoder_layers,
            fusion_layers: m.fusion_layers,
            ff_hidden: m.ff_hidden,
            patch: m.patch,
            feature_dim: self.skeleton().feature_dim(),
            embed_dim: self.retrieval.dim,
            use_reference: self.retrieval.enabled,
            seed: self.derived_seed(SEED_MODEL),
        }
    }

    pub fn data_options(&self) -> DataOptions {
        DataOptions {
            frames: self.train.frames,
            top_k: self.retrieval.top_k,
            reference_frames: self.retrieval.reference_frames,
            decomposer: self.decomposer.kind,
            use_reference: self.retrieval.enabled,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            mask_prob: t.mask_prob,
            branch_prob: t.branch_prob,
            batch_size: t.batch_size,
            learning_rate: t.learning_rate,
            final_lr_fraction: t.final_lr_fraction,
            epochs: t.epochs,
            seed: self.derived_seed(SEED_TRAIN),
        }
    }

    pub fn guidance_config(&self) -> GuidanceConfig {
        GuidanceConfig {
            scale: self.guidance.scale,
            lambda: self.guidance.lambda,
            steps: self.guidance.steps,
            seed: self.sample_seed(),
            branch_mode: self.guidance.branch_mode,
        }
    }

    pub fn evaluator_config(&self) -> EvaluatorConfig {
        let e = &self.eval;
        EvaluatorConfig {
            embed_dim: e.evaluator_dim,
            hidden: e.evaluator_hidden,
            frames: self.train.frames,
            epochs: e.evaluator_epochs,
            batch_size: e.evaluator_batch,
            learning_rate: e.evaluator_lr,
            temperature: e.temperature,
            seed: self.derived_seed(SEED_EVALUATOR),
            ..Default::default()
        }
    }

    pub fn protocol_config(&self) -> ProtocolConfig {
        let e = &self.eval;
        ProtocolConfig {
            runs: e.runs,
            multimodality_runs: e.multimodality_runs,
            pool_size: e.pool_size,
            diversity_pairs: e.diversity_pairs,
            multimodality_texts: e.multimodality_texts,
            multimodality_reps: e.multimodality_reps,
            frames: self.train.frames,
            root_seed: self.derived_seed(SEED_PROTOCOL),
        }
    }

    pub fn dataset_dir(&self) -> PathBuf {
        self.paths.root.join("dataset")
    }

    pub fn database_dir(&self) -> PathBuf {
        self.paths.root.join("db")
    }

    pub fn model_dir(&self) -> PathBuf {
        self.paths.root.join("model")
    }

    pub fn eval_dir(&self) -> PathBuf {
        self.paths.root.join("eval")
    }
}
