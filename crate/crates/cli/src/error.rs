use std::path::Path;

use motiongen_core::{decompose, denoiser, diffusion, metrics, motion, render, retrieval, sampler, synth, train};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("missing artifact: {0}")]
    Missing(String),
    #[error("fingerprint mismatch: {0}")]
    Fingerprint(String),
    #[error("runtime failure: {0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Missing(_) => 3,
            CliError::Fingerprint(_) => 4,
            CliError::Runtime(_) => 5,
        }
    }

    pub fn missing(path: &Path) -> Self {
        CliError::Missing(path.display().to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Runtime(format!("json: {e}"))
    }
}

macro_rules! runtime_from {
    ($($t:ty),*) => {$(
        impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                CliError::Runtime(e.to_string())
            }
        }
    )*};
}

runtime_from!(
    motion::MotionError,
    synth::SynthError,
    decompose::DecomposeError,
    denoiser::DenoiserError,
    diffusion::DiffusionError,
    render::RenderError
);

impl From<retrieval::RetrievalError> for CliError {
    fn from(e: retrieval::RetrievalError) -> Self {
        match e {
            retrieval::RetrievalError::FingerprintMismatch { .. } => CliError::Fingerprint(e.to_string()),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

impl From<train::TrainError> for CliError {
    fn from(e: train::TrainError) -> Self {
        match e {
            train::TrainError::Config(m) => CliError::Config(m),
            train::TrainError::Retrieval(r) => r.into(),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

impl From<sampler::SamplerError> for CliError {
    fn from(e: sampler::SamplerError) -> Self {
        match e {
            sampler::SamplerError::Config(m) => CliError::Config(m),
            sampler::SamplerError::Retrieval(r) => r.into(),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

impl From<metrics::MetricsError> for CliError {
    fn from(e: metrics::MetricsError) -> Self {
        match e {
            metrics::MetricsError::Config(m) => CliError::Config(m),
            metrics::MetricsError::Retrieval(r) => r.into(),
            metrics::MetricsError::Sampler(s) => s.into(),
            other => CliError::Runtime(other.to_string()),
        }
    }
}
