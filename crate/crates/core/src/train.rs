//! Denoiser training with condition masking and random path selection, plus
//! the checkpoint file format.

use std::io::Write;
use std::path::Path;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::decompose::{decompose, DecomposeError, DecomposerConfig, DecomposerKind};
use crate::denoiser::{patchify, Conditions, DenoiserError, DenoiserModel, ModelConfig};
use crate::diffusion::{
    diffuse_with_noise, make_schedule, standard_normal, DiffusionError, NoiseSchedule, ScheduleParams,
};
use crate::motion::{FeatureStats, MotionError};
use crate::nn::{accumulate, Adam, ParamStore, Tape};
use crate::retrieval::{embed_scripts, retrieve_embedded, MotionDatabase, RetrievalError, TextEmbedder};
use crate::synth::{Dataset, Split};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MGCK";
pub const CHECKPOINT_VERSION: u16 = 1;
const VAL_SALT: u64 = 0x7661_6c5f_6d73_65;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training split is empty")]
    EmptyDataset,
    #[error("invalid training config: {0}")]
    Config(String),
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
    #[error(transparent)]
    Decompose(#[from] DecomposeError),
    #[error(transparent)]
    Model(#[from] DenoiserError),
    #[error(transparent)]
    Diffusion(#[from] DiffusionError),
    #[error(transparent)]
    Motion(#[from] MotionError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub mask_prob: f64,
    /// Probability of taking the θ2 path for a training sample.
    pub branch_prob: f64,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Final learning rate as a fraction of `learning_rate`, reached by
    /// cosine decay over all steps.
    pub final_lr_fraction: f64,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mask_prob: 0.1,
            branch_prob: 0.5,
            batch_size: 4,
            learning_rate: 1e-3,
            final_lr_fraction: 0.1,
            epochs: 30,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        if !unit(self.mask_prob) || !unit(self.branch_prob) || !unit(self.final_lr_fraction) {
            return Err(TrainError::Config(
                "mask_prob, branch_prob and final_lr_fraction must lie in [0, 1]".into(),
            ));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(TrainError::Config("batch_size and epochs must be positive".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(TrainError::Config("learning_rate must be positive".into()));
        }
        Ok(())
    }
}

/// How training examples are assembled from the corpus.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataOptions {
    /// Training clip length N.
    pub frames: usize,
    pub top_k: usize,
    pub reference_frames: usize,
    pub decomposer: DecomposerKind,
    /// `false` disables retrieval entirely.
    pub use_reference: bool,
}

impl Default for DataOptions {
    fn default() -> Self {
        Self {
            frames: 120,
            top_k: crate::retrieval::DEFAULT_TOP_K,
            reference_frames: crate::retrieval::DEFAULT_REFERENCE_FRAMES,
            decomposer: DecomposerKind::RuleBased,
            use_reference: true,
        }
    }
}

/// One sample with every condition precomputed, motions normalized.
#[derive(Debug, Clone)]
pub struct Example {
    pub sample_index: usize,
    pub x0: Array2<f64>,
    pub text: Vec<f64>,
    pub scripts: Array2<f64>,
    pub reference: Option<Array2<f64>>,
}

impl Example {
    pub fn conditions(&self) -> Conditions<'_> {
        Conditions {
            text: Some(&self.text),
            scripts: Some(&self.scripts),
            reference: self.reference.as_ref(),
        }
    }

    /// Conditions with `c_l` and/or the `(c_s, m_ref)` pair replaced by null.
    pub fn masked_conditions(&self, mask_text: bool, mask_scripts: bool) -> Conditions<'_> {
        Conditions {
            text: (!mask_text).then_some(self.text.as_slice()),
            scripts: (!mask_scripts).then_some(&self.scripts),
            reference: if mask_scripts { None } else { self.reference.as_ref() },
        }
    }
}

/// Builds the example for one prompt and target motion. `exclude` keeps a
/// sample from retrieving its own database entry.
#[allow(clippy::too_many_arguments)]
pub fn make_example(
    sample_index: usize,
    text: &str,
    frames: &Array2<f64>,
    stats: &FeatureStats,
    db: &MotionDatabase,
    embedder: &dyn TextEmbedder,
    decomposer: &DecomposerConfig,
    opts: &DataOptions,
    exclude: Option<usize>,
) -> Result<Example> {
    let scripts = decompose(text, opts.decomposer, decomposer)?;
    let script_emb = embed_scripts(&scripts, embedder)?;
    let reference = if opts.use_reference {
        let r = retrieve_embedded(&script_emb, db, opts.top_k, opts.reference_frames, exclude)?;
        Some(stats.normalize_frames(&r.frames)?)
    } else {
        None
    };
    let fitted = crate::motion::fit_rows(frames, opts.frames);
    Ok(Example {
        sample_index,
        x0: stats.normalize_frames(&fitted)?,
        text: embedder.embed(text)?,
        scripts: script_emb,
        reference,
    })
}

#[derive(Debug, Clone)]
pub struct PreparedData {
    pub train: Vec<Example>,
    pub val: Vec<Example>,
}

/// Precomputes decomposition, embeddings and references for the train and
/// val splits. Train samples never retrieve their own entry.
pub fn prepare(
    dataset: &Dataset,
    db: &MotionDatabase,
    embedder: &dyn TextEmbedder,
    decomposer: &DecomposerConfig,
    opts: &DataOptions,
) -> Result<PreparedData> {
    db.check_embedder(embedder)?;
    if opts.frames == 0 {
        return Err(TrainError::Config("frames must be positive".into()));
    }
    let build = |split: Split, exclude_self: bool| -> Result<Vec<Example>> {
        dataset
            .split(split)
            .map(|(i, s)| {
                let exclude = if exclude_self { db.entry_for_sample(i) } else { None };
                make_example(
                    i,
                    &s.text,
                    &s.motion.frames,
                    &dataset.stats,
                    db,
                    embedder,
                    decomposer,
                    opts,
                    exclude,
                )
            })
            .collect()
    };
    let train = build(Split::Train, true)?;
    if train.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    Ok(PreparedData {
        train,
        val: build(Split::Val, false)?,
    })
}

/// Training loss for one example on the chosen path.
fn example_loss(
    model: &DenoiserModel,
    tape: &mut Tape,
    ex: &Example,
    x_t: &Array2<f64>,
    t: usize,
    fused: bool,
    cond: &Conditions,
) -> Result<crate::nn::Var> {
    let out = if fused {
        model.theta2_on_tape(tape, x_t, cond, t)?
    } else {
        model.theta1_on_tape(tape, x_t, cond.text, t)?
    };
    Ok(tape.mse(out, &patchify(&ex.x0, model.config.patch)))
}

/// x̂₀ MSE for one path with fixed `(t, ε)`.
pub fn path_mse(
    model: &DenoiserModel,
    schedule: &NoiseSchedule,
    ex: &Example,
    cond: &Conditions,
    fused: bool,
    t: usize,
    eps: &Array2<f64>,
) -> Result<f64> {
    let x_t = diffuse_with_noise(&ex.x0, eps, t, schedule);
    let pred = if fused {
        model.forward_theta2(&x_t, cond, schedule.model_timesteps[t - 1])?
    } else {
        model.forward_theta1(&x_t, cond.text, schedule.model_timesteps[t - 1])?
    };
    Ok((pred - &ex.x0).mapv(|v| v * v).mean().unwrap_or(0.0))
}

/// Fixed `(t, ε)` per validation example so that epochs are comparable.
pub fn validation_draws(examples: &[Example], schedule: &NoiseSchedule, seed: u64) -> Vec<(usize, Array2<f64>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ VAL_SALT);
    examples
        .iter()
        .map(|ex| {
            let t = rng.gen_range(1..=schedule.len());
            (t, standard_normal(ex.x0.dim(), &mut rng))
        })
        .collect()
}

/// Mean x̂₀ MSE over examples, averaged over both paths with full conditions.
pub fn validation_mse(
    model: &DenoiserModel,
    schedule: &NoiseSchedule,
    examples: &[Example],
    draws: &[(usize, Array2<f64>)],
) -> Result<f64> {
    let mut total = 0.0;
    for (ex, (t, eps)) in examples.iter().zip(draws) {
        let cond = ex.conditions();
        total += 0.5
            * (path_mse(model, schedule, ex, &cond, false, *t, eps)?
                + path_mse(model, schedule, ex, &cond, true, *t, eps)?);
    }
    Ok(total / examples.len().max(1) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_mse: Option<f64>,
}

/// Trains in place; `on_epoch` sees each record as it is produced.
pub fn train(
    model: &mut DenoiserModel,
    schedule: &NoiseSchedule,
    data: &PreparedData,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<Vec<EpochRecord>> {
    cfg.validate()?;
    if data.train.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(&model.params, cfg.learning_rate);
    let draws = validation_draws(&data.val, schedule, cfg.seed);
    let mut order: Vec<usize> = (0..data.train.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    let total_steps = cfg.epochs * data.train.len().div_ceil(cfg.batch_size);
    let mut step = 0usize;
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let progress = step as f64 / total_steps.max(2).saturating_sub(1) as f64;
            let cosine = 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
            adam.lr = cfg.learning_rate * (cfg.final_lr_fraction + (1.0 - cfg.final_lr_fraction) * cosine);
            step += 1;
            let mut grads = Vec::new();
            let weight = 1.0 / batch.len() as f64;
            for &i in batch {
                let ex = &data.train[i];
                let t = rng.gen_range(1..=schedule.len());
                let eps = standard_normal(ex.x0.dim(), &mut rng);
                let x_t = diffuse_with_noise(&ex.x0, &eps, t, schedule);
                let fused = rng.gen_bool(cfg.branch_prob);
                let mask_text = rng.gen_bool(cfg.mask_prob);
                let mask_scripts = fused && rng.gen_bool(cfg.mask_prob);
                let cond = ex.masked_conditions(mask_text, mask_scripts);
                let mut tape = Tape::new();
                let loss = example_loss(
                    model,
                    &mut tape,
                    ex,
                    &x_t,
                    schedule.model_timesteps[t - 1],
                    fused,
                    &cond,
                )?;
                loss_sum += tape.value(loss)[[0, 0]];
                accumulate(&mut grads, tape.backward(loss, model.params.len()), weight);
            }
            adam.step(&mut model.params, &grads);
        }
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / data.train.len() as f64,
            val_mse: if data.val.is_empty() {
                None
            } else {
                Some(validation_mse(model, schedule, &data.val, &draws)?)
            },
        };
        on_epoch(&record);
        history.push(record);
    }
    model.params.round_to_f32();
    Ok(history)
}

/// Outcome of a finite-difference probe of the training loss gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub probes: usize,
    pub passed: usize,
    pub worst_relative: f64,
}

/// Compares analytic and central-difference gradients of the summed θ1+θ2
/// loss at `probes` randomly chosen scalars.
pub fn gradient_check(
    model: &DenoiserModel,
    ex: &Example,
    t: usize,
    probes: usize,
    tolerance: f64,
    seed: u64,
) -> Result<GradCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let eps = standard_normal(ex.x0.dim(), &mut rng);
    let x_t = {
        let schedule = make_schedule(&ScheduleParams::default())?;
        diffuse_with_noise(&ex.x0, &eps, t, &schedule)
    };
    let cond = ex.conditions();
    let loss_of = |m: &DenoiserModel, tape: &mut Tape| -> Result<crate::nn::Var> {
        let a = example_loss(m, tape, ex, &x_t, t, false, &cond)?;
        let b = example_loss(m, tape, ex, &x_t, t, true, &cond)?;
        Ok(tape.add(a, b))
    };
    let mut tape = Tape::new();
    let loss = loss_of(model, &mut tape)?;
    let grads = tape.backward(loss, model.params.len());

    let sizes: Vec<usize> = model.params.values.iter().map(|v| v.len()).collect();
    let total: usize = sizes.iter().sum();
    let mut probe_model = model.clone();
    let h = 1e-5;
    let mut passed = 0;
    let mut worst: f64 = 0.0;
    for _ in 0..probes {
        let mut flat = rng.gen_range(0..total);
        let mut p = 0;
        while flat >= sizes[p] {
            flat -= sizes[p];
            p += 1;
        }
        // Logical (row-major) order, whatever the memory layout.
        let analytic = grads[p]
            .as_ref()
            .map_or(0.0, |g| g.iter().nth(flat).copied().unwrap_or(0.0));
        let orig = model.params.values[p].iter().nth(flat).copied().unwrap_or(0.0);
        let mut eval = |v: f64| -> Result<f64> {
            if let Some(x) = probe_model.params.values[p].iter_mut().nth(flat) {
                *x = v;
            }
            let mut tape = Tape::new();
            let l = loss_of(&probe_model, &mut tape)?;
            Ok(tape.value(l)[[0, 0]])
        };
        let numeric = (eval(orig + h)? - eval(orig - h)?) / (2.0 * h);
        eval(orig)?;
        let diff = (analytic - numeric).abs();
        let scale = analytic.abs().max(numeric.abs());
        let rel = if scale < 1e-8 { 0.0 } else { diff / scale };
        worst = worst.max(rel);
        if rel <= tolerance {
            passed += 1;
        }
    }
    Ok(GradCheck {
        probes,
        passed,
        worst_relative: worst,
    })
}

/// Everything needed to rebuild and use a trained model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    pub schedule: ScheduleParams,
    pub train: TrainConfig,
    pub data: DataOptions,
    pub embedder_fingerprint: String,
    pub stats: FeatureStats,
    pub history: Vec<EpochRecord>,
    pub params: Vec<(String, [usize; 2])>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub model: DenoiserModel,
}

impl Checkpoint {
    pub fn new(
        model: DenoiserModel,
        schedule: ScheduleParams,
        train: TrainConfig,
        data: DataOptions,
        embedder_fingerprint: String,
        stats: FeatureStats,
        history: Vec<EpochRecord>,
    ) -> Self {
        let params = model
            .params
            .names
            .iter()
            .zip(&model.params.values)
            .map(|(n, v)| (n.clone(), [v.nrows(), v.ncols()]))
            .collect();
        Self {
            meta: CheckpointMeta {
                model: model.config,
                schedule,
                train,
                data,
                embedder_fingerprint,
                stats,
                history,
                params,
            },
            model,
        }
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        Ok(make_schedule(&self.meta.schedule)?)
    }

    /// Layout: magic, version u16, header length u32, JSON header, then
    /// every weight as little-endian f32 in parameter order.
    pub fn encode(&self) -> Vec<u8> {
        let header = serde_json::to_vec(&self.meta).expect("checkpoint meta serializes");
        let mut out = Vec::with_capacity(10 + header.len() + 4 * self.model.params.scalar_count());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        for v in &self.model.params.values {
            for x in v.iter() {
                out.extend_from_slice(&(*x as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| TrainError::CorruptCheckpoint(m.to_string());
        if bytes.len() < 10 || &bytes[..4] != CHECKPOINT_MAGIC {
            return Err(bad("bad magic"));
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != CHECKPOINT_VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        let len = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize;
        let header = bytes.get(10..10 + len).ok_or_else(|| bad("truncated header"))?;
        let meta: CheckpointMeta = serde_json::from_slice(header).map_err(|e| bad(&e.to_string()))?;
        let mut pos = 10 + len;
        let mut store = ParamStore::default();
        for (name, [r, c]) in &meta.params {
            let n = r * c;
            let raw = bytes.get(pos..pos + 4 * n).ok_or_else(|| bad("truncated weights"))?;
            let vals: Vec<f64> = raw
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
                .collect();
            store.add(name.clone(), Array2::from_shape_vec((*r, *c), vals).expect("sized"));
            pos += 4 * n;
        }
        if pos != bytes.len() {
            return Err(bad("trailing bytes"));
        }
        let model = DenoiserModel::with_params(meta.model, store)?;
        Ok(Self { meta, model })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.encode())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::decode(&std::fs::read(path)?)
    }

    pub fn check_embedder(&self, embedder: &dyn TextEmbedder) -> Result<()> {
        if embedder.fingerprint() != self.meta.embedder_fingerprint {
            return Err(RetrievalError::FingerprintMismatch {
                index: self.meta.embedder_fingerprint.clone(),
                embedder: embedder.fingerprint(),
            }
            .into());
        }
        Ok(())
    }
}
