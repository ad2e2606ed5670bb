//! Guided reverse diffusion, branch fusion, in-betweening and joint editing.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::decompose::{decompose, DecomposeError, DecomposerConfig, ScriptList};
use crate::denoiser::{Conditions, DenoiserError, DenoiserModel};
use crate::diffusion::{diffuse_with_noise, posterior_step, standard_normal, DiffusionError, NoiseSchedule};
use crate::motion::{FeatureStats, MotionError, MotionSequence, Skeleton};
use crate::retrieval::{embed_scripts, retrieve_embedded, MotionDatabase, Provenance, RetrievalError, TextEmbedder};
use crate::train::DataOptions;

const IMPUTE_SALT: u64 = 0x696d_7075_7465;

#[derive(Debug, Error)]
pub enum SamplerError {
    #[error("invalid guidance config: {0}")]
    Config(String),
    #[error("empty prompt outside unconditional mode")]
    EmptyPrompt,
    #[error("in-betweening needs at least 8 frames, got {0}")]
    TooShort(usize),
    #[error("edit mask fixes every feature")]
    AllFixed,
    #[error("mask shape {mask:?} does not match motion {motion:?}")]
    MaskShape {
        mask: (usize, usize),
        motion: (usize, usize),
    },
    #[error("retrieval database required for reference conditioning")]
    MissingDatabase,
    #[error(transparent)]
    Model(#[from] DenoiserError),
    #[error(transparent)]
    Diffusion(#[from] DiffusionError),
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
    #[error(transparent)]
    Decompose(#[from] DecomposeError),
    #[error(transparent)]
    Motion(#[from] MotionError),
}

pub type Result<T> = std::result::Result<T, SamplerError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Branch {
    /// Canonical path, guided with `A_s`.
    A,
    /// Reference path, guided with `B_s`.
    B,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BranchMode {
    #[default]
    PerStep,
    PerSample,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GuidanceConfig {
    pub scale: f64,
    pub lambda: f64,
    /// Reverse steps; fewer than the schedule length respaces it.
    pub steps: usize,
    pub seed: u64,
    #[serde(default)]
    pub branch_mode: BranchMode,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self {
            scale: 2.5,
            lambda: 0.5,
            steps: 100,
            seed: 0,
            branch_mode: BranchMode::PerStep,
        }
    }
}

impl GuidanceConfig {
    pub fn validate(&self, schedule_len: usize) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(SamplerError::Config(format!("lambda {} outside [0, 1]", self.lambda)));
        }
        if !self.scale.is_finite() {
            return Err(SamplerError::Config("scale must be finite".into()));
        }
        if self.steps == 0 || self.steps > schedule_len {
            return Err(SamplerError::Config(format!("steps must lie in 1..={schedule_len}")));
        }
        Ok(())
    }
}

/// `u + s·(c − u)`, returning `c` at `s = 1` and `u` at `s = 0` exactly.
fn combine(uncond: Array2<f64>, cond: Array2<f64>, s: f64) -> Array2<f64> {
    if s == 1.0 {
        cond
    } else if s == 0.0 {
        uncond
    } else {
        &uncond + &((cond - &uncond) * s)
    }
}

/// `A_s = θ1(x_t, ∅, t) + s·(θ1(x_t, c_l, t) − θ1(x_t, ∅, t))`.
pub fn guided_a(
    model: &DenoiserModel,
    x_t: &Array2<f64>,
    text: Option<&[f64]>,
    t: usize,
    s: f64,
) -> Result<Array2<f64>> {
    let uncond = model.forward_theta1(x_t, None, t)?;
    if text.is_none() || s == 0.0 {
        return Ok(uncond);
    }
    let cond = model.forward_theta1(x_t, text, t)?;
    Ok(combine(uncond, cond, s))
}

/// `B_s`: like [`guided_a`] on the θ2 path, nulling only `c_l`.
pub fn guided_b(model: &DenoiserModel, x_t: &Array2<f64>, cond: &Conditions, t: usize, s: f64) -> Result<Array2<f64>> {
    let nulled = Conditions { text: None, ..*cond };
    let uncond = model.forward_theta2_strict(x_t, &nulled, t)?;
    if cond.text.is_none() || s == 0.0 {
        return Ok(uncond);
    }
    let full = model.forward_theta2_strict(x_t, cond, t)?;
    Ok(combine(uncond, full, s))
}

/// Bernoulli draw: `B` with probability λ.
pub fn select_branch(lambda: f64, rng: &mut impl Rng) -> Branch {
    if rng.gen::<f64>() < lambda {
        Branch::B
    } else {
        Branch::A
    }
}

/// Prompt-derived conditioning, with motions in normalized space.
#[derive(Debug, Clone, Default)]
pub struct PromptConditions {
    pub text: Option<Vec<f64>>,
    pub scripts: Option<ScriptList>,
    pub script_embeddings: Option<Array2<f64>>,
    pub reference: Option<Array2<f64>>,
    pub provenance: Vec<Provenance>,
}

impl PromptConditions {
    pub fn as_conditions(&self) -> Conditions<'_> {
        Conditions {
            text: self.text.as_deref(),
            scripts: self.script_embeddings.as_ref(),
            reference: self.reference.as_ref(),
        }
    }
}

/// Fixed entries (`true`) and the raw values they must keep.
#[derive(Debug, Clone, PartialEq)]
pub struct EditMask {
    pub fixed: Array2<bool>,
    pub reference: MotionSequence,
}

impl EditMask {
    pub fn new(frame_mask: &[bool], joint_mask: &[bool], reference: MotionSequence) -> Result<Self> {
        let dim = reference.frames.dim();
        if frame_mask.len() != dim.0 || joint_mask.len() != dim.1 {
            return Err(SamplerError::MaskShape {
                mask: (frame_mask.len(), joint_mask.len()),
                motion: dim,
            });
        }
        let fixed = Array2::from_shape_fn(dim, |(i, j)| frame_mask[i] || joint_mask[j]);
        Ok(Self { fixed, reference })
    }

    pub fn free_count(&self) -> usize {
        self.fixed.iter().filter(|f| !**f).count()
    }
}

/// Frame mask fixing the first and last quarter.
pub fn inbetween_frame_mask(frames: usize) -> Vec<bool> {
    (0..frames).map(|i| i < frames / 4 || i >= 3 * frames / 4).collect()
}

/// Feature mask covering root translation, hips and knees.
pub fn lower_body_mask(skeleton: &Skeleton) -> Vec<bool> {
    let mut mask = vec![false; skeleton.feature_dim()];
    mask[..3].iter_mut().for_each(|m| *m = true);
    for name in ["left_hip", "left_knee", "right_hip", "right_knee"] {
        if let Some(j) = skeleton.joint_index(name) {
            let off = crate::motion::rotation_offset(j);
            mask[off..off + 3].iter_mut().for_each(|m| *m = true);
        }
    }
    mask
}

/// Largest frame-to-frame feature velocity across the two in-betweening
/// region boundaries.
pub fn boundary_velocity(motion: &MotionSequence) -> f64 {
    let n = motion.len();
    [n / 4, 3 * n / 4]
        .iter()
        .filter(|&&b| b > 0 && b < n)
        .flat_map(|&b| [b - 1, b])
        .filter(|&i| i + 1 < n)
        .map(|i| frame_velocity(&motion.frames, i))
        .fold(0.0, f64::max)
}

fn frame_velocity(frames: &Array2<f64>, i: usize) -> f64 {
    (&frames.row(i + 1) - &frames.row(i)).mapv(|v| v * v).sum().sqrt()
}

/// `q`-quantile of all frame-to-frame velocities in a motion collection.
pub fn velocity_quantile<'a>(motions: impl IntoIterator<Item = &'a MotionSequence>, q: f64) -> f64 {
    let mut v: Vec<f64> = motions
        .into_iter()
        .flat_map(|m| (0..m.len().saturating_sub(1)).map(move |i| frame_velocity(&m.frames, i)))
        .collect();
    if v.is_empty() {
        return 0.0;
    }
    v.sort_by(f64::total_cmp);
    let idx = ((v.len() - 1) as f64 * q.clamp(0.0, 1.0)).round() as usize;
    v[idx]
}

/// A trained model together with everything generation needs.
pub struct Generator<'a> {
    pub model: &'a DenoiserModel,
    pub schedule: &'a NoiseSchedule,
    pub stats: &'a FeatureStats,
    pub db: Option<&'a MotionDatabase>,
    pub embedder: &'a dyn TextEmbedder,
    pub decomposer: &'a DecomposerConfig,
    pub data: DataOptions,
    pub fps: f64,
}

impl Generator<'_> {
    fn joints(&self) -> usize {
        self.model.config.feature_dim / 3
    }

    /// Decomposes, embeds and retrieves for `prompt`; `None` is the
    /// unconditional setting.
    pub fn conditions_for(&self, prompt: Option<&str>) -> Result<PromptConditions> {
        let Some(prompt) = prompt else {
            return Ok(PromptConditions::default());
        };
        if prompt.trim().is_empty() {
            return Err(SamplerError::EmptyPrompt);
        }
        let scripts = decompose(prompt, self.data.decomposer, self.decomposer)?;
        let script_emb = embed_scripts(&scripts, self.embedder)?;
        let (reference, provenance) = if self.model.config.use_reference && self.data.use_reference {
            let db = self.db.ok_or(SamplerError::MissingDatabase)?;
            db.check_embedder(self.embedder)?;
            let r = retrieve_embedded(&script_emb, db, self.data.top_k, self.data.reference_frames, None)?;
            (Some(self.stats.normalize_frames(&r.frames)?), r.provenance)
        } else {
            (None, Vec::new())
        };
        Ok(PromptConditions {
            text: Some(self.embedder.embed(prompt)?),
            scripts: Some(scripts),
            script_embeddings: Some(script_emb),
            reference,
            provenance,
        })
    }

    /// Reverse diffusion in normalized space. Entries fixed by `constraint`
    /// are overwritten after each step with the known values diffused to
    /// the current level, using a noise stream separate from sampling.
    pub fn sample_normalized(
        &self,
        cond: &PromptConditions,
        frames: usize,
        cfg: &GuidanceConfig,
        constraint: Option<(&Array2<bool>, &Array2<f64>)>,
    ) -> Result<Array2<f64>> {
        cfg.validate(self.schedule.len())?;
        if frames == 0 {
            return Err(SamplerError::Config("frames must be positive".into()));
        }
        let schedule = if cfg.steps == self.schedule.len() {
            self.schedule.clone()
        } else {
            self.schedule.respaced(cfg.steps)?
        };
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut impute_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ IMPUTE_SALT);
        let d = self.model.config.feature_dim;
        let impose = |x: &mut Array2<f64>, t: usize, rng: &mut ChaCha8Rng| {
            if let Some((mask, known)) = constraint {
                let eps = standard_normal((frames, d), rng);
                let noisy = diffuse_with_noise(known, &eps, t, &schedule);
                ndarray::Zip::from(x).and(mask).and(&noisy).for_each(|x, &m, &k| {
                    if m {
                        *x = k;
                    }
                });
            }
        };
        let conditions = cond.as_conditions();
        let mut x = standard_normal((frames, d), &mut rng);
        impose(&mut x, schedule.len(), &mut impute_rng);
        let sample_branch = select_branch(cfg.lambda, &mut rng);
        for t in (1..=schedule.len()).rev() {
            let branch = match cfg.branch_mode {
                BranchMode::PerStep => select_branch(cfg.lambda, &mut rng),
                BranchMode::PerSample => sample_branch,
            };
            let mt = schedule.model_timesteps[t - 1];
            let x0_hat = match branch {
                Branch::A => guided_a(self.model, &x, conditions.text, mt, cfg.scale)?,
                Branch::B => guided_b(self.model, &x, &conditions, mt, cfg.scale)?,
            };
            x = posterior_step(&x, &x0_hat, t, &schedule, &mut rng)?;
            impose(&mut x, t - 1, &mut impute_rng);
        }
        Ok(x)
    }

    fn finish(&self, normalized: &Array2<f64>, constraint: Option<&EditMask>) -> Result<MotionSequence> {
        let mut raw = self.stats.denormalize_frames(normalized)?;
        if let Some(edit) = constraint {
            ndarray::Zip::from(&mut raw)
                .and(&edit.fixed)
                .and(&edit.reference.frames)
                .for_each(|x, &m, &k| {
                    if m {
                        *x = k;
                    }
                });
        }
        Ok(MotionSequence::new(raw, self.fps, self.joints())?)
    }

    /// Text-to-motion; `prompt = None` samples unconditionally.
    pub fn generate(&self, prompt: Option<&str>, frames: usize, cfg: &GuidanceConfig) -> Result<MotionSequence> {
        let cond = self.conditions_for(prompt)?;
        let x = self.sample_normalized(&cond, frames, cfg, None)?;
        self.finish(&x, None)
    }

    /// Generation constrained by `mask`; fixed entries equal the reference
    /// exactly in the output.
    pub fn impute(&self, prompt: Option<&str>, mask: &EditMask, cfg: &GuidanceConfig) -> Result<MotionSequence> {
        let dim = mask.reference.frames.dim();
        if mask.fixed.dim() != dim || dim.1 != self.model.config.feature_dim {
            return Err(SamplerError::MaskShape {
                mask: mask.fixed.dim(),
                motion: dim,
            });
        }
        if mask.free_count() == 0 {
            return self.finish(&self.stats.normalize_frames(&mask.reference.frames)?, Some(mask));
        }
        let cond = self.conditions_for(prompt)?;
        let known = self.stats.normalize_frames(&mask.reference.frames)?;
        let x = self.sample_normalized(&cond, dim.0, cfg, Some((&mask.fixed, &known)))?;
        self.finish(&x, Some(mask))
    }

    /// Keeps the first and last quarter of `endpoints` and fills the middle.
    pub fn inbetween(
        &self,
        prompt: Option<&str>,
        endpoints: &MotionSequence,
        cfg: &GuidanceConfig,
    ) -> Result<MotionSequence> {
        let n = endpoints.len();
        if n < 8 {
            return Err(SamplerError::TooShort(n));
        }
        let mask = EditMask::new(
            &inbetween_frame_mask(n),
            &vec![false; endpoints.dim()],
            endpoints.clone(),
        )?;
        self.impute(prompt, &mask, cfg)
    }

    /// Regenerates the features not fixed by `joint_mask`.
    pub fn edit_joints(
        &self,
        prompt: Option<&str>,
        base: &MotionSequence,
        joint_mask: &[bool],
        cfg: &GuidanceConfig,
    ) -> Result<MotionSequence> {
        if !joint_mask.is_empty() && joint_mask.iter().all(|m| *m) {
            return Err(SamplerError::AllFixed);
        }
        let mask = EditMask::new(&vec![false; base.len()], joint_mask, base.clone())?;
        self.impute(prompt, &mask, cfg)
    }
}
