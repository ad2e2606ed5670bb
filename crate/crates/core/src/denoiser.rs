//! Two-branch x̂₀ denoiser.
//!
//! * Path θ1 (direct): `[z_l ; F_l¹(x_t)]` → fusion block → head 1.
//! * Path θ2 (reference-fused): `E_s([z_s ; F_s(m_ref)])` and
//!   `E_l([z_l ; F_l²(x_t)])`, then the fusion block with cross-attention from
//!   the prompt/motion stream onto the script/reference stream → head 2.
//!
//! Text tokens come from `F_t`, an MLP over a frozen sentence embedding plus a
//! sinusoidal timestep embedding. The fusion block weights are shared by both
//! paths. Motions are tokenized in patches of `patch` consecutive frames.

use ndarray::{Array2, ArrayView1};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::motion::fit_rows;
use crate::nn::{
    EncoderLayer, FeedForward, LayerNorm, Linear, MultiHeadAttention, ParamId, ParamStore, Tape, Tensor, Var,
};

#[derive(Debug, Error, PartialEq)]
pub enum DenoiserError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("reference motion required by this path")]
    MissingReference,
    #[error("invalid model config: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, DenoiserError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub width: usize,
    pub heads: usize,
    pub encoder_layers: usize,
    pub fusion_layers: usize,
    pub ff_hidden: usize,
    /// Frames per motion token.
    pub patch: usize,
    pub feature_dim: usize,
    pub embed_dim: usize,
    /// `false` drops reference-motion tokens from θ2 entirely.
    pub use_reference: bool,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            width: 128,
            heads: 4,
            encoder_layers: 2,
            fusion_layers: 2,
            ff_hidden: 256,
            patch: 4,
            feature_dim: 33,
            embed_dim: crate::retrieval::DEFAULT_EMBED_DIM,
            use_reference: true,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(DenoiserError::Config(m.to_string()));
        if self.width == 0 || self.heads == 0 || self.width % self.heads != 0 {
            return bad("width must be a positive multiple of heads");
        }
        if self.width % 2 != 0 {
            return bad("width must be even for sinusoidal embeddings");
        }
        if self.patch == 0 || self.feature_dim == 0 || self.embed_dim == 0 || self.ff_hidden == 0 {
            return bad("patch, feature_dim, embed_dim and ff_hidden must be positive");
        }
        if self.fusion_layers == 0 {
            return bad("need at least one fusion layer");
        }
        Ok(())
    }
}

/// Conditioning inputs; `None` marks a masked (∅) condition.
#[derive(Debug, Clone, Copy, Default)]
pub struct Conditions<'a> {
    /// Prompt embedding `c_l`.
    pub text: Option<&'a [f64]>,
    /// Script embeddings `c_s`, one row per script.
    pub scripts: Option<&'a Array2<f64>>,
    /// Normalized reference frames `m^{1:R}`.
    pub reference: Option<&'a Array2<f64>>,
}

impl Conditions<'_> {
    pub fn unconditional() -> Self {
        Self::default()
    }
}

/// Encoder layer with an extra cross-attention sublayer.
#[derive(Debug, Clone, Copy)]
struct FusionLayer {
    norm_self: LayerNorm,
    self_attn: MultiHeadAttention,
    norm_cross: LayerNorm,
    cross_attn: MultiHeadAttention,
    norm_ff: LayerNorm,
    ff: FeedForward,
}

impl FusionLayer {
    fn new(store: &mut ParamStore, name: &str, cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        let w = cfg.width;
        Self {
            norm_self: LayerNorm::new(store, &format!("{name}.norm_self"), w),
            self_attn: MultiHeadAttention::new(store, &format!("{name}.self_attn"), w, cfg.heads, rng),
            norm_cross: LayerNorm::new(store, &format!("{name}.norm_cross"), w),
            cross_attn: MultiHeadAttention::new(store, &format!("{name}.cross_attn"), w, cfg.heads, rng),
            norm_ff: LayerNorm::new(store, &format!("{name}.norm_ff"), w),
            ff: FeedForward::new(store, &format!("{name}.ff"), w, cfg.ff_hidden, rng),
        }
    }

    fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var, context: Option<Var>) -> Var {
        let h = self.norm_self.forward(tape, store, x);
        let a = self.self_attn.forward(tape, store, h, h);
        let mut x = tape.add(x, a);
        if let Some(ctx) = context {
            let h = self.norm_cross.forward(tape, store, x);
            let c = self.cross_attn.forward(tape, store, h, ctx);
            x = tape.add(x, c);
        }
        let h = self.norm_ff.forward(tape, store, x);
        let f = self.ff.forward(tape, store, h);
        tape.add(x, f)
    }
}

#[derive(Debug, Clone)]
struct Layout {
    text_proj: Linear,
    time_proj: Linear,
    token_out: Linear,
    null_text: ParamId,
    null_scripts: ParamId,
    null_reference: ParamId,
    motion_in_direct: Linear,
    motion_in_fused: Linear,
    reference_in: Linear,
    type_text: ParamId,
    type_script: ParamId,
    type_motion: ParamId,
    type_reference: ParamId,
    enc_prompt: Vec<EncoderLayer>,
    enc_prompt_norm: LayerNorm,
    enc_script: Vec<EncoderLayer>,
    enc_script_norm: LayerNorm,
    fusion: Vec<FusionLayer>,
    fusion_norm: LayerNorm,
    head_direct: Linear,
    head_fused: Linear,
}

#[derive(Debug, Clone)]
pub struct DenoiserModel {
    pub config: ModelConfig,
    pub params: ParamStore,
    layout: Layout,
}

/// Sinusoidal embedding of a scalar position, width `dim`.
pub fn sinusoid(position: f64, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let freq = (-(10_000f64).ln() * i as f64 / half as f64).exp();
        out[i] = (position * freq).sin();
        out[half + i] = (position * freq).cos();
    }
    out
}

fn positions(count: usize, dim: usize) -> Tensor {
    let mut out = Array2::zeros((count, dim));
    for i in 0..count {
        out.row_mut(i).assign(&ArrayView1::from(&sinusoid(i as f64, dim)));
    }
    out
}

/// `N × D` frames → `⌈N/P⌉ × P·D` tokens, padding with the last frame.
pub fn patchify(frames: &Array2<f64>, patch: usize) -> Array2<f64> {
    let (n, d) = frames.dim();
    let tokens = n.div_ceil(patch);
    let padded = fit_rows(frames, tokens * patch);
    padded
        .into_shape_with_order((tokens, patch * d))
        .expect("contiguous rows")
}

/// Inverse of [`patchify`], trimmed to `frames` rows.
pub fn unpatchify(tokens: &Array2<f64>, patch: usize, frames: usize) -> Array2<f64> {
    let (t, pd) = tokens.dim();
    let d = pd / patch;
    let full = tokens
        .as_standard_layout()
        .into_owned()
        .into_shape_with_order((t * patch, d))
        .expect("contiguous tokens");
    full.slice(ndarray::s![..frames, ..]).to_owned()
}

impl DenoiserModel {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut p = ParamStore::default();
        let w = config.width;
        let pd = config.patch * config.feature_dim;
        let e = config.embed_dim;
        let text_proj = Linear::new(&mut p, "f_t.text", e, w, &mut rng);
        // Zero-initialized so that text that is never seen in training has no
        // effect at all (see the masking identities in the tests).
        p.get_mut(text_proj.w).fill(0.0);
        let layout = Layout {
            text_proj,
            time_proj: Linear::new(&mut p, "f_t.time", w, w, &mut rng),
            token_out: Linear::new(&mut p, "f_t.out", w, w, &mut rng),
            null_text: p.add("null.text", Array2::zeros((1, e))),
            null_scripts: p.add("null.scripts", Array2::zeros((1, e))),
            null_reference: p.add("null.reference", Array2::zeros((1, w))),
            motion_in_direct: Linear::new(&mut p, "f_l1", pd, w, &mut rng),
            motion_in_fused: Linear::new(&mut p, "f_l2", pd, w, &mut rng),
            reference_in: Linear::new(&mut p, "f_s", pd, w, &mut rng),
            type_text: p.add("type.text", Array2::zeros((1, w))),
            type_script: p.add("type.script", Array2::zeros((1, w))),
            type_motion: p.add("type.motion", Array2::zeros((1, w))),
            type_reference: p.add("type.reference", Array2::zeros((1, w))),
            enc_prompt: (0..config.encoder_layers)
                .map(|i| EncoderLayer::new(&mut p, &format!("e_l.{i}"), w, config.heads, config.ff_hidden, &mut rng))
                .collect(),
            enc_prompt_norm: LayerNorm::new(&mut p, "e_l.norm", w),
            enc_script: (0..config.encoder_layers)
                .map(|i| EncoderLayer::new(&mut p, &format!("e_s.{i}"), w, config.heads, config.ff_hidden, &mut rng))
                .collect(),
            enc_script_norm: LayerNorm::new(&mut p, "e_s.norm", w),
            fusion: (0..config.fusion_layers)
                .map(|i| FusionLayer::new(&mut p, &format!("fusion.{i}"), &config, &mut rng))
                .collect(),
            fusion_norm: LayerNorm::new(&mut p, "fusion.norm", w),
            head_direct: Linear::new(&mut p, "head.direct", w, pd, &mut rng),
            head_fused: Linear::new(&mut p, "head.fused", w, pd, &mut rng),
        };
        Ok(Self {
            config,
            params: p,
            layout,
        })
    }

    /// Rebuilds a model around previously trained weights.
    pub fn with_params(config: ModelConfig, params: ParamStore) -> Result<Self> {
        let mut model = Self::new(config)?;
        if params.names != model.params.names
            || params
                .values
                .iter()
                .zip(&model.params.values)
                .any(|(a, b)| a.dim() != b.dim())
        {
            return Err(DenoiserError::Config("parameter layout does not match config".into()));
        }
        model.params = params;
        Ok(model)
    }

    fn check_motion(&self, x: &Array2<f64>, what: &str) -> Result<()> {
        if x.ncols() != self.config.feature_dim || x.nrows() == 0 {
            return Err(DenoiserError::Shape(format!(
                "{what} is {:?}, expected N × {}",
                x.dim(),
                self.config.feature_dim
            )));
        }
        Ok(())
    }

    fn check_conditions(&self, c: &Conditions) -> Result<()> {
        let e = self.config.embed_dim;
        if let Some(t) = c.text {
            if t.len() != e {
                return Err(DenoiserError::Shape(format!(
                    "text embedding has {} dims, expected {e}",
                    t.len()
                )));
            }
        }
        if let Some(s) = c.scripts {
            if s.ncols() != e || s.nrows() == 0 {
                return Err(DenoiserError::Shape(format!("script embeddings are {:?}", s.dim())));
            }
        }
        if let Some(r) = c.reference {
            self.check_motion(r, "reference")?;
        }
        Ok(())
    }

    /// `F_t`: embeddings (rows) plus timestep → tokens.
    fn text_tokens(&self, tape: &mut Tape, embeddings: Var, t: usize, kind: ParamId) -> Var {
        let l = &self.layout;
        let p = &self.params;
        let rows = tape.value(embeddings).nrows();
        let temb = tape
            .constant(Array2::from_shape_vec((1, self.config.width), sinusoid(t as f64, self.config.width)).unwrap());
        let time = l.time_proj.forward(tape, p, temb);
        let h = l.text_proj.forward(tape, p, embeddings);
        let h = tape.add_row(h, time);
        let h = tape.gelu(h);
        let out = l.token_out.forward(tape, p, h);
        let ty = tape.param(p, kind);
        debug_assert_eq!(tape.value(out).nrows(), rows);
        tape.add_row(out, ty)
    }

    fn prompt_tokens(&self, tape: &mut Tape, text: Option<&[f64]>, t: usize) -> Var {
        let emb = match text {
            Some(v) => tape.constant(Array2::from_shape_vec((1, v.len()), v.to_vec()).unwrap()),
            None => tape.param(&self.params, self.layout.null_text),
        };
        self.text_tokens(tape, emb, t, self.layout.type_text)
    }

    fn motion_tokens(&self, tape: &mut Tape, frames: &Array2<f64>, proj: &Linear, kind: ParamId) -> Var {
        let x = tape.constant(patchify(frames, self.config.patch));
        let h = proj.forward(tape, &self.params, x);
        let ty = tape.param(&self.params, kind);
        tape.add_row(h, ty)
    }

    fn with_positions(&self, tape: &mut Tape, x: Var) -> Var {
        let n = tape.value(x).nrows();
        let pos = tape.constant(positions(n, self.config.width));
        tape.add(x, pos)
    }

    fn run_fusion(&self, tape: &mut Tape, mut x: Var, context: Option<Var>) -> Var {
        for layer in &self.layout.fusion {
            x = layer.forward(tape, &self.params, x, context);
        }
        self.layout.fusion_norm.forward(tape, &self.params, x)
    }

    /// θ1 path on the tape; returns patched `⌈N/P⌉ × P·D` predictions.
    pub fn theta1_on_tape(&self, tape: &mut Tape, x_t: &Array2<f64>, text: Option<&[f64]>, t: usize) -> Result<Var> {
        self.check_motion(x_t, "x_t")?;
        self.check_conditions(&Conditions {
            text,
            ..Default::default()
        })?;
        let z_l = self.prompt_tokens(tape, text, t);
        let motion = self.motion_tokens(tape, x_t, &self.layout.motion_in_direct, self.layout.type_motion);
        let seq = tape.concat_rows(&[z_l, motion]);
        let seq = self.with_positions(tape, seq);
        let h = self.run_fusion(tape, seq, None);
        let n = tape.value(h).nrows();
        let motion_h = tape.slice_rows(h, 1, n);
        Ok(self.layout.head_direct.forward(tape, &self.params, motion_h))
    }

    /// θ2 path on the tape; returns patched predictions.
    pub fn theta2_on_tape(&self, tape: &mut Tape, x_t: &Array2<f64>, cond: &Conditions, t: usize) -> Result<Var> {
        self.check_motion(x_t, "x_t")?;
        self.check_conditions(cond)?;
        let l = &self.layout;
        let p = &self.params;

        let script_emb = match cond.scripts {
            Some(s) => tape.constant(s.clone()),
            None => tape.param(p, l.null_scripts),
        };
        let z_s = self.text_tokens(tape, script_emb, t, l.type_script);
        let script_stream = if self.config.use_reference {
            let reference = match cond.reference {
                Some(r) => self.motion_tokens(tape, r, &l.reference_in, l.type_reference),
                None => {
                    let null = tape.param(p, l.null_reference);
                    let ty = tape.param(p, l.type_reference);
                    tape.add(null, ty)
                }
            };
            tape.concat_rows(&[z_s, reference])
        } else {
            z_s
        };
        let mut hs = self.with_positions(tape, script_stream);
        for layer in &l.enc_script {
            hs = layer.forward(tape, p, hs);
        }
        let hs = l.enc_script_norm.forward(tape, p, hs);

        let z_l = self.prompt_tokens(tape, cond.text, t);
        let motion = self.motion_tokens(tape, x_t, &l.motion_in_fused, l.type_motion);
        let seq = tape.concat_rows(&[z_l, motion]);
        let mut hl = self.with_positions(tape, seq);
        for layer in &l.enc_prompt {
            hl = layer.forward(tape, p, hl);
        }
        let hl = l.enc_prompt_norm.forward(tape, p, hl);

        let query = self.with_positions(tape, hl);
        let context = self.with_positions(tape, hs);
        let h = self.run_fusion(tape, query, Some(context));
        let n = tape.value(h).nrows();
        let motion_h = tape.slice_rows(h, 1, n);
        Ok(l.head_fused.forward(tape, p, motion_h))
    }

    /// `p_θ1(x_t, c_l, t)` → `N × D` x̂₀.
    pub fn forward_theta1(&self, x_t: &Array2<f64>, text: Option<&[f64]>, t: usize) -> Result<Array2<f64>> {
        let mut tape = Tape::new();
        let out = self.theta1_on_tape(&mut tape, x_t, text, t)?;
        Ok(unpatchify(tape.value(out), self.config.patch, x_t.nrows()))
    }

    /// `p_θ2(x_t, c_l, c_s, m_ref, t)` → `N × D` x̂₀.
    pub fn forward_theta2(&self, x_t: &Array2<f64>, cond: &Conditions, t: usize) -> Result<Array2<f64>> {
        let mut tape = Tape::new();
        let out = self.theta2_on_tape(&mut tape, x_t, cond, t)?;
        Ok(unpatchify(tape.value(out), self.config.patch, x_t.nrows()))
    }

    /// θ2 that refuses to run without a reference when the model uses one.
    pub fn forward_theta2_strict(&self, x_t: &Array2<f64>, cond: &Conditions, t: usize) -> Result<Array2<f64>> {
        if self.config.use_reference && cond.reference.is_none() {
            return Err(DenoiserError::MissingReference);
        }
        self.forward_theta2(x_t, cond, t)
    }
}
