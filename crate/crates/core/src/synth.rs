//! Procedural compositional motion corpus: parametric primitive actions,
//! multi-step compositions, templated prompts and ground-truth scripts.

use std::f64::consts::PI;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::decompose::{ScriptList, ScriptSource};
use crate::motion::{rotation_offset, FeatureStats, MotionError, MotionSequence, Skeleton};

pub const FPS: f64 = 20.0;
pub const MIN_DURATION: usize = 30;
pub const MAX_DURATION: usize = 40;
pub const MAX_STEPS: usize = 6;
/// Frames overwritten by the linear blend at a sequential boundary.
pub const BLEND_FRAMES: usize = 3;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid composition: {0}")]
    InvalidComposition(String),
    #[error("unknown primitive {0:?}")]
    UnknownPrimitive(String),
    #[error("skeleton is missing joint {0:?}")]
    MissingJoint(&'static str),
    #[error(transparent)]
    Motion(#[from] MotionError),
}

pub type Result<T> = std::result::Result<T, SynthError>;

/// Parameters drawn once per primitive instance.
#[derive(Debug, Clone, Copy)]
struct Variation {
    amplitude: f64,
    tempo: f64,
}

type Generator = fn(&Variation, f64, &mut [f64], &JointMap);

/// Joint indices of the stick figure looked up by name.
#[derive(Debug, Clone, Copy)]
struct JointMap {
    spine: usize,
    head: usize,
    l_shoulder: usize,
    l_elbow: usize,
    r_shoulder: usize,
    r_elbow: usize,
    l_hip: usize,
    l_knee: usize,
    r_hip: usize,
    r_knee: usize,
}

impl JointMap {
    fn new(skeleton: &Skeleton) -> Result<Self> {
        let get = |name: &'static str| skeleton.joint_index(name).ok_or(SynthError::MissingJoint(name));
        Ok(Self {
            spine: get("spine")?,
            head: get("head")?,
            l_shoulder: get("left_shoulder")?,
            l_elbow: get("left_elbow")?,
            r_shoulder: get("right_shoulder")?,
            r_elbow: get("right_elbow")?,
            l_hip: get("left_hip")?,
            l_knee: get("left_knee")?,
            r_hip: get("right_hip")?,
            r_knee: get("right_knee")?,
        })
    }
}

/// A simple action with its text table and the joints it is allowed to move.
pub struct PrimitiveAction {
    pub name: &'static str,
    /// Imperative phrase used as the ground-truth script.
    pub script: &'static str,
    /// Third-person surface forms ("raises the left arm").
    pub forms: &'static [&'static str],
    /// Gerund surface forms used after "while".
    pub gerunds: &'static [&'static str],
    /// Joints whose features may leave rest; `"root"` means root translation.
    pub joints: &'static [&'static str],
    generator: Generator,
}

impl std::fmt::Debug for PrimitiveAction {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("PrimitiveAction").field("name", &self.name).finish()
    }
}

fn smoothstep(p: f64) -> f64 {
    let p = p.clamp(0.0, 1.0);
    p * p * (3.0 - 2.0 * p)
}

/// Zero at both ends, one in the middle.
fn bump(p: f64) -> f64 {
    (PI * p.clamp(0.0, 1.0)).sin().powi(2)
}

fn set(pose: &mut [f64], joint: usize, axis: usize, value: f64) {
    pose[rotation_offset(joint) + axis] += value;
}

fn raise_left_arm(v: &Variation, p: f64, pose: &mut [f64], j: &JointMap) {
    set(pose, j.l_shoulder, 2, 2.6 * v.amplitude * smoothstep(p));
    set(pose, j.l_elbow, 0, 0.4 * v.amplitude * bump(p));
}

fn lower_left_arm(v: &Variation, p: f64, pose: &mut [f64], j: &JointMap) {
    set(pose, j.l_shoulder, 2, 2.6 * v.amplitude * (1.0 - smoothstep(p)));
    set(pose, j.l_elbow, 0, 0.4 * v.amplitude * bump(p));
}

fn raise_right_arm(v: &Variation, p: f64, pose: &mut [f64], j: &JointMap) {
    set(pose, j.r_shoulder, 2, -2.6 * v.amplitude * smoothstep(p));
    set(pose, j.r_elbow, 0, 0.4 * v.amplitude * bump(p));
}

fn lower_right_arm(v: &Variation, p: f64, pose: &mut [f64], j: &JointMap) {
    set(pose, j.r_shoulder, 2, -2.6 * v.amplitude * (1.0 - smoothstep(p)));
    set(pose, j.r_elbow, 0, 0.4 * v.amplitude * bump(p));
}

fn wave_right_hand(v: &Variation, p: f64, pose: &mut [f64], j: &JointMap) {
    let env = (PI * p).sin();
    set(pose, j.r_shoulder, 2, -2.0 * v.amplitude * env);
    set(pose, j.r_elbow, 2, 0.7 * env * (2.0 * PI * 3.0 * v.tempo * p).sin());
}

fn walk_forward(v: &Variation, p: f64, pose: &mut [f64], j: &JointMap) {
    let cycle = 2.0 * PI * 2.0 * v.tempo * p;
    let env = (PI * p).sin().powf(0.5);
    pose[2] += 1.2 * v.amplitude * p;
    pose[1] += 0.03 * env * (2.0 * cycle).sin().abs();
    set(pose, j.l_hip, 0, 0.5 * v.amplitude * env * cycle.sin());
    set(pose, j.r_hip, 0, -0.5 * v.amplitude * env * cycle.sin());
    set(pose, j.l_knee, 0, 0.6 * env * cycle.cos().max(0.0));
    set(pose, j.r_knee, 0, 0.6 * env * (-cycle.cos()).max(0.0));
}

fn squat(v: &Variation, p: f64, pose: &mut [f64], j: &JointMap) {
    let b = bump(p) * v.amplitude;
    pose[1] -= 0.35 * b;
    for (hip, knee) in [(j.l_hip, j.l_knee), (j.r_hip, j.r_knee)] {
        set(pose, hip, 0, -1.2 * b);
        set(pose, knee, 0, 1.9 * b);
    }
}

fn turn_left(v: &Variation, p: f64, pose: &mut [f64], j: &JointMap) {
    let b = bump(p) * v.amplitude;
    set(pose, j.spine, 1, 1.1 * b);
    set(pose, j.head, 1, 0.5 * b);
}

fn kick_right(v: &Variation, p: f64, pose: &mut [f64], j: &JointMap) {
    let b = bump(p) * v.amplitude;
    set(pose, j.r_hip, 0, -1.4 * b);
    set(
        pose,
        j.r_knee,
        0,
        1.2 * bump(p * 2.0) * v.amplitude * if p < 0.5 { 1.0 } else { 0.0 },
    );
}

fn jump(v: &Variation, p: f64, pose: &mut [f64], j: &JointMap) {
    let crouch = bump((p * 3.0).min(1.0)) * if p < 1.0 / 3.0 { 1.0 } else { 0.0 };
    let air = if p > 1.0 / 3.0 {
        bump((p - 1.0 / 3.0) * 1.5)
    } else {
        0.0
    };
    pose[1] += v.amplitude * (0.4 * air - 0.2 * crouch);
    for (hip, knee) in [(j.l_hip, j.l_knee), (j.r_hip, j.r_knee)] {
        set(pose, hip, 0, -0.8 * crouch);
        set(pose, knee, 0, 1.3 * crouch + 0.3 * air);
    }
}

fn nod_head(v: &Variation, p: f64, pose: &mut [f64], j: &JointMap) {
    set(
        pose,
        j.head,
        0,
        0.5 * v.amplitude * (2.0 * PI * 2.0 * v.tempo * p).sin().abs() * (PI * p).sin(),
    );
}

fn bend_forward(v: &Variation, p: f64, pose: &mut [f64], j: &JointMap) {
    set(pose, j.spine, 0, 1.0 * v.amplitude * bump(p));
}

pub static PRIMITIVES: &[PrimitiveAction] = &[
    PrimitiveAction {
        name: "raise_left_arm",
        script: "raise the left arm",
        forms: &["raises the left arm", "lifts the left arm", "puts the left arm up"],
        gerunds: &["raising the left arm", "lifting the left arm"],
        joints: &["left_shoulder", "left_elbow"],
        generator: raise_left_arm,
    },
    PrimitiveAction {
        name: "lower_left_arm",
        script: "lower the left arm",
        forms: &["lowers the left arm", "drops the left arm", "brings the left arm down"],
        gerunds: &["lowering the left arm", "dropping the left arm"],
        joints: &["left_shoulder", "left_elbow"],
        generator: lower_left_arm,
    },
    PrimitiveAction {
        name: "raise_right_arm",
        script: "raise the right arm",
        forms: &["raises the right arm", "lifts the right arm", "puts the right arm up"],
        gerunds: &["raising the right arm", "lifting the right arm"],
        joints: &["right_shoulder", "right_elbow"],
        generator: raise_right_arm,
    },
    PrimitiveAction {
        name: "lower_right_arm",
        script: "lower the right arm",
        forms: &[
            "lowers the right arm",
            "drops the right arm",
            "brings the right arm down",
        ],
        gerunds: &["lowering the right arm", "dropping the right arm"],
        joints: &["right_shoulder", "right_elbow"],
        generator: lower_right_arm,
    },
    PrimitiveAction {
        name: "wave_right_hand",
        script: "wave the right hand",
        forms: &["waves the right hand", "waves with the right hand"],
        gerunds: &["waving the right hand"],
        joints: &["right_shoulder", "right_elbow"],
        generator: wave_right_hand,
    },
    PrimitiveAction {
        name: "walk_forward",
        script: "walk forward",
        forms: &["walks forward", "walks ahead", "steps forward"],
        gerunds: &["walking forward"],
        joints: &["root", "left_hip", "left_knee", "right_hip", "right_knee"],
        generator: walk_forward,
    },
    PrimitiveAction {
        name: "squat",
        script: "squat down",
        forms: &["squats down", "crouches down"],
        gerunds: &["squatting down"],
        joints: &["root", "left_hip", "left_knee", "right_hip", "right_knee"],
        generator: squat,
    },
    PrimitiveAction {
        name: "turn_left",
        script: "turn to the left",
        forms: &["turns to the left", "twists to the left"],
        gerunds: &["turning to the left"],
        joints: &["spine", "head"],
        generator: turn_left,
    },
    PrimitiveAction {
        name: "kick_right",
        script: "kick with the right leg",
        forms: &["kicks with the right leg", "kicks the right leg forward"],
        gerunds: &["kicking with the right leg"],
        joints: &["right_hip", "right_knee"],
        generator: kick_right,
    },
    PrimitiveAction {
        name: "jump",
        script: "jump in place",
        forms: &["jumps in place", "hops up"],
        gerunds: &["jumping in place"],
        joints: &["root", "left_hip", "left_knee", "right_hip", "right_knee"],
        generator: jump,
    },
    PrimitiveAction {
        name: "nod_head",
        script: "nod the head",
        forms: &["nods the head", "nods"],
        gerunds: &["nodding the head"],
        joints: &["head"],
        generator: nod_head,
    },
    PrimitiveAction {
        name: "bend_forward",
        script: "bend forward",
        forms: &["bends forward", "bows forward"],
        gerunds: &["bending forward"],
        joints: &["spine"],
        generator: bend_forward,
    },
];

pub fn primitive(name: &str) -> Result<&'static PrimitiveAction> {
    PRIMITIVES
        .iter()
        .find(|p| p.name == name)
        .ok_or_else(|| SynthError::UnknownPrimitive(name.to_string()))
}

impl PrimitiveAction {
    fn variation(seed: u64) -> Variation {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Variation {
            amplitude: rng.gen_range(0.9..1.1),
            tempo: rng.gen_range(0.85..1.15),
        }
    }

    /// Frame count for an instance drawn with `seed`.
    pub fn duration_frames(&self, seed: u64) -> usize {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_d0ab);
        rng.gen_range(MIN_DURATION..=MAX_DURATION)
    }

    /// Pose offsets from rest at `phase ∈ [0, 1]`.
    pub fn offsets(&self, seed: u64, phase: f64, skeleton: &Skeleton) -> Result<Vec<f64>> {
        let map = JointMap::new(skeleton)?;
        let mut pose = vec![0.0; skeleton.feature_dim()];
        (self.generator)(&Self::variation(seed), phase, &mut pose, &map);
        Ok(pose)
    }

    /// Feature indices this primitive may move.
    pub fn feature_mask(&self, skeleton: &Skeleton) -> Result<Vec<bool>> {
        let mut mask = vec![false; skeleton.feature_dim()];
        for &joint in self.joints {
            let range = if joint == "root" {
                0..3
            } else {
                let j = skeleton.joint_index(joint).ok_or(SynthError::MissingJoint(joint))?;
                rotation_offset(j)..rotation_offset(j) + 3
            };
            mask[range].iter_mut().for_each(|m| *m = true);
        }
        Ok(mask)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepMode {
    Sequential,
    SimultaneousWithPrevious,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CompositionStep {
    pub primitive: String,
    pub mode: StepMode,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CompositionSpec {
    pub steps: Vec<CompositionStep>,
    pub seed: u64,
}

impl CompositionSpec {
    pub fn sequential(names: &[&str], seed: u64) -> Self {
        Self {
            steps: names
                .iter()
                .map(|n| CompositionStep {
                    primitive: n.to_string(),
                    mode: StepMode::Sequential,
                })
                .collect(),
            seed,
        }
    }

    /// Groups steps into segments that play at the same time.
    fn segments(&self, skeleton: &Skeleton) -> Result<Vec<Vec<(usize, &'static PrimitiveAction)>>> {
        if self.steps.is_empty() || self.steps.len() > MAX_STEPS {
            return Err(SynthError::InvalidComposition(format!(
                "composition needs 1..={MAX_STEPS} steps, got {}",
                self.steps.len()
            )));
        }
        let mut segments: Vec<Vec<(usize, &'static PrimitiveAction)>> = Vec::new();
        for (i, step) in self.steps.iter().enumerate() {
            let prim = primitive(&step.primitive)?;
            match step.mode {
                StepMode::Sequential => segments.push(vec![(i, prim)]),
                StepMode::SimultaneousWithPrevious => {
                    let seg = segments.last_mut().ok_or_else(|| {
                        SynthError::InvalidComposition("first step cannot be simultaneous with a previous one".into())
                    })?;
                    let mask = prim.feature_mask(skeleton)?;
                    for (_, other) in seg.iter() {
                        let other_mask = other.feature_mask(skeleton)?;
                        if mask.iter().zip(&other_mask).any(|(a, b)| *a && *b) {
                            return Err(SynthError::InvalidComposition(format!(
                                "{} and {} move overlapping joints",
                                other.name, prim.name
                            )));
                        }
                    }
                    seg.push((i, prim));
                }
            }
        }
        Ok(segments)
    }

    pub fn validate(&self, skeleton: &Skeleton) -> Result<()> {
        self.segments(skeleton).map(|_| ())
    }

    fn step_seed(&self, index: usize) -> u64 {
        self.seed
            .wrapping_mul(0x9E37_79B9_7F4A_7C15)
            .wrapping_add(index as u64 + 1)
    }
}

/// Renders a composition into raw (unnormalized) pose features.
pub fn render_composition(spec: &CompositionSpec, skeleton: &Skeleton) -> Result<MotionSequence> {
    let segments = spec.segments(skeleton)?;
    let d = skeleton.feature_dim();
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut carry = [0.0f64; 3];
    for segment in &segments {
        let durations: Vec<usize> = segment
            .iter()
            .map(|(i, p)| p.duration_frames(spec.step_seed(*i)))
            .collect();
        let len = *durations.iter().max().expect("segment is non-empty");
        let start = rows.len();
        for k in 0..len {
            let mut pose = vec![0.0; d];
            pose[..3].copy_from_slice(&carry);
            for ((i, prim), &dur) in segment.iter().zip(&durations) {
                let phase = (k.min(dur - 1)) as f64 / (dur - 1) as f64;
                let off = prim.offsets(spec.step_seed(*i), phase, skeleton)?;
                pose.iter_mut().zip(&off).for_each(|(p, o)| *p += o);
            }
            rows.push(pose);
        }
        if start > 0 {
            let prev = rows[start - 1].clone();
            for b in 0..BLEND_FRAMES.min(len) {
                let w = (b + 1) as f64 / (BLEND_FRAMES + 1) as f64;
                let row = &mut rows[start + b];
                row.iter_mut().zip(&prev).for_each(|(r, p)| *r = p + w * (*r - p));
            }
        }
        carry.copy_from_slice(&rows.last().expect("segment rendered")[..3]);
        carry[1] = 0.0;
    }
    let n = rows.len();
    let frames = Array2::from_shape_vec((n, d), rows.into_iter().flatten().collect()).expect("rows have feature width");
    Ok(MotionSequence::new(frames, FPS, skeleton.joint_count())?)
}

pub const SUBJECTS: &[&str] = &["a person", "the person", "someone"];
pub const SEQUENTIAL_CONNECTORS: &[&str] = &[" then ", " and then ", ", "];
pub const SIMULTANEOUS_CONNECTOR: &str = " while ";

/// Draws a templated prompt and its ground-truth scripts.
pub fn synthesize_text(spec: &CompositionSpec, seed: u64) -> Result<(String, ScriptList)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut text = SUBJECTS.choose(&mut rng).expect("non-empty").to_string();
    let mut scripts = Vec::with_capacity(spec.steps.len());
    for (i, step) in spec.steps.iter().enumerate() {
        let prim = primitive(&step.primitive)?;
        let phrase = match (i, step.mode) {
            (0, StepMode::SimultaneousWithPrevious) => {
                return Err(SynthError::InvalidComposition(
                    "first step cannot be simultaneous with a previous one".into(),
                ))
            }
            (0, StepMode::Sequential) => {
                text.push(' ');
                prim.forms.choose(&mut rng)
            }
            (_, StepMode::Sequential) => {
                text.push_str(SEQUENTIAL_CONNECTORS.choose(&mut rng).expect("non-empty"));
                prim.forms.choose(&mut rng)
            }
            (_, StepMode::SimultaneousWithPrevious) => {
                text.push_str(SIMULTANEOUS_CONNECTOR);
                prim.gerunds.choose(&mut rng)
            }
        };
        text.push_str(phrase.expect("non-empty"));
        scripts.push(prim.script.to_string());
    }
    Ok((text, ScriptList::new(scripts, ScriptSource::GroundTruth)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone)]
pub struct LabeledSample {
    pub motion: MotionSequence,
    pub text: String,
    pub scripts: ScriptList,
    pub composition: CompositionSpec,
    pub split: Split,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub samples: Vec<LabeledSample>,
    pub stats: FeatureStats,
    pub seed: u64,
}

impl Dataset {
    pub fn split(&self, split: Split) -> impl Iterator<Item = (usize, &LabeledSample)> {
        self.samples.iter().enumerate().filter(move |(_, s)| s.split == split)
    }

    pub fn split_indices(&self, split: Split) -> Vec<usize> {
        self.split(split).map(|(i, _)| i).collect()
    }
}

/// Per-sample RNG stream derived from `(seed, index)`.
pub fn sample_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64 + 1);
    rng
}

/// Draws a random composition of 1..=`max_steps` steps.
pub fn random_composition(rng: &mut impl Rng, max_steps: usize, skeleton: &Skeleton) -> CompositionSpec {
    let count = rng.gen_range(1..=max_steps.clamp(1, MAX_STEPS));
    let mut spec = CompositionSpec {
        steps: Vec::with_capacity(count),
        seed: rng.gen(),
    };
    for i in 0..count {
        let name = PRIMITIVES.choose(rng).expect("non-empty").name;
        let mut step = CompositionStep {
            primitive: name.to_string(),
            mode: StepMode::Sequential,
        };
        if i > 0 && rng.gen_bool(0.25) {
            step.mode = StepMode::SimultaneousWithPrevious;
            spec.steps.push(step);
            if spec.validate(skeleton).is_ok() {
                continue;
            }
            spec.steps.pop();
            step = CompositionStep {
                primitive: name.to_string(),
                mode: StepMode::Sequential,
            };
        }
        spec.steps.push(step);
    }
    spec
}

/// Builds `count` labelled samples with an 80/10/10 split and feature stats.
pub fn build_dataset(count: usize, seed: u64, skeleton: &Skeleton) -> Result<Dataset> {
    build_dataset_with(count, seed, 3, skeleton)
}

pub fn build_dataset_with(count: usize, seed: u64, max_steps: usize, skeleton: &Skeleton) -> Result<Dataset> {
    if count == 0 {
        return Err(SynthError::InvalidComposition("dataset count must be ≥ 1".into()));
    }
    let mut samples = Vec::with_capacity(count);
    for i in 0..count {
        let mut rng = sample_rng(seed, i);
        let composition = random_composition(&mut rng, max_steps, skeleton);
        let motion = render_composition(&composition, skeleton)?;
        let (text, scripts) = synthesize_text(&composition, rng.gen())?;
        samples.push(LabeledSample {
            motion,
            text,
            scripts,
            composition,
            split: Split::Train,
        });
    }
    let mut order: Vec<usize> = (0..count).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x0005_9117));
    let n_train = count * 8 / 10;
    let n_val = count / 10;
    for (rank, &idx) in order.iter().enumerate() {
        samples[idx].split = if rank < n_train {
            Split::Train
        } else if rank < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        };
    }
    let stats = FeatureStats::from_motions(samples.iter().map(|s| &s.motion))?;
    Ok(Dataset { samples, stats, seed })
}
