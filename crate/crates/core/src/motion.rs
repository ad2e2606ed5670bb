//! Skeleton, motion sequences, feature normalization and the `MGMO` motion
//! file format.
//!
//! # Feature layout
//!
//! A pose is a flat vector of `D = 3 + 3·(J−1)` scalars:
//!
//! | Range            | Meaning                                    |
//! |------------------|--------------------------------------------|
//! | `0..3`           | root translation (x, y, z), meters         |
//! | `3+3(j−1)..+3`   | rotation of joint `j ≥ 1` (XYZ Euler, rad) |

use std::f64::consts::PI;
use std::fs;
use std::io::{self, Write};
use std::path::Path;

use ndarray::{Array1, Array2, Axis};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Magic bytes at the start of every motion file.
pub const MOTION_MAGIC: &[u8; 4] = b"MGMO";
/// Current motion file version.
pub const MOTION_VERSION: u16 = 1;
/// Smallest standard deviation allowed in [`FeatureStats`].
pub const STD_FLOOR: f64 = 1e-6;

const HEADER_LEN: usize = 4 + 2 + 8 + 4 + 4 + 4;

#[derive(Debug, Error)]
pub enum MotionError {
    #[error("io error: {0}")]
    Io(#[from] io::Error),
    #[error("corrupt header: {0}")]
    CorruptHeader(String),
    #[error("truncated payload: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("unsupported motion file version {0}")]
    UnsupportedVersion(u16),
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("non-finite value at frame {frame}, feature {feature}")]
    NonFinite { frame: usize, feature: usize },
    #[error("invalid motion: {0}")]
    Invalid(String),
    #[error("invalid skeleton: {0}")]
    InvalidSkeleton(String),
}

pub type Result<T> = std::result::Result<T, MotionError>;

/// Number of pose features for a skeleton with `joints` joints.
pub fn feature_dim(joints: usize) -> usize {
    3 + 3 * (joints - 1)
}

/// Feature offset of the first rotation scalar of joint `joint` (must be ≥ 1).
pub fn rotation_offset(joint: usize) -> usize {
    debug_assert!(joint >= 1);
    3 + 3 * (joint - 1)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Skeleton {
    pub joint_names: Vec<String>,
    pub parent: Vec<Option<usize>>,
    pub rest_offsets: Vec<[f64; 3]>,
}

impl Skeleton {
    pub fn new(joint_names: Vec<String>, parent: Vec<Option<usize>>, rest_offsets: Vec<[f64; 3]>) -> Result<Self> {
        let skeleton = Self {
            joint_names,
            parent,
            rest_offsets,
        };
        skeleton.validate()?;
        Ok(skeleton)
    }

    /// The eleven-joint stick figure used throughout the crate (y is up).
    pub fn stick_figure() -> Self {
        let joints: [(&str, Option<usize>, [f64; 3]); 11] = [
            ("root", None, [0.0, 0.95, 0.0]),
            ("spine", Some(0), [0.0, 0.25, 0.0]),
            ("head", Some(1), [0.0, 0.35, 0.0]),
            ("left_shoulder", Some(1), [0.2, 0.25, 0.0]),
            ("left_elbow", Some(3), [0.0, -0.28, 0.0]),
            ("right_shoulder", Some(1), [-0.2, 0.25, 0.0]),
            ("right_elbow", Some(5), [0.0, -0.28, 0.0]),
            ("left_hip", Some(0), [0.1, -0.05, 0.0]),
            ("left_knee", Some(7), [0.0, -0.45, 0.0]),
            ("right_hip", Some(0), [-0.1, -0.05, 0.0]),
            ("right_knee", Some(9), [0.0, -0.45, 0.0]),
        ];
        Self::new(
            joints.iter().map(|j| j.0.to_string()).collect(),
            joints.iter().map(|j| j.1).collect(),
            joints.iter().map(|j| j.2).collect(),
        )
        .expect("built-in skeleton is valid")
    }

    pub fn joint_count(&self) -> usize {
        self.joint_names.len()
    }

    pub fn feature_dim(&self) -> usize {
        feature_dim(self.joint_count())
    }

    pub fn joint_index(&self, name: &str) -> Option<usize> {
        self.joint_names.iter().position(|n| n == name)
    }

    fn validate(&self) -> Result<()> {
        let j = self.joint_names.len();
        if j < 8 {
            return Err(MotionError::InvalidSkeleton(format!("need at least 8 joints, got {j}")));
        }
        if self.parent.len() != j || self.rest_offsets.len() != j {
            return Err(MotionError::InvalidSkeleton(
                "parent/offset lists must match joint count".into(),
            ));
        }
        let roots = self.parent.iter().filter(|p| p.is_none()).count();
        if roots != 1 {
            return Err(MotionError::InvalidSkeleton(format!(
                "expected exactly one root, found {roots}"
            )));
        }
        // Every joint must reach the root within J hops.
        for start in 0..j {
            let mut cur = start;
            let mut hops = 0;
            while let Some(p) = self.parent[cur] {
                if p >= j {
                    return Err(MotionError::InvalidSkeleton(format!(
                        "joint {start} has out-of-range parent {p}"
                    )));
                }
                cur = p;
                hops += 1;
                if hops > j {
                    return Err(MotionError::InvalidSkeleton(format!("cycle through joint {start}")));
                }
            }
        }
        if self.rest_offsets.iter().flatten().any(|v| !v.is_finite()) {
            return Err(MotionError::InvalidSkeleton("non-finite offset".into()));
        }
        Ok(())
    }

    /// Serializes the skeleton as one `name parent x y z` line per joint
    /// (`-` marks the root).
    pub fn to_text(&self) -> String {
        let mut out = String::from("# joint parent offset_x offset_y offset_z\n");
        for ((name, parent), off) in self.joint_names.iter().zip(&self.parent).zip(&self.rest_offsets) {
            let parent = parent.map_or_else(|| "-".to_string(), |p| p.to_string());
            out.push_str(&format!("{name} {parent} {:?} {:?} {:?}\n", off[0], off[1], off[2]));
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut names = Vec::new();
        let mut parents = Vec::new();
        let mut offsets = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let bad = || MotionError::InvalidSkeleton(format!("bad line {}: {line}", lineno + 1));
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.len() != 5 {
                return Err(bad());
            }
            names.push(fields[0].to_string());
            parents.push(match fields[1] {
                "-" => None,
                p => Some(p.parse::<usize>().map_err(|_| bad())?),
            });
            let mut off = [0.0; 3];
            for (k, v) in fields[2..].iter().enumerate() {
                off[k] = v.parse().map_err(|_| bad())?;
            }
            offsets.push(off);
        }
        Self::new(names, parents, offsets)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_text(&fs::read_to_string(path)?)
    }

    /// World-space joint positions for one pose vector.
    pub fn forward_kinematics(&self, pose: &[f64]) -> Vec<[f64; 3]> {
        let j = self.joint_count();
        let mut world_rot = vec![[[0.0; 3]; 3]; j];
        let mut pos = vec![[0.0; 3]; j];
        // Parents always precede children in a topological order; compute one.
        let order = self.topological_order();
        for &joint in &order {
            let local = if joint == 0 || self.parent[joint].is_none() {
                identity3()
            } else {
                let o = rotation_offset(joint);
                euler_xyz(pose[o], pose[o + 1], pose[o + 2])
            };
            match self.parent[joint] {
                None => {
                    world_rot[joint] = local;
                    let off = self.rest_offsets[joint];
                    pos[joint] = [off[0] + pose[0], off[1] + pose[1], off[2] + pose[2]];
                }
                Some(p) => {
                    let off = mat_vec(&world_rot[p], &self.rest_offsets[joint]);
                    pos[joint] = [pos[p][0] + off[0], pos[p][1] + off[1], pos[p][2] + off[2]];
                    world_rot[joint] = mat_mul(&world_rot[p], &local);
                }
            }
        }
        pos
    }

    fn topological_order(&self) -> Vec<usize> {
        let j = self.joint_count();
        let mut order = Vec::with_capacity(j);
        let mut placed = vec![false; j];
        while order.len() < j {
            for k in 0..j {
                if !placed[k] && self.parent[k].is_none_or(|p| placed[p]) {
                    placed[k] = true;
                    order.push(k);
                }
            }
        }
        order
    }
}

fn identity3() -> [[f64; 3]; 3] {
    [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]
}

fn mat_mul(a: &[[f64; 3]; 3], b: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for k in 0..3 {
            out[i][k] = (0..3).map(|m| a[i][m] * b[m][k]).sum();
        }
    }
    out
}

fn mat_vec(a: &[[f64; 3]; 3], v: &[f64; 3]) -> [f64; 3] {
    [
        a[0][0] * v[0] + a[0][1] * v[1] + a[0][2] * v[2],
        a[1][0] * v[0] + a[1][1] * v[1] + a[1][2] * v[2],
        a[2][0] * v[0] + a[2][1] * v[1] + a[2][2] * v[2],
    ]
}

fn euler_xyz(x: f64, y: f64, z: f64) -> [[f64; 3]; 3] {
    let (sx, cx) = x.sin_cos();
    let (sy, cy) = y.sin_cos();
    let (sz, cz) = z.sin_cos();
    let rx = [[1.0, 0.0, 0.0], [0.0, cx, -sx], [0.0, sx, cx]];
    let ry = [[cy, 0.0, sy], [0.0, 1.0, 0.0], [-sy, 0.0, cy]];
    let rz = [[cz, -sz, 0.0], [sz, cz, 0.0], [0.0, 0.0, 1.0]];
    mat_mul(&mat_mul(&rx, &ry), &rz)
}

/// An `N × D` pose trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct MotionSequence {
    pub frames: Array2<f64>,
    pub fps: f64,
    /// Joint count of the skeleton the features refer to.
    pub joints: usize,
}

impl MotionSequence {
    pub fn new(frames: Array2<f64>, fps: f64, joints: usize) -> Result<Self> {
        let motion = Self { frames, fps, joints };
        motion.validate()?;
        Ok(motion)
    }

    pub fn validate(&self) -> Result<()> {
        if self.frames.nrows() == 0 {
            return Err(MotionError::Invalid("motion has no frames".into()));
        }
        if !(self.fps.is_finite() && self.fps > 0.0) {
            return Err(MotionError::Invalid(format!("bad fps {}", self.fps)));
        }
        if self.joints < 2 || self.frames.ncols() != feature_dim(self.joints) {
            return Err(MotionError::DimensionMismatch {
                expected: feature_dim(self.joints.max(2)),
                found: self.frames.ncols(),
            });
        }
        check_finite(&self.frames)
    }

    pub fn len(&self) -> usize {
        self.frames.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.frames.ncols()
    }

    pub fn with_frames(&self, frames: Array2<f64>) -> Self {
        Self {
            frames,
            fps: self.fps,
            joints: self.joints,
        }
    }

    /// Pads by repeating the last frame, or truncates, to exactly `len` frames.
    pub fn fit_length(&self, len: usize) -> Self {
        self.with_frames(fit_rows(&self.frames, len))
    }
}

/// Pads `frames` by repeating its last row, or truncates, to `len` rows.
pub fn fit_rows(frames: &Array2<f64>, len: usize) -> Array2<f64> {
    let n = frames.nrows();
    let mut out = Array2::zeros((len, frames.ncols()));
    for i in 0..len {
        out.row_mut(i).assign(&frames.row(i.min(n - 1)));
    }
    out
}

fn check_finite(frames: &Array2<f64>) -> Result<()> {
    for ((frame, feature), v) in frames.indexed_iter() {
        if !v.is_finite() {
            return Err(MotionError::NonFinite { frame, feature });
        }
    }
    Ok(())
}

/// Per-feature mean and (floored) standard deviation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureStats {
    pub mean: Array1<f64>,
    pub std: Array1<f64>,
}

impl FeatureStats {
    pub fn identity(dim: usize) -> Self {
        Self {
            mean: Array1::zeros(dim),
            std: Array1::ones(dim),
        }
    }

    /// Population statistics over every frame of every motion.
    pub fn from_motions<'a>(motions: impl IntoIterator<Item = &'a MotionSequence>) -> Result<Self> {
        let mut sum: Option<Array1<f64>> = None;
        let mut sq: Option<Array1<f64>> = None;
        let mut count = 0usize;
        for m in motions {
            let s = m.frames.sum_axis(Axis(0));
            let q = m.frames.mapv(|v| v * v).sum_axis(Axis(0));
            match (&mut sum, &mut sq) {
                (Some(a), Some(b)) => {
                    if a.len() != s.len() {
                        return Err(MotionError::DimensionMismatch {
                            expected: a.len(),
                            found: s.len(),
                        });
                    }
                    *a += &s;
                    *b += &q;
                }
                _ => {
                    sum = Some(s);
                    sq = Some(q);
                }
            }
            count += m.len();
        }
        let (sum, sq) = match (sum, sq) {
            (Some(a), Some(b)) => (a, b),
            _ => return Err(MotionError::Invalid("no motions for statistics".into())),
        };
        let n = count as f64;
        let mean = &sum / n;
        let std = Array1::from_iter(
            sq.iter()
                .zip(mean.iter())
                .map(|(q, m)| (q / n - m * m).max(0.0).sqrt().max(STD_FLOOR)),
        );
        Ok(Self { mean, std })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    fn check(&self, dim: usize) -> Result<()> {
        if self.mean.len() != dim || self.std.len() != dim {
            return Err(MotionError::DimensionMismatch {
                expected: self.mean.len(),
                found: dim,
            });
        }
        if let Some(s) = self.std.iter().find(|s| !(**s >= STD_FLOOR)) {
            return Err(MotionError::Invalid(format!("std {s} below floor {STD_FLOOR}")));
        }
        Ok(())
    }

    pub fn normalize_frames(&self, frames: &Array2<f64>) -> Result<Array2<f64>> {
        self.check(frames.ncols())?;
        Ok((frames - &self.mean) / &self.std)
    }

    pub fn denormalize_frames(&self, frames: &Array2<f64>) -> Result<Array2<f64>> {
        self.check(frames.ncols())?;
        Ok(frames * &self.std + &self.mean)
    }
}

pub fn normalize(motion: &MotionSequence, stats: &FeatureStats) -> Result<MotionSequence> {
    Ok(motion.with_frames(stats.normalize_frames(&motion.frames)?))
}

pub fn denormalize(motion: &MotionSequence, stats: &FeatureStats) -> Result<MotionSequence> {
    Ok(motion.with_frames(stats.denormalize_frames(&motion.frames)?))
}

/// Wraps an angle into `[−π, π]` by subtracting a whole number of turns.
pub fn wrap_angle(angle: f64) -> f64 {
    let turns = (angle / (2.0 * PI)).round();
    let wrapped = angle - turns * 2.0 * PI;
    // Rounding at exactly half a turn can land a hair outside the interval.
    wrapped.clamp(-PI, PI)
}

/// Wraps every rotation feature into `[−π, π]`; root translation is untouched.
pub fn canonicalize_rotations(motion: &MotionSequence) -> Result<MotionSequence> {
    check_finite(&motion.frames)?;
    let mut frames = motion.frames.clone();
    for mut row in frames.rows_mut() {
        for v in row.iter_mut().skip(3) {
            *v = wrap_angle(*v);
        }
    }
    Ok(motion.with_frames(frames))
}

pub fn encode_motion(motion: &MotionSequence) -> Result<Vec<u8>> {
    motion.validate()?;
    let (n, d) = motion.frames.dim();
    let mut buf = Vec::with_capacity(HEADER_LEN + n * d * 8);
    buf.extend_from_slice(MOTION_MAGIC);
    buf.extend_from_slice(&MOTION_VERSION.to_le_bytes());
    buf.extend_from_slice(&motion.fps.to_le_bytes());
    buf.extend_from_slice(&(motion.joints as u32).to_le_bytes());
    buf.extend_from_slice(&(n as u32).to_le_bytes());
    buf.extend_from_slice(&(d as u32).to_le_bytes());
    for v in motion.frames.iter() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    Ok(buf)
}

pub fn decode_motion(bytes: &[u8]) -> Result<MotionSequence> {
    if bytes.len() < HEADER_LEN {
        return Err(MotionError::CorruptHeader(format!(
            "file is {} bytes, header needs {HEADER_LEN}",
            bytes.len()
        )));
    }
    if &bytes[0..4] != MOTION_MAGIC {
        return Err(MotionError::CorruptHeader("bad magic".into()));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != MOTION_VERSION {
        return Err(MotionError::UnsupportedVersion(version));
    }
    let fps = f64::from_le_bytes(bytes[6..14].try_into().unwrap());
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as usize;
    let (joints, n, d) = (u32_at(14), u32_at(18), u32_at(22));
    if joints < 2 || d != feature_dim(joints) || n == 0 {
        return Err(MotionError::CorruptHeader(format!(
            "inconsistent shape J={joints} N={n} D={d}"
        )));
    }
    let expected = n
        .checked_mul(d)
        .and_then(|v| v.checked_mul(8))
        .ok_or_else(|| MotionError::CorruptHeader("shape overflows".into()))?;
    let payload = &bytes[HEADER_LEN..];
    if payload.len() < expected {
        return Err(MotionError::Truncated {
            expected,
            found: payload.len(),
        });
    }
    if payload.len() > expected {
        return Err(MotionError::CorruptHeader(format!(
            "{} trailing bytes",
            payload.len() - expected
        )));
    }
    let data: Vec<f64> = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let frames = Array2::from_shape_vec((n, d), data).expect("shape checked");
    MotionSequence::new(frames, fps, joints)
}

pub fn write_motion(motion: &MotionSequence, path: &Path) -> Result<()> {
    let bytes = encode_motion(motion)?;
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn read_motion(path: &Path) -> Result<MotionSequence> {
    decode_motion(&fs::read(path)?)
}
