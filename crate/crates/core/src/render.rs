//! Stick-figure rendering of motions to PNG, front view (x right, y up).

use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use imageproc::drawing::{draw_filled_circle_mut, draw_line_segment_mut};
use thiserror::Error;

use crate::motion::{MotionSequence, Skeleton};

#[derive(Debug, Error)]
pub enum RenderError {
    #[error("motion has {found} features, skeleton needs {expected}")]
    Dimension { expected: usize, found: usize },
    #[error("nothing to render")]
    Empty,
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("image: {0}")]
    Image(#[from] image::ImageError),
}

pub type Result<T> = std::result::Result<T, RenderError>;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RenderOptions {
    pub width: u32,
    pub height: u32,
    /// Render every `stride`-th frame.
    pub stride: usize,
    pub margin: f64,
}

impl Default for RenderOptions {
    fn default() -> Self {
        Self {
            width: 256,
            height: 256,
            stride: 1,
            margin: 0.1,
        }
    }
}

/// Fixed screen mapping shared by every frame of one sequence.
struct View {
    min: [f64; 2],
    scale: f64,
    offset: [f64; 2],
    height: f64,
}

impl View {
    fn fit(points: &[[f64; 3]], opts: &RenderOptions) -> Self {
        let mut min = [f64::INFINITY; 2];
        let mut max = [f64::NEG_INFINITY; 2];
        for p in points {
            for k in 0..2 {
                min[k] = min[k].min(p[k]);
                max[k] = max[k].max(p[k]);
            }
        }
        let (w, h) = (opts.width as f64, opts.height as f64);
        let usable = (1.0 - 2.0 * opts.margin).max(0.1);
        let span_x = (max[0] - min[0]).max(1e-6);
        let span_y = (max[1] - min[1]).max(1e-6);
        let scale = (w * usable / span_x).min(h * usable / span_y);
        Self {
            min,
            scale,
            offset: [(w - span_x * scale) / 2.0, (h - span_y * scale) / 2.0],
            height: h,
        }
    }

    fn project(&self, p: &[f64; 3]) -> (f32, f32) {
        let x = self.offset[0] + (p[0] - self.min[0]) * self.scale;
        let y = self.height - (self.offset[1] + (p[1] - self.min[1]) * self.scale);
        (x as f32, y as f32)
    }
}

fn poses(motion: &MotionSequence, skeleton: &Skeleton) -> Result<Vec<Vec<[f64; 3]>>> {
    if motion.dim() != skeleton.feature_dim() {
        return Err(RenderError::Dimension {
            expected: skeleton.feature_dim(),
            found: motion.dim(),
        });
    }
    if motion.is_empty() {
        return Err(RenderError::Empty);
    }
    Ok(motion
        .frames
        .rows()
        .into_iter()
        .map(|r| skeleton.forward_kinematics(&r.to_vec()))
        .collect())
}

fn draw_pose(img: &mut RgbImage, view: &View, skeleton: &Skeleton, pose: &[[f64; 3]], color: Rgb<u8>) {
    for (j, parent) in skeleton.parent.iter().enumerate() {
        if let Some(p) = parent {
            draw_line_segment_mut(img, view.project(&pose[*p]), view.project(&pose[j]), color);
        }
    }
    let (hx, hy) = view.project(&pose[skeleton.joint_index("head").unwrap_or(0)]);
    draw_filled_circle_mut(img, (hx as i32, hy as i32), 3, color);
}

/// Red at the first frame to green at the last.
fn time_color(i: usize, n: usize) -> Rgb<u8> {
    let t = if n <= 1 { 0.0 } else { i as f64 / (n - 1) as f64 };
    Rgb([(220.0 * (1.0 - t)) as u8, (180.0 * t) as u8, 40])
}

/// One PNG per rendered frame, `frame_0000.png` onwards; returns the paths.
pub fn render_frames(
    motion: &MotionSequence,
    skeleton: &Skeleton,
    dir: &Path,
    opts: &RenderOptions,
) -> Result<Vec<PathBuf>> {
    let poses = poses(motion, skeleton)?;
    let all: Vec<[f64; 3]> = poses.iter().flatten().copied().collect();
    let view = View::fit(&all, opts);
    std::fs::create_dir_all(dir)?;
    let mut paths = Vec::new();
    let n = poses.len();
    for (k, i) in (0..n).step_by(opts.stride.max(1)).enumerate() {
        let mut img = RgbImage::from_pixel(opts.width, opts.height, Rgb([255, 255, 255]));
        draw_pose(&mut img, &view, skeleton, &poses[i], time_color(i, n));
        let path = dir.join(format!("frame_{k:04}.png"));
        img.save(&path)?;
        paths.push(path);
    }
    Ok(paths)
}

/// Every `stride`-th pose overlaid in one image, colored by time.
pub fn render_overlay(motion: &MotionSequence, skeleton: &Skeleton, path: &Path, opts: &RenderOptions) -> Result<()> {
    let poses = poses(motion, skeleton)?;
    let all: Vec<[f64; 3]> = poses.iter().flatten().copied().collect();
    let view = View::fit(&all, opts);
    let mut img = RgbImage::from_pixel(opts.width, opts.height, Rgb([255, 255, 255]));
    let n = poses.len();
    for i in (0..n).step_by(opts.stride.max(1)) {
        draw_pose(&mut img, &view, skeleton, &poses[i], time_color(i, n));
    }
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    img.save(path)?;
    Ok(())
}
