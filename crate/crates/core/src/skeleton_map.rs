//! Two-channel skeleton maps: a Gaussian keypoint heatmap `J` and a limb
//! heatmap `L` built from point-to-segment distances.
//!
//! Both channels are raw sums over joints/limbs, evaluated at pixel centers,
//! weighted by confidence (`min` of the two endpoints for limbs). Joints below
//! the confidence threshold contribute nothing.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::normalize::{NormalizedSequence, TARGET_HEIGHT};
use crate::pose_io::{PoseFrame, DEFAULT_MIN_CONFIDENCE, NUM_KEYPOINTS};
use crate::tensor::Tensor;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RenderError {
    #[error("canvas must be at least 8x8, got {0}x{1}")]
    CanvasTooSmall(usize, usize),
    #[error("sigma must be positive, got {0}")]
    BadSigma(f64),
    #[error("limb ({0}, {1}) is not a pair of distinct joints in 0..17")]
    BadLimb(usize, usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LimbSegment {
    pub from: usize,
    pub to: usize,
}

impl LimbSegment {
    pub fn new(from: usize, to: usize) -> Result<Self, RenderError> {
        if from == to || from >= NUM_KEYPOINTS || to >= NUM_KEYPOINTS {
            return Err(RenderError::BadLimb(from, to));
        }
        Ok(Self { from, to })
    }
}

/// The standard COCO drawing skeleton.
pub const COCO_LIMBS: [(usize, usize); 16] = [
    (5, 6),
    (5, 7),
    (7, 9),
    (6, 8),
    (8, 10),
    (11, 12),
    (5, 11),
    (6, 12),
    (11, 13),
    (13, 15),
    (12, 14),
    (14, 16),
    (0, 1),
    (0, 2),
    (1, 3),
    (2, 4),
];

pub fn coco_limbs() -> Vec<LimbSegment> {
    COCO_LIMBS
        .iter()
        .map(|&(a, b)| LimbSegment { from: a, to: b })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RenderConfig {
    pub width: usize,
    pub height: usize,
    /// Gaussian width in canvas pixels.
    pub sigma: f64,
    /// Fraction of the canvas height spanned by the normalized body height.
    pub span_fraction: f64,
    /// Canvas row of the hip midpoint, as a fraction of `height - 1`.
    pub origin_row_fraction: f64,
    pub c_min: f64,
    pub limbs: Vec<LimbSegment>,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            width: 64,
            height: 64,
            sigma: 2.0,
            span_fraction: 0.78,
            origin_row_fraction: 0.5,
            c_min: DEFAULT_MIN_CONFIDENCE,
            limbs: coco_limbs(),
        }
    }
}

impl RenderConfig {
    pub fn validate(&self) -> Result<(), RenderError> {
        if self.width < 8 || self.height < 8 {
            return Err(RenderError::CanvasTooSmall(self.width, self.height));
        }
        if !(self.sigma > 0.0) {
            return Err(RenderError::BadSigma(self.sigma));
        }
        for l in &self.limbs {
            LimbSegment::new(l.from, l.to)?;
        }
        Ok(())
    }

    /// Canvas pixels per normalized unit.
    pub fn pixels_per_unit(&self) -> f64 {
        self.span_fraction * self.height as f64 / TARGET_HEIGHT
    }

    /// Maps normalized coordinates to continuous canvas coordinates (pixel
    /// centers at integers). Column `(width - 1) / 2` is the body midline, so
    /// reflecting `x` mirrors the canvas exactly.
    pub fn to_canvas(&self, x: f64, y: f64) -> (f64, f64) {
        let k = self.pixels_per_unit();
        let cx = (self.width as f64 - 1.0) / 2.0;
        let cy = self.origin_row_fraction * (self.height as f64 - 1.0);
        (cx + k * x, cy + k * y)
    }
}

/// Row-major `height x width` grid; `at(i, j)` is column `i`, row `j`.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl Grid {
    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0.0; width * height],
        }
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[j * self.width + i]
    }

    pub fn max(&self) -> f64 {
        self.data.iter().cloned().fold(0.0, f64::max)
    }

    /// Horizontally mirrored copy.
    pub fn mirrored(&self) -> Self {
        let mut out = self.clone();
        for j in 0..self.height {
            for i in 0..self.width {
                out.data[j * self.width + i] = self.at(self.width - 1 - i, j);
            }
        }
        out
    }

    /// ASCII PGM (P2); values scaled by `255 / max` and rounded half-up.
    pub fn to_pgm(&self) -> String {
        let max = self.data.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let scale = if max > 0.0 { 255.0 / max } else { 0.0 };
        let mut out = format!("P2\n{} {}\n255\n", self.width, self.height);
        for row in self.data.chunks(self.width) {
            let line: Vec<String> = row
                .iter()
                .map(|&v| ((v.max(0.0) * scale + 0.5).floor() as u32).min(255).to_string())
                .collect();
            let _ = writeln!(out, "{}", line.join(" "));
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SkeletonMap {
    pub keypoints: Grid,
    pub limbs: Grid,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SkeletonMapSequence {
    pub maps: Vec<SkeletonMap>,
}

impl SkeletonMapSequence {
    pub fn len(&self) -> usize {
        self.maps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.maps.is_empty()
    }

    /// Stacks frames into an `[N, 2, height, width]` tensor (channel 0 = J, 1 = L).
    pub fn to_tensor(&self) -> Tensor {
        let (w, h) = self
            .maps
            .first()
            .map(|m| (m.keypoints.width, m.keypoints.height))
            .unwrap_or((0, 0));
        let mut data = Vec::with_capacity(self.maps.len() * 2 * w * h);
        for m in &self.maps {
            data.extend_from_slice(&m.keypoints.data);
            data.extend_from_slice(&m.limbs.data);
        }
        Tensor::new(vec![self.maps.len(), 2, h, w], data).expect("consistent canvas")
    }
}

fn gaussian_profile(len: usize, center: f64, inv_two_sigma_sq: f64) -> Vec<f64> {
    (0..len)
        .map(|p| {
            let d = p as f64 - center;
            (-d * d * inv_two_sigma_sq).exp()
        })
        .collect()
}

pub fn render_keypoint_map(frame: &PoseFrame, cfg: &RenderConfig) -> Grid {
    let mut grid = Grid::zeros(cfg.width, cfg.height);
    let inv = 1.0 / (2.0 * cfg.sigma * cfg.sigma);
    for kp in frame.keypoints.iter().filter(|k| k.is_valid(cfg.c_min)) {
        let (x, y) = cfg.to_canvas(kp.x, kp.y);
        // exp(-(dx² + dy²)/2σ²) factors into a column and a row profile
        let gx = gaussian_profile(cfg.width, x, inv);
        let gy = gaussian_profile(cfg.height, y, inv);
        for (j, &wy) in gy.iter().enumerate() {
            let wy = wy * kp.c;
            let row = &mut grid.data[j * cfg.width..][..cfg.width];
            for (cell, &wx) in row.iter_mut().zip(&gx) {
                *cell += wx * wy;
            }
        }
    }
    grid
}

/// Squared distance from `p` to the segment `a`–`b`; a zero-length segment is a point.
pub fn segment_distance_sq(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len_sq = dx * dx + dy * dy;
    let t = if len_sq > 0.0 {
        (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len_sq).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let (qx, qy) = (a.0 + t * dx - p.0, a.1 + t * dy - p.1);
    qx * qx + qy * qy
}

pub fn render_limb_map(frame: &PoseFrame, cfg: &RenderConfig, limbs: &[LimbSegment]) -> Grid {
    let mut grid = Grid::zeros(cfg.width, cfg.height);
    let inv = 1.0 / (2.0 * cfg.sigma * cfg.sigma);
    for limb in limbs {
        let (ka, kb) = (frame.keypoints[limb.from], frame.keypoints[limb.to]);
        if !(ka.is_valid(cfg.c_min) && kb.is_valid(cfg.c_min)) {
            continue;
        }
        let weight = ka.c.min(kb.c);
        let a = cfg.to_canvas(ka.x, ka.y);
        let b = cfg.to_canvas(kb.x, kb.y);
        for j in 0..cfg.height {
            for i in 0..cfg.width {
                let d2 = segment_distance_sq((i as f64, j as f64), a, b);
                grid.data[j * cfg.width + i] += (-d2 * inv).exp() * weight;
            }
        }
    }
    grid
}

pub fn render_frame(frame: &PoseFrame, cfg: &RenderConfig) -> SkeletonMap {
    SkeletonMap {
        keypoints: render_keypoint_map(frame, cfg),
        limbs: render_limb_map(frame, cfg, &cfg.limbs),
    }
}

pub fn render_sequence(seq: &NormalizedSequence, cfg: &RenderConfig) -> SkeletonMapSequence {
    SkeletonMapSequence {
        maps: seq.frames.iter().map(|f| render_frame(f, cfg)).collect(),
    }
}

/// Renders selected frames straight into an `[N, 2, height, width]` tensor.
pub fn render_frames_tensor(frames: &[PoseFrame], cfg: &RenderConfig) -> Tensor {
    let maps = frames.iter().map(|f| render_frame(f, cfg)).collect();
    SkeletonMapSequence { maps }.to_tensor()
}
