//! Pelvis alignment and height normalization.
//!
//! Each frame is translated so the hip midpoint sits at the origin. The whole
//! sequence is then scaled by one factor so that its height, the median over
//! frames of the vertical extent of valid keypoints, equals
//! [`TARGET_HEIGHT`].

use thiserror::Error;

use crate::pose_io::{joint, Keypoint, PoseFrame, PoseSequence, ScreeningLabel};

pub const TARGET_HEIGHT: f64 = 128.0;
const MIN_HEIGHT: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NormalizationError {
    #[error("frame {0}: both hip keypoints must be valid")]
    MissingHip(usize),
    #[error("degenerate pose: sequence height {0} is too small to normalize")]
    DegenerateHeight(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedSequence {
    pub subject_id: String,
    pub label: ScreeningLabel,
    pub frames: Vec<PoseFrame>,
    /// Multiplicative factor applied after translation.
    pub scale: f64,
    /// Translation `(dx, dy)` applied to each frame, in input pixels.
    pub offsets: Vec<(f64, f64)>,
}

impl NormalizedSequence {
    pub fn num_frames(&self) -> usize {
        self.frames.len()
    }

    /// Same sequence with a subset of frames, in the given order.
    pub fn select_frames(&self, indices: &[usize]) -> Self {
        Self {
            subject_id: self.subject_id.clone(),
            label: self.label,
            frames: indices.iter().map(|&i| self.frames[i]).collect(),
            scale: self.scale,
            offsets: indices.iter().map(|&i| self.offsets[i]).collect(),
        }
    }
}

pub fn hip_midpoint(frame: &PoseFrame) -> (f64, f64) {
    let l = frame.keypoints[joint::LEFT_HIP];
    let r = frame.keypoints[joint::RIGHT_HIP];
    ((l.x + r.x) / 2.0, (l.y + r.y) / 2.0)
}

/// Vertical extent of the keypoints passing `c_min`.
pub fn vertical_extent(frame: &PoseFrame, c_min: f64) -> f64 {
    let (lo, hi) = frame
        .keypoints
        .iter()
        .filter(|k| k.is_valid(c_min))
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), k| {
            (lo.min(k.y), hi.max(k.y))
        });
    if hi >= lo {
        hi - lo
    } else {
        0.0
    }
}

pub(crate) fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        (values[n / 2 - 1] + values[n / 2]) / 2.0
    }
}

pub fn normalize_sequence(
    seq: &PoseSequence,
    c_min: f64,
) -> Result<NormalizedSequence, NormalizationError> {
    let mut offsets = Vec::with_capacity(seq.num_frames());
    let mut translated = Vec::with_capacity(seq.num_frames());
    for (i, frame) in seq.frames().iter().enumerate() {
        let kp = &frame.keypoints;
        if !(kp[joint::LEFT_HIP].is_valid(c_min) && kp[joint::RIGHT_HIP].is_valid(c_min)) {
            return Err(NormalizationError::MissingHip(i));
        }
        let (mx, my) = hip_midpoint(frame);
        offsets.push((-mx, -my));
        translated.push(PoseFrame::new(
            kp.map(|k| Keypoint::new(k.x - mx, k.y - my, k.c)),
        ));
    }
    let mut extents: Vec<f64> = translated
        .iter()
        .map(|f| vertical_extent(f, c_min))
        .collect();
    let height = median(&mut extents);
    if !(height > MIN_HEIGHT) {
        return Err(NormalizationError::DegenerateHeight(height));
    }
    let scale = TARGET_HEIGHT / height;
    let frames = translated
        .into_iter()
        .map(|f| PoseFrame::new(f.keypoints.map(|k| Keypoint::new(k.x * scale, k.y * scale, k.c))))
        .collect();
    Ok(NormalizedSequence {
        subject_id: seq.subject_id.clone(),
        label: seq.label,
        frames,
        scale,
        offsets,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pose_io::NUM_KEYPOINTS;

    fn frame_with(hips: [(f64, f64); 2], top: f64, bottom: f64) -> PoseFrame {
        let mut kp = [Keypoint::new(0.0, (top + bottom) / 2.0, 1.0); NUM_KEYPOINTS];
        kp[joint::NOSE].y = top;
        kp[joint::LEFT_ANKLE].y = bottom;
        kp[joint::LEFT_HIP] = Keypoint::new(hips[0].0, hips[0].1, 1.0);
        kp[joint::RIGHT_HIP] = Keypoint::new(hips[1].0, hips[1].1, 1.0);
        PoseFrame::new(kp)
    }

    #[test]
    fn hip_midpoint_moves_to_origin() {
        let f = frame_with([(10.0, 20.0), (30.0, 20.0)], -100.0, 156.0);
        let seq = PoseSequence::new("a", ScreeningLabel::Negative, vec![f]).unwrap();
        let n = normalize_sequence(&seq, 0.3).unwrap();
        let kp = n.frames[0].keypoints;
        assert_eq!(hip_midpoint(&n.frames[0]), (0.0, 0.0));
        assert_eq!(kp[joint::LEFT_HIP].x, -10.0 * n.scale);
        assert_eq!(kp[joint::LEFT_HIP].y, 0.0);
        assert_eq!(n.offsets[0], (-20.0, -20.0));
    }

    #[test]
    fn extent_of_256_gives_half_scale() {
        let frames = (0..5)
            .map(|i| frame_with([(-9.0, 0.0), (9.0, 0.0)], -120.0 + i as f64, 136.0 + i as f64))
            .collect();
        let seq = PoseSequence::new("a", ScreeningLabel::Negative, frames).unwrap();
        let n = normalize_sequence(&seq, 0.3).unwrap();
        assert_eq!(n.scale, 0.5);
    }

    #[test]
    fn missing_hip_names_frame() {
        let mut frames = vec![frame_with([(-9.0, 0.0), (9.0, 0.0)], -100.0, 100.0); 3];
        frames[2].keypoints[joint::RIGHT_HIP].c = 0.1;
        let seq = PoseSequence::new("a", ScreeningLabel::Negative, frames).unwrap();
        assert_eq!(
            normalize_sequence(&seq, 0.3),
            Err(NormalizationError::MissingHip(2))
        );
    }

    #[test]
    fn collapsed_pose_is_degenerate() {
        let f = PoseFrame::new([Keypoint::new(1.0, 1.0, 1.0); NUM_KEYPOINTS]);
        let seq = PoseSequence::new("a", ScreeningLabel::Negative, vec![f]).unwrap();
        assert!(matches!(
            normalize_sequence(&seq, 0.3),
            Err(NormalizationError::DegenerateHeight(_))
        ));
    }

    #[test]
    fn median_even_and_odd() {
        assert_eq!(median(&mut [3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&mut [4.0, 1.0, 2.0, 3.0]), 2.5);
    }
}
