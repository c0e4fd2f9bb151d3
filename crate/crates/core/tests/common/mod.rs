#![allow(dead_code)]

use drf_core::pose_io::{joint, Keypoint, PoseFrame, PoseSequence, ScreeningLabel, NUM_KEYPOINTS};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// A frame in normalized units; about a fifth of the joints fall below c_min = 0.3.
pub fn normalized_frame(rng: &mut ChaCha8Rng) -> PoseFrame {
    PoseFrame::new(std::array::from_fn(|_| {
        let c = if rng.random_bool(0.2) {
            rng.random_range(0.0..0.3)
        } else {
            rng.random_range(0.3..=1.0)
        };
        Keypoint::new(rng.random_range(-50.0..50.0), rng.random_range(-70.0..70.0), c)
    }))
}

/// A raw pixel-space frame: hips always confident, body spanning roughly
/// `height` pixels around `origin`, optional wild outliers.
pub fn raw_frame(rng: &mut ChaCha8Rng, origin: (f64, f64), height: f64) -> PoseFrame {
    let mut kp: [Keypoint; NUM_KEYPOINTS] = std::array::from_fn(|_| {
        let c = if rng.random_bool(0.15) {
            rng.random_range(0.0..0.3)
        } else {
            rng.random_range(0.3..=1.0)
        };
        let x = origin.0 + rng.random_range(-0.25..0.25) * height;
        let y = origin.1 + rng.random_range(-0.55..0.45) * height;
        Keypoint::new(x, y, c)
    });
    for k in [joint::LEFT_HIP, joint::RIGHT_HIP] {
        kp[k].c = rng.random_range(0.3..=1.0);
    }
    if rng.random_bool(0.05) {
        let k = rng.random_range(0..NUM_KEYPOINTS);
        kp[k].x += rng.random_range(-3.0..3.0) * height;
    }
    PoseFrame::new(kp)
}

pub fn raw_sequence(rng: &mut ChaCha8Rng, id: &str) -> PoseSequence {
    let n = rng.random_range(4..40);
    let origin = (rng.random_range(100.0..500.0), rng.random_range(200.0..400.0));
    let height = rng.random_range(120.0..300.0);
    let frames = (0..n).map(|_| raw_frame(rng, origin, height)).collect();
    let label = ScreeningLabel::ALL[rng.random_range(0..3)];
    PoseSequence::new(id, label, frames).unwrap()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
