//! Postural Asymmetry Vector.
//!
//! Per frame, each of the eight symmetric joint pairs yields three metrics:
//! vertical deviation `|yL - yR|`, midline deviation of the pair midpoint
//! from the hip center, and the absolute tilt angle of the segment joining
//! the pair. Per sequence, every (pair, metric) series is IQR-filtered and
//! averaged over frames where the pair is valid. Dataset-level min-max
//! scaling, fitted on the training split only, maps the result into `[0, 1]`.

use std::f64::consts::FRAC_PI_2;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::normalize::hip_midpoint;
use crate::pose_io::{joint, PoseFrame};

pub const NUM_PAIRS: usize = 8;
pub const NUM_METRICS: usize = 3;
pub const PAV_LEN: usize = NUM_PAIRS * NUM_METRICS;

/// `(left, right)` COCO indices: eyes, ears, shoulders, elbows, wrists, hips, knees, ankles.
pub const SYMMETRIC_PAIRS: [(usize, usize); NUM_PAIRS] = [
    (joint::LEFT_EYE, joint::RIGHT_EYE),
    (joint::LEFT_EAR, joint::RIGHT_EAR),
    (joint::LEFT_SHOULDER, joint::RIGHT_SHOULDER),
    (joint::LEFT_ELBOW, joint::RIGHT_ELBOW),
    (joint::LEFT_WRIST, joint::RIGHT_WRIST),
    (joint::LEFT_HIP, joint::RIGHT_HIP),
    (joint::LEFT_KNEE, joint::RIGHT_KNEE),
    (joint::LEFT_ANKLE, joint::RIGHT_ANKLE),
];

pub const PAIR_NAMES: [&str; NUM_PAIRS] = [
    "eyes", "ears", "shoulders", "elbows", "wrists", "hips", "knees", "ankles",
];

pub const HIP_PAIR: usize = 5;
pub const SHOULDER_PAIR: usize = 2;

/// Column order of every P x M matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Metric {
    VerticalDeviation = 0,
    MidlineDeviation = 1,
    AngularDeviation = 2,
}

pub type PairMatrix = [[f64; NUM_METRICS]; NUM_PAIRS];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PavError {
    #[error("IQR filter needs at least one sample")]
    EmptySamples,
    #[error("min-max statistics need at least one sequence")]
    EmptyFitSet,
    #[error("PAV needs {PAV_LEN} values, got {0}")]
    BadLength(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameAsymmetry {
    pub values: PairMatrix,
    pub valid: [bool; NUM_PAIRS],
}

/// Metrics of one normalized frame.
pub fn frame_metrics(frame: &PoseFrame, c_min: f64) -> FrameAsymmetry {
    let kp = &frame.keypoints;
    let hips_valid = kp[joint::LEFT_HIP].is_valid(c_min) && kp[joint::RIGHT_HIP].is_valid(c_min);
    // zero after normalization; recomputed so the hip pair is exactly 0
    let midline = if hips_valid { hip_midpoint(frame).0 } else { 0.0 };
    let mut values = [[0.0; NUM_METRICS]; NUM_PAIRS];
    let mut valid = [false; NUM_PAIRS];
    for (p, &(l, r)) in SYMMETRIC_PAIRS.iter().enumerate() {
        let (kl, kr) = (kp[l], kp[r]);
        if !(kl.is_valid(c_min) && kr.is_valid(c_min)) {
            continue;
        }
        valid[p] = true;
        let dy = kl.y - kr.y;
        let dx = kl.x - kr.x;
        let angle = if dx == 0.0 {
            if dy == 0.0 {
                0.0
            } else {
                FRAC_PI_2
            }
        } else {
            (dy / dx).atan().abs()
        };
        values[p] = [dy.abs(), ((kl.x + kr.x) / 2.0 - midline).abs(), angle];
    }
    FrameAsymmetry { values, valid }
}

/// Linear-interpolation quantile of sorted data at position `q * (n - 1)`.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Keeps samples inside the Tukey fences `[Q1 - 1.5 IQR, Q3 + 1.5 IQR]`, preserving order.
pub fn iqr_filter(samples: &[f64]) -> Result<Vec<f64>, PavError> {
    if samples.is_empty() {
        return Err(PavError::EmptySamples);
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let q1 = quantile_sorted(&sorted, 0.25);
    let q3 = quantile_sorted(&sorted, 0.75);
    let iqr = q3 - q1;
    let (lo, hi) = (q1 - 1.5 * iqr, q3 + 1.5 * iqr);
    Ok(samples
        .iter()
        .copied()
        .filter(|&x| lo <= x && x <= hi)
        .collect())
}

/// Sequence-level PAV before dataset scaling.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawPav {
    pub values: PairMatrix,
    /// Pairs that were never valid; their entries are 0.
    pub missing: [bool; NUM_PAIRS],
}

impl RawPav {
    pub fn has_warnings(&self) -> bool {
        self.missing.iter().any(|&m| m)
    }
}

pub fn aggregate_sequence(frames: &[FrameAsymmetry]) -> RawPav {
    let mut values = [[0.0; NUM_METRICS]; NUM_PAIRS];
    let mut missing = [false; NUM_PAIRS];
    for p in 0..NUM_PAIRS {
        for m in 0..NUM_METRICS {
            let samples: Vec<f64> = frames
                .iter()
                .filter(|f| f.valid[p])
                .map(|f| f.values[p][m])
                .collect();
            match iqr_filter(&samples) {
                Ok(kept) => {
                    values[p][m] = kept.iter().sum::<f64>() / kept.len() as f64;
                }
                Err(_) => missing[p] = true,
            }
        }
        if missing[p] {
            log::warn!("pair `{}` has no valid frames; PAV entries set to 0", PAIR_NAMES[p]);
        }
    }
    RawPav { values, missing }
}

/// Raw PAV of a normalized frame sequence.
pub fn raw_pav(frames: &[PoseFrame], c_min: f64) -> RawPav {
    let per_frame: Vec<FrameAsymmetry> = frames.iter().map(|f| frame_metrics(f, c_min)).collect();
    aggregate_sequence(&per_frame)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MinMaxStats {
    pub min: PairMatrix,
    pub max: PairMatrix,
    pub fit_split: String,
}

pub fn fit_minmax(raw: &[RawPav], fit_split: &str) -> Result<MinMaxStats, PavError> {
    let first = raw.first().ok_or(PavError::EmptyFitSet)?;
    let mut min = first.values;
    let mut max = first.values;
    for r in &raw[1..] {
        for p in 0..NUM_PAIRS {
            for m in 0..NUM_METRICS {
                min[p][m] = min[p][m].min(r.values[p][m]);
                max[p][m] = max[p][m].max(r.values[p][m]);
            }
        }
    }
    Ok(MinMaxStats {
        min,
        max,
        fit_split: fit_split.to_string(),
    })
}

/// Normalized PAV; every entry in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Pav {
    pub values: PairMatrix,
}

impl Pav {
    /// Pair-major, metric-minor flattening.
    pub fn flatten(&self) -> Vec<f64> {
        self.values.iter().flatten().copied().collect()
    }

    pub fn from_flat(v: &[f64]) -> Result<Self, PavError> {
        if v.len() != PAV_LEN {
            return Err(PavError::BadLength(v.len()));
        }
        let mut values = [[0.0; NUM_METRICS]; NUM_PAIRS];
        for (i, x) in v.iter().enumerate() {
            values[i / NUM_METRICS][i % NUM_METRICS] = *x;
        }
        Ok(Self { values })
    }

    /// CSV with one row per pair and columns `pair,VD,MD,AD`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("pair,VD,MD,AD\n");
        for (p, row) in self.values.iter().enumerate() {
            out.push_str(&format!("{},{},{},{}\n", PAIR_NAMES[p], row[0], row[1], row[2]));
        }
        out
    }
}

pub fn apply_minmax(raw: &RawPav, stats: &MinMaxStats) -> Pav {
    let mut values = [[0.0; NUM_METRICS]; NUM_PAIRS];
    for p in 0..NUM_PAIRS {
        for m in 0..NUM_METRICS {
            let (lo, hi) = (stats.min[p][m], stats.max[p][m]);
            values[p][m] = if hi > lo {
                ((raw.values[p][m] - lo) / (hi - lo)).clamp(0.0, 1.0)
            } else {
                0.0
            };
        }
    }
    Pav { values }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pose_io::Keypoint;
    use proptest::prelude::*;

    fn frame_with(pairs: &[(usize, (f64, f64), (f64, f64))]) -> PoseFrame {
        let mut f = PoseFrame::default();
        f.keypoints.iter_mut().for_each(|k| k.c = 1.0);
        f.keypoints[joint::LEFT_HIP] = Keypoint::new(-10.0, 0.0, 1.0);
        f.keypoints[joint::RIGHT_HIP] = Keypoint::new(10.0, 0.0, 1.0);
        for &(p, l, r) in pairs {
            let (li, ri) = SYMMETRIC_PAIRS[p];
            f.keypoints[li] = Keypoint::new(l.0, l.1, 1.0);
            f.keypoints[ri] = Keypoint::new(r.0, r.1, 1.0);
        }
        f
    }

    #[test]
    fn shoulder_example() {
        let f = frame_with(&[(SHOULDER_PAIR, (-10.0, 50.0), (12.0, 46.0))]);
        let m = frame_metrics(&f, 0.3);
        let s = m.values[SHOULDER_PAIR];
        assert_eq!(s[0], 4.0);
        assert_eq!(s[1], 1.0);
        assert!((s[2] - (2.0f64 / 11.0).atan()).abs() < 1e-15);
    }

    #[test]
    fn hip_midline_deviation_is_zero() {
        let mut f = frame_with(&[]);
        f.keypoints[joint::LEFT_HIP] = Keypoint::new(-0.1, 0.3, 1.0);
        f.keypoints[joint::RIGHT_HIP] = Keypoint::new(0.7, -0.3, 1.0);
        assert_eq!(frame_metrics(&f, 0.3).values[HIP_PAIR][1], 0.0);
    }

    #[test]
    fn symmetric_pair_has_no_vertical_or_angular_deviation() {
        let f = frame_with(&[(1, (-7.0, -60.0), (7.0, -60.0))]);
        let m = frame_metrics(&f, 0.3).values[1];
        assert_eq!((m[0], m[2]), (0.0, 0.0));
    }

    #[test]
    fn vertical_alignment_is_right_angle_and_coincident_is_zero() {
        let f = frame_with(&[(3, (5.0, 1.0), (5.0, 9.0)), (4, (2.0, 2.0), (2.0, 2.0))]);
        let m = frame_metrics(&f, 0.3);
        assert_eq!(m.values[3][2], FRAC_PI_2);
        assert_eq!(m.values[4][2], 0.0);
    }

    #[test]
    fn low_confidence_pair_is_invalid() {
        let mut f = frame_with(&[]);
        f.keypoints[joint::LEFT_WRIST].c = 0.29;
        let m = frame_metrics(&f, 0.3);
        assert!(!m.valid[4]);
        assert!(m.valid[3]);
    }

    #[test]
    fn iqr_examples() {
        assert_eq!(iqr_filter(&[1.0, 2.0, 2.0, 3.0, 100.0]).unwrap(), vec![1.0, 2.0, 2.0, 3.0]);
        assert_eq!(iqr_filter(&[5.0, 5.0, 5.0]).unwrap(), vec![5.0; 3]);
        assert_eq!(iqr_filter(&[0.0, 0.0, 0.0, 1000.0]).unwrap(), vec![0.0; 3]);
        assert_eq!(iqr_filter(&[]), Err(PavError::EmptySamples));
    }

    #[test]
    fn missing_pair_yields_zero_and_warning() {
        let mut f = frame_with(&[(0, (-3.0, -70.0), (3.0, -72.0))]);
        f.keypoints[joint::LEFT_EAR].c = 0.0;
        let raw = raw_pav(&[f, f], 0.3);
        assert!(raw.missing[1]);
        assert_eq!(raw.values[1], [0.0; 3]);
        assert_eq!(raw.values[0][0], 2.0);
    }

    #[test]
    fn identical_frames_aggregate_to_frame() {
        let f = frame_with(&[(2, (-10.0, 50.0), (12.0, 46.0))]);
        let single = frame_metrics(&f, 0.3);
        let raw = aggregate_sequence(&vec![single.clone(); 7]);
        for p in 0..NUM_PAIRS {
            for m in 0..NUM_METRICS {
                assert!((raw.values[p][m] - single.values[p][m]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn minmax_examples() {
        let mk = |v: f64| RawPav {
            values: [[v; NUM_METRICS]; NUM_PAIRS],
            missing: [false; NUM_PAIRS],
        };
        let stats = fit_minmax(&[mk(0.0), mk(2.0), mk(4.0)], "train").unwrap();
        assert_eq!(apply_minmax(&mk(3.0), &stats).values[0][0], 0.75);
        assert_eq!(apply_minmax(&mk(0.0), &stats).values[3][1], 0.0);
        assert_eq!(apply_minmax(&mk(4.0), &stats).values[3][1], 1.0);
        assert_eq!(apply_minmax(&mk(9.0), &stats).values[3][1], 1.0);
        assert_eq!(apply_minmax(&mk(-9.0), &stats).values[3][1], 0.0);
        let flat = fit_minmax(&[mk(1.0), mk(1.0)], "train").unwrap();
        assert_eq!(apply_minmax(&mk(5.0), &flat).values[0][0], 0.0);
        assert_eq!(fit_minmax(&[], "train"), Err(PavError::EmptyFitSet));
    }

    #[test]
    fn flatten_is_pair_major() {
        let mut values = [[0.0; NUM_METRICS]; NUM_PAIRS];
        values[1][2] = 7.0;
        let flat = Pav { values }.flatten();
        assert_eq!(flat[1 * 3 + 2], 7.0);
        assert_eq!(Pav::from_flat(&flat).unwrap().values, values);
    }

    proptest! {
        #[test]
        fn aggregation_is_permutation_invariant(
            vals in proptest::collection::vec(0.0f64..50.0, 3..30),
            seed in any::<u64>(),
        ) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let frames: Vec<FrameAsymmetry> = vals
                .iter()
                .map(|&v| FrameAsymmetry { values: [[v, v * 0.5, v.sin().abs()]; NUM_PAIRS], valid: [true; NUM_PAIRS] })
                .collect();
            let mut shuffled = frames.clone();
            shuffled.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let a = aggregate_sequence(&frames);
            let b = aggregate_sequence(&shuffled);
            for p in 0..NUM_PAIRS {
                for m in 0..NUM_METRICS {
                    prop_assert!((a.values[p][m] - b.values[p][m]).abs() < 1e-12);
                }
            }
        }

        #[test]
        fn metrics_are_mirror_invariant_and_bounded(
            coords in proptest::collection::vec(-100.0f64..100.0, 34),
        ) {
            let mut f = PoseFrame::default();
            for k in 0..17 {
                f.keypoints[k] = Keypoint::new(coords[2 * k], coords[2 * k + 1], 1.0);
            }
            let a = frame_metrics(&f, 0.3);
            let b = frame_metrics(&f.mirrored(), 0.3);
            for p in 0..NUM_PAIRS {
                prop_assert!(a.values[p][0] >= 0.0 && a.values[p][1] >= 0.0);
                prop_assert!((0.0..=FRAC_PI_2).contains(&a.values[p][2]));
                for m in 0..NUM_METRICS {
                    prop_assert!((a.values[p][m] - b.values[p][m]).abs() < 1e-9);
                }
            }
        }
    }
}
