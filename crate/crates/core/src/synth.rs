//! Deterministic synthetic walking sequences with injectable asymmetries.
//!
//! A fixed frontal skeleton gets symmetric sinusoidal motion (vertical bob,
//! lateral sway, arm swing, knee lift), so every frame of an unperturbed
//! sequence is mirror-symmetric. Asymmetries are constant offsets on one
//! side of the body, which keeps the expected asymmetry metrics analytically
//! checkable after normalization.

use std::f64::consts::TAU;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::pose_io::{joint, Keypoint, PoseFrame, PoseSequence, ScreeningLabel, NUM_KEYPOINTS};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SynthError {
    #[error("{0} must be non-negative and finite")]
    Negative(&'static str),
    #[error("need at least one frame")]
    NoFrames,
    #[error("class ranges for {0} overlap or are out of order (negative < neutral < positive required)")]
    OverlappingRanges(&'static str),
    #[error("no asymmetry parameter separates the three classes")]
    NoSeparatingParameter,
    #[error("invalid range [{0}, {1}]")]
    BadRange(f64, f64),
    #[error("test fraction must lie in [0, 1), got {0}")]
    BadFraction(f64),
}

/// Joint heights above the ground and half-widths, as fractions of stature.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SkeletonProportions {
    pub nose: f64,
    pub eye: f64,
    pub ear: f64,
    pub shoulder: f64,
    pub elbow: f64,
    pub wrist: f64,
    pub hip: f64,
    pub knee: f64,
    pub ankle: f64,
    pub eye_half_width: f64,
    pub ear_half_width: f64,
    pub shoulder_half_width: f64,
    pub elbow_half_width: f64,
    pub wrist_half_width: f64,
    pub hip_half_width: f64,
    pub knee_half_width: f64,
    pub ankle_half_width: f64,
}

impl Default for SkeletonProportions {
    fn default() -> Self {
        Self {
            nose: 0.92,
            eye: 0.94,
            ear: 0.93,
            shoulder: 0.81,
            elbow: 0.63,
            wrist: 0.47,
            hip: 0.52,
            knee: 0.28,
            ankle: 0.04,
            eye_half_width: 0.03,
            ear_half_width: 0.06,
            shoulder_half_width: 0.13,
            elbow_half_width: 0.15,
            wrist_half_width: 0.16,
            hip_half_width: 0.09,
            knee_half_width: 0.09,
            ankle_half_width: 0.085,
        }
    }
}

/// Constant one-sided postural offsets, in input pixels (rotation in radians).
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct Asymmetry {
    /// Lowers one shoulder together with its arm.
    pub shoulder_drop: f64,
    /// Raises one hip (and half as much its knee).
    pub pelvic_tilt: f64,
    /// Shifts the upper body sideways.
    pub trunk_drift: f64,
    /// Tilts the eye, ear and shoulder segments about their midpoints.
    pub rotation: f64,
}

impl Asymmetry {
    fn validate(&self) -> Result<(), SynthError> {
        for (name, v) in [
            ("shoulder_drop", self.shoulder_drop),
            ("pelvic_tilt", self.pelvic_tilt),
            ("trunk_drift", self.trunk_drift),
            ("rotation", self.rotation),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(SynthError::Negative(name));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GaitParams {
    pub frames: usize,
    /// Gait cycles over the whole sequence.
    pub stride_cycles: f64,
    /// Body height in pixels.
    pub stature: f64,
    /// Image position of the point between the feet on the ground.
    pub origin: (f64, f64),
    pub proportions: SkeletonProportions,
    pub bob: f64,
    pub sway: f64,
    pub arm_swing: f64,
    pub knee_lift: f64,
    /// Standard deviation of per-keypoint Gaussian jitter, in pixels.
    pub noise_sigma: f64,
    pub asymmetry: Asymmetry,
    /// Side that carries the asymmetry.
    pub affected_left: bool,
    /// Draw confidences uniformly from `[0.5, 1]` instead of fixing them at 1.
    pub random_confidence: bool,
    pub seed: u64,
}

impl Default for GaitParams {
    fn default() -> Self {
        Self {
            frames: 30,
            stride_cycles: 1.0,
            stature: 200.0,
            origin: (320.0, 440.0),
            proportions: SkeletonProportions::default(),
            bob: 0.01,
            sway: 0.01,
            arm_swing: 0.03,
            knee_lift: 0.03,
            noise_sigma: 0.0,
            asymmetry: Asymmetry::default(),
            affected_left: true,
            random_confidence: false,
            seed: 0,
        }
    }
}

const LEFT: f64 = -1.0;
const RIGHT: f64 = 1.0;

fn side_of(k: usize) -> f64 {
    match k {
        0 => 0.0,
        k if k % 2 == 1 => LEFT,
        _ => RIGHT,
    }
}

fn is_upper_body(k: usize) -> bool {
    k <= joint::RIGHT_WRIST
}

pub fn generate(params: &GaitParams, subject_id: &str, label: ScreeningLabel) -> Result<PoseSequence, SynthError> {
    if params.frames == 0 {
        return Err(SynthError::NoFrames);
    }
    params.asymmetry.validate()?;
    for (name, v) in [
        ("noise_sigma", params.noise_sigma),
        ("stature", params.stature),
        ("stride_cycles", params.stride_cycles),
    ] {
        if !(v >= 0.0 && v.is_finite()) {
            return Err(SynthError::Negative(name));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let noise = Normal::new(0.0, params.noise_sigma).expect("sigma validated");
    let phase0 = rng.random::<f64>() * TAU;
    let p = &params.proportions;
    let s = params.stature;
    let (ox, ground) = params.origin;
    let a = params.asymmetry;
    let affected = if params.affected_left { LEFT } else { RIGHT };

    // (height, half-width) per joint
    let layout: [(f64, f64); NUM_KEYPOINTS] = std::array::from_fn(|k| match k {
        0 => (p.nose, 0.0),
        1 | 2 => (p.eye, p.eye_half_width),
        3 | 4 => (p.ear, p.ear_half_width),
        5 | 6 => (p.shoulder, p.shoulder_half_width),
        7 | 8 => (p.elbow, p.elbow_half_width),
        9 | 10 => (p.wrist, p.wrist_half_width),
        11 | 12 => (p.hip, p.hip_half_width),
        13 | 14 => (p.knee, p.knee_half_width),
        _ => (p.ankle, p.ankle_half_width),
    });

    let mut frames = Vec::with_capacity(params.frames);
    for t in 0..params.frames {
        let phi = phase0 + TAU * params.stride_cycles * t as f64 / params.frames as f64;
        let bob = params.bob * s * (2.0 * phi).sin();
        let sway = params.sway * s * phi.sin();
        let arm = params.arm_swing * s * phi.sin();
        let lift = params.knee_lift * s * phi.sin().abs();

        let mut pts: [(f64, f64); NUM_KEYPOINTS] = std::array::from_fn(|k| {
            let (h, w) = layout[k];
            let side = side_of(k);
            let mut x = ox + sway + side * w * s;
            let mut y = ground - h * s + bob;
            match k {
                7 | 8 => x += side * arm,
                9 | 10 => x += side * 1.5 * arm,
                13 | 14 => y -= lift,
                15 | 16 => y -= 0.5 * lift,
                _ => {}
            }
            (x, y)
        });

        if a.rotation > 0.0 {
            let (sin, cos) = (affected * a.rotation).sin_cos();
            for (l, r) in [(1, 2), (3, 4), (5, 6)] {
                let (mx, my) = ((pts[l].0 + pts[r].0) / 2.0, (pts[l].1 + pts[r].1) / 2.0);
                for k in [l, r] {
                    let (dx, dy) = (pts[k].0 - mx, pts[k].1 - my);
                    pts[k] = (mx + cos * dx - sin * dy, my + sin * dx + cos * dy);
                }
            }
        }
        let pick = |left: usize| if affected == LEFT { left } else { left + 1 };
        for k in [pick(5), pick(7), pick(9)] {
            pts[k].1 += a.shoulder_drop;
        }
        pts[pick(11)].1 -= a.pelvic_tilt;
        pts[pick(13)].1 -= 0.5 * a.pelvic_tilt;
        for (k, pt) in pts.iter_mut().enumerate() {
            if is_upper_body(k) {
                pt.0 += affected * a.trunk_drift;
            }
        }

        let kps = std::array::from_fn(|k| {
            let (mut x, mut y) = pts[k];
            if params.noise_sigma > 0.0 {
                x += noise.sample(&mut rng);
                y += noise.sample(&mut rng);
            }
            let c = if params.random_confidence {
                rng.random_range(0.5..=1.0)
            } else {
                1.0
            };
            Keypoint::new(x, y, c)
        });
        frames.push(PoseFrame::new(kps));
    }
    Ok(PoseSequence::new(subject_id, label, frames).expect("at least one frame"))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Range {
    pub lo: f64,
    pub hi: f64,
}

impl Range {
    pub const fn new(lo: f64, hi: f64) -> Self {
        Self { lo, hi }
    }

    fn sample(&self, rng: &mut impl Rng) -> f64 {
        if self.hi > self.lo {
            rng.random_range(self.lo..=self.hi)
        } else {
            self.lo
        }
    }
}

/// Asymmetry ranges drawn uniformly for one class.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassProfile {
    pub shoulder_drop: Range,
    pub pelvic_tilt: Range,
    pub trunk_drift: Range,
    pub rotation: Range,
}

impl ClassProfile {
    fn ranges(&self) -> [(&'static str, Range); 4] {
        [
            ("shoulder_drop", self.shoulder_drop),
            ("pelvic_tilt", self.pelvic_tilt),
            ("trunk_drift", self.trunk_drift),
            ("rotation", self.rotation),
        ]
    }

    fn sample(&self, rng: &mut impl Rng) -> Asymmetry {
        Asymmetry {
            shoulder_drop: self.shoulder_drop.sample(rng),
            pelvic_tilt: self.pelvic_tilt.sample(rng),
            trunk_drift: self.trunk_drift.sample(rng),
            rotation: self.rotation.sample(rng),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassProfiles {
    pub negative: ClassProfile,
    pub neutral: ClassProfile,
    pub positive: ClassProfile,
}

impl Default for ClassProfiles {
    fn default() -> Self {
        Self {
            negative: ClassProfile {
                shoulder_drop: Range::new(0.0, 1.0),
                pelvic_tilt: Range::new(0.0, 1.0),
                trunk_drift: Range::new(0.0, 1.0),
                rotation: Range::new(0.0, 0.005),
            },
            neutral: ClassProfile {
                shoulder_drop: Range::new(3.0, 5.0),
                pelvic_tilt: Range::new(2.0, 3.5),
                trunk_drift: Range::new(2.0, 3.5),
                rotation: Range::new(0.015, 0.025),
            },
            positive: ClassProfile {
                shoulder_drop: Range::new(8.0, 12.0),
                pelvic_tilt: Range::new(5.0, 7.0),
                trunk_drift: Range::new(5.0, 7.0),
                rotation: Range::new(0.04, 0.06),
            },
        }
    }
}

impl ClassProfiles {
    pub fn get(&self, label: ScreeningLabel) -> &ClassProfile {
        match label {
            ScreeningLabel::Negative => &self.negative,
            ScreeningLabel::Neutral => &self.neutral,
            ScreeningLabel::Positive => &self.positive,
        }
    }

    /// Every parameter must either be shared verbatim by all classes or be
    /// strictly ordered negative < neutral < positive; at least one must be ordered.
    pub fn validate(&self) -> Result<(), SynthError> {
        let (n, u, p) = (self.negative.ranges(), self.neutral.ranges(), self.positive.ranges());
        let mut separating = 0;
        for i in 0..4 {
            let name = n[i].0;
            let (rn, ru, rp) = (n[i].1, u[i].1, p[i].1);
            for r in [rn, ru, rp] {
                if !(r.lo >= 0.0 && r.hi >= r.lo && r.hi.is_finite()) {
                    return Err(SynthError::BadRange(r.lo, r.hi));
                }
            }
            if rn == ru && ru == rp {
                continue;
            }
            if !(rn.hi < ru.lo && ru.hi < rp.lo) {
                return Err(SynthError::OverlappingRanges(name));
            }
            separating += 1;
        }
        if separating == 0 {
            return Err(SynthError::NoSeparatingParameter);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassBalance {
    /// `n` sequences of every class.
    Balanced { per_class: usize },
    /// positive : neutral : negative = 1 : 1 : 8 out of `total`.
    Clinical { total: usize },
}

impl ClassBalance {
    pub fn counts(&self) -> [(ScreeningLabel, usize); 3] {
        match *self {
            Self::Balanced { per_class } => [
                (ScreeningLabel::Negative, per_class),
                (ScreeningLabel::Neutral, per_class),
                (ScreeningLabel::Positive, per_class),
            ],
            Self::Clinical { total } => {
                let minority = total / 10;
                [
                    (ScreeningLabel::Negative, total - 2 * minority),
                    (ScreeningLabel::Neutral, minority),
                    (ScreeningLabel::Positive, minority),
                ]
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub balance: ClassBalance,
    pub profiles: ClassProfiles,
    pub frames: usize,
    pub noise_sigma: f64,
    pub stature: Range,
    pub stride_cycles: Range,
    pub random_confidence: bool,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            balance: ClassBalance::Balanced { per_class: 30 },
            profiles: ClassProfiles::default(),
            frames: 16,
            noise_sigma: 1.0,
            stature: Range::new(180.0, 220.0),
            stride_cycles: Range::new(0.8, 1.5),
            random_confidence: false,
            seed: 0,
        }
    }
}

/// Labeled sequences with subject ids `subj0000`, `subj0001`, ... in class order.
pub fn generate_dataset(cfg: &DatasetConfig) -> Result<Vec<PoseSequence>, SynthError> {
    cfg.profiles.validate()?;
    if cfg.frames == 0 {
        return Err(SynthError::NoFrames);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut out = Vec::new();
    for (label, count) in cfg.balance.counts() {
        let profile = cfg.profiles.get(label);
        for _ in 0..count {
            let params = GaitParams {
                frames: cfg.frames,
                stride_cycles: cfg.stride_cycles.sample(&mut rng),
                stature: cfg.stature.sample(&mut rng),
                origin: (rng.random_range(200.0..440.0), rng.random_range(400.0..460.0)),
                noise_sigma: cfg.noise_sigma,
                asymmetry: profile.sample(&mut rng),
                affected_left: rng.random(),
                random_confidence: cfg.random_confidence,
                seed: rng.random(),
                ..GaitParams::default()
            };
            let id = format!("subj{:04}", out.len());
            out.push(generate(&params, &id, label)?);
        }
    }
    Ok(out)
}

/// Stratified split by subject id: within each class, a seeded shuffle of the
/// distinct subjects sends `round(n * test_fraction)` of them to the test side.
pub fn split_by_subject(
    seqs: &[PoseSequence],
    test_fraction: f64,
    seed: u64,
) -> Result<(Vec<PoseSequence>, Vec<PoseSequence>), SynthError> {
    use rand::seq::SliceRandom;
    if !(0.0..1.0).contains(&test_fraction) {
        return Err(SynthError::BadFraction(test_fraction));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut test_subjects = std::collections::BTreeSet::new();
    for label in ScreeningLabel::ALL {
        let mut subjects: Vec<&str> = seqs
            .iter()
            .filter(|s| s.label == label)
            .map(|s| s.subject_id.as_str())
            .collect();
        subjects.sort_unstable();
        subjects.dedup();
        subjects.shuffle(&mut rng);
        let n_test = (subjects.len() as f64 * test_fraction).round() as usize;
        test_subjects.extend(subjects.into_iter().take(n_test));
    }
    let (test, train): (Vec<_>, Vec<_>) = seqs
        .iter()
        .cloned()
        .partition(|s| test_subjects.contains(s.subject_id.as_str()));
    Ok((train, test))
}
