//! COCO-17 keypoint sequences and their JSONL file format.
//!
//! Line 1 is a header `{"subject_id": .., "label": .., "num_frames": ..}`;
//! every following line is one frame `{"kp": [[x, y, c], ...]}` with exactly
//! 17 triplets in COCO order.

use std::fmt;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const NUM_KEYPOINTS: usize = 17;
pub const DEFAULT_MIN_CONFIDENCE: f64 = 0.3;

pub mod joint {
    pub const NOSE: usize = 0;
    pub const LEFT_EYE: usize = 1;
    pub const RIGHT_EYE: usize = 2;
    pub const LEFT_EAR: usize = 3;
    pub const RIGHT_EAR: usize = 4;
    pub const LEFT_SHOULDER: usize = 5;
    pub const RIGHT_SHOULDER: usize = 6;
    pub const LEFT_ELBOW: usize = 7;
    pub const RIGHT_ELBOW: usize = 8;
    pub const LEFT_WRIST: usize = 9;
    pub const RIGHT_WRIST: usize = 10;
    pub const LEFT_HIP: usize = 11;
    pub const RIGHT_HIP: usize = 12;
    pub const LEFT_KNEE: usize = 13;
    pub const RIGHT_KNEE: usize = 14;
    pub const LEFT_ANKLE: usize = 15;
    pub const RIGHT_ANKLE: usize = 16;
}

/// Index of the mirror-image joint (nose maps to itself).
pub fn mirror_joint(k: usize) -> usize {
    match k {
        0 => 0,
        k if k % 2 == 1 => k + 1,
        k => k - 1,
    }
}

#[derive(Debug, Error)]
pub enum PoseIoError {
    #[error("I/O error on {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: parse error: {msg}")]
    Parse { line: usize, msg: String },
    #[error("line {line}: schema error: {msg}")]
    Schema { line: usize, msg: String },
    #[error("line {line}: validation error: {msg}")]
    Validation { line: usize, msg: String },
    #[error("a pose sequence needs at least one frame")]
    EmptySequence,
    #[error("unknown screening label `{0}`")]
    UnknownLabel(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Keypoint {
    pub x: f64,
    pub y: f64,
    pub c: f64,
}

impl Keypoint {
    pub fn new(x: f64, y: f64, c: f64) -> Self {
        Self { x, y, c }
    }

    pub fn is_valid(&self, c_min: f64) -> bool {
        self.c >= c_min
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PoseFrame {
    pub keypoints: [Keypoint; NUM_KEYPOINTS],
}

impl PoseFrame {
    pub fn new(keypoints: [Keypoint; NUM_KEYPOINTS]) -> Self {
        Self { keypoints }
    }

    /// Entry `k` is true iff `c_k >= c_min`.
    pub fn validity_mask(&self, c_min: f64) -> [bool; NUM_KEYPOINTS] {
        validity_mask(self, c_min)
    }

    /// Reflection about `x = 0` with left/right joints swapped.
    pub fn mirrored(&self) -> Self {
        let mut out = *self;
        for k in 0..NUM_KEYPOINTS {
            let src = self.keypoints[mirror_joint(k)];
            out.keypoints[k] = Keypoint::new(-src.x, src.y, src.c);
        }
        out
    }
}

pub fn validity_mask(frame: &PoseFrame, c_min: f64) -> [bool; NUM_KEYPOINTS] {
    std::array::from_fn(|k| frame.keypoints[k].c >= c_min)
}

/// Screening class. Integer ids: negative = 0, neutral = 1, positive = 2.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScreeningLabel {
    Negative,
    Neutral,
    Positive,
}

impl ScreeningLabel {
    pub const ALL: [ScreeningLabel; 3] = [Self::Negative, Self::Neutral, Self::Positive];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Negative => "negative",
            Self::Neutral => "neutral",
            Self::Positive => "positive",
        }
    }
}

impl fmt::Display for ScreeningLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ScreeningLabel {
    type Err = PoseIoError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "negative" => Ok(Self::Negative),
            "neutral" => Ok(Self::Neutral),
            "positive" => Ok(Self::Positive),
            other => Err(PoseIoError::UnknownLabel(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoseSequence {
    pub subject_id: String,
    pub label: ScreeningLabel,
    frames: Vec<PoseFrame>,
}

impl PoseSequence {
    pub fn new(
        subject_id: impl Into<String>,
        label: ScreeningLabel,
        frames: Vec<PoseFrame>,
    ) -> Result<Self, PoseIoError> {
        if frames.is_empty() {
            return Err(PoseIoError::EmptySequence);
        }
        Ok(Self {
            subject_id: subject_id.into(),
            label,
            frames,
        })
    }

    pub fn frames(&self) -> &[PoseFrame] {
        &self.frames
    }

    pub fn num_frames(&self) -> usize {
        self.frames.len()
    }

    /// Applies `f` to every keypoint; the frame count is unchanged.
    pub fn map_keypoints(&self, mut f: impl FnMut(Keypoint) -> Keypoint) -> Self {
        let frames = self
            .frames
            .iter()
            .map(|fr| PoseFrame::new(fr.keypoints.map(&mut f)))
            .collect();
        Self {
            subject_id: self.subject_id.clone(),
            label: self.label,
            frames,
        }
    }

    pub fn with_frames(&self, frames: Vec<PoseFrame>) -> Result<Self, PoseIoError> {
        Self::new(self.subject_id.clone(), self.label, frames)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    subject_id: String,
    label: String,
    num_frames: usize,
}

#[derive(Serialize)]
struct FrameLineOut<'a> {
    kp: &'a [[f64; 3]],
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct FrameLineIn {
    kp: Vec<Vec<f64>>,
}

fn parse_frame(line_no: usize, line: &str) -> Result<PoseFrame, PoseIoError> {
    let parsed: FrameLineIn = serde_json::from_str(line).map_err(|e| PoseIoError::Parse {
        line: line_no,
        msg: e.to_string(),
    })?;
    if parsed.kp.len() != NUM_KEYPOINTS {
        return Err(PoseIoError::Schema {
            line: line_no,
            msg: format!("expected {NUM_KEYPOINTS} keypoints, found {}", parsed.kp.len()),
        });
    }
    let mut kps = [Keypoint::default(); NUM_KEYPOINTS];
    for (k, triple) in parsed.kp.iter().enumerate() {
        let &[x, y, c] = triple.as_slice() else {
            return Err(PoseIoError::Schema {
                line: line_no,
                msg: format!("keypoint {k} has {} values, expected [x, y, c]", triple.len()),
            });
        };
        if !(x.is_finite() && y.is_finite()) {
            return Err(PoseIoError::Validation {
                line: line_no,
                msg: format!("keypoint {k} has non-finite coordinates"),
            });
        }
        if !(0.0..=1.0).contains(&c) {
            return Err(PoseIoError::Validation {
                line: line_no,
                msg: format!("keypoint {k} confidence {c} outside [0, 1]"),
            });
        }
        kps[k] = Keypoint::new(x, y, c);
    }
    Ok(PoseFrame::new(kps))
}

/// Parses the JSONL text of one sequence.
pub fn parse_sequence(text: &str) -> Result<PoseSequence, PoseIoError> {
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l))
        .filter(|(_, l)| !l.trim().is_empty());
    let (hline, htext) = lines.next().ok_or(PoseIoError::Schema {
        line: 1,
        msg: "missing header line".into(),
    })?;
    let header: Header = serde_json::from_str(htext).map_err(|e| PoseIoError::Parse {
        line: hline,
        msg: e.to_string(),
    })?;
    let label: ScreeningLabel = header.label.parse().map_err(|_| PoseIoError::Schema {
        line: hline,
        msg: format!("unknown label `{}`", header.label),
    })?;
    let frames = lines
        .map(|(n, l)| parse_frame(n, l))
        .collect::<Result<Vec<_>, _>>()?;
    if frames.len() != header.num_frames {
        return Err(PoseIoError::Schema {
            line: hline,
            msg: format!(
                "header declares {} frames, file contains {}",
                header.num_frames,
                frames.len()
            ),
        });
    }
    PoseSequence::new(header.subject_id, label, frames)
}

/// Canonical JSONL serialization.
pub fn serialize_sequence(seq: &PoseSequence) -> Result<String, PoseIoError> {
    if seq.frames.is_empty() {
        return Err(PoseIoError::EmptySequence);
    }
    let header = Header {
        subject_id: seq.subject_id.clone(),
        label: seq.label.as_str().to_string(),
        num_frames: seq.frames.len(),
    };
    let mut out = serde_json::to_string(&header).expect("header serializes");
    out.push('\n');
    for frame in &seq.frames {
        let kp: Vec<[f64; 3]> = frame.keypoints.iter().map(|k| [k.x, k.y, k.c]).collect();
        out.push_str(&serde_json::to_string(&FrameLineOut { kp: &kp }).expect("frame serializes"));
        out.push('\n');
    }
    Ok(out)
}

pub fn load_sequence(path: impl AsRef<Path>) -> Result<PoseSequence, PoseIoError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| PoseIoError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_sequence(&text)
}

pub fn save_sequence(seq: &PoseSequence, path: impl AsRef<Path>) -> Result<(), PoseIoError> {
    let path = path.as_ref();
    let text = serialize_sequence(seq)?;
    let io_err = |source| PoseIoError::Io {
        path: path.to_path_buf(),
        source,
    };
    let file = fs::File::create(path).map_err(io_err)?;
    let mut w = BufWriter::new(file);
    w.write_all(text.as_bytes()).map_err(io_err)?;
    w.flush().map_err(io_err)
}

/// Loads every `*.jsonl` file in `dir`, sorted by file name.
pub fn load_dataset_dir(dir: impl AsRef<Path>) -> Result<Vec<PoseSequence>, PoseIoError> {
    let dir = dir.as_ref();
    let io_err = |source| PoseIoError::Io {
        path: dir.to_path_buf(),
        source,
    };
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(io_err)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "jsonl"))
        .collect();
    paths.sort();
    paths.iter().map(load_sequence).collect()
}
