//! From pose sequences to model inputs: normalization, PAV and rendering.

use thiserror::Error;

use crate::normalize::{normalize_sequence, NormalizationError};
use crate::pav::{apply_minmax, fit_minmax, raw_pav, MinMaxStats, PavError, RawPav};
use crate::pose_io::{PoseSequence, ScreeningLabel};
use crate::skeleton_map::{render_frames_tensor, RenderConfig, RenderError};
use crate::tensor::Tensor;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DatasetError {
    #[error("sequence `{subject}`: {source}")]
    Normalize {
        subject: String,
        #[source]
        source: NormalizationError,
    },
    #[error(transparent)]
    Pav(#[from] PavError),
    #[error(transparent)]
    Render(#[from] RenderError),
    #[error("dataset is empty")]
    Empty,
}

/// One sequence ready for the network.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub subject_id: String,
    pub label: ScreeningLabel,
    /// `[T, 2, H, W]`, every frame.
    pub maps: Tensor,
    pub raw_pav: RawPav,
    /// Scaled and flattened, pair-major.
    pub pav: Vec<f64>,
}

impl Sample {
    pub fn num_frames(&self) -> usize {
        self.maps.shape()[0]
    }

    /// `[T', 2, H, W]` holding the listed frames in order.
    pub fn frames(&self, indices: &[usize]) -> Tensor {
        let per = self.maps.len() / self.num_frames();
        let mut data = Vec::with_capacity(indices.len() * per);
        for &i in indices {
            data.extend_from_slice(&self.maps.data()[i * per..][..per]);
        }
        let mut shape = self.maps.shape().to_vec();
        shape[0] = indices.len();
        Tensor::new(shape, data).expect("length matches shape")
    }
}

/// Raw PAVs of a set of sequences, computed in normalized space.
pub fn raw_pavs(seqs: &[PoseSequence], c_min: f64) -> Result<Vec<RawPav>, DatasetError> {
    seqs.iter()
        .map(|s| {
            let n = normalize_sequence(s, c_min).map_err(|source| DatasetError::Normalize {
                subject: s.subject_id.clone(),
                source,
            })?;
            Ok(raw_pav(&n.frames, c_min))
        })
        .collect()
}

/// Min-max statistics fitted on `seqs`.
pub fn fit_stats(seqs: &[PoseSequence], c_min: f64, split: &str) -> Result<MinMaxStats, DatasetError> {
    Ok(fit_minmax(&raw_pavs(seqs, c_min)?, split)?)
}

pub fn prepare(
    seq: &PoseSequence,
    stats: &MinMaxStats,
    render: &RenderConfig,
    c_min: f64,
) -> Result<Sample, DatasetError> {
    let n = normalize_sequence(seq, c_min).map_err(|source| DatasetError::Normalize {
        subject: seq.subject_id.clone(),
        source,
    })?;
    let raw = raw_pav(&n.frames, c_min);
    let pav = apply_minmax(&raw, stats).flatten();
    Ok(Sample {
        subject_id: seq.subject_id.clone(),
        label: seq.label,
        maps: render_frames_tensor(&n.frames, render),
        raw_pav: raw,
        pav,
    })
}

pub fn prepare_all(
    seqs: &[PoseSequence],
    stats: &MinMaxStats,
    render: &RenderConfig,
    c_min: f64,
) -> Result<Vec<Sample>, DatasetError> {
    render.validate()?;
    if seqs.is_empty() {
        return Err(DatasetError::Empty);
    }
    seqs.iter().map(|s| prepare(s, stats, render, c_min)).collect()
}
