//! Screening metrics, the guidance/branch ablation harness and class
//! activation maps.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checkpoint::Checkpoint;
use crate::dataset::{prepare, prepare_all, DatasetError, Sample};
use crate::model::{GuidanceSource, ModelError, PgaConfig, NUM_CLASSES};
use crate::pose_io::{PoseSequence, ScreeningLabel};
use crate::skeleton_map::Grid;
use crate::tensor::Tensor;
use crate::training::{predict, train, TrainConfig, TrainError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("nothing to evaluate: dataset is empty")]
    Empty,
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Rows are true classes, columns predictions, both in label index order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: [[u64; NUM_CLASSES]; NUM_CLASSES],
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

fn ratio(num: f64, den: f64) -> f64 {
    if den == 0.0 {
        0.0
    } else {
        num / den
    }
}

impl ConfusionMatrix {
    pub fn new(counts: [[u64; NUM_CLASSES]; NUM_CLASSES]) -> Self {
        Self { counts }
    }

    pub fn record(&mut self, truth: ScreeningLabel, predicted: ScreeningLabel) {
        self.counts[truth.index()][predicted.index()] += 1;
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    /// Precision, recall and F1 per class; any 0/0 ratio counts as 0.
    pub fn per_class(&self) -> [ClassMetrics; NUM_CLASSES] {
        std::array::from_fn(|k| {
            let tp = self.counts[k][k] as f64;
            let predicted: u64 = (0..NUM_CLASSES).map(|t| self.counts[t][k]).sum();
            let actual: u64 = self.counts[k].iter().sum();
            let precision = ratio(tp, predicted as f64);
            let recall = ratio(tp, actual as f64);
            ClassMetrics {
                precision,
                recall,
                f1: ratio(2.0 * precision * recall, precision + recall),
            }
        })
    }

    /// Accuracy and unweighted class means of precision, recall and F1.
    pub fn metrics(&self) -> Metrics {
        let per = self.per_class();
        let mean = |f: fn(&ClassMetrics) -> f64| per.iter().map(f).sum::<f64>() / NUM_CLASSES as f64;
        let trace: u64 = (0..NUM_CLASSES).map(|k| self.counts[k][k]).sum();
        Metrics {
            accuracy: ratio(trace as f64, self.total() as f64),
            precision: mean(|m| m.precision),
            recall: mean(|m| m.recall),
            f1: mean(|m| m.f1),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub metrics: Metrics,
    pub confusion: ConfusionMatrix,
}

impl EvalReport {
    pub fn to_csv(&self) -> String {
        let m = self.metrics;
        format!(
            "metric,value\naccuracy,{}\nprecision,{}\nrecall,{}\nf1,{}\n",
            m.accuracy, m.precision, m.recall, m.f1
        )
    }
}

pub fn evaluate_samples(ck: &Checkpoint, samples: &[Sample]) -> Result<EvalReport, EvalError> {
    if samples.is_empty() {
        return Err(EvalError::Empty);
    }
    let mut confusion = ConfusionMatrix::default();
    for s in samples {
        confusion.record(s.label, predict(&ck.model, s)?);
    }
    Ok(EvalReport {
        metrics: confusion.metrics(),
        confusion,
    })
}

/// Scores a checkpoint on labeled sequences, using its frozen PAV statistics.
pub fn evaluate(ck: &Checkpoint, seqs: &[PoseSequence]) -> Result<EvalReport, EvalError> {
    if seqs.is_empty() {
        return Err(EvalError::Empty);
    }
    let samples = prepare_all(seqs, &ck.stats, &ck.render, ck.c_min)?;
    evaluate_samples(ck, &samples)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRun {
    pub id: String,
    pub guidance: GuidanceSource,
    pub channel: bool,
    pub spatial: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationSpec {
    pub runs: Vec<AblationRun>,
}

impl AblationSpec {
    /// PAV with both branches, each single branch, and every alternative guidance source.
    pub fn standard(random_seed: u64) -> Self {
        let run = |id: &str, guidance, channel, spatial| AblationRun {
            id: id.into(),
            guidance,
            channel,
            spatial,
        };
        Self {
            runs: vec![
                run("pav", GuidanceSource::Pav, true, true),
                run("pav_channel", GuidanceSource::Pav, true, false),
                run("pav_spatial", GuidanceSource::Pav, false, true),
                run("no_pga", GuidanceSource::Pav, false, false),
                run("all_ones", GuidanceSource::AllOnes, true, true),
                run("random", GuidanceSource::Random(random_seed), true, true),
                run("learnable", GuidanceSource::Learnable, true, true),
                run("self_attention", GuidanceSource::SelfAttention, true, true),
            ],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub run: AblationRun,
    /// `Err` carries the failure message; the row's metrics print as NaN.
    pub result: Result<EvalReport, String>,
}

impl AblationRow {
    pub fn metrics(&self) -> Metrics {
        self.result.as_ref().map(|r| r.metrics).unwrap_or(Metrics {
            accuracy: f64::NAN,
            precision: f64::NAN,
            recall: f64::NAN,
            f1: f64::NAN,
        })
    }
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from("run_id,guidance,channel,spatial,acc,prec,rec,f1\n");
    for r in rows {
        let m = r.metrics();
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.run.id, r.run.guidance, r.run.channel, r.run.spatial, m.accuracy, m.precision, m.recall, m.f1
        ));
    }
    out
}

/// One train-then-evaluate per run, sequentially, all with `base.seed`.
/// Only the attention block differs between runs.
pub fn run_ablation(
    spec: &AblationSpec,
    train_set: &[PoseSequence],
    test_set: &[PoseSequence],
    base: &TrainConfig,
) -> Vec<AblationRow> {
    spec.runs
        .iter()
        .map(|run| {
            let mut cfg = base.clone();
            let zero_init = base.model.pga.is_some_and(|p| p.zero_init);
            cfg.model.pga = Some(PgaConfig {
                guidance: run.guidance,
                channel: run.channel,
                spatial: run.spatial,
                zero_init,
            });
            let result = train(train_set, &cfg)
                .map_err(|e: TrainError| e.to_string())
                .and_then(|ck| evaluate(&ck, test_set).map_err(|e| e.to_string()));
            match &result {
                Ok(r) => log::info!("ablation `{}`: f1 {:.4}", run.id, r.metrics.f1),
                Err(e) => log::error!("ablation `{}` failed: {e}", run.id),
            }
            AblationRow {
                run: run.clone(),
                result,
            }
        })
        .collect()
}

fn bilinear_upsample(src: &[f64], (sh, sw): (usize, usize), (dh, dw): (usize, usize)) -> Vec<f64> {
    let coord = |d: usize, dn: usize, sn: usize| {
        let c = ((d as f64 + 0.5) * sn as f64 / dn as f64 - 0.5).clamp(0.0, (sn - 1) as f64);
        let lo = c.floor() as usize;
        (lo, (lo + 1).min(sn - 1), c - lo as f64)
    };
    let mut out = Vec::with_capacity(dh * dw);
    for y in 0..dh {
        let (y0, y1, fy) = coord(y, dh, sh);
        for x in 0..dw {
            let (x0, x1, fx) = coord(x, dw, sw);
            let top = src[y0 * sw + x0] * (1.0 - fx) + src[y0 * sw + x1] * fx;
            let bottom = src[y1 * sw + x0] * (1.0 - fx) + src[y1 * sw + x1] * fx;
            out.push(top * (1.0 - fy) + bottom * fy);
        }
    }
    out
}

/// `Σ_c weights[c] · activation[c]` for `activation: [C, h, w]`, bilinearly
/// resized to `canvas` (height, width) and min-max scaled to `[0, 1]`.
/// A constant map scales to all zeros.
pub fn class_activation_map(activation: &Tensor, weights: &[f64], canvas: (usize, usize)) -> Grid {
    let &[c, h, w] = activation.shape() else {
        panic!("activation must be [C, h, w], got {:?}", activation.shape());
    };
    assert_eq!(weights.len(), c, "one weight per channel");
    let mut cam = vec![0.0; h * w];
    for (ch, &wc) in weights.iter().enumerate() {
        let plane = &activation.data()[ch * h * w..][..h * w];
        for (o, a) in cam.iter_mut().zip(plane) {
            *o += wc * a;
        }
    }
    let mut data = bilinear_upsample(&cam, (h, w), canvas);
    let (lo, hi) = data
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    for v in &mut data {
        *v = if hi > lo { (*v - lo) / (hi - lo) } else { 0.0 };
    }
    Grid {
        width: canvas.1,
        height: canvas.0,
        data,
    }
}

/// Class activation map of one sequence on the checkpoint's canvas.
pub fn cam_heatmap(ck: &Checkpoint, seq: &PoseSequence, class: ScreeningLabel) -> Result<Grid, EvalError> {
    let sample = prepare(seq, &ck.stats, &ck.render, ck.c_min)?;
    let pav = ck.model.needs_pav().then_some(sample.pav.as_slice());
    let inf = ck.model.infer(&sample.maps, pav)?;
    let weights = ck
        .model
        .effective_channel_weights(class, inf.w_c.as_deref(), inf.w_s.as_deref());
    Ok(class_activation_map(&inf.activation, &weights, ck.model.canvas()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() < 1e-12
    }

    #[test]
    fn perfect_predictions() {
        let m = ConfusionMatrix::new([[3, 0, 0], [0, 5, 0], [0, 0, 2]]).metrics();
        assert_eq!(
            m,
            Metrics {
                accuracy: 1.0,
                precision: 1.0,
                recall: 1.0,
                f1: 1.0
            }
        );
    }

    #[test]
    fn constant_predictor_uses_zero_convention() {
        let m = ConfusionMatrix::new([[10, 0, 0], [10, 0, 0], [10, 0, 0]]).metrics();
        assert!(close(m.accuracy, 1.0 / 3.0));
        assert!(close(m.precision, 1.0 / 9.0));
        assert!(close(m.recall, 1.0 / 3.0));
        // F1 of class 0: 2 * (1/3) * 1 / (4/3) = 1/2
        assert!(close(m.f1, 1.0 / 6.0));
    }

    #[test]
    fn fixed_matrix_matches_hand_values() {
        let m = ConfusionMatrix::new([[8, 1, 1], [2, 6, 2], [0, 1, 9]]).metrics();
        // column sums 10, 8, 12; row sums 10 each
        let p = [8.0 / 10.0, 6.0 / 8.0, 9.0 / 12.0];
        let r = [0.8, 0.6, 0.9];
        let f: Vec<f64> = (0..3).map(|k| 2.0 * p[k] * r[k] / (p[k] + r[k])).collect();
        assert!(close(m.accuracy, 23.0 / 30.0));
        assert!(close(m.precision, (0.8 + 0.75 + 0.75) / 3.0));
        assert!(close(m.recall, (0.8 + 0.6 + 0.9) / 3.0));
        assert!(close(m.f1, f.iter().sum::<f64>() / 3.0));
    }

    #[test]
    fn empty_dataset_is_an_error() {
        let samples: Vec<Sample> = Vec::new();
        let ck = crate::checkpoint::tests_support::tiny_checkpoint();
        assert_eq!(evaluate_samples(&ck, &samples).unwrap_err(), EvalError::Empty);
        assert_eq!(evaluate(&ck, &[]).unwrap_err(), EvalError::Empty);
    }

    #[test]
    fn uniform_activation_gives_flat_map() {
        let a = Tensor::full(&[3, 4, 4], 2.0);
        let g = class_activation_map(&a, &[0.5, -1.0, 2.0], (16, 16));
        assert!(g.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn one_hot_channel_map_is_proportional() {
        let (h, w) = (4, 4);
        let mut data = vec![0.0; 2 * h * w];
        for (i, v) in data[h * w..].iter_mut().enumerate() {
            *v = i as f64;
        }
        let a = Tensor::new(vec![2, h, w], data.clone()).unwrap();
        let g = class_activation_map(&a, &[5.0, 0.7], (h, w));
        let max = (h * w - 1) as f64;
        for (i, v) in g.data.iter().enumerate() {
            assert!(close(*v, data[h * w + i] / max));
        }
        let up = class_activation_map(&a, &[5.0, 0.7], (8, 8));
        assert!(up.data.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    fn permute(m: &ConfusionMatrix, p: [usize; 3]) -> ConfusionMatrix {
        let mut out = ConfusionMatrix::default();
        for t in 0..3 {
            for q in 0..3 {
                out.counts[p[t]][p[q]] = m.counts[t][q];
            }
        }
        out
    }

    proptest! {
        #[test]
        fn metrics_are_bounded_and_relabel_invariant(
            counts in proptest::array::uniform3(proptest::array::uniform3(0u64..50)),
            perm in Just(vec![0usize, 1, 2]).prop_shuffle(),
        ) {
            let m = ConfusionMatrix::new(counts);
            let a = m.metrics();
            prop_assert!((0.0..=1.0).contains(&a.accuracy));
            let best_f1 = m.per_class().iter().map(|c| c.f1).fold(0.0, f64::max);
            prop_assert!(a.f1 <= best_f1 + 1e-15);
            let b = permute(&m, [perm[0], perm[1], perm[2]]).metrics();
            prop_assert!((a.precision - b.precision).abs() < 1e-12);
            prop_assert!((a.recall - b.recall).abs() < 1e-12);
            prop_assert!((a.f1 - b.f1).abs() < 1e-12);
            prop_assert!((a.accuracy - b.accuracy).abs() < 1e-12);
        }
    }
}
