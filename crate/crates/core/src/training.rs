//! Losses and the optimization loop.
//!
//! The objective is the plain sum of softmax cross-entropy on the logits and
//! a batch-all triplet loss on the strip embeddings. Batches hold `k`
//! sequences from each of `p` classes, each cut down to a random subset of
//! frames. Updates use SGD with heavy-ball momentum. Everything random is
//! drawn from one seeded stream, so two runs with the same config agree bit
//! for bit.

use rand::seq::{index, IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autograd::{Tape, Var};
use crate::checkpoint::{Checkpoint, TrainingMeta};
use crate::dataset::{fit_stats, prepare_all, DatasetError, Sample};
use crate::model::{argmax, Drf, ModelConfig, ModelError, NUM_CLASSES};
use crate::pav::PAV_LEN;
use crate::pose_io::{PoseSequence, ScreeningLabel, DEFAULT_MIN_CONFIDENCE};
use crate::skeleton_map::RenderConfig;
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("training data must contain at least two classes, found {0}")]
    SingleClass(usize),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("non-finite loss or gradient at epoch {epoch}, step {step}")]
    NonFinite { epoch: usize, step: usize },
}

impl From<TensorError> for TrainError {
    fn from(e: TensorError) -> Self {
        Self::Model(e.into())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub margin: f64,
    pub learning_rate: f64,
    pub momentum: f64,
    pub epochs: usize,
    /// Classes per batch (`p`); capped at the number of classes present.
    pub batch_classes: usize,
    /// Sequences per class per batch (`k`).
    pub batch_per_class: usize,
    /// Frames drawn from each sequence per training step.
    pub frames_per_sample: usize,
    /// Optimizer steps per epoch; 0 means one pass worth, `ceil(N / (p * k))`.
    pub steps_per_epoch: usize,
    pub seed: u64,
    /// Confidence threshold for normalization and the PAV.
    pub c_min: f64,
    pub render: RenderConfig,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            margin: 0.2,
            learning_rate: 0.01,
            momentum: 0.9,
            epochs: 30,
            batch_classes: 3,
            batch_per_class: 4,
            frames_per_sample: 16,
            steps_per_epoch: 0,
            seed: 0,
            c_min: DEFAULT_MIN_CONFIDENCE,
            render: RenderConfig::default(),
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let err = |m: &str| Err(TrainError::Config(m.into()));
        if !(self.margin > 0.0 && self.margin.is_finite()) {
            return err("margin must be positive");
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return err("learning rate must be non-negative");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return err("momentum must lie in [0, 1)");
        }
        if self.batch_classes < 2 || self.batch_per_class < 2 {
            return err("batches need at least 2 classes and 2 sequences per class");
        }
        if self.epochs == 0 || self.frames_per_sample == 0 {
            return err("epochs and frames per sample must be at least 1");
        }
        self.render.validate().map_err(DatasetError::from)?;
        self.model
            .encoder
            .feature_size((self.render.height, self.render.width))?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub l_ce: f64,
    pub l_triplet: f64,
    pub train_acc: f64,
}

pub fn epoch_log_csv(log: &[EpochLog]) -> String {
    let mut out = String::from("epoch,l_ce,l_triplet,train_acc\n");
    for e in log {
        out.push_str(&format!("{},{},{},{}\n", e.epoch, e.l_ce, e.l_triplet, e.train_acc));
    }
    out
}

/// `-log softmax(logits)[label]`, stabilized by the log-sum-exp shift.
pub fn cross_entropy(logits: &[f64], label: usize) -> f64 {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|z| (z - m).exp()).sum::<f64>().ln();
    lse - logits[label]
}

/// All `(anchor, positive, negative)` index triples of a labeled batch.
pub fn valid_triplets(labels: &[usize]) -> Vec<(usize, usize, usize)> {
    let n = labels.len();
    let mut out = Vec::new();
    for a in 0..n {
        for p in 0..n {
            if p == a || labels[p] != labels[a] {
                continue;
            }
            for q in 0..n {
                if labels[q] != labels[a] {
                    out.push((a, p, q));
                }
            }
        }
    }
    out
}

/// Batch-all triplet loss on `emb: [S, B, d]`: the hinge
/// `max(0, m + d(a,p) - d(a,n))` averaged over strips and valid triplets.
/// `None` when the batch has no valid triplet.
pub fn triplet_loss_var(tape: &mut Tape, emb: Var, labels: &[usize], margin: f64) -> Result<Option<Var>, TensorError> {
    let triplets = valid_triplets(labels);
    if triplets.is_empty() {
        return Ok(None);
    }
    let (s, b) = (tape.shape(emb)[0], tape.shape(emb)[1]);
    let dist = tape.pairwise_l2(emb)?;
    let mut ap = Vec::with_capacity(s * triplets.len());
    let mut an = Vec::with_capacity(s * triplets.len());
    for h in 0..s {
        for &(a, p, n) in &triplets {
            ap.push((h * b + a) * b + p);
            an.push((h * b + a) * b + n);
        }
    }
    let d_ap = tape.gather(dist, ap)?;
    let d_an = tape.gather(dist, an)?;
    let diff = tape.sub(d_ap, d_an)?;
    let shifted = tape.add_scalar(diff, margin);
    let hinge = tape.relu(shifted);
    tape.mean(hinge).map(Some)
}

/// Triplet loss of plain per-sequence `[S, d]` embeddings; 0 without valid triplets.
pub fn triplet_loss(embeddings: &[Tensor], labels: &[usize], margin: f64) -> Result<f64, TensorError> {
    let mut tape = Tape::new();
    let parts: Vec<Var> = embeddings.iter().map(|e| tape.constant(e.clone())).collect();
    let emb = tape.stack(&parts, 1)?;
    Ok(match triplet_loss_var(&mut tape, emb, labels, margin)? {
        Some(v) => tape.value(v).data()[0],
        None => {
            log::warn!("batch has no valid triplet; triplet loss set to 0");
            0.0
        }
    })
}

/// Loss terms of one batch.
#[derive(Debug, Clone, Copy)]
pub struct BatchLoss {
    pub total: Var,
    pub ce: f64,
    pub triplet: f64,
}

/// Stacks samples into a `[B, T, 2, H, W]` batch and a `[B, 24]` PAV matrix.
pub fn stack_batch(samples: &[(&Sample, Vec<usize>)]) -> (Tensor, Tensor) {
    let mut maps = Vec::new();
    let mut pav = Vec::with_capacity(samples.len() * PAV_LEN);
    let mut frame_shape = Vec::new();
    for (s, frames) in samples {
        let t = s.frames(frames);
        frame_shape = t.shape().to_vec();
        maps.extend_from_slice(t.data());
        pav.extend_from_slice(&s.pav);
    }
    let mut shape = vec![samples.len()];
    shape.extend(frame_shape);
    (
        Tensor::new(shape, maps).expect("equal frame counts"),
        Tensor::new(vec![samples.len(), PAV_LEN], pav).expect("24 values per sample"),
    )
}

/// `L_ce + L_triplet` for one batch on a fresh forward pass.
pub fn batch_loss(
    tape: &mut Tape,
    model: &Drf,
    maps: &Tensor,
    pav: &Tensor,
    labels: &[usize],
    margin: f64,
) -> Result<BatchLoss, TrainError> {
    let out = model.forward(tape, maps, Some(pav))?;
    let ce = tape.softmax_xent(out.logits, labels)?;
    let ce_val = tape.value(ce).data()[0];
    match triplet_loss_var(tape, out.embeddings, labels, margin)? {
        Some(tri) => {
            let triplet = tape.value(tri).data()[0];
            Ok(BatchLoss {
                total: tape.add(ce, tri)?,
                ce: ce_val,
                triplet,
            })
        }
        None => {
            log::warn!("batch has no valid triplet; triplet loss set to 0");
            Ok(BatchLoss {
                total: ce,
                ce: ce_val,
                triplet: 0.0,
            })
        }
    }
}

/// Predicted class of one sample, using every frame.
pub fn predict(model: &Drf, sample: &Sample) -> Result<ScreeningLabel, ModelError> {
    let pav = model.needs_pav().then_some(sample.pav.as_slice());
    Ok(model.infer(&sample.maps, pav)?.predicted)
}

pub fn accuracy(model: &Drf, samples: &[Sample]) -> Result<f64, ModelError> {
    let mut correct = 0;
    for s in samples {
        if predict(model, s)? == s.label {
            correct += 1;
        }
    }
    Ok(correct as f64 / samples.len().max(1) as f64)
}

fn pick_frames(rng: &mut ChaCha8Rng, available: usize, wanted: usize) -> Vec<usize> {
    if available >= wanted {
        let mut idx = index::sample(rng, available, wanted).into_vec();
        idx.sort_unstable();
        idx
    } else {
        // max pooling ignores duplicates, so padding by repetition is harmless
        (0..wanted).map(|_| rng.random_range(0..available)).collect()
    }
}

/// `(sample index, frame indices)` for one class-balanced batch.
fn sample_batch(
    rng: &mut ChaCha8Rng,
    by_class: &[Vec<usize>],
    samples: &[Sample],
    cfg: &TrainConfig,
) -> Vec<(usize, Vec<usize>)> {
    let present: Vec<usize> = (0..by_class.len()).filter(|&c| !by_class[c].is_empty()).collect();
    let p = cfg.batch_classes.min(present.len());
    let mut chosen: Vec<usize> = present.choose_multiple(rng, p).copied().collect();
    chosen.sort_unstable();
    let mut batch = Vec::with_capacity(p * cfg.batch_per_class);
    for c in chosen {
        let members = &by_class[c];
        let picks: Vec<usize> = if members.len() >= cfg.batch_per_class {
            members.choose_multiple(rng, cfg.batch_per_class).copied().collect()
        } else {
            (0..cfg.batch_per_class).map(|_| *members.choose(rng).expect("non-empty")).collect()
        };
        for i in picks {
            let frames = pick_frames(rng, samples[i].num_frames(), cfg.frames_per_sample);
            batch.push((i, frames));
        }
    }
    batch
}

struct Sgd {
    velocity: Vec<Vec<f64>>,
    lr: f64,
    momentum: f64,
}

impl Sgd {
    fn new(model: &Drf, lr: f64, momentum: f64) -> Self {
        let velocity = model.params().iter().map(|(_, p)| vec![0.0; p.value.len()]).collect();
        Self { velocity, lr, momentum }
    }

    fn step(&mut self, model: &mut Drf) {
        let ids: Vec<_> = model.params().ids().collect();
        for (id, v) in ids.into_iter().zip(&mut self.velocity) {
            let p = model.params_mut().get_mut(id);
            let (value, grad) = (&mut p.value, &p.grad);
            for ((theta, g), vi) in value.data_mut().iter_mut().zip(grad.data()).zip(v.iter_mut()) {
                *vi = self.momentum * *vi + g;
                *theta -= self.lr * *vi;
            }
        }
    }
}

/// Trains on already prepared samples, starting from `model`.
pub fn train_samples(
    mut model: Drf,
    samples: &[Sample],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<(Drf, Vec<EpochLog>), TrainError> {
    cfg.validate()?;
    let mut by_class = vec![Vec::new(); NUM_CLASSES];
    for (i, s) in samples.iter().enumerate() {
        by_class[s.label.index()].push(i);
    }
    let classes = by_class.iter().filter(|c| !c.is_empty()).count();
    if classes < 2 {
        return Err(TrainError::SingleClass(classes));
    }
    let batch_size = cfg.batch_classes.min(classes) * cfg.batch_per_class;
    let steps = if cfg.steps_per_epoch > 0 {
        cfg.steps_per_epoch
    } else {
        samples.len().div_ceil(batch_size)
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let mut opt = Sgd::new(&model, cfg.learning_rate, cfg.momentum);
    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        let (mut ce_sum, mut tri_sum) = (0.0, 0.0);
        for step in 0..steps {
            let mut batch = sample_batch(&mut rng, &by_class, samples, cfg);
            batch.shuffle(&mut rng);
            let refs: Vec<(&Sample, Vec<usize>)> =
                batch.iter().map(|(i, f)| (&samples[*i], f.clone())).collect();
            let labels: Vec<usize> = refs.iter().map(|(s, _)| s.label.index()).collect();
            let (maps, pav) = stack_batch(&refs);
            let mut tape = Tape::new();
            let loss = batch_loss(&mut tape, &model, &maps, &pav, &labels, cfg.margin)?;
            model.params_mut().zero_grad();
            tape.backward_into(loss.total, model.params_mut())?;
            let total = tape.value(loss.total).data()[0];
            if !total.is_finite() || !model.params().grad_norm().is_finite() {
                return Err(TrainError::NonFinite { epoch, step });
            }
            opt.step(&mut model);
            ce_sum += loss.ce;
            tri_sum += loss.triplet;
        }
        let entry = EpochLog {
            epoch,
            l_ce: ce_sum / steps as f64,
            l_triplet: tri_sum / steps as f64,
            train_acc: accuracy(&model, samples)?,
        };
        log::info!(
            "epoch {epoch}: l_ce {:.4} l_triplet {:.4} train_acc {:.3}",
            entry.l_ce,
            entry.l_triplet,
            entry.train_acc
        );
        on_epoch(&entry);
        log.push(entry);
    }
    model.params_mut().zero_grad();
    Ok((model, log))
}

/// Fits PAV statistics on `train_set`, initializes a model from the seed and trains it.
pub fn train(train_set: &[PoseSequence], cfg: &TrainConfig) -> Result<Checkpoint, TrainError> {
    train_with_progress(train_set, cfg, |_| {})
}

pub fn train_with_progress(
    train_set: &[PoseSequence],
    cfg: &TrainConfig,
    on_epoch: impl FnMut(&EpochLog),
) -> Result<Checkpoint, TrainError> {
    cfg.validate()?;
    let mut seen = [false; NUM_CLASSES];
    for s in train_set {
        seen[s.label.index()] = true;
    }
    let classes = seen.iter().filter(|&&x| x).count();
    if classes < 2 {
        return Err(TrainError::SingleClass(classes));
    }
    let stats = fit_stats(train_set, cfg.c_min, "train")?;
    let samples = prepare_all(train_set, &stats, &cfg.render, cfg.c_min)?;
    let canvas = (cfg.render.height, cfg.render.width);
    let model = Drf::new(cfg.model.clone(), canvas, cfg.seed)?;
    let (model, log) = train_samples(model, &samples, cfg, on_epoch)?;
    Ok(Checkpoint {
        model,
        stats,
        render: cfg.render.clone(),
        c_min: cfg.c_min,
        meta: TrainingMeta {
            seed: cfg.seed,
            epochs: cfg.epochs,
            log,
        },
    })
}

/// Logit argmax helper for callers holding raw logits.
pub fn predicted_label(logits: &[f64]) -> ScreeningLabel {
    ScreeningLabel::from_index(argmax(logits)).expect("three logits")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{EncoderConfig, GuidanceSource, PgaConfig};
    use crate::synth::{generate_dataset, ClassBalance, DatasetConfig};

    #[test]
    fn cross_entropy_values() {
        assert!((cross_entropy(&[0.0, 0.0, 0.0], 1) - 3f64.ln()).abs() < 1e-15);
        let big = cross_entropy(&[1000.0, 0.0, 0.0], 0);
        assert!(big.is_finite() && big < 1e-300);
        assert!((cross_entropy(&[0.0, 1000.0, 0.0], 0) - 1000.0).abs() < 1e-9);
    }

    #[test]
    fn identical_embeddings_give_margin() {
        let e = vec![Tensor::full(&[2, 3], 0.7); 4];
        let l = triplet_loss(&e, &[0, 0, 1, 1], 0.2).unwrap();
        assert!((l - 0.2).abs() < 1e-15);
    }

    #[test]
    fn separated_classes_give_zero() {
        let e = vec![
            Tensor::new(vec![1, 1], vec![0.0]).unwrap(),
            Tensor::new(vec![1, 1], vec![0.0]).unwrap(),
            Tensor::new(vec![1, 1], vec![5.0]).unwrap(),
        ];
        assert_eq!(triplet_loss(&e, &[0, 0, 1], 0.2).unwrap(), 0.0);
    }

    #[test]
    fn no_triplet_is_zero() {
        let e = vec![Tensor::zeros(&[1, 2]); 3];
        assert_eq!(triplet_loss(&e, &[0, 1, 2], 0.2).unwrap(), 0.0);
    }

    #[test]
    fn triplet_loss_matches_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (s, d) = (3, 4);
        let labels = [0, 1, 0, 1];
        let emb: Vec<Tensor> = (0..4)
            .map(|_| Tensor::new(vec![s, d], (0..s * d).map(|_| rng.random::<f64>()).collect()).unwrap())
            .collect();
        let dist = |a: &Tensor, b: &Tensor, h: usize| {
            (0..d)
                .map(|j| (a.get(&[h, j]) - b.get(&[h, j])).powi(2))
                .sum::<f64>()
                .sqrt()
        };
        let (mut sum, mut count) = (0.0, 0);
        for h in 0..s {
            for a in 0..4 {
                for p in 0..4 {
                    for n in 0..4 {
                        if a != p && labels[a] == labels[p] && labels[n] != labels[a] {
                            sum += (0.2 + dist(&emb[a], &emb[p], h) - dist(&emb[a], &emb[n], h)).max(0.0);
                            count += 1;
                        }
                    }
                }
            }
        }
        let got = triplet_loss(&emb, &labels, 0.2).unwrap();
        assert!((got - sum / count as f64).abs() < 1e-12);
        // batch order does not matter
        let perm = [2, 0, 3, 1];
        let emb_p: Vec<Tensor> = perm.iter().map(|&i| emb[i].clone()).collect();
        let labels_p: Vec<usize> = perm.iter().map(|&i| labels[i]).collect();
        assert!((triplet_loss(&emb_p, &labels_p, 0.2).unwrap() - got).abs() < 1e-12);
    }

    pub(crate) fn toy_cfg() -> TrainConfig {
        TrainConfig {
            epochs: 2,
            frames_per_sample: 4,
            batch_per_class: 2,
            render: RenderConfig {
                width: 16,
                height: 16,
                sigma: 1.0,
                ..RenderConfig::default()
            },
            model: ModelConfig {
                encoder: EncoderConfig {
                    widths: vec![3, 4],
                    strides: vec![2, 1],
                    strips: 4,
                    in_channels: 2,
                },
                embed_dim: 4,
                pga: Some(PgaConfig {
                    guidance: GuidanceSource::Pav,
                    ..PgaConfig::default()
                }),
            },
            ..TrainConfig::default()
        }
    }

    fn toy_data() -> Vec<PoseSequence> {
        generate_dataset(&DatasetConfig {
            balance: ClassBalance::Balanced { per_class: 3 },
            frames: 6,
            ..DatasetConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let cfg = TrainConfig {
            learning_rate: 0.0,
            epochs: 1,
            ..toy_cfg()
        };
        let data = toy_data();
        let stats = fit_stats(&data, cfg.c_min, "train").unwrap();
        let samples = prepare_all(&data, &stats, &cfg.render, cfg.c_min).unwrap();
        let model = Drf::new(cfg.model.clone(), (16, 16), 0).unwrap();
        let before = model.params().clone();
        let (after, _) = train_samples(model, &samples, &cfg, |_| {}).unwrap();
        for ((_, a), (_, b)) in before.iter().zip(after.params().iter()) {
            assert_eq!(a.value.data(), b.value.data(), "{}", a.name);
        }
    }

    #[test]
    fn same_seed_same_curves() {
        let data = toy_data();
        let a = train(&data, &toy_cfg()).unwrap();
        let b = train(&data, &toy_cfg()).unwrap();
        assert_eq!(a.meta.log, b.meta.log);
        assert!(a.meta.log.iter().all(|e| e.l_ce.is_finite() && e.l_triplet.is_finite()));
    }

    #[test]
    fn single_class_is_rejected() {
        let data: Vec<_> = toy_data()
            .into_iter()
            .filter(|s| s.label == ScreeningLabel::Positive)
            .collect();
        assert_eq!(train(&data, &toy_cfg()).unwrap_err(), TrainError::SingleClass(1));
    }

    #[test]
    fn batches_are_class_balanced() {
        let cfg = toy_cfg();
        let data = toy_data();
        let stats = fit_stats(&data, cfg.c_min, "train").unwrap();
        let samples = prepare_all(&data, &stats, &cfg.render, cfg.c_min).unwrap();
        let mut by_class = vec![Vec::new(); 3];
        for (i, s) in samples.iter().enumerate() {
            by_class[s.label.index()].push(i);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let batch = sample_batch(&mut rng, &by_class, &samples, &cfg);
        let mut counts = [0; 3];
        for (i, frames) in &batch {
            counts[samples[*i].label.index()] += 1;
            assert_eq!(frames.len(), 4);
        }
        assert_eq!(counts, [2, 2, 2]);
    }
}
