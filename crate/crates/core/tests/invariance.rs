//! Invariances of normalization, PAV metrics and the encoder.

mod common;

use common::{max_abs_diff, normalized_frame, raw_sequence, rng};
use drf_core::autograd::Tape;
use drf_core::dataset::raw_pavs;
use drf_core::model::{Drf, EncoderConfig, GuidanceSource, ModelConfig, PgaConfig};
use drf_core::normalize::{hip_midpoint, normalize_sequence, vertical_extent};
use drf_core::pav::frame_metrics;
use drf_core::pose_io::{Keypoint, PoseSequence};
use drf_core::tensor::Tensor;
use proptest::prelude::*;
use rand::Rng;

const C_MIN: f64 = 0.3;

fn coords(seq: &PoseSequence) -> Vec<f64> {
    let n = normalize_sequence(seq, C_MIN).unwrap();
    n.frames
        .iter()
        .flat_map(|f| f.keypoints.iter().flat_map(|k| [k.x, k.y]))
        .collect()
}

#[test]
fn thirty_frame_sequence_remeasures_to_target() {
    let mut r = rng(30);
    let mut seq = raw_sequence(&mut r, "a");
    while seq.num_frames() != 30 {
        seq = raw_sequence(&mut r, "a");
    }
    let n = normalize_sequence(&seq, C_MIN).unwrap();
    let mut heights: Vec<f64> = n.frames.iter().map(|f| vertical_extent(f, C_MIN)).collect();
    heights.sort_by(f64::total_cmp);
    assert!(((heights[14] + heights[15]) / 2.0 - 128.0).abs() < 1e-9);
    for f in &n.frames {
        let (x, y) = hip_midpoint(f);
        assert!(x.abs() < 1e-9 && y.abs() < 1e-9);
    }
}

#[test]
fn normalizing_twice_changes_nothing() {
    let mut r = rng(31);
    for i in 0..20 {
        let seq = raw_sequence(&mut r, &format!("s{i}"));
        let once = normalize_sequence(&seq, C_MIN).unwrap();
        let again = seq.with_frames(once.frames.clone()).unwrap();
        let twice = normalize_sequence(&again, C_MIN).unwrap();
        assert!((twice.scale - 1.0).abs() < 1e-12);
        assert!(max_abs_diff(&coords(&again), &coords(&seq)) < 1e-9);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn normalization_ignores_translation_and_scale(
        seed in any::<u64>(),
        dx in -1e3..1e3f64,
        dy in -1e3..1e3f64,
        s in 0.1..10.0f64,
    ) {
        let seq = raw_sequence(&mut rng(seed), "p");
        let moved = seq.map_keypoints(|k| Keypoint::new(s * k.x + dx, s * k.y + dy, k.c));
        prop_assert!(max_abs_diff(&coords(&seq), &coords(&moved)) <= 1e-6);
        let (a, b) = (raw_pavs(&[seq], C_MIN).unwrap(), raw_pavs(&[moved], C_MIN).unwrap());
        let flat = |p: &drf_core::pav::RawPav| p.values.iter().flatten().copied().collect::<Vec<_>>();
        prop_assert!(max_abs_diff(&flat(&a[0]), &flat(&b[0])) <= 1e-6);
    }

    #[test]
    fn mirrored_frame_has_identical_metrics(seed in any::<u64>()) {
        let mut r = rng(seed);
        let mut f = normalized_frame(&mut r);
        // hips valid so the midline is defined
        f.keypoints[11].c = 0.9;
        f.keypoints[12].c = 0.8;
        let (a, b) = (frame_metrics(&f, C_MIN), frame_metrics(&f.mirrored(), C_MIN));
        prop_assert_eq!(a.valid, b.valid);
        let flat = |m: &drf_core::pav::FrameAsymmetry| m.values.iter().flatten().copied().collect::<Vec<_>>();
        prop_assert!(max_abs_diff(&flat(&a), &flat(&b)) <= 1e-9);
    }
}

#[test]
fn frame_order_does_not_change_encoder_features() {
    let cfg = ModelConfig {
        encoder: EncoderConfig {
            widths: vec![4, 8],
            strides: vec![1, 2],
            strips: 4,
            in_channels: 2,
        },
        embed_dim: 6,
        pga: Some(PgaConfig {
            guidance: GuidanceSource::SelfAttention,
            ..PgaConfig::default()
        }),
    };
    let model = Drf::new(cfg, (16, 16), 8).unwrap();
    let mut r = rng(8);
    let (t, per) = (7, 2 * 16 * 16);
    let data: Vec<f64> = (0..t * per).map(|_| r.random_range(0.0..1.0)).collect();
    let mut order: Vec<usize> = (0..t).collect();
    order.reverse();
    order.swap(1, 4);
    let shuffled: Vec<f64> = order.iter().flat_map(|&i| data[i * per..][..per].to_vec()).collect();

    let run = |d: Vec<f64>| {
        let maps = Tensor::new(vec![t, 2, 16, 16], d).unwrap();
        let mut tape = Tape::new();
        let out = model.forward(&mut tape, &maps, None).unwrap();
        (
            tape.value(out.f_enc).data().to_vec(),
            tape.value(out.logits).data().to_vec(),
        )
    };
    assert_eq!(run(data), run(shuffled));
}
