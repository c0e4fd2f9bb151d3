//! Fixtures shared by the benchmarks under `benches/`.

use drf_core::dataset::{fit_stats, prepare_all, Sample};
use drf_core::model::{Drf, EncoderConfig, ModelConfig, PgaConfig};
use drf_core::pose_io::{PoseSequence, ScreeningLabel};
use drf_core::skeleton_map::RenderConfig;
use drf_core::synth::{generate, generate_dataset, ClassBalance, DatasetConfig, GaitParams};
use drf_core::training::TrainConfig;

/// One 30-frame noisy walk.
pub fn walk() -> PoseSequence {
    let params = GaitParams {
        noise_sigma: 1.0,
        seed: 1,
        ..GaitParams::default()
    };
    generate(&params, "bench", ScreeningLabel::Positive).expect("default gait is valid")
}

/// The small configuration the end-to-end tests train: 32 x 32 canvas, four conv stages.
pub fn small_config() -> TrainConfig {
    TrainConfig {
        frames_per_sample: 8,
        render: RenderConfig {
            width: 32,
            height: 32,
            sigma: 1.0,
            ..RenderConfig::default()
        },
        model: ModelConfig {
            encoder: EncoderConfig {
                widths: vec![4, 8, 16, 16],
                strides: vec![1, 2, 2, 1],
                strips: 8,
                in_channels: 2,
            },
            embed_dim: 16,
            pga: Some(PgaConfig::default()),
        },
        ..TrainConfig::default()
    }
}

/// Prepared samples, four per class, and a model for `cfg`.
pub fn samples_and_model(cfg: &TrainConfig) -> (Vec<Sample>, Drf) {
    let seqs = generate_dataset(&DatasetConfig {
        balance: ClassBalance::Balanced { per_class: 4 },
        ..DatasetConfig::default()
    })
    .expect("default profiles are valid");
    let stats = fit_stats(&seqs, cfg.c_min, "train").expect("non-empty");
    let samples = prepare_all(&seqs, &stats, &cfg.render, cfg.c_min).expect("synthetic data normalizes");
    let model = Drf::new(cfg.model.clone(), (cfg.render.height, cfg.render.width), 0).expect("valid config");
    (samples, model)
}
