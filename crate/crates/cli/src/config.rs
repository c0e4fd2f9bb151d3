//! Run configuration: a TOML file of flat `key = value` sections, with
//! `--set section.key=value` overrides applied on top.

use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context};
use drf_core::model::{EncoderConfig, GuidanceSource, ModelConfig, PgaConfig};
use drf_core::skeleton_map::RenderConfig;
use drf_core::synth::DatasetConfig;
use drf_core::training::TrainConfig;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use toml::{Table, Value};

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub data: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
}

impl Paths {
    fn is_empty(&self) -> bool {
        self.data.is_none() && self.out.is_none()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub seed: u64,
    pub epochs: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub margin: f64,
    pub batch_classes: usize,
    pub batch_per_class: usize,
    pub frames_per_sample: usize,
    pub steps_per_epoch: usize,
    pub c_min: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RenderSection {
    pub width: usize,
    pub height: usize,
    pub sigma: f64,
    pub span_fraction: f64,
    pub origin_row_fraction: f64,
    pub c_min: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub widths: Vec<usize>,
    pub strides: Vec<usize>,
    pub strips: usize,
    pub embed_dim: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttentionSection {
    pub guidance: GuidanceSource,
    pub channel: bool,
    pub spatial: bool,
    pub zero_init: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    #[serde(skip_serializing_if = "Paths::is_empty")]
    pub paths: Paths,
    pub train: TrainSection,
    pub render: RenderSection,
    pub model: ModelSection,
    pub attention: AttentionSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::from_train(&TrainConfig::default())
    }
}

// Section defaults come from the library defaults, so the two cannot drift.
macro_rules! default_from_run {
    ($($ty:ident => $field:ident),*) => {$(
        impl Default for $ty {
            fn default() -> Self {
                RunConfig::default().$field
            }
        }
    )*};
}
default_from_run!(TrainSection => train, RenderSection => render, ModelSection => model, AttentionSection => attention);

impl RunConfig {
    pub fn from_train(t: &TrainConfig) -> Self {
        let pga = t.model.pga.unwrap_or(PgaConfig {
            channel: false,
            spatial: false,
            ..PgaConfig::default()
        });
        Self {
            paths: Paths::default(),
            train: TrainSection {
                seed: t.seed,
                epochs: t.epochs,
                learning_rate: t.learning_rate,
                momentum: t.momentum,
                margin: t.margin,
                batch_classes: t.batch_classes,
                batch_per_class: t.batch_per_class,
                frames_per_sample: t.frames_per_sample,
                steps_per_epoch: t.steps_per_epoch,
                c_min: t.c_min,
            },
            render: RenderSection {
                width: t.render.width,
                height: t.render.height,
                sigma: t.render.sigma,
                span_fraction: t.render.span_fraction,
                origin_row_fraction: t.render.origin_row_fraction,
                c_min: t.render.c_min,
            },
            model: ModelSection {
                widths: t.model.encoder.widths.clone(),
                strides: t.model.encoder.strides.clone(),
                strips: t.model.encoder.strips,
                embed_dim: t.model.embed_dim,
            },
            attention: AttentionSection {
                guidance: pga.guidance,
                channel: pga.channel,
                spatial: pga.spatial,
                zero_init: pga.zero_init,
            },
        }
    }

    pub fn render_config(&self) -> RenderConfig {
        let r = &self.render;
        RenderConfig {
            width: r.width,
            height: r.height,
            sigma: r.sigma,
            span_fraction: r.span_fraction,
            origin_row_fraction: r.origin_row_fraction,
            c_min: r.c_min,
            ..RenderConfig::default()
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        let a = &self.attention;
        TrainConfig {
            margin: t.margin,
            learning_rate: t.learning_rate,
            momentum: t.momentum,
            epochs: t.epochs,
            batch_classes: t.batch_classes,
            batch_per_class: t.batch_per_class,
            frames_per_sample: t.frames_per_sample,
            steps_per_epoch: t.steps_per_epoch,
            seed: t.seed,
            c_min: t.c_min,
            render: self.render_config(),
            model: ModelConfig {
                encoder: EncoderConfig {
                    widths: self.model.widths.clone(),
                    strides: self.model.strides.clone(),
                    strips: self.model.strips,
                    ..EncoderConfig::default()
                },
                embed_dim: self.model.embed_dim,
                pga: (a.channel || a.spatial).then_some(PgaConfig {
                    guidance: a.guidance,
                    channel: a.channel,
                    spatial: a.spatial,
                    zero_init: a.zero_init,
                }),
            },
        }
    }
}

/// Dataset generation profile for `synth`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthProfile {
    /// Per-class fraction of subjects written to `test/`.
    pub test_fraction: f64,
    pub dataset: DatasetConfig,
}

impl Default for SynthProfile {
    fn default() -> Self {
        Self {
            test_fraction: 1.0 / 3.0,
            dataset: DatasetConfig::default(),
        }
    }
}

/// Reads `file` (if any) as a table and applies `KEY=VALUE` overrides.
/// Values are parsed as TOML; anything that does not parse is taken as a string.
pub fn load_table(file: Option<&Path>, overrides: &[String]) -> anyhow::Result<Table> {
    let mut table = match file {
        Some(path) => {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            text.parse::<Table>()
                .with_context(|| format!("parsing {}", path.display()))?
        }
        None => Table::new(),
    };
    for kv in overrides {
        let (key, raw) = kv
            .split_once('=')
            .ok_or_else(|| anyhow!("override `{kv}` is not KEY=VALUE"))?;
        let value = format!("v = {raw}")
            .parse::<Table>()
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| Value::String(raw.to_string()));
        set_path(&mut table, key.trim(), value)?;
    }
    Ok(table)
}

fn set_path(table: &mut Table, key: &str, value: Value) -> anyhow::Result<()> {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().filter(|s| !s.is_empty()).ok_or_else(|| anyhow!("empty override key"))?;
    let mut cur = table;
    for p in parts {
        let entry = cur.entry(p.to_string()).or_insert_with(|| Value::Table(Table::new()));
        cur = match entry {
            Value::Table(t) => t,
            _ => bail!("override `{key}`: `{p}` is not a section"),
        };
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

pub fn from_table<T: DeserializeOwned>(table: Table) -> anyhow::Result<T> {
    Ok(Value::Table(table).try_into()?)
}

/// Canonical TOML text of a resolved config and its SHA-256.
pub fn resolved<T: Serialize>(cfg: &T) -> (String, String) {
    let text = toml::to_string(cfg).expect("config serializes to TOML");
    let hash = hex::encode(Sha256::digest(text.as_bytes()));
    (text, hash)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_train_config() {
        let cfg = RunConfig::default();
        assert_eq!(cfg.train_config(), TrainConfig::default());
        let (text, _) = resolved(&cfg);
        assert_eq!(from_table::<RunConfig>(text.parse().unwrap()).unwrap(), cfg);
    }

    #[test]
    fn overrides_create_sections_and_parse_values() {
        let t = load_table(
            None,
            &[
                "train.epochs=5".into(),
                "attention.guidance=random:3".into(),
                "model.widths=[4, 8]".into(),
            ],
        )
        .unwrap();
        let cfg: RunConfig = from_table(t).unwrap();
        assert_eq!(cfg.train.epochs, 5);
        assert_eq!(cfg.attention.guidance, GuidanceSource::Random(3));
        assert_eq!(cfg.model.widths, vec![4, 8]);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let t = load_table(None, &["train.epochz=5".into()]).unwrap();
        assert!(from_table::<RunConfig>(t).is_err());
    }

    #[test]
    fn both_branches_off_means_no_attention() {
        let t = load_table(None, &["attention.channel=false".into(), "attention.spatial=false".into()]).unwrap();
        let cfg: RunConfig = from_table(t).unwrap();
        assert_eq!(cfg.train_config().model.pga, None);
    }
}
