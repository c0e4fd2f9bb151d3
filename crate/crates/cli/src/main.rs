//! `drf`: synthetic data, rendering, PAV extraction, training, evaluation,
//! ablation, inference and CAM export from one binary.
//!
//! Exit codes: 0 success, 2 usage or configuration error, 3 data error,
//! 4 runtime error.

mod config;
mod manifest;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use drf_core::checkpoint::{Checkpoint, MAGIC};
use drf_core::dataset::prepare;
use drf_core::evaluation::{ablation_csv, cam_heatmap, evaluate, run_ablation, AblationSpec, EvalError};
use drf_core::normalize::normalize_sequence;
use drf_core::pav::{apply_minmax, raw_pav, MinMaxStats, Pav};
use drf_core::pose_io::{load_dataset_dir, load_sequence, save_sequence, PoseSequence, ScreeningLabel};
use drf_core::skeleton_map::render_frame;
use drf_core::synth::{generate_dataset, split_by_subject};
use drf_core::training::{epoch_log_csv, train, TrainError};
use serde::Serialize;

use config::{from_table, load_table, resolved, RunConfig, SynthProfile};
use manifest::{sidecar, Manifest};

#[derive(Parser)]
#[command(name = "drf", version, about = "Pose-based scoliosis screening")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Config file plus overrides, shared by every configurable command.
#[derive(Args)]
struct ConfigArgs {
    /// TOML run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one key, e.g. `--set train.epochs=5`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a labeled synthetic dataset into DIR/train and DIR/test.
    Synth {
        #[arg(long)]
        out: PathBuf,
        /// TOML generation profile.
        #[arg(long)]
        profile: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Dump the joint and limb channels of every frame as PGM images.
    Render {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Write the 8 x 3 asymmetry matrix of one sequence as CSV.
    Pav {
        #[arg(long = "in")]
        input: PathBuf,
        /// Checkpoint or min-max statistics JSON; without it the raw values are written.
        #[arg(long)]
        stats: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Train on DATA/train (or DATA itself) and write a checkpoint.
    Train {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        epochs: Option<usize>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Evaluate on DATA/test (or DATA itself); metrics CSV to stdout and OUT.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Defaults to CKPT.eval.csv.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train and evaluate one model per attention variant.
    Ablate {
        #[arg(long)]
        data: Option<PathBuf>,
        /// TOML list of `[[runs]]`; the standard eight variants if omitted.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        epochs: Option<usize>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Classify one sequence; JSON on stdout.
    Infer {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
    },
    /// Class activation map of one sequence as a PGM image.
    Cam {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        /// negative, neutral, positive or 0-2; the predicted class if omitted.
        #[arg(long)]
        class: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Kind {
    Usage = 2,
    Data = 3,
    Runtime = 4,
}

struct Failure {
    kind: Kind,
    err: anyhow::Error,
}

type Result<T> = std::result::Result<T, Failure>;

trait Classify<T> {
    fn kind(self, kind: Kind) -> Result<T>;
    fn usage(self) -> Result<T>
    where
        Self: Sized,
    {
        self.kind(Kind::Usage)
    }
    fn data(self) -> Result<T>
    where
        Self: Sized,
    {
        self.kind(Kind::Data)
    }
    fn runtime(self) -> Result<T>
    where
        Self: Sized,
    {
        self.kind(Kind::Runtime)
    }
}

impl<T, E: Into<anyhow::Error>> Classify<T> for std::result::Result<T, E> {
    fn kind(self, kind: Kind) -> Result<T> {
        self.map_err(|e| Failure { kind, err: e.into() })
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.err);
            ExitCode::from(f.kind as u8)
        }
    }
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Synth {
            out,
            profile,
            seed,
            overrides,
        } => synth(&out, profile.as_deref(), seed, &overrides),
        Command::Render { input, out, cfg } => render(&input, &out, &cfg),
        Command::Pav {
            input,
            stats,
            out,
            cfg,
        } => pav(&input, stats.as_deref(), &out, &cfg),
        Command::Train {
            data,
            out,
            seed,
            epochs,
            cfg,
        } => train_cmd(data, out, seed, epochs, &cfg),
        Command::Eval { ckpt, data, out } => eval(&ckpt, &data, out),
        Command::Ablate {
            data,
            spec,
            out,
            seed,
            epochs,
            cfg,
        } => ablate(data, spec.as_deref(), out, seed, epochs, &cfg),
        Command::Infer { ckpt, input } => infer(&ckpt, &input),
        Command::Cam {
            ckpt,
            input,
            class,
            out,
        } => cam(&ckpt, &input, class.as_deref(), &out),
    }
}

fn run_config(args: &ConfigArgs, extra: Vec<String>) -> Result<RunConfig> {
    let mut overrides = args.overrides.clone();
    overrides.extend(extra);
    let table = load_table(args.config.as_deref(), &overrides).usage()?;
    from_table(table)
        .context("invalid run configuration")
        .usage()
}

fn flag_overrides(seed: Option<u64>, epochs: Option<usize>) -> Vec<String> {
    let mut v = Vec::new();
    if let Some(s) = seed {
        v.push(format!("train.seed={s}"));
    }
    if let Some(e) = epochs {
        v.push(format!("train.epochs={e}"));
    }
    v
}

fn required(path: Option<PathBuf>, what: &str) -> Result<PathBuf> {
    path.ok_or_else(|| anyhow!("missing {what}: pass --{what} or set paths.{what} in the config"))
        .usage()
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)
        .with_context(|| format!("creating {}", dir.display()))
        .runtime()
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    std::fs::write(path, contents)
        .with_context(|| format!("writing {}", path.display()))
        .runtime()
}

fn read_sequence(path: &Path) -> Result<PoseSequence> {
    load_sequence(path).data()
}

/// Sequences under `dir/split`, or under `dir` itself when that subdirectory is absent.
fn read_split(dir: &Path, split: &str) -> Result<(Vec<PoseSequence>, PathBuf)> {
    let sub = dir.join(split);
    let dir = if sub.is_dir() { sub } else { dir.to_path_buf() };
    let seqs = load_dataset_dir(&dir).data()?;
    if seqs.is_empty() {
        return Err(anyhow!("no .jsonl sequences in {}", dir.display())).data();
    }
    Ok((seqs, dir))
}

fn jsonl_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .with_context(|| format!("listing {}", dir.display()))
        .data()?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "jsonl"))
        .collect();
    files.sort();
    Ok(files)
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::load(path)
        .with_context(|| format!("loading checkpoint {}", path.display()))
        .data()
}

fn train_failure(e: TrainError) -> Failure {
    let kind = match e {
        TrainError::Config(_) => Kind::Usage,
        TrainError::SingleClass(_) | TrainError::Dataset(_) => Kind::Data,
        TrainError::Model(_) | TrainError::NonFinite { .. } => Kind::Runtime,
    };
    Failure { kind, err: e.into() }
}

fn eval_failure(e: EvalError) -> Failure {
    let kind = match e {
        EvalError::Empty | EvalError::Dataset(_) => Kind::Data,
        EvalError::Model(_) => Kind::Runtime,
    };
    Failure { kind, err: e.into() }
}

/// Command-line settings of commands whose model config lives in the checkpoint.
#[derive(Serialize)]
struct CheckpointArgs<'a> {
    ckpt: &'a Path,
    input: &'a Path,
    #[serde(skip_serializing_if = "Option::is_none")]
    class: Option<&'a str>,
    out: &'a Path,
}

fn synth(out: &Path, profile: Option<&Path>, seed: Option<u64>, overrides: &[String]) -> Result<()> {
    let mut overrides = overrides.to_vec();
    if let Some(s) = seed {
        overrides.push(format!("dataset.seed={s}"));
    }
    let table = load_table(profile, &overrides).usage()?;
    let prof: SynthProfile = from_table(table).context("invalid synth profile").usage()?;
    let seqs = generate_dataset(&prof.dataset).usage()?;
    let (train_set, test_set) = split_by_subject(&seqs, prof.test_fraction, prof.dataset.seed).usage()?;

    let mut outputs = Vec::new();
    for (split, set) in [("train", &train_set), ("test", &test_set)] {
        let dir = out.join(split);
        create_dir(&dir)?;
        // stale sequences from an earlier run would silently join the dataset
        for old in jsonl_files(&dir)? {
            std::fs::remove_file(&old)
                .with_context(|| format!("removing {}", old.display()))
                .runtime()?;
        }
        for s in set.iter() {
            let path = dir.join(format!("{}.jsonl", s.subject_id));
            save_sequence(s, &path).runtime()?;
            outputs.push(path);
        }
    }
    log::info!("wrote {} train / {} test sequences to {}", train_set.len(), test_set.len(), out.display());
    Manifest::new("synth", Some(prof.dataset.seed), resolved(&prof))
        .inputs(profile)
        .runtime()?
        .write(&out.join("manifest.json"), &outputs)
        .runtime()
}

fn render(input: &Path, out: &Path, args: &ConfigArgs) -> Result<()> {
    let cfg = run_config(args, Vec::new())?;
    let render = cfg.render_config();
    render.validate().usage()?;
    let seq = read_sequence(input)?;
    let norm = normalize_sequence(&seq, cfg.train.c_min).data()?;
    create_dir(out)?;
    let mut outputs = Vec::new();
    for (i, frame) in norm.frames.iter().enumerate() {
        let maps = render_frame(frame, &render);
        for (name, grid) in [("joints", &maps.keypoints), ("limbs", &maps.limbs)] {
            let path = out.join(format!("frame_{i:04}_{name}.pgm"));
            write_file(&path, grid.to_pgm())?;
            outputs.push(path);
        }
    }
    Manifest::new("render", None, resolved(&cfg))
        .inputs([input].into_iter().chain(args.config.as_deref()))
        .runtime()?
        .write(&out.join("manifest.json"), &outputs)
        .runtime()
}

fn read_stats(path: &Path) -> Result<(MinMaxStats, Option<f64>)> {
    let bytes = std::fs::read(path)
        .with_context(|| format!("reading {}", path.display()))
        .data()?;
    if bytes.starts_with(MAGIC) {
        let ck = Checkpoint::from_bytes(&bytes)
            .with_context(|| format!("loading checkpoint {}", path.display()))
            .data()?;
        return Ok((ck.stats, Some(ck.c_min)));
    }
    let stats = serde_json::from_slice(&bytes)
        .with_context(|| format!("{} is neither a checkpoint nor a statistics JSON", path.display()))
        .data()?;
    Ok((stats, None))
}

fn pav(input: &Path, stats_path: Option<&Path>, out: &Path, args: &ConfigArgs) -> Result<()> {
    let cfg = run_config(args, Vec::new())?;
    let stats = stats_path.map(read_stats).transpose()?;
    // a checkpoint carries its own threshold
    let c_min = stats.as_ref().and_then(|s| s.1).unwrap_or(cfg.train.c_min);
    let seq = read_sequence(input)?;
    let norm = normalize_sequence(&seq, c_min).data()?;
    let raw = raw_pav(&norm.frames, c_min);
    let pav = match &stats {
        Some((s, _)) => apply_minmax(&raw, s),
        None => Pav { values: raw.values },
    };
    write_file(out, pav.to_csv())?;
    Manifest::new("pav", None, resolved(&cfg))
        .inputs([input].into_iter().chain(stats_path).chain(args.config.as_deref()))
        .runtime()?
        .write(&sidecar(out, ".manifest.json"), &[out.to_path_buf()])
        .runtime()
}

fn train_cmd(
    data: Option<PathBuf>,
    out: Option<PathBuf>,
    seed: Option<u64>,
    epochs: Option<usize>,
    args: &ConfigArgs,
) -> Result<()> {
    let cfg = run_config(args, flag_overrides(seed, epochs))?;
    let data = required(data.or_else(|| cfg.paths.data.clone()), "data")?;
    let out = required(out.or_else(|| cfg.paths.out.clone()), "out")?;
    let tc = cfg.train_config();
    tc.validate().map_err(|e| Failure {
        kind: Kind::Usage,
        err: e.into(),
    })?;
    let (seqs, dir) = read_split(&data, "train")?;
    log::info!("training on {} sequences from {}", seqs.len(), dir.display());
    let ck = train(&seqs, &tc).map_err(train_failure)?;
    write_file(&out, ck.to_bytes())?;
    let log_path = sidecar(&out, ".epochs.csv");
    write_file(&log_path, epoch_log_csv(&ck.meta.log))?;
    let inputs = jsonl_files(&dir)?;
    Manifest::new("train", Some(tc.seed), resolved(&cfg))
        .inputs(inputs.iter().map(PathBuf::as_path).chain(args.config.as_deref()))
        .runtime()?
        .write(&sidecar(&out, ".manifest.json"), &[out.clone(), log_path])
        .runtime()
}

fn eval(ckpt: &Path, data: &Path, out: Option<PathBuf>) -> Result<()> {
    let ck = load_checkpoint(ckpt)?;
    let (seqs, dir) = read_split(data, "test")?;
    let report = evaluate(&ck, &seqs).map_err(eval_failure)?;
    let csv = report.to_csv();
    print!("{csv}");
    let out = out.unwrap_or_else(|| sidecar(ckpt, ".eval.csv"));
    write_file(&out, &csv)?;
    let inputs = jsonl_files(&dir)?;
    let settings = CheckpointArgs {
        ckpt,
        input: &dir,
        class: None,
        out: &out,
    };
    Manifest::new("eval", Some(ck.meta.seed), resolved(&settings))
        .inputs([ckpt].into_iter().chain(inputs.iter().map(PathBuf::as_path)))
        .runtime()?
        .write(&sidecar(&out, ".manifest.json"), &[out.clone()])
        .runtime()
}

fn ablate(
    data: Option<PathBuf>,
    spec: Option<&Path>,
    out: Option<PathBuf>,
    seed: Option<u64>,
    epochs: Option<usize>,
    args: &ConfigArgs,
) -> Result<()> {
    let cfg = run_config(args, flag_overrides(seed, epochs))?;
    let data = required(data.or_else(|| cfg.paths.data.clone()), "data")?;
    let out = required(out.or_else(|| cfg.paths.out.clone()), "out")?;
    let base = cfg.train_config();
    base.validate().map_err(|e| Failure {
        kind: Kind::Usage,
        err: e.into(),
    })?;
    let runs = match spec {
        Some(p) => {
            let table = load_table(Some(p), &[]).usage()?;
            from_table::<AblationSpec>(table).context("invalid ablation spec").usage()?
        }
        None => AblationSpec::standard(base.seed),
    };
    let (train_set, train_dir) = read_split(&data, "train")?;
    let (test_set, test_dir) = read_split(&data, "test")?;
    let rows = run_ablation(&runs, &train_set, &test_set, &base);
    create_dir(&out)?;
    let table = out.join("ablation.csv");
    let csv = ablation_csv(&rows);
    print!("{csv}");
    write_file(&table, &csv)?;
    let mut inputs = jsonl_files(&train_dir)?;
    inputs.extend(jsonl_files(&test_dir)?);
    inputs.extend(spec.map(Path::to_path_buf));
    inputs.extend(args.config.clone());
    Manifest::new("ablate", Some(base.seed), resolved(&cfg))
        .inputs(inputs.iter().map(PathBuf::as_path))
        .runtime()?
        .write(&out.join("manifest.json"), &[table])
        .runtime()
}

#[derive(Serialize)]
struct Attention {
    channel: Option<Vec<f64>>,
    spatial: Option<Vec<f64>>,
}

#[derive(Serialize)]
struct InferOutput {
    subject_id: String,
    label: ScreeningLabel,
    logits: Vec<f64>,
    probabilities: Vec<f64>,
    pav: Vec<f64>,
    attention: Attention,
}

fn infer(ckpt: &Path, input: &Path) -> Result<()> {
    let ck = load_checkpoint(ckpt)?;
    let seq = read_sequence(input)?;
    let sample = prepare(&seq, &ck.stats, &ck.render, ck.c_min).data()?;
    let pav = ck.model.needs_pav().then_some(sample.pav.as_slice());
    let inf = ck.model.infer(&sample.maps, pav).runtime()?;
    let max = inf.logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exp: Vec<f64> = inf.logits.iter().map(|l| (l - max).exp()).collect();
    let z: f64 = exp.iter().sum();
    let out = InferOutput {
        subject_id: seq.subject_id,
        label: inf.predicted,
        probabilities: exp.iter().map(|e| e / z).collect(),
        logits: inf.logits,
        pav: sample.pav,
        attention: Attention {
            channel: inf.w_c,
            spatial: inf.w_s,
        },
    };
    println!("{}", serde_json::to_string(&out).runtime()?);
    Ok(())
}

fn parse_class(s: &str) -> Result<ScreeningLabel> {
    s.parse::<usize>()
        .ok()
        .and_then(ScreeningLabel::from_index)
        .map_or_else(|| s.parse::<ScreeningLabel>(), Ok)
        .usage()
}

fn cam(ckpt: &Path, input: &Path, class: Option<&str>, out: &Path) -> Result<()> {
    let ck = load_checkpoint(ckpt)?;
    let seq = read_sequence(input)?;
    let class = match class {
        Some(c) => parse_class(c)?,
        None => {
            let sample = prepare(&seq, &ck.stats, &ck.render, ck.c_min).data()?;
            let pav = ck.model.needs_pav().then_some(sample.pav.as_slice());
            ck.model.infer(&sample.maps, pav).runtime()?.predicted
        }
    };
    let grid = cam_heatmap(&ck, &seq, class).map_err(eval_failure)?;
    write_file(out, grid.to_pgm())?;
    log::info!("class `{class}` activation map written to {}", out.display());
    let settings = CheckpointArgs {
        ckpt,
        input,
        class: Some(class.as_str()),
        out,
    };
    Manifest::new("cam", Some(ck.meta.seed), resolved(&settings))
        .inputs([ckpt, input])
        .runtime()?
        .write(&sidecar(out, ".manifest.json"), &[out.to_path_buf()])
        .runtime()
}
