//! The DRF network.
//!
//! Skeleton maps `[B, T, 2, H, W]` go through a small stack of 3x3
//! convolutions applied to every frame, a max over frames, and horizontal
//! strip pooling (max + mean per band) to give `F_enc: [B, C, S]`. The
//! guided-attention block turns a 24-dim guidance vector into channel
//! weights `w_c = σ(W_c g + b_c)` and strip weights
//! `w_s = σ(W_r conv3(g) + b_r)`, and scales `F_enc` by both. Each strip has
//! its own linear embedding head; the mean strip embedding feeds a linear
//! classifier over the three screening classes.
//!
//! Parameters live in a named [`ParamStore`], so checkpoints and the
//! optimizer can treat the model as a flat list of tensors.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autograd::{Tape, Var};
use crate::pav::PAV_LEN;
use crate::pose_io::ScreeningLabel;
use crate::tensor::{ParamId, ParamStore, Tensor, TensorError};

pub const NUM_CLASSES: usize = ScreeningLabel::ALL.len();
const KERNEL: usize = 3;
const PGA_STREAM: u64 = 1;
const GUIDANCE_STREAM: u64 = 2;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error("expected frames of {expected:?} (height, width), got {got:?}")]
    FrameSize {
        expected: (usize, usize),
        got: (usize, usize),
    },
    #[error("expected input of shape [B, T, 2, H, W] or [T, 2, H, W], got {0:?}")]
    InputShape(Vec<usize>),
    #[error("guidance source `pav` needs a PAV for every sample")]
    MissingPav,
    #[error("PAV batch has shape {got:?}, expected [{batch}, {PAV_LEN}]")]
    PavShape { got: Vec<usize>, batch: usize },
    #[error("operation needs guidance source `pav`, model uses `{0}`")]
    GuidanceMismatch(GuidanceSource),
    #[error("parameter `{0}` is missing or has the wrong shape")]
    Parameter(String),
}

type Result<T> = std::result::Result<T, ModelError>;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    /// Output channels of each conv stage; the last entry is `C`.
    pub widths: Vec<usize>,
    /// Stride of each stage.
    pub strides: Vec<usize>,
    /// Number of horizontal strips `S`.
    pub strips: usize,
    pub in_channels: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            widths: vec![32, 64, 128, 256],
            strides: vec![1, 2, 2, 1],
            strips: 16,
            in_channels: 2,
        }
    }
}

fn conv_out(len: usize, stride: usize) -> usize {
    // kernel 3, padding 1
    (len + 2 - KERNEL) / stride + 1
}

impl EncoderConfig {
    pub fn channels(&self) -> usize {
        self.widths.last().copied().unwrap_or(0)
    }

    /// Final feature map `(height, width)` for a canvas, after validation.
    pub fn feature_size(&self, canvas: (usize, usize)) -> Result<(usize, usize)> {
        let err = |m: String| Err(ModelError::Config(m));
        if self.widths.is_empty() || self.widths.contains(&0) {
            return err("stage widths must be non-empty and positive".into());
        }
        if self.strides.len() != self.widths.len() || self.strides.contains(&0) {
            return err("need one positive stride per stage".into());
        }
        if self.strips == 0 || self.in_channels == 0 {
            return err("strips and input channels must be at least 1".into());
        }
        let (mut h, mut w) = canvas;
        for &s in &self.strides {
            h = conv_out(h, s);
            w = conv_out(w, s);
        }
        if h % self.strips != 0 {
            return err(format!(
                "{} strips do not evenly divide the final feature height {h}",
                self.strips
            ));
        }
        Ok((h, w))
    }
}

/// Where the 24-dim attention guidance comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum GuidanceSource {
    Pav,
    SelfAttention,
    AllOnes,
    Random(u64),
    Learnable,
}

impl fmt::Display for GuidanceSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Pav => f.write_str("pav"),
            Self::SelfAttention => f.write_str("self_attention"),
            Self::AllOnes => f.write_str("all_ones"),
            Self::Random(seed) => write!(f, "random:{seed}"),
            Self::Learnable => f.write_str("learnable"),
        }
    }
}

impl FromStr for GuidanceSource {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "pav" => Ok(Self::Pav),
            "self_attention" => Ok(Self::SelfAttention),
            "all_ones" => Ok(Self::AllOnes),
            "learnable" => Ok(Self::Learnable),
            "random" => Ok(Self::Random(0)),
            _ => match s.strip_prefix("random:") {
                Some(seed) => seed
                    .parse()
                    .map(Self::Random)
                    .map_err(|_| format!("bad random guidance seed `{seed}`")),
                None => Err(format!(
                    "unknown guidance source `{s}` (pav, self_attention, all_ones, random:SEED, learnable)"
                )),
            },
        }
    }
}

impl TryFrom<String> for GuidanceSource {
    type Error = String;

    fn try_from(s: String) -> std::result::Result<Self, String> {
        s.parse()
    }
}

impl From<GuidanceSource> for String {
    fn from(g: GuidanceSource) -> String {
        g.to_string()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct PgaConfig {
    pub guidance: GuidanceSource,
    pub channel: bool,
    pub spatial: bool,
    /// Start every attention weight and bias at zero, so both weights read 0.5.
    pub zero_init: bool,
}

impl Default for PgaConfig {
    fn default() -> Self {
        Self {
            guidance: GuidanceSource::Pav,
            channel: true,
            spatial: true,
            zero_init: false,
        }
    }
}

impl PgaConfig {
    pub fn is_active(&self) -> bool {
        self.channel || self.spatial
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub embed_dim: usize,
    /// `None`, or a config with both branches off, means no attention block.
    pub pga: Option<PgaConfig>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            embed_dim: 64,
            pga: Some(PgaConfig::default()),
        }
    }
}

impl ModelConfig {
    pub fn active_pga(&self) -> Option<&PgaConfig> {
        self.pga.as_ref().filter(|p| p.is_active())
    }

    /// Guidance source of an active attention block.
    pub fn guidance(&self) -> Option<GuidanceSource> {
        self.active_pga().map(|p| p.guidance)
    }
}

#[derive(Debug, Clone)]
struct Ids {
    convs: Vec<(ParamId, ParamId)>,
    channel: Option<(ParamId, ParamId)>,
    spatial: Option<SpatialIds>,
    learnable: Option<ParamId>,
    self_attention: Option<(ParamId, ParamId)>,
    strip_w: ParamId,
    strip_b: ParamId,
    cls_w: ParamId,
    cls_b: ParamId,
}

#[derive(Debug, Clone, Copy)]
struct SpatialIds {
    conv_w: ParamId,
    conv_b: ParamId,
    resize_w: ParamId,
    resize_b: ParamId,
}

/// Nodes of one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct ForwardOutput {
    /// Last conv activation before any pooling, `[B * T, C, h, w]`.
    pub last_conv: Var,
    pub f_enc: Var,
    pub f_out: Var,
    pub guidance: Option<Var>,
    /// `[B, C]`
    pub w_c: Option<Var>,
    /// `[B, S]`
    pub w_s: Option<Var>,
    /// `[S, B, d]`
    pub embeddings: Var,
    /// `[B, 3]`
    pub logits: Var,
}

/// Plain values from a tape-free single-sequence pass.
#[derive(Debug, Clone, PartialEq)]
pub struct Inference {
    pub logits: Vec<f64>,
    pub predicted: ScreeningLabel,
    pub f_enc: Tensor,
    pub f_out: Tensor,
    pub w_c: Option<Vec<f64>>,
    pub w_s: Option<Vec<f64>>,
    /// Temporally max-pooled last conv activation, `[C, h, w]`.
    pub activation: Tensor,
}

#[derive(Debug, Clone)]
pub struct Drf {
    config: ModelConfig,
    canvas: (usize, usize),
    feature: (usize, usize),
    params: ParamStore,
    ids: Ids,
    random_guidance: Option<Vec<f64>>,
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], bound: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("length matches shape")
}

/// Fixed guidance vector of a `random:SEED` source.
pub fn random_guidance(seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..PAV_LEN).map(|_| rng.random::<f64>()).collect()
}

impl Drf {
    /// Fresh model for a `(height, width)` canvas. Encoder and heads draw from
    /// one random stream and the attention block from another, so toggling
    /// attention leaves every shared parameter unchanged.
    pub fn new(config: ModelConfig, canvas: (usize, usize), seed: u64) -> Result<Self> {
        let mut params = ParamStore::new();
        let shapes = Self::param_shapes(&config, canvas)?;
        let zero_pga = config.active_pga().is_some_and(|p| p.zero_init);
        let mut base = ChaCha8Rng::seed_from_u64(seed);
        let mut pga = ChaCha8Rng::seed_from_u64(seed);
        pga.set_stream(PGA_STREAM);
        let mut guide = ChaCha8Rng::seed_from_u64(seed);
        guide.set_stream(GUIDANCE_STREAM);
        for (name, shape) in shapes {
            let fan_in: usize = match shape.len() {
                1 if name.ends_with(".b") => 0,
                1 => 1,
                _ => shape[shape.len() - 1] * if shape.len() == 4 { shape[1] * shape[2] } else { 1 },
            };
            let value = if name.starts_with("guide.learnable") {
                let n = shape.iter().product();
                Tensor::new(shape, (0..n).map(|_| guide.random::<f64>()).collect())?
            } else if name.ends_with(".b") || (name.starts_with("pga.") && zero_pga) {
                Tensor::zeros(&shape)
            } else if name.starts_with("enc.") {
                // He-uniform for ReLU stages
                uniform(&mut base, &shape, (6.0 / fan_in as f64).sqrt())
            } else {
                let rng = if name.starts_with("pga.") || name.starts_with("guide.") {
                    &mut pga
                } else {
                    &mut base
                };
                uniform(rng, &shape, (1.0 / fan_in as f64).sqrt())
            };
            params.insert(name, value)?;
        }
        Self::from_params(config, canvas, params)
    }

    /// Names and shapes of every parameter, in creation order.
    pub fn param_shapes(config: &ModelConfig, canvas: (usize, usize)) -> Result<Vec<(String, Vec<usize>)>> {
        config.encoder.feature_size(canvas)?;
        if config.embed_dim == 0 {
            return Err(ModelError::Config("embedding dimension must be at least 1".into()));
        }
        let enc = &config.encoder;
        let (c, s, d) = (enc.channels(), enc.strips, config.embed_dim);
        let mut out = Vec::new();
        let mut cin = enc.in_channels;
        for (i, &w) in enc.widths.iter().enumerate() {
            out.push((format!("enc.{i}.w"), vec![w, cin, KERNEL, KERNEL]));
            out.push((format!("enc.{i}.b"), vec![w]));
            cin = w;
        }
        if let Some(p) = config.active_pga() {
            match p.guidance {
                GuidanceSource::Learnable => out.push(("guide.learnable".into(), vec![PAV_LEN])),
                GuidanceSource::SelfAttention => {
                    out.push(("guide.sa.w".into(), vec![PAV_LEN, c]));
                    out.push(("guide.sa.b".into(), vec![PAV_LEN]));
                }
                _ => {}
            }
            if p.channel {
                out.push(("pga.channel.w".into(), vec![c, PAV_LEN]));
                out.push(("pga.channel.b".into(), vec![c]));
            }
            if p.spatial {
                out.push(("pga.spatial.conv.w".into(), vec![1, 1, KERNEL]));
                out.push(("pga.spatial.conv.b".into(), vec![1]));
                out.push(("pga.spatial.resize.w".into(), vec![s, PAV_LEN]));
                out.push(("pga.spatial.resize.b".into(), vec![s]));
            }
        }
        out.push(("head.strip.w".into(), vec![s, d, c]));
        out.push(("head.strip.b".into(), vec![s, d]));
        out.push(("head.cls.w".into(), vec![NUM_CLASSES, d]));
        out.push(("head.cls.b".into(), vec![NUM_CLASSES]));
        Ok(out)
    }

    /// Rebuilds a model around existing parameters, checking every name and shape.
    pub fn from_params(config: ModelConfig, canvas: (usize, usize), params: ParamStore) -> Result<Self> {
        let feature = config.encoder.feature_size(canvas)?;
        let shapes = Self::param_shapes(&config, canvas)?;
        if shapes.len() != params.len() {
            return Err(ModelError::Config(format!(
                "expected {} parameters, got {}",
                shapes.len(),
                params.len()
            )));
        }
        for (name, shape) in &shapes {
            match params.id(name) {
                Some(id) if params.value(id).shape() == shape.as_slice() => {}
                _ => return Err(ModelError::Parameter(name.clone())),
            }
        }
        let id = |n: &str| params.id(n).expect("checked above");
        let opt = |n: &str| params.id(n);
        let convs = (0..config.encoder.widths.len())
            .map(|i| (id(&format!("enc.{i}.w")), id(&format!("enc.{i}.b"))))
            .collect();
        let ids = Ids {
            convs,
            channel: opt("pga.channel.w").zip(opt("pga.channel.b")),
            spatial: opt("pga.spatial.conv.w").map(|conv_w| SpatialIds {
                conv_w,
                conv_b: id("pga.spatial.conv.b"),
                resize_w: id("pga.spatial.resize.w"),
                resize_b: id("pga.spatial.resize.b"),
            }),
            learnable: opt("guide.learnable"),
            self_attention: opt("guide.sa.w").zip(opt("guide.sa.b")),
            strip_w: id("head.strip.w"),
            strip_b: id("head.strip.b"),
            cls_w: id("head.cls.w"),
            cls_b: id("head.cls.b"),
        };
        let random_guidance = match config.guidance() {
            Some(GuidanceSource::Random(seed)) => Some(random_guidance(seed)),
            _ => None,
        };
        Ok(Self {
            config,
            canvas,
            feature,
            params,
            ids,
            random_guidance,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// `(height, width)` of the input canvas.
    pub fn canvas(&self) -> (usize, usize) {
        self.canvas
    }

    /// `(height, width)` of the last conv activation.
    pub fn feature_size(&self) -> (usize, usize) {
        self.feature
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn into_params(self) -> ParamStore {
        self.params
    }

    pub fn needs_pav(&self) -> bool {
        self.config.guidance() == Some(GuidanceSource::Pav)
    }

    fn check_maps(&self, tape: &Tape, maps: Var) -> Result<(usize, usize)> {
        let s = tape.shape(maps);
        let &[b, t, ch, h, w] = s else {
            return Err(ModelError::InputShape(s.to_vec()));
        };
        if ch != self.config.encoder.in_channels || b == 0 || t == 0 {
            return Err(ModelError::InputShape(s.to_vec()));
        }
        if (h, w) != self.canvas {
            return Err(ModelError::FrameSize {
                expected: self.canvas,
                got: (h, w),
            });
        }
        Ok((b, t))
    }

    /// `maps: [B, T, 2, H, W]` → (`F_enc: [B, C, S]`, last conv activation).
    pub fn encode(&self, tape: &mut Tape, maps: Var) -> Result<(Var, Var)> {
        let (b, t) = self.check_maps(tape, maps)?;
        let (h, w) = self.canvas;
        let enc = &self.config.encoder;
        let mut x = tape.reshape(maps, &[b * t, enc.in_channels, h, w])?;
        for (&(wid, bid), &stride) in self.ids.convs.iter().zip(&enc.strides) {
            let wv = tape.param(&self.params, wid);
            let bv = tape.param(&self.params, bid);
            let y = tape.conv2d(x, wv, bv, stride, 1)?;
            x = tape.relu(y);
        }
        let last = x;
        let (c, (fh, fw), s) = (enc.channels(), self.feature, enc.strips);
        let per_frame = tape.reshape(last, &[b, t, c * fh * fw])?;
        let pooled = tape.max_axis(per_frame, 1)?;
        let bands = tape.reshape(pooled, &[b, c, s, (fh / s) * fw])?;
        let mx = tape.max_axis(bands, 3)?;
        let mean = tape.mean_axis(bands, 3)?;
        Ok((tape.add(mx, mean)?, last))
    }

    /// Guidance batch `[B, 24]` for the configured source.
    pub fn guidance_vector(&self, tape: &mut Tape, f_enc: Var, pav: Option<&Tensor>) -> Result<Var> {
        let b = tape.shape(f_enc)[0];
        let Some(source) = self.config.guidance() else {
            return Err(ModelError::Config("model has no attention block".into()));
        };
        let repeat = |v: &[f64]| {
            let data = v.iter().copied().cycle().take(b * PAV_LEN).collect();
            Tensor::new(vec![b, PAV_LEN], data).expect("length matches shape")
        };
        Ok(match source {
            GuidanceSource::Pav => {
                let v = pav.ok_or(ModelError::MissingPav)?;
                if v.shape() != [b, PAV_LEN] {
                    return Err(ModelError::PavShape {
                        got: v.shape().to_vec(),
                        batch: b,
                    });
                }
                tape.constant(v.clone())
            }
            GuidanceSource::AllOnes => tape.constant(Tensor::full(&[b, PAV_LEN], 1.0)),
            GuidanceSource::Random(_) => {
                let v = self.random_guidance.as_deref().expect("set for random source");
                tape.constant(repeat(v))
            }
            GuidanceSource::Learnable => {
                let p = tape.param(&self.params, self.ids.learnable.expect("learnable guidance"));
                let row = tape.reshape(p, &[1, PAV_LEN])?;
                let ones = tape.constant(Tensor::full(&[b, PAV_LEN], 1.0));
                tape.mul(ones, row)?
            }
            GuidanceSource::SelfAttention => {
                let (wid, bid) = self.ids.self_attention.expect("self-attention guidance");
                let pooled = tape.mean_axis(f_enc, 2)?;
                let w = tape.param(&self.params, wid);
                let bias = tape.param(&self.params, bid);
                tape.linear(pooled, w, bias)?
            }
        })
    }

    /// Attention weights from a guidance batch and the recalibrated features.
    pub fn attend(&self, tape: &mut Tape, guidance: Var, f_enc: Var) -> Result<(Option<Var>, Option<Var>, Var)> {
        let (b, c, s) = {
            let sh = tape.shape(f_enc);
            (sh[0], sh[1], sh[2])
        };
        let mut out = f_enc;
        let mut w_c = None;
        let mut w_s = None;
        if let Some((wid, bid)) = self.ids.channel {
            let w = tape.param(&self.params, wid);
            let bias = tape.param(&self.params, bid);
            let z = tape.linear(guidance, w, bias)?;
            let wc = tape.sigmoid(z);
            let col = tape.reshape(wc, &[b, c, 1])?;
            out = tape.mul(out, col)?;
            w_c = Some(wc);
        }
        if let Some(sp) = self.ids.spatial {
            let g3 = tape.reshape(guidance, &[b, 1, PAV_LEN])?;
            let kw = tape.param(&self.params, sp.conv_w);
            let kb = tape.param(&self.params, sp.conv_b);
            let conv = tape.conv1d(g3, kw, kb, 1)?;
            let conv = tape.reshape(conv, &[b, PAV_LEN])?;
            let rw = tape.param(&self.params, sp.resize_w);
            let rb = tape.param(&self.params, sp.resize_b);
            let z = tape.linear(conv, rw, rb)?;
            let ws = tape.sigmoid(z);
            let row = tape.reshape(ws, &[b, 1, s])?;
            out = tape.mul(out, row)?;
            w_s = Some(ws);
        }
        Ok((w_c, w_s, out))
    }

    /// The attention step for PAV-guided models only.
    pub fn pga(&self, tape: &mut Tape, pav: &Tensor, f_enc: Var) -> Result<(Option<Var>, Option<Var>, Var)> {
        match self.config.guidance() {
            Some(GuidanceSource::Pav) => {}
            Some(other) => return Err(ModelError::GuidanceMismatch(other)),
            None => return Err(ModelError::Config("model has no attention block".into())),
        }
        let g = self.guidance_vector(tape, f_enc, Some(pav))?;
        self.attend(tape, g, f_enc)
    }

    /// `F_out: [B, C, S]` → (embeddings `[S, B, d]`, logits `[B, 3]`).
    pub fn heads(&self, tape: &mut Tape, f_out: Var) -> Result<(Var, Var)> {
        let (b, c, s) = {
            let sh = tape.shape(f_out);
            (sh[0], sh[1], sh[2])
        };
        // [B, C, S] -> [S, B, C]
        let mut idx = Vec::with_capacity(b * c * s);
        for h in 0..s {
            for bi in 0..b {
                for ci in 0..c {
                    idx.push((bi * c + ci) * s + h);
                }
            }
        }
        let flat = tape.gather(f_out, idx)?;
        let strips = tape.reshape(flat, &[s, b, c])?;
        let sw = tape.param(&self.params, self.ids.strip_w);
        let sb = tape.param(&self.params, self.ids.strip_b);
        let emb = tape.batched_linear(strips, sw, sb)?;
        let pooled = tape.mean_axis(emb, 0)?;
        let cw = tape.param(&self.params, self.ids.cls_w);
        let cb = tape.param(&self.params, self.ids.cls_b);
        let logits = tape.linear(pooled, cw, cb)?;
        Ok((emb, logits))
    }

    /// Full forward pass. `maps: [B, T, 2, H, W]`; `pav: [B, 24]` is required
    /// for PAV guidance and ignored otherwise.
    pub fn forward(&self, tape: &mut Tape, maps: &Tensor, pav: Option<&Tensor>) -> Result<ForwardOutput> {
        let maps = if maps.rank() == 4 {
            let mut shape = vec![1];
            shape.extend_from_slice(maps.shape());
            tape.constant(maps.clone().reshape(&shape)?)
        } else {
            tape.constant(maps.clone())
        };
        let (f_enc, last_conv) = self.encode(tape, maps)?;
        let (guidance, w_c, w_s, f_out) = if self.config.active_pga().is_some() {
            let g = self.guidance_vector(tape, f_enc, pav)?;
            let (w_c, w_s, f_out) = self.attend(tape, g, f_enc)?;
            (Some(g), w_c, w_s, f_out)
        } else {
            (None, None, None, f_enc)
        };
        let (embeddings, logits) = self.heads(tape, f_out)?;
        Ok(ForwardOutput {
            last_conv,
            f_enc,
            f_out,
            guidance,
            w_c,
            w_s,
            embeddings,
            logits,
        })
    }

    /// Single sequence `[T, 2, H, W]` with its flattened PAV, if any.
    pub fn infer(&self, maps: &Tensor, pav: Option<&[f64]>) -> Result<Inference> {
        let pav = pav.map(|v| Tensor::new(vec![1, v.len()], v.to_vec())).transpose()?;
        let mut tape = Tape::new();
        let out = self.forward(&mut tape, maps, pav.as_ref())?;
        let logits = tape.value(out.logits).data().to_vec();
        let best = argmax(&logits);
        let (c, (fh, fw)) = (self.config.encoder.channels(), self.feature);
        let act = tape.reshape(out.last_conv, &[1, maps.shape()[0], c * fh * fw])?;
        let act = tape.max_axis(act, 1)?;
        let squeeze = |v: Var| {
            let t = tape.value(v);
            t.clone().reshape(&t.shape()[1..]).expect("leading batch of one")
        };
        Ok(Inference {
            predicted: ScreeningLabel::from_index(best).expect("three logits"),
            logits,
            f_enc: squeeze(out.f_enc),
            f_out: squeeze(out.f_out),
            w_c: out.w_c.map(|v| tape.value(v).data().to_vec()),
            w_s: out.w_s.map(|v| tape.value(v).data().to_vec()),
            activation: tape.value(act).clone().reshape(&[c, fh, fw])?,
        })
    }

    /// Per-channel weights linking the pooled last activation to one class
    /// logit: the classifier composed with each strip head, scaled by the
    /// attention weights of that sample and averaged over strips.
    pub fn effective_channel_weights(&self, class: ScreeningLabel, w_c: Option<&[f64]>, w_s: Option<&[f64]>) -> Vec<f64> {
        let c = self.config.encoder.channels();
        let (s, d) = (self.config.encoder.strips, self.config.embed_dim);
        let sw = self.params.value(self.ids.strip_w).data();
        let cw = &self.params.value(self.ids.cls_w).data()[class.index() * d..][..d];
        let mut eff = vec![0.0; c];
        for h in 0..s {
            let strip_scale = w_s.map_or(1.0, |ws| ws[h]) / s as f64;
            for (j, &wj) in cw.iter().enumerate() {
                let row = &sw[(h * d + j) * c..][..c];
                for (e, &r) in eff.iter_mut().zip(row) {
                    *e += strip_scale * wj * r;
                }
            }
        }
        if let Some(wc) = w_c {
            for (e, &w) in eff.iter_mut().zip(wc) {
                *e *= w;
            }
        }
        eff
    }
}

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::sigmoid;
    use crate::gradcheck::grad_check_params;

    fn toy_config(pga: Option<PgaConfig>) -> ModelConfig {
        ModelConfig {
            encoder: EncoderConfig {
                widths: vec![3, 4, 4],
                strides: vec![1, 2, 1],
                strips: 4,
                in_channels: 2,
            },
            embed_dim: 5,
            pga,
        }
    }

    fn pga(guidance: GuidanceSource) -> Option<PgaConfig> {
        Some(PgaConfig {
            guidance,
            ..PgaConfig::default()
        })
    }

    fn rand_maps(seed: u64, shape: &[usize]) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random::<f64>()).collect()).unwrap()
    }

    fn rand_pav(seed: u64, b: usize) -> Tensor {
        rand_maps(seed, &[b, PAV_LEN])
    }

    fn f_enc_of(model: &Drf, maps: &Tensor) -> Vec<f64> {
        let mut t = Tape::new();
        let m = t.constant(maps.clone());
        let (f, _) = model.encode(&mut t, m).unwrap();
        t.value(f).data().to_vec()
    }

    fn frames_of(maps: &Tensor, order: &[usize]) -> Tensor {
        let per = maps.len() / maps.shape()[1];
        let data = order.iter().flat_map(|&i| maps.data()[i * per..][..per].to_vec()).collect();
        let mut shape = maps.shape().to_vec();
        shape[1] = order.len();
        Tensor::new(shape, data).unwrap()
    }

    #[test]
    fn default_encoder_fits_default_canvas() {
        assert_eq!(EncoderConfig::default().feature_size((64, 64)).unwrap(), (16, 16));
        let bad = EncoderConfig {
            strips: 5,
            ..EncoderConfig::default()
        };
        assert!(matches!(bad.feature_size((64, 64)), Err(ModelError::Config(_))));
    }

    #[test]
    fn guidance_source_strings_round_trip() {
        for g in [
            GuidanceSource::Pav,
            GuidanceSource::SelfAttention,
            GuidanceSource::AllOnes,
            GuidanceSource::Random(7),
            GuidanceSource::Learnable,
        ] {
            assert_eq!(g.to_string().parse::<GuidanceSource>().unwrap(), g);
            let json = serde_json::to_string(&g).unwrap();
            assert_eq!(serde_json::from_str::<GuidanceSource>(&json).unwrap(), g);
        }
        assert!("random:x".parse::<GuidanceSource>().is_err());
        assert!("gaze".parse::<GuidanceSource>().is_err());
    }

    #[test]
    fn encode_is_invariant_to_frame_order_and_duplication() {
        let model = Drf::new(toy_config(None), (8, 8), 1).unwrap();
        let maps = rand_maps(2, &[1, 4, 2, 8, 8]);
        let base = f_enc_of(&model, &maps);
        assert_eq!(f_enc_of(&model, &frames_of(&maps, &[2, 0, 3, 1])), base);
        assert_eq!(f_enc_of(&model, &frames_of(&maps, &[0, 0, 1, 1, 2, 2, 3, 3])), base);
    }

    #[test]
    fn zero_maps_are_repeatable() {
        let model = Drf::new(toy_config(None), (8, 8), 1).unwrap();
        let zeros = Tensor::zeros(&[1, 2, 2, 8, 8]);
        assert_eq!(f_enc_of(&model, &zeros), f_enc_of(&model, &zeros));
    }

    #[test]
    fn frame_size_mismatch_is_an_error() {
        let model = Drf::new(toy_config(None), (8, 8), 1).unwrap();
        let err = model.forward(&mut Tape::new(), &Tensor::zeros(&[2, 2, 8, 9]), None);
        assert!(matches!(err, Err(ModelError::FrameSize { .. })));
    }

    #[test]
    fn zero_init_halves_both_weights() {
        let cfg = toy_config(Some(PgaConfig {
            zero_init: true,
            ..PgaConfig::default()
        }));
        let model = Drf::new(cfg, (8, 8), 3).unwrap();
        let mut t = Tape::new();
        let out = model
            .forward(&mut t, &rand_maps(4, &[2, 3, 2, 8, 8]), Some(&rand_pav(5, 2)))
            .unwrap();
        assert!(t.value(out.w_c.unwrap()).data().iter().all(|&w| w == 0.5));
        assert!(t.value(out.w_s.unwrap()).data().iter().all(|&w| w == 0.5));
        let (enc, fout) = (t.value(out.f_enc).data(), t.value(out.f_out).data());
        for (e, o) in enc.iter().zip(fout) {
            assert_eq!(*o, 0.25 * e);
        }
    }

    #[test]
    fn recalibration_matches_double_loop() {
        let model = Drf::new(toy_config(pga(GuidanceSource::Pav)), (8, 8), 6).unwrap();
        let pav = rand_pav(7, 2);
        let mut t = Tape::new();
        let out = model.forward(&mut t, &rand_maps(8, &[2, 3, 2, 8, 8]), Some(&pav)).unwrap();
        let (c, s) = (4, 4);
        let p = model.params();
        let val = |n: &str| p.value(p.id(n).unwrap()).data().to_vec();
        let (wc_w, wc_b) = (val("pga.channel.w"), val("pga.channel.b"));
        let (k, kb) = (val("pga.spatial.conv.w"), val("pga.spatial.conv.b")[0]);
        let (rw, rb) = (val("pga.spatial.resize.w"), val("pga.spatial.resize.b"));
        let enc = t.value(out.f_enc).data();
        let got = t.value(out.f_out).data();
        for b in 0..2 {
            let v = &pav.data()[b * PAV_LEN..][..PAV_LEN];
            let conv: Vec<f64> = (0..PAV_LEN)
                .map(|i| {
                    let mut acc = kb;
                    for j in 0..3 {
                        let src = i as isize + j as isize - 1;
                        if (0..PAV_LEN as isize).contains(&src) {
                            acc += k[j] * v[src as usize];
                        }
                    }
                    acc
                })
                .collect();
            for ci in 0..c {
                let zc: f64 = wc_b[ci] + (0..PAV_LEN).map(|i| wc_w[ci * PAV_LEN + i] * v[i]).sum::<f64>();
                for h in 0..s {
                    let zs: f64 = rb[h] + (0..PAV_LEN).map(|i| rw[h * PAV_LEN + i] * conv[i]).sum::<f64>();
                    let idx = (b * c + ci) * s + h;
                    let want = enc[idx] * sigmoid(zc) * sigmoid(zs);
                    assert!((got[idx] - want).abs() < 1e-12);
                    assert!(got[idx].abs() <= enc[idx].abs());
                }
            }
        }
    }

    #[test]
    fn guidance_sources() {
        let maps = rand_maps(9, &[1, 2, 2, 8, 8]);
        let ones = Drf::new(toy_config(pga(GuidanceSource::AllOnes)), (8, 8), 1).unwrap();
        let mut t = Tape::new();
        let out = ones.forward(&mut t, &maps, None).unwrap();
        assert_eq!(t.value(out.guidance.unwrap()).data(), &[1.0; PAV_LEN]);
        // all-ones ignores whatever PAV is supplied
        let mut t2 = Tape::new();
        let out2 = ones.forward(&mut t2, &maps, Some(&rand_pav(1, 1))).unwrap();
        assert_eq!(t.value(out.logits).data(), t2.value(out2.logits).data());

        let random = Drf::new(toy_config(pga(GuidanceSource::Random(7))), (8, 8), 1).unwrap();
        let g = random_guidance(7);
        assert_eq!(g, random_guidance(7));
        assert!(g.iter().all(|x| (0.0..1.0).contains(x)));
        let mut t = Tape::new();
        let out = random.forward(&mut t, &maps, None).unwrap();
        assert_eq!(t.value(out.guidance.unwrap()).data(), g.as_slice());

        let pav_model = Drf::new(toy_config(pga(GuidanceSource::Pav)), (8, 8), 1).unwrap();
        assert_eq!(
            pav_model.forward(&mut Tape::new(), &maps, None).unwrap_err(),
            ModelError::MissingPav
        );
        let mut t = Tape::new();
        let m = t.constant(maps.clone());
        let (f, _) = random.encode(&mut t, m).unwrap();
        assert_eq!(
            random.pga(&mut t, &rand_pav(1, 1), f).unwrap_err(),
            ModelError::GuidanceMismatch(GuidanceSource::Random(7))
        );
    }

    #[test]
    fn self_attention_guidance_depends_on_features() {
        let mut differing = 0;
        for seed in 0..10 {
            let m = Drf::new(toy_config(pga(GuidanceSource::SelfAttention)), (8, 8), seed).unwrap();
            let g = |maps: &Tensor| {
                let mut t = Tape::new();
                let out = m.forward(&mut t, maps, None).unwrap();
                t.value(out.guidance.unwrap()).data().to_vec()
            };
            if g(&rand_maps(seed, &[1, 2, 2, 8, 8])) != g(&rand_maps(seed + 100, &[1, 2, 2, 8, 8])) {
                differing += 1;
            }
        }
        assert_eq!(differing, 10);
    }

    #[test]
    fn removing_attention_shares_every_other_parameter() {
        let with = Drf::new(toy_config(pga(GuidanceSource::Pav)), (8, 8), 5).unwrap();
        let off = Drf::new(
            toy_config(Some(PgaConfig {
                channel: false,
                spatial: false,
                ..PgaConfig::default()
            })),
            (8, 8),
            5,
        )
        .unwrap();
        let none = Drf::new(toy_config(None), (8, 8), 5).unwrap();
        for (_, p) in none.params().iter() {
            let q = with.params().value(with.params().id(&p.name).unwrap());
            assert_eq!(&p.value, q, "{}", p.name);
        }
        assert_eq!(off.params().len(), none.params().len());
        let maps = rand_maps(1, &[1, 2, 2, 8, 8]);
        assert_eq!(off.infer(&maps.clone().reshape(&[2, 2, 8, 8]).unwrap(), None).unwrap(),
                   none.infer(&maps.reshape(&[2, 2, 8, 8]).unwrap(), None).unwrap());
    }

    #[test]
    fn zero_features_give_classifier_bias() {
        let mut model = Drf::new(toy_config(None), (8, 8), 2).unwrap();
        let id = model.params().id("head.cls.b").unwrap();
        model.params_mut().get_mut(id).value = Tensor::from_vec(vec![0.1, -0.2, 0.3]);
        let mut t = Tape::new();
        let f = t.constant(Tensor::zeros(&[1, 4, 4]));
        let (emb, logits) = model.heads(&mut t, f).unwrap();
        assert_eq!(t.shape(emb), &[4, 1, 5]);
        assert_eq!(t.value(logits).data(), &[0.1, -0.2, 0.3]);
    }

    #[test]
    fn heads_match_hand_arithmetic() {
        // C = 2, S = 2, d = 2
        let cfg = ModelConfig {
            encoder: EncoderConfig {
                widths: vec![2],
                strides: vec![1],
                strips: 2,
                in_channels: 2,
            },
            embed_dim: 2,
            pga: None,
        };
        let mut model = Drf::new(cfg, (8, 8), 0).unwrap();
        let set = |m: &mut Drf, name: &str, shape: &[usize], v: &[f64]| {
            let id = m.params().id(name).unwrap();
            m.params_mut().get_mut(id).value = Tensor::new(shape.to_vec(), v.to_vec()).unwrap();
        };
        // strip 0: [[1,2],[0,1]], strip 1: [[-1,0],[3,1]]
        set(&mut model, "head.strip.w", &[2, 2, 2], &[1., 2., 0., 1., -1., 0., 3., 1.]);
        set(&mut model, "head.strip.b", &[2, 2], &[0.5, 0., 0., -0.5]);
        set(&mut model, "head.cls.w", &[3, 2], &[1., 0., 0., 1., 1., 1.]);
        set(&mut model, "head.cls.b", &[3], &[0., 1., -1.]);
        // F_out[c][h] = [[1, 2], [3, 4]]
        let mut t = Tape::new();
        let f = t.constant(Tensor::new(vec![1, 2, 2], vec![1., 2., 3., 4.]).unwrap());
        let (emb, logits) = model.heads(&mut t, f).unwrap();
        // strip 0 input (1,3): e0 = (1+6+0.5, 3) = (7.5, 3)
        // strip 1 input (2,4): e1 = (-2, 6+4-0.5) = (-2, 9.5)
        assert_eq!(t.value(emb).data(), &[7.5, 3., -2., 9.5]);
        // mean (2.75, 6.25)
        assert_eq!(t.value(logits).data(), &[2.75, 7.25, 8.0]);
    }

    #[test]
    fn gradients_check_at_every_guidance_source() {
        let maps = rand_maps(10, &[2, 2, 2, 8, 8]);
        let pav = rand_pav(11, 2);
        for g in [
            GuidanceSource::Pav,
            GuidanceSource::SelfAttention,
            GuidanceSource::AllOnes,
            GuidanceSource::Random(3),
            GuidanceSource::Learnable,
        ] {
            let model = Drf::new(toy_config(pga(g)), (8, 8), 12).unwrap();
            let cfg = model.config().clone();
            let mut store = model.params().clone();
            let report = grad_check_params(
                &mut store,
                |t, p| {
                    let m = Drf::from_params(cfg.clone(), (8, 8), p.clone()).expect("same layout");
                    let out = m.forward(t, &maps, Some(&pav)).map_err(|e| match e {
                        ModelError::Tensor(e) => e,
                        other => panic!("{other}"),
                    })?;
                    t.softmax_xent(out.logits, &[0, 2])
                },
                1e-5,
            )
            .unwrap();
            assert!(report.max_error() < 1e-4, "{g}: {:?}", report.worst());
        }
    }
}
