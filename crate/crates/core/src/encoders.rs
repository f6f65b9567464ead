//! Emotion, content and voiceprint extractors.
//!
//! Each extractor splits into a frozen front end (TCN over the waveform or
//! the mel spectrogram, computed once per clip by [`Encoders::frontend`])
//! and a trainable part that runs on the tape. The public `extract_*`
//! functions chain both in evaluation mode.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nnblocks::{
    build_attention_bias, Builder, ConformerBlock, Linear, Tcn, TcnLayerSpec, TransformerStack,
};
use crate::params::ParamStore;
use crate::signal::{interp_matrix, mel_spectrogram, AudioClip};
use crate::tape::{Graph, Mat, Var};

pub const EMOTION_DIM: usize = 256;
pub const CONTENT_DIM: usize = 256;
pub const VOICEPRINT_DIM: usize = 512;

/// Parameter-name prefixes of the frozen convolution stacks.
pub const FROZEN_PREFIXES: [&str; 2] = ["emotion.tcn.", "content.conv."];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub sample_rate: u32,
    pub n_mels: usize,
    pub mel_window: usize,
    pub mel_hop: usize,
    /// `[kernel, stride]` per waveform convolution layer.
    pub tcn_layers: Vec<[usize; 2]>,
    pub tcn_channels: usize,
    pub width: usize,
    pub heads: usize,
    pub blocks: usize,
    pub ff_dim: usize,
    pub voice_width: usize,
    pub voice_blocks: usize,
    pub emotion_classes: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            sample_rate: crate::signal::DEFAULT_SAMPLE_RATE,
            n_mels: crate::signal::DEFAULT_N_MELS,
            mel_window: crate::signal::DEFAULT_WINDOW,
            mel_hop: crate::signal::DEFAULT_HOP,
            tcn_layers: vec![[10, 5], [8, 4], [8, 8]],
            tcn_channels: 64,
            width: 256,
            heads: 4,
            blocks: 2,
            ff_dim: 512,
            voice_width: 64,
            voice_blocks: 1,
            emotion_classes: 8,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.width == 0 || self.heads == 0 || self.width % self.heads != 0 {
            return bad(format!(
                "width {} must be a positive multiple of heads {}",
                self.width, self.heads
            ));
        }
        if self.voice_width == 0 || self.voice_width % self.heads != 0 {
            return bad(format!(
                "voice width {} must be a multiple of heads {}",
                self.voice_width, self.heads
            ));
        }
        if self.tcn_layers.is_empty() || self.tcn_layers.iter().any(|l| l[0] == 0 || l[1] == 0) {
            return bad("waveform convolution layers need positive kernel and stride".into());
        }
        if self.emotion_classes == 0
            || self.n_mels == 0
            || self.tcn_channels == 0
            || self.ff_dim == 0
        {
            return bad("class count, mel bands, channels and ff width must be positive".into());
        }
        if self.mel_hop == 0 || self.mel_window < self.mel_hop {
            return bad("mel window must be at least the hop".into());
        }
        Ok(())
    }

    fn tcn_specs(&self) -> Vec<TcnLayerSpec> {
        self.tcn_layers
            .iter()
            .map(|&[kernel, stride]| TcnLayerSpec {
                kernel,
                stride,
                channels: self.tcn_channels,
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmotionFeatures {
    /// T × 256
    pub e: Mat,
    /// Temporal (waveform) stream, T × width.
    pub e_t: Mat,
    /// Frequency (mel) stream, T × width.
    pub e_f: Mat,
    /// Class scores from the time-averaged `e`.
    pub logits: Vec<f64>,
}

impl EmotionFeatures {
    pub fn pooled(&self) -> Vec<f64> {
        mean_rows(&self.e)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ContentFeatures {
    /// T × 256
    pub c: Mat,
}

#[derive(Clone, Debug, PartialEq)]
pub struct VoiceprintFeature {
    /// Unit-norm, length 512.
    pub v: Vec<f64>,
}

pub(crate) fn mean_rows(m: &Mat) -> Vec<f64> {
    let t = m.nrows() as f64;
    m.columns().into_iter().map(|c| c.sum() / t).collect()
}

/// Per-clip outputs of the frozen front ends.
#[derive(Clone, Debug, PartialEq)]
pub struct Frontend {
    /// Visual frame count T.
    pub frames: usize,
    /// Emotion waveform TCN output, F_w × channels.
    pub emotion_tcn: Mat,
    /// Content waveform conv output, F_w × channels.
    pub content_conv: Mat,
    /// Log-mel frames, F_m × n_mels.
    pub mel: Mat,
}

#[derive(Clone, Copy, Debug)]
pub struct EmotionVars {
    pub e: Var,
    pub e_t: Var,
    pub e_f: Var,
    /// 1 × classes
    pub logits: Var,
}

#[derive(Clone, Debug)]
pub struct EmotionEncoder {
    pub tcn: Tcn,
    pub t_in: Linear,
    pub t_stack: TransformerStack,
    pub f_in: Linear,
    pub f_blocks: Vec<ConformerBlock>,
    pub proj: Linear,
    pub head: Linear,
    heads: usize,
}

impl EmotionEncoder {
    fn new(b: &mut Builder, cfg: &EncoderConfig) -> Self {
        let w = cfg.width;
        EmotionEncoder {
            tcn: Tcn::new(b, "emotion.tcn", &cfg.tcn_specs()),
            t_in: Linear::new(b, "emotion.t_in", cfg.tcn_channels, w, true),
            t_stack: TransformerStack::new(
                b,
                "emotion.t_stack",
                cfg.blocks,
                w,
                cfg.heads,
                cfg.ff_dim,
            ),
            f_in: Linear::new(b, "emotion.f_in", cfg.n_mels, w, true),
            f_blocks: (0..cfg.blocks)
                .map(|i| ConformerBlock::new(b, &format!("emotion.f_blocks.{i}"), w, cfg.heads))
                .collect(),
            proj: Linear::new(b, "emotion.proj", 2 * w, EMOTION_DIM, true),
            head: Linear::new(b, "emotion.head", EMOTION_DIM, cfg.emotion_classes, true),
            heads: cfg.heads,
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &ParamStore, fe: &Frontend) -> Result<EmotionVars> {
        let t = fe.frames;
        let x = g.constant(fe.emotion_tcn.clone());
        let h = self.t_in.forward(g, p, x);
        let h = self.t_stack.forward(g, p, h, None);
        let e_t = g.interp_rows(h, interp_matrix(fe.emotion_tcn.nrows(), t));

        let mel = interp_matrix(fe.mel.nrows(), t).dot(&fe.mel);
        let x = g.constant(mel);
        let mut h = self.f_in.forward(g, p, x);
        let bias = build_attention_bias(t, self.heads);
        for block in &self.f_blocks {
            h = block.forward(g, p, h, Some(&bias))?;
        }
        let e_f = h;

        let cat = g.concat_cols(&[e_t, e_f]);
        let e = self.proj.forward(g, p, cat);
        let pooled = g.mean_rows(e);
        let logits = self.head.forward(g, p, pooled);
        Ok(EmotionVars {
            e,
            e_t,
            e_f,
            logits,
        })
    }
}

#[derive(Clone, Debug)]
pub struct ContentEncoder {
    pub conv: Tcn,
    pub input: Linear,
    pub stack: TransformerStack,
    pub proj: Linear,
}

impl ContentEncoder {
    fn new(b: &mut Builder, cfg: &EncoderConfig) -> Self {
        let w = cfg.width;
        ContentEncoder {
            conv: Tcn::new(b, "content.conv", &cfg.tcn_specs()),
            input: Linear::new(b, "content.input", cfg.tcn_channels, w, true),
            stack: TransformerStack::new(b, "content.stack", cfg.blocks, w, cfg.heads, cfg.ff_dim),
            proj: Linear::new(b, "content.proj", w, CONTENT_DIM, true),
        }
    }

    /// T × 256 content features.
    pub fn forward(&self, g: &mut Graph, p: &ParamStore, fe: &Frontend) -> Var {
        let x = g.constant(fe.content_conv.clone());
        let h = self.input.forward(g, p, x);
        let h = self.stack.forward(g, p, h, None);
        let c = self.proj.forward(g, p, h);
        g.interp_rows(c, interp_matrix(fe.content_conv.nrows(), fe.frames))
    }
}

/// Mel → temporal conv (kernel 3) → GELU → transformer → mean pool →
/// linear to 512 → L2 normalization.
#[derive(Clone, Debug)]
pub struct VoiceprintEncoder {
    pub conv: Linear,
    pub stack: TransformerStack,
    pub proj: Linear,
}

pub const VOICE_CONV_KERNEL: usize = 3;

impl VoiceprintEncoder {
    fn new(b: &mut Builder, cfg: &EncoderConfig) -> Self {
        let w = cfg.voice_width;
        VoiceprintEncoder {
            conv: Linear::new(b, "voice.conv", VOICE_CONV_KERNEL * cfg.n_mels, w, true),
            stack: TransformerStack::new(b, "voice.stack", cfg.voice_blocks, w, cfg.heads, 2 * w),
            proj: Linear::new(b, "voice.proj", w, VOICEPRINT_DIM, true),
        }
    }

    /// Unnormalized pooled embedding (1 × 512).
    pub fn embed(&self, g: &mut Graph, p: &ParamStore, mel: &Mat) -> Var {
        let x = g.constant(mel.clone());
        let cols = g.im2col(x, VOICE_CONV_KERNEL, 1);
        let h = self.conv.forward(g, p, cols);
        let h = g.gelu(h);
        let h = self.stack.forward(g, p, h, None);
        let pooled = g.mean_rows(h);
        self.proj.forward(g, p, pooled)
    }

    /// Unit-norm voiceprint (1 × 512).
    pub fn forward(&self, g: &mut Graph, p: &ParamStore, mel: &Mat) -> Var {
        let v = self.embed(g, p, mel);
        l2_normalize_row(g, v)
    }
}

/// `v / ‖v‖` for a 1×n row.
pub fn l2_normalize_row(g: &mut Graph, v: Var) -> Var {
    let n = g.shape(v).1;
    let sq = g.square(v);
    let ss = g.sum(sq);
    let norm = g.sqrt(ss);
    let inv = g.recip(norm);
    let ones = g.constant(Mat::ones((1, n)));
    let scale = g.matmul(inv, ones);
    g.mul(v, scale)
}

/// All three extractors built from one configuration.
#[derive(Clone, Debug)]
pub struct Encoders {
    pub cfg: EncoderConfig,
    pub emotion: EmotionEncoder,
    pub content: ContentEncoder,
    pub voice: VoiceprintEncoder,
}

impl Encoders {
    /// Register fresh parameters in `b`. The waveform convolution stacks are
    /// frozen immediately.
    pub fn new(b: &mut Builder, cfg: &EncoderConfig) -> Result<Self> {
        cfg.validate()?;
        let enc = Encoders {
            cfg: cfg.clone(),
            emotion: EmotionEncoder::new(b, cfg),
            content: ContentEncoder::new(b, cfg),
            voice: VoiceprintEncoder::new(b, cfg),
        };
        for prefix in FROZEN_PREFIXES {
            b.store.freeze_prefix(prefix);
        }
        Ok(enc)
    }

    /// Shortest clip the extractors accept: one visual frame, and enough
    /// samples for the waveform convolutions and one mel window.
    pub fn min_samples(&self, sample_rate: u32) -> usize {
        crate::signal::samples_per_frame(sample_rate)
            .max(self.emotion.tcn.receptive_field())
            .max(self.cfg.mel_window)
    }

    pub fn frontend(&self, clip: &AudioClip, p: &ParamStore) -> Result<Frontend> {
        let need = self.min_samples(clip.sample_rate());
        if clip.len() < need {
            return Err(Error::TooShort(format!(
                "clip has {} samples, extractors need at least {need}",
                clip.len()
            )));
        }
        if clip.sample_rate() != self.cfg.sample_rate {
            return Err(Error::Config(format!(
                "clip sample rate {} differs from the model's {}; resample first",
                clip.sample_rate(),
                self.cfg.sample_rate
            )));
        }
        let mel = mel_spectrogram(clip, self.cfg.n_mels, self.cfg.mel_window, self.cfg.mel_hop)?;
        if mel.frames.nrows() < VOICE_CONV_KERNEL {
            return Err(Error::TooShort(
                "fewer mel frames than the voiceprint kernel".into(),
            ));
        }
        let mut g = Graph::no_grad();
        let wave = g.constant(
            Mat::from_shape_vec((clip.len(), 1), clip.samples().to_vec()).expect("column"),
        );
        let e = self.emotion.tcn.forward(&mut g, p, wave);
        let c = self.content.conv.forward(&mut g, p, wave);
        Ok(Frontend {
            frames: clip.frame_count(),
            emotion_tcn: g.value(e).clone(),
            content_conv: g.value(c).clone(),
            mel: mel.frames,
        })
    }

    pub fn emotion_from(&self, fe: &Frontend, p: &ParamStore) -> Result<EmotionFeatures> {
        let mut g = Graph::no_grad();
        let v = self.emotion.forward(&mut g, p, fe)?;
        Ok(EmotionFeatures {
            e: g.value(v.e).clone(),
            e_t: g.value(v.e_t).clone(),
            e_f: g.value(v.e_f).clone(),
            logits: g.value(v.logits).iter().copied().collect(),
        })
    }

    pub fn content_from(&self, fe: &Frontend, p: &ParamStore) -> ContentFeatures {
        let mut g = Graph::no_grad();
        let c = self.content.forward(&mut g, p, fe);
        ContentFeatures {
            c: g.value(c).clone(),
        }
    }

    pub fn voiceprint_from(&self, fe: &Frontend, p: &ParamStore) -> Result<VoiceprintFeature> {
        let mut g = Graph::no_grad();
        let raw = self.voice.embed(&mut g, p, &fe.mel);
        if g.value(raw).iter().all(|&x| x == 0.0) {
            return Err(Error::ZeroVector("voiceprint embedding is zero".into()));
        }
        let v = l2_normalize_row(&mut g, raw);
        let v: Vec<f64> = g.value(v).iter().copied().collect();
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::Numerical("non-finite voiceprint".into()));
        }
        Ok(VoiceprintFeature { v })
    }
}

pub fn extract_emotion(
    clip: &AudioClip,
    enc: &Encoders,
    p: &ParamStore,
) -> Result<EmotionFeatures> {
    let fe = enc.frontend(clip, p)?;
    enc.emotion_from(&fe, p)
}

pub fn extract_content(
    clip: &AudioClip,
    enc: &Encoders,
    p: &ParamStore,
) -> Result<ContentFeatures> {
    let fe = enc.frontend(clip, p)?;
    Ok(enc.content_from(&fe, p))
}

pub fn extract_voiceprint(
    clip: &AudioClip,
    enc: &Encoders,
    p: &ParamStore,
) -> Result<VoiceprintFeature> {
    let fe = enc.frontend(clip, p)?;
    enc.voiceprint_from(&fe, p)
}
