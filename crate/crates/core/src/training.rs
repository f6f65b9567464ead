//! Optimization loop, checkpoints and the inference pipeline.
//!
//! The frozen waveform front ends are evaluated once per clip and cached.
//! Before the main loop the voiceprint encoder is fitted to speaker identity
//! and then frozen, so base styles stay put while the rest of the model
//! trains. The style library is rebuilt from current encoder outputs at every
//! epoch boundary and updated clip by clip within an epoch. Retrieval is a
//! lookup: the retrieved entry enters the decoders as a constant.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::decoder::{
    assemble, split, BlendshapeSequence, DecoderConfig, Partition, PartitionedDecoder, Sidecar,
};
use crate::encoders::{EncoderConfig, Encoders, Frontend, FROZEN_PREFIXES};
use crate::error::{Error, Result};
use crate::esmm::{
    build_base_styles, build_style_library, retrieve_style, Retrieval, StyleLibrary,
    LIBRARY_VERSION,
};
use crate::losses::{
    classification_loss_var, disentanglement_loss_var, motion_loss_var, pairwise_margin_loss_var,
    position_loss_var, DisOrientation, LossWeights,
};
use crate::nnblocks::{Builder, Linear};
use crate::params::{Adam, ParamStore};
use crate::signal::{savgol_smooth, sg, AudioClip};
use crate::synthdata::{iterate_pairs, ClipRecord, Manifest, PairBatch};
use crate::tape::{Graph, Mat, Var};

pub const MODEL_VERSION: &str = "blendvoice-1";
pub const DELTA_PARAM: &str = "loss.delta";
pub const VOICE_PREFIX: &str = "voice.";
const PRETRAIN_PREFIX: &str = "pretrain.";
/// Logit scale applied to unit-norm voiceprints during speaker pretraining.
const VOICE_LOGIT_SCALE: f64 = 16.0;

pub const PARAMS_FILE: &str = "params.safetensors";
pub const HPARAMS_FILE: &str = "hparams.json";
pub const SIDECAR_FILE: &str = "sidecar.json";
pub const LIBRARY_FILE: &str = "library.json";
pub const LOG_FILE: &str = "train_log.jsonl";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
    pub partition: Partition,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Clips per step; each step consumes `batch_size / 2` pairs.
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epochs: usize,
    /// When set, overrides `epochs`.
    pub steps: Option<usize>,
    pub weights: LossWeights,
    pub dis_orientation: DisOrientation,
    pub seed: u64,
    pub model: ModelConfig,
    pub voice_pretrain_steps: usize,
    pub voice_pretrain_lr: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 2,
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epochs: 1,
            steps: None,
            weights: LossWeights::default(),
            dis_orientation: DisOrientation::default(),
            seed: 0,
            model: ModelConfig::default(),
            voice_pretrain_steps: 300,
            voice_pretrain_lr: 1e-3,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.batch_size % 2 != 0 {
            return Err(Error::Config(
                "batch_size must be a positive even number".into(),
            ));
        }
        for (name, v) in [
            ("learning_rate", self.learning_rate),
            ("voice_pretrain_lr", self.voice_pretrain_lr),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("Adam betas must lie in [0, 1)".into()));
        }
        if self.steps.is_none() && self.epochs == 0 {
            return Err(Error::Config("epochs must be positive".into()));
        }
        self.weights.validate()?;
        self.model.decoder.validate()?;
        self.model.partition.validate()
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: TrainConfig = serde_json::from_str(text).map_err(|e| json_error(text, &e))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

pub(crate) fn json_error(text: &str, e: &serde_json::Error) -> Error {
    let offset = text
        .split_inclusive('\n')
        .take(e.line().saturating_sub(1))
        .map(str::len)
        .sum::<usize>()
        + e.column().saturating_sub(1);
    Error::format(offset, e.to_string())
}

/// Encoders, partitioned decoder and their parameters.
#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    pub enc: Encoders,
    pub dec: PartitionedDecoder,
    pub params: ParamStore,
}

impl Model {
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        let mut b = Builder::new(seed);
        let enc = Encoders::new(&mut b, &cfg.encoder)?;
        let dec = PartitionedDecoder::new(&mut b, &cfg.decoder, cfg.partition.clone())?;
        b.add(DELTA_PARAM, Mat::from_elem((1, 1), 1.0));
        Ok(Model {
            cfg: cfg.clone(),
            enc,
            dec,
            params: b.finish(),
        })
    }

    /// Rebuild the module structure for `cfg` around stored parameters.
    pub fn with_params(cfg: &ModelConfig, params: ParamStore) -> Result<Self> {
        let fresh = Model::new(cfg, 0)?;
        for (name, p) in fresh.params.iter() {
            match params.get(name) {
                Some(q) if q.value.dim() == p.value.dim() => {}
                Some(q) => {
                    return Err(Error::IncompatibleCheckpoint(format!(
                        "parameter `{name}` has shape {:?}, configuration expects {:?}",
                        q.value.dim(),
                        p.value.dim()
                    )))
                }
                None => {
                    return Err(Error::IncompatibleCheckpoint(format!(
                        "parameter `{name}` missing"
                    )))
                }
            }
        }
        if let Some(extra) = params.names().find(|n| fresh.params.get(n).is_none()) {
            return Err(Error::IncompatibleCheckpoint(format!(
                "unexpected parameter `{extra}`"
            )));
        }
        Ok(Model { params, ..fresh })
    }

    pub fn emotion_classes(&self) -> usize {
        self.cfg.encoder.emotion_classes
    }

    pub fn delta(&self) -> f64 {
        self.params.value(DELTA_PARAM)[[0, 0]]
    }
}

/// Metadata stored next to the parameter archive.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model_version: String,
    pub library_version: u32,
    pub emotion_names: Vec<String>,
    pub speakers: Vec<String>,
    pub steps: usize,
    pub model: ModelConfig,
    pub train: Option<TrainConfig>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: Model,
    pub meta: CheckpointMeta,
}

impl Checkpoint {
    /// Writes the parameter archive, hyperparameters and channel sidecar.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.model.params.save(&dir.join(PARAMS_FILE))?;
        let path = dir.join(HPARAMS_FILE);
        let text = serde_json::to_string_pretty(&self.meta).expect("meta serializes");
        fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        Sidecar::new(&self.model.cfg.partition, &self.meta.model_version)
            .write(&dir.join(SIDECAR_FILE))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(HPARAMS_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let meta: CheckpointMeta =
            serde_json::from_str(&text).map_err(|e| json_error(&text, &e))?;
        if meta.model_version != MODEL_VERSION {
            return Err(Error::IncompatibleCheckpoint(format!(
                "model version {:?}, expected {MODEL_VERSION:?}",
                meta.model_version
            )));
        }
        let params = ParamStore::load(&dir.join(PARAMS_FILE))?;
        let model = Model::with_params(&meta.model, params)?;
        Ok(Checkpoint { model, meta })
    }

    /// Error unless `library` was built for this checkpoint's label set.
    pub fn check_library(&self, library: &StyleLibrary) -> Result<()> {
        if self.meta.library_version != LIBRARY_VERSION {
            return Err(Error::IncompatibleCheckpoint(format!(
                "checkpoint expects library version {}, this build reads {LIBRARY_VERSION}",
                self.meta.library_version
            )));
        }
        if library.emotion_names() != self.meta.emotion_names.as_slice() {
            return Err(Error::IncompatibleCheckpoint(format!(
                "library emotions {:?} differ from checkpoint emotions {:?}",
                library.emotion_names(),
                self.meta.emotion_names
            )));
        }
        Ok(())
    }
}

/// One line of the training log.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub step: usize,
    #[serde(rename = "L_pos")]
    pub pos: f64,
    #[serde(rename = "L_mot")]
    pub mot: f64,
    #[serde(rename = "L_cls")]
    pub cls: f64,
    #[serde(rename = "L_dis")]
    pub dis: f64,
    #[serde(rename = "L_total")]
    pub total: f64,
    #[serde(rename = "δ")]
    pub delta: f64,
}

pub fn speaker_key(id: usize) -> String {
    format!("spk{id:03}")
}

struct CachedClip {
    record: ClipRecord,
    fe: Frontend,
    gt_lower: Mat,
    gt_upper: Mat,
    voiceprint: Vec<f64>,
}

/// Owns the model, optimizer state and style library during training.
pub struct Trainer {
    pub cfg: TrainConfig,
    pub model: Model,
    pub library: StyleLibrary,
    pub log: Vec<LogEntry>,
    emotion_names: Vec<String>,
    clips: Vec<CachedClip>,
    pairs: Vec<(usize, usize)>,
    order: Vec<usize>,
    cursor: usize,
    epoch: usize,
    adam: Adam,
}

impl Trainer {
    pub fn new(manifest: &Manifest, cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let emotion_names = manifest.emotion_names();
        let mut model_cfg = cfg.model.clone();
        model_cfg.encoder.emotion_classes = emotion_names.len().max(1);
        let mut model = Model::new(&model_cfg, cfg.seed)?;

        let index: BTreeMap<&str, usize> = manifest
            .records
            .iter()
            .enumerate()
            .map(|(i, r)| (r.clip_id.as_str(), i))
            .collect();
        let pairs: Vec<(usize, usize)> = iterate_pairs(manifest)
            .into_iter()
            .map(|PairBatch { neutral, emotional }| {
                (
                    index[neutral.clip_id.as_str()],
                    index[emotional.clip_id.as_str()],
                )
            })
            .collect();
        if pairs.is_empty() {
            return Err(Error::BadPairing(
                "manifest yields no neutral/emotional pairs".into(),
            ));
        }

        let mut clips = Vec::with_capacity(manifest.len());
        for r in &manifest.records {
            let data = manifest.load_clip(r)?;
            let fe = model.enc.frontend(&data.audio, &model.params)?;
            if fe.frames != r.t {
                return Err(Error::BadDims(format!(
                    "{}: audio spans {} frames, blendshapes {}",
                    r.clip_id, fe.frames, r.t
                )));
            }
            let (gt_lower, gt_upper) = split(&data.blendshapes, &model.cfg.partition);
            clips.push(CachedClip {
                record: r.clone(),
                fe,
                gt_lower,
                gt_upper,
                voiceprint: Vec::new(),
            });
        }

        pretrain_voiceprint(&mut model, &mut clips, cfg)?;
        model.params.freeze_prefix(VOICE_PREFIX);
        for c in &mut clips {
            c.voiceprint = model.enc.voiceprint_from(&c.fe, &model.params)?.v;
        }

        let mut adam = Adam::new(cfg.learning_rate);
        adam.beta1 = cfg.beta1;
        adam.beta2 = cfg.beta2;
        let mut t = Trainer {
            cfg: cfg.clone(),
            model,
            library: StyleLibrary::new(emotion_names.clone(), BTreeMap::new())?,
            log: Vec::new(),
            emotion_names,
            clips,
            pairs,
            order: Vec::new(),
            cursor: 0,
            epoch: 0,
            adam,
        };
        t.start_epoch()?;
        Ok(t)
    }

    pub fn emotion_names(&self) -> &[String] {
        &self.emotion_names
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.pairs.len().div_ceil(self.cfg.batch_size / 2)
    }

    pub fn total_steps(&self) -> usize {
        self.cfg
            .steps
            .unwrap_or(self.cfg.epochs * self.steps_per_epoch())
    }

    fn start_epoch(&mut self) -> Result<()> {
        self.library = self.rebuild_library()?;
        let mut rng = ChaCha8Rng::seed_from_u64(
            self.cfg.seed ^ (self.epoch as u64).wrapping_mul(0x9e37_79b9),
        );
        self.order = (0..self.pairs.len()).collect();
        self.order.shuffle(&mut rng);
        self.cursor = 0;
        Ok(())
    }

    fn rebuild_library(&self) -> Result<StyleLibrary> {
        let mut features = Vec::with_capacity(self.clips.len());
        let mut voice: BTreeMap<String, Vec<Vec<f64>>> = BTreeMap::new();
        for c in &self.clips {
            let key = speaker_key(c.record.speaker_id);
            let pooled = self
                .model
                .enc
                .emotion_from(&c.fe, &self.model.params)?
                .pooled();
            voice
                .entry(key.clone())
                .or_default()
                .push(c.voiceprint.clone());
            features.push((key, c.record.emotion_id, pooled));
        }
        let base = build_base_styles(voice.iter().map(|(k, v)| (k.as_str(), v.as_slice())))?;
        build_style_library(&features, &base, &self.emotion_names)
    }

    /// One optimizer step on the next `batch_size / 2` pairs.
    pub fn step(&mut self) -> Result<LogEntry> {
        let per_step = self.cfg.batch_size / 2;
        let mut batch = Vec::with_capacity(per_step);
        while batch.len() < per_step {
            if self.cursor == self.order.len() {
                self.epoch += 1;
                self.start_epoch()?;
            }
            batch.push(self.pairs[self.order[self.cursor]]);
            self.cursor += 1;
        }

        let w = self.cfg.weights;
        let p = &self.model.params;
        let mut g = Graph::new();
        let mut pos = Vec::new();
        let mut mot = Vec::new();
        let mut logits = Vec::new();
        let mut labels = Vec::new();
        let mut dis = Vec::new();
        let mut margin = Vec::new();
        let mut seen = Vec::new();
        for &(n, e) in &batch {
            let mut pooled_c = [None; 2];
            let mut pooled_e = [None; 2];
            for (slot, &ci) in [n, e].iter().enumerate() {
                let clip = &self.clips[ci];
                let ev = self.model.enc.emotion.forward(&mut g, p, &clip.fe)?;
                let c = self.model.enc.content.forward(&mut g, p, &clip.fe);
                let pe = g.mean_rows(ev.e);
                let pe_value: Vec<f64> = g.value(pe).iter().copied().collect();
                let hit = retrieve_style(&pe_value, &clip.voiceprint, &self.library)?;
                let s = self
                    .model
                    .dec
                    .style_rows(&mut g, p, &hit.entry, clip.fe.frames)?;
                let lower = self.model.dec.lower.forward(&mut g, p, c, s, None)?;
                let upper = self.model.dec.upper.forward(&mut g, p, ev.e, s, None)?;
                let gl = g.constant(clip.gt_lower.clone());
                let gu = g.constant(clip.gt_upper.clone());
                let pl = position_loss_var(&mut g, lower, gl);
                let pu = position_loss_var(&mut g, upper, gu);
                pos.push(g.add(pl, pu));
                let ml = motion_loss_var(&mut g, lower, gl);
                let mu = motion_loss_var(&mut g, upper, gu);
                mot.push(g.add(ml, mu));
                logits.push(ev.logits);
                labels.push(clip.record.emotion_id);
                pooled_c[slot] = Some(g.mean_rows(c));
                pooled_e[slot] = Some(pe);
                seen.push((ci, pe_value));
            }
            let pc = [pooled_c[0].unwrap(), pooled_c[1].unwrap()];
            let pe = [pooled_e[0].unwrap(), pooled_e[1].unwrap()];
            dis.push(disentanglement_loss_var(
                &mut g,
                pc,
                pe,
                self.cfg.dis_orientation,
            ));
            if w.margin > 0.0 {
                let d = g.param(p, DELTA_PARAM);
                margin.push(pairwise_margin_loss_var(&mut g, pc, pe, d));
            }
        }
        let pos = mean_of(&mut g, &pos);
        let mot = mean_of(&mut g, &mot);
        let dis = mean_of(&mut g, &dis);
        let all_logits = stack_rows(&mut g, &logits);
        let cls = classification_loss_var(&mut g, all_logits, &labels)?;
        let mut terms = vec![(pos, w.pos), (mot, w.mot), (cls, w.cls), (dis, w.dis)];
        if !margin.is_empty() {
            terms.push((mean_of(&mut g, &margin), w.margin));
        }
        let weighted: Vec<Var> = terms.iter().map(|&(v, k)| g.scale(v, k)).collect();
        let total = weighted[1..]
            .iter()
            .fold(weighted[0], |acc, &v| g.add(acc, v));

        let entry = LogEntry {
            step: self.log.len() + 1,
            pos: g.scalar(pos),
            mot: g.scalar(mot),
            cls: g.scalar(cls),
            dis: g.scalar(dis),
            total: g.scalar(total),
            delta: self.model.delta(),
        };
        if !entry.total.is_finite() {
            return Err(Error::Numerical(format!(
                "non-finite loss at step {}",
                entry.step
            )));
        }
        let grads = g.backward(total);
        if grads
            .params
            .values()
            .any(|m| m.iter().any(|x| !x.is_finite()))
        {
            return Err(Error::Numerical(format!(
                "non-finite gradient at step {}",
                entry.step
            )));
        }
        self.adam.step(&mut self.model.params, &grads);
        let d = self.model.delta();
        if d < 0.0 {
            self.model.params.set(DELTA_PARAM, Mat::zeros((1, 1)));
        }
        for (ci, pooled) in seen {
            let r = &self.clips[ci].record;
            self.library
                .add_clip(&speaker_key(r.speaker_id), r.emotion_id, &pooled)?;
        }
        self.log.push(entry);
        Ok(entry)
    }

    /// Runs until `total_steps`, then refreshes the library from the final
    /// parameters.
    pub fn run(&mut self) -> Result<()> {
        let total = self.total_steps();
        while self.log.len() < total {
            let e = self.step()?;
            if e.step % 50 == 0 || e.step == 1 {
                log::info!("step {} L_total {:.5}", e.step, e.total);
            }
        }
        self.library = self.rebuild_library()?;
        Ok(())
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut speakers: Vec<String> = self
            .clips
            .iter()
            .map(|c| speaker_key(c.record.speaker_id))
            .collect();
        speakers.dedup();
        Checkpoint {
            model: self.model.clone(),
            meta: CheckpointMeta {
                model_version: MODEL_VERSION.into(),
                library_version: LIBRARY_VERSION,
                emotion_names: self.emotion_names.clone(),
                speakers,
                steps: self.log.len(),
                model: self.model.cfg.clone(),
                train: Some(self.cfg.clone()),
            },
        }
    }
}

fn mean_of(g: &mut Graph, vars: &[Var]) -> Var {
    let sum = vars[1..].iter().fold(vars[0], |acc, &v| g.add(acc, v));
    g.scale(sum, 1.0 / vars.len() as f64)
}

/// Vertical stack of 1×n rows, via a transpose of the column concatenation.
fn stack_rows(g: &mut Graph, rows: &[Var]) -> Var {
    let cols: Vec<Var> = rows.iter().map(|&r| g.transpose(r)).collect();
    let cat = g.concat_cols(&cols);
    g.transpose(cat)
}

/// Fits the voiceprint encoder to speaker labels with a temporary linear head.
fn pretrain_voiceprint(
    model: &mut Model,
    clips: &mut [CachedClip],
    cfg: &TrainConfig,
) -> Result<()> {
    if cfg.voice_pretrain_steps == 0 {
        return Ok(());
    }
    let speakers: Vec<usize> = {
        let mut s: Vec<usize> = clips.iter().map(|c| c.record.speaker_id).collect();
        s.sort_unstable();
        s.dedup();
        s
    };
    if speakers.len() < 2 {
        return Ok(());
    }
    let mut b = Builder::new(cfg.seed ^ 0x0070_15ce);
    let head = Linear::new(
        &mut b,
        "pretrain.voice_head",
        crate::encoders::VOICEPRINT_DIM,
        speakers.len(),
        true,
    );
    for (name, p) in b.finish().iter() {
        model.params.insert(name.clone(), p.value.clone(), false);
    }
    let frozen: Vec<String> = model
        .params
        .iter()
        .filter(|(n, p)| {
            !p.frozen && !n.starts_with(VOICE_PREFIX) && !n.starts_with(PRETRAIN_PREFIX)
        })
        .map(|(n, _)| n.clone())
        .collect();
    for n in &frozen {
        model.params.get_mut(n).expect("listed").frozen = true;
    }

    let mut adam = Adam::new(cfg.voice_pretrain_lr);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x05ee_d1ce);
    let mut order: Vec<usize> = Vec::new();
    for step in 0..cfg.voice_pretrain_steps {
        if order.is_empty() {
            order = (0..clips.len()).collect();
            order.shuffle(&mut rng);
        }
        let ci = order.pop().expect("refilled");
        let label = speakers
            .binary_search(&clips[ci].record.speaker_id)
            .expect("speaker listed");
        let mut g = Graph::new();
        let v = model
            .enc
            .voice
            .forward(&mut g, &model.params, &clips[ci].fe.mel);
        let v = g.scale(v, VOICE_LOGIT_SCALE);
        let logits = head.forward(&mut g, &model.params, v);
        let loss = classification_loss_var(&mut g, logits, &[label])?;
        let value = g.scalar(loss);
        if !value.is_finite() {
            return Err(Error::Numerical(format!(
                "voiceprint pretraining diverged at step {step}"
            )));
        }
        let grads = g.backward(loss);
        adam.step(&mut model.params, &grads);
    }
    model.params.remove_prefix(PRETRAIN_PREFIX);
    for n in &frozen {
        model.params.get_mut(n).expect("listed").frozen = false;
    }
    for prefix in FROZEN_PREFIXES {
        model.params.freeze_prefix(prefix);
    }
    Ok(())
}

/// Trains and returns the trainer holding the final model and library.
pub fn train(manifest: &Manifest, cfg: &TrainConfig) -> Result<Trainer> {
    let mut t = Trainer::new(manifest, cfg)?;
    t.run()?;
    Ok(t)
}

/// Trains and writes checkpoint, library and log under `out`. On a
/// non-finite loss the last good checkpoint is written before the error is
/// returned.
pub fn train_to_dir(manifest: &Manifest, cfg: &TrainConfig, out: &Path) -> Result<Trainer> {
    let mut t = Trainer::new(manifest, cfg)?;
    let result = t.run();
    t.checkpoint().save(out)?;
    t.library.save(&out.join(LIBRARY_FILE))?;
    write_log(&t.log, &out.join(LOG_FILE))?;
    result.map(|_| t)
}

pub fn write_log(log: &[LogEntry], path: &Path) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    for e in log {
        let line = serde_json::to_string(e).expect("log entry serializes");
        writeln!(f, "{line}").map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

/// Library over every clip of `manifest` from a trained model.
pub fn build_library(manifest: &Manifest, ckpt: &Checkpoint) -> Result<StyleLibrary> {
    let model = &ckpt.model;
    let mut features = Vec::with_capacity(manifest.len());
    let mut voice: BTreeMap<String, Vec<Vec<f64>>> = BTreeMap::new();
    for r in &manifest.records {
        if r.emotion_id >= ckpt.meta.emotion_names.len() {
            return Err(Error::BadLabel {
                label: r.emotion_id,
                classes: ckpt.meta.emotion_names.len(),
            });
        }
        let data = manifest.load_clip(r)?;
        let fe = model.enc.frontend(&data.audio, &model.params)?;
        let key = speaker_key(r.speaker_id);
        voice
            .entry(key.clone())
            .or_default()
            .push(model.enc.voiceprint_from(&fe, &model.params)?.v);
        features.push((
            key,
            r.emotion_id,
            model.enc.emotion_from(&fe, &model.params)?.pooled(),
        ));
    }
    let base = build_base_styles(voice.iter().map(|(k, v)| (k.as_str(), v.as_slice())))?;
    build_style_library(&features, &base, &ckpt.meta.emotion_names)
}

/// Output of [`infer_detailed`].
#[derive(Clone, Debug)]
pub struct Inference {
    pub blendshapes: BlendshapeSequence,
    pub retrieval: Retrieval,
    pub emotion_logits: Vec<f64>,
}

/// Audio to 52-channel coefficients at 30 fps, optionally smoothed.
pub fn infer(
    clip: &AudioClip,
    model: &Model,
    library: &StyleLibrary,
    smooth: bool,
) -> Result<BlendshapeSequence> {
    Ok(infer_detailed(clip, model, library, smooth)?.blendshapes)
}

pub fn infer_detailed(
    clip: &AudioClip,
    model: &Model,
    library: &StyleLibrary,
    smooth: bool,
) -> Result<Inference> {
    if library.emotion_names().len() != model.emotion_classes() {
        return Err(Error::IncompatibleCheckpoint(format!(
            "library has {} emotions, model classifies {}",
            library.emotion_names().len(),
            model.emotion_classes()
        )));
    }
    let p = &model.params;
    let fe = model.enc.frontend(clip, p)?;
    let emotion = model.enc.emotion_from(&fe, p)?;
    let voice = model.enc.voiceprint_from(&fe, p)?;
    let retrieval = retrieve_style(&emotion.pooled(), &voice.v, library)?;
    let content = model.enc.content_from(&fe, p);

    let mut g = Graph::no_grad();
    let s = model
        .dec
        .style_rows(&mut g, p, &retrieval.entry, fe.frames)?;
    let c = g.constant(content.c);
    let e = g.constant(emotion.e);
    let lower = model.dec.lower.forward(&mut g, p, c, s, None)?;
    let upper = model.dec.upper.forward(&mut g, p, e, s, None)?;
    let seq = assemble(g.value(lower), g.value(upper), &model.cfg.partition)?;
    let blendshapes = if smooth {
        let smoothed = savgol_smooth(seq.coeffs(), sg::WINDOW, sg::ORDER)?;
        BlendshapeSequence::new(smoothed.mapv(|v| v.clamp(0.0, 1.0)))?
    } else {
        seq
    };
    Ok(Inference {
        blendshapes,
        retrieval,
        emotion_logits: emotion.logits,
    })
}

/// Argmax of the emotion classifier.
pub fn predict_emotion(clip: &AudioClip, model: &Model) -> Result<usize> {
    let fe = model.enc.frontend(clip, &model.params)?;
    let logits = model.enc.emotion_from(&fe, &model.params)?.logits;
    Ok(logits
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &v)| {
            if v > best.1 {
                (i, v)
            } else {
                best
            }
        })
        .0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::{generate_corpus, CorpusSpec};

    fn tiny_model() -> ModelConfig {
        ModelConfig {
            encoder: EncoderConfig {
                n_mels: 16,
                tcn_channels: 8,
                width: 16,
                heads: 2,
                blocks: 1,
                ff_dim: 16,
                voice_width: 16,
                ..EncoderConfig::default()
            },
            decoder: DecoderConfig {
                width: 16,
                heads: 2,
                blocks: 1,
                ff_dim: 16,
                ..DecoderConfig::default()
            },
            partition: Partition::default(),
        }
    }

    fn tiny_train(steps: usize, seed: u64) -> TrainConfig {
        TrainConfig {
            steps: Some(steps),
            seed,
            model: tiny_model(),
            voice_pretrain_steps: 20,
            learning_rate: 1e-3,
            ..TrainConfig::default()
        }
    }

    fn corpus(dir: &Path) -> Manifest {
        let spec = CorpusSpec {
            speakers: 2,
            emotions: 2,
            clips_per_pair: 2,
            min_frames: 15,
            max_frames: 20,
            seed: 3,
            ..CorpusSpec::default()
        };
        generate_corpus(&spec, dir).unwrap()
    }

    #[test]
    fn smoke_training_lowers_loss_and_keeps_frozen_params() {
        let dir = tempfile::tempdir().unwrap();
        let m = corpus(dir.path());
        let cfg = tiny_train(50, 1);
        let mut t = Trainer::new(&m, &cfg).unwrap();
        let before: Vec<(String, Mat)> = t
            .model
            .params
            .iter()
            .filter(|(_, p)| p.frozen)
            .map(|(n, p)| (n.clone(), p.value.clone()))
            .collect();
        assert!(before.iter().any(|(n, _)| n.starts_with("emotion.tcn.")));
        assert!(before.iter().any(|(n, _)| n.starts_with("content.conv.")));
        t.run().unwrap();
        for (n, v) in &before {
            assert_eq!(t.model.params.value(n), v, "{n} moved");
        }
        let first = t.log[0].total;
        let last = t.log.last().unwrap().total;
        assert!(last < first, "{first} -> {last}");
    }

    #[test]
    fn training_is_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let m = corpus(dir.path());
        let a = train(&m, &tiny_train(6, 4)).unwrap();
        let b = train(&m, &tiny_train(6, 4)).unwrap();
        assert_eq!(a.log, b.log);
        assert_eq!(a.model.params, b.model.params);
    }

    #[test]
    fn checkpoint_round_trip_is_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let m = corpus(&dir.path().join("data"));
        let out = dir.path().join("ckpt");
        let t = train_to_dir(&m, &tiny_train(3, 2), &out).unwrap();
        let clip = m.load_clip(&m.records[1]).unwrap().audio;
        let before = infer(&clip, &t.model, &t.library, true).unwrap();
        let ckpt = Checkpoint::load(&out).unwrap();
        let lib = StyleLibrary::load(&out.join(LIBRARY_FILE)).unwrap();
        ckpt.check_library(&lib).unwrap();
        let after = infer(&clip, &ckpt.model, &lib, true).unwrap();
        assert_eq!(before, after);
        assert_eq!(after.frames(), m.records[1].t);
        assert_eq!(infer(&clip, &ckpt.model, &lib, true).unwrap(), after);

        let log = fs::read_to_string(out.join(LOG_FILE)).unwrap();
        assert_eq!(log.lines().count(), 3);
        let first: serde_json::Value = serde_json::from_str(log.lines().next().unwrap()).unwrap();
        for key in ["step", "L_pos", "L_mot", "L_cls", "L_dis", "L_total", "δ"] {
            assert!(first.get(key).is_some(), "{key}");
        }

        let rebuilt = build_library(&m, &ckpt).unwrap();
        assert_eq!(rebuilt.len(), lib.len());
    }

    #[test]
    fn incompatible_library_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let m = corpus(dir.path());
        let t = train(&m, &tiny_train(1, 0)).unwrap();
        let ckpt = t.checkpoint();
        let other = StyleLibrary::new(vec!["neutral".into()], BTreeMap::new()).unwrap();
        assert!(matches!(
            ckpt.check_library(&other),
            Err(Error::IncompatibleCheckpoint(_))
        ));
        let clip = m.load_clip(&m.records[0]).unwrap().audio;
        assert!(matches!(
            infer(&clip, &t.model, &other, false),
            Err(Error::IncompatibleCheckpoint(_))
        ));
    }

    #[test]
    fn frozen_params_get_no_gradient() {
        let dir = tempfile::tempdir().unwrap();
        let m = corpus(dir.path());
        let t = Trainer::new(&m, &tiny_train(1, 0)).unwrap();
        let clip = &t.clips[0];
        let mut g = Graph::new();
        let ev = t
            .model
            .enc
            .emotion
            .forward(&mut g, &t.model.params, &clip.fe)
            .unwrap();
        let c = t
            .model
            .enc
            .content
            .forward(&mut g, &t.model.params, &clip.fe);
        let v = t
            .model
            .enc
            .voice
            .forward(&mut g, &t.model.params, &clip.fe.mel);
        let a = g.sum(ev.e);
        let b = g.sum(c);
        let d = g.sum(v);
        let ab = g.add(a, b);
        let root = g.add(ab, d);
        let grads = g.backward(root);
        for (name, p) in t.model.params.iter() {
            if p.frozen {
                let zero = grads
                    .param(name)
                    .map_or(true, |m| m.iter().all(|&x| x == 0.0));
                assert!(zero, "{name}");
            }
        }
        assert!(t
            .model
            .params
            .iter()
            .any(|(n, p)| p.frozen && n.starts_with(VOICE_PREFIX)));
        assert!(t
            .model
            .params
            .names()
            .all(|n| !n.starts_with(PRETRAIN_PREFIX)));
    }

    #[test]
    fn config_rejects_bad_values() {
        assert!(TrainConfig {
            batch_size: 3,
            ..TrainConfig::default()
        }
        .validate()
        .is_err());
        assert!(TrainConfig {
            learning_rate: 0.0,
            ..TrainConfig::default()
        }
        .validate()
        .is_err());
        assert!(TrainConfig::from_json("{\"batch_size\": 2,\n \"bogus\": 1}").is_err());
        let cfg = TrainConfig::from_json("{\"seed\": 9, \"steps\": 5}").unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.learning_rate, 1e-4);
    }
}
