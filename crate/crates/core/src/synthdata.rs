//! Procedural paired corpus: audio plus ground-truth blendshape tracks with
//! controllable speaker, emotion and content factors.
//!
//! Speakers differ in fundamental frequency and formant scale. Content tokens
//! drive formants, an amplitude envelope and a 150 ms lip gesture. Emotion sets
//! the spectral tilt of the harmonic series and the vibrato rate. Every
//! non-neutral clip has a neutral partner with the same speaker and tokens.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::decoder::{channel_index, BlendshapeSequence, Partition, ARKIT_NAMES, NUM_CHANNELS};
use crate::error::{Error, Result};
use crate::signal::{mel_spectrogram, savgol_smooth, sg, AudioClip, MelFilterBank, FRAME_RATE};

/// Emotion names in their conventional listing order.
pub const EMOTION_NAMES: [&str; 8] = [
    "angry", "disgust", "contempt", "fear", "happy", "sad", "surprise", "neutral",
];
pub const NEUTRAL: &str = "neutral";

pub const GENERATOR_VERSION: u32 = 1;
pub const GESTURE_MS: f64 = 150.0;
/// Mean spacing between token onsets.
pub const TOKEN_SLOT_MS: f64 = 220.0;
pub const MAX_HARMONIC_HZ: f64 = 5000.0;
/// Bound on max |SG(track) - track| for every emitted track.
pub const SMOOTHNESS_BOUND: f64 = 0.05;
/// Cap on Savitzky-Golay passes while enforcing [`SMOOTHNESS_BOUND`].
pub const MAX_SMOOTH_PASSES: usize = 8;
/// Band centres that enter [`spectral_tilt`].
pub const TILT_BAND_HZ: (f64, f64) = (150.0, 4000.0);
/// Harmonic amplitudes fall as (f / TILT_REF_HZ)^-tilt.
pub const TILT_REF_HZ: f64 = 100.0;

const NOISE_LEVEL: f64 = 0.0001;
const PEAK_LEVEL: f64 = 0.8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusSpec {
    /// K
    pub speakers: usize,
    /// C, used when `emotion_names` is empty: neutral plus the first C-1
    /// entries of [`EMOTION_NAMES`].
    pub emotions: usize,
    pub emotion_names: Vec<String>,
    /// X
    pub clips_per_pair: usize,
    pub vocab_size: usize,
    pub min_frames: usize,
    pub max_frames: usize,
    pub sample_rate: u32,
    pub seed: u64,
    /// Per-speaker asymmetries on top of the shared articulation.
    pub style_offsets: bool,
    /// Index of the first content script; lets a held-out corpus reuse the
    /// same speakers with unseen content.
    pub first_clip: usize,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        CorpusSpec {
            speakers: 2,
            emotions: 8,
            emotion_names: Vec::new(),
            clips_per_pair: 2,
            vocab_size: 12,
            min_frames: 15,
            max_frames: 90,
            sample_rate: 16_000,
            seed: 0,
            style_offsets: true,
            first_clip: 0,
        }
    }
}

impl CorpusSpec {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("speakers", self.speakers),
            ("clips_per_pair", self.clips_per_pair),
            ("vocab_size", self.vocab_size),
            ("min_frames", self.min_frames),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        if self.emotion_names.is_empty() && !(1..=EMOTION_NAMES.len()).contains(&self.emotions) {
            return Err(Error::Config(format!(
                "emotions must be in 1..={}, got {}",
                EMOTION_NAMES.len(),
                self.emotions
            )));
        }
        let names = self.emotion_list();
        for (i, n) in names.iter().enumerate() {
            if !EMOTION_NAMES.contains(&n.as_str()) {
                return Err(Error::Config(format!("unknown emotion {n:?}")));
            }
            if names[..i].contains(n) {
                return Err(Error::Config(format!("duplicate emotion {n:?}")));
            }
        }
        if self.max_frames < self.min_frames {
            return Err(Error::Config("max_frames < min_frames".into()));
        }
        if self.sample_rate < 8_000 {
            return Err(Error::Config("sample_rate must be at least 8000".into()));
        }
        let min_ms = self.min_frames as f64 * 1000.0 / FRAME_RATE as f64;
        if min_ms < GESTURE_MS + 40.0 {
            return Err(Error::Config(format!(
                "min_frames too small to hold one {GESTURE_MS} ms gesture"
            )));
        }
        Ok(())
    }

    /// Emotion names indexed by emotion id.
    pub fn emotion_list(&self) -> Vec<String> {
        if !self.emotion_names.is_empty() {
            return self.emotion_names.clone();
        }
        std::iter::once(NEUTRAL)
            .chain(EMOTION_NAMES.iter().copied().filter(|&n| n != NEUTRAL))
            .take(self.emotions)
            .map(String::from)
            .collect()
    }

    pub fn clip_count(&self) -> usize {
        self.speakers * self.emotion_list().len() * self.clips_per_pair
    }
}

/// Per-clip generator constants, stored with each manifest record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorInfo {
    pub version: u32,
    pub seed: u64,
    pub sample_rate: u32,
    pub f0_hz: f64,
    pub formant_scale: f64,
    pub tilt: f64,
    pub vibrato_hz: f64,
    pub gesture_ms: f64,
    pub onsets_ms: Vec<f64>,
    pub sg_window: usize,
    pub sg_order: usize,
    pub style_offsets: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClipRecord {
    pub clip_id: String,
    pub speaker_id: usize,
    pub emotion_id: usize,
    pub emotion: String,
    pub content_token_ids: Vec<usize>,
    /// Relative to the manifest directory.
    pub wav_path: String,
    pub blendshape_path: String,
    #[serde(rename = "T")]
    pub t: usize,
    pub generator: Option<GeneratorInfo>,
}

impl ClipRecord {
    pub fn is_neutral(&self) -> bool {
        self.emotion == NEUTRAL
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub dir: PathBuf,
    pub records: Vec<ClipRecord>,
}

/// Audio and ground truth of one clip.
#[derive(Clone, Debug)]
pub struct ClipData {
    pub audio: AudioClip,
    pub blendshapes: BlendshapeSequence,
}

impl Manifest {
    pub fn wav_path(&self, r: &ClipRecord) -> PathBuf {
        self.dir.join(&r.wav_path)
    }

    pub fn blendshape_path(&self, r: &ClipRecord) -> PathBuf {
        self.dir.join(&r.blendshape_path)
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Emotion names by id, as far as the records reveal them.
    pub fn emotion_names(&self) -> Vec<String> {
        let mut by_id = BTreeMap::new();
        for r in &self.records {
            by_id.insert(r.emotion_id, r.emotion.clone());
        }
        let n = by_id.keys().next_back().map_or(0, |k| k + 1);
        (0..n)
            .map(|i| {
                by_id
                    .get(&i)
                    .cloned()
                    .unwrap_or_else(|| format!("emotion{i}"))
            })
            .collect()
    }

    pub fn speakers(&self) -> Vec<usize> {
        let mut s: Vec<usize> = self.records.iter().map(|r| r.speaker_id).collect();
        s.sort_unstable();
        s.dedup();
        s
    }

    pub fn load_clip(&self, r: &ClipRecord) -> Result<ClipData> {
        let audio = AudioClip::read_wav(&self.wav_path(r))?;
        let blendshapes = BlendshapeSequence::read_csv(&self.blendshape_path(r))?;
        if blendshapes.frames() != r.t {
            return Err(Error::BadDims(format!(
                "{}: manifest says T={} but blendshape file has {} rows",
                r.clip_id,
                r.t,
                blendshapes.frames()
            )));
        }
        Ok(ClipData { audio, blendshapes })
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("record serializes"));
            out.push('\n');
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_jsonl()).map_err(|e| Error::io(path, e))
    }
}

/// Reads a JSON-lines manifest and checks that every referenced file exists.
pub fn load_manifest(path: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut records = Vec::new();
    let mut offset = 0;
    for line in text.split_inclusive('\n') {
        let body = line.trim();
        if !body.is_empty() {
            let r: ClipRecord = serde_json::from_str(body)
                .map_err(|e| Error::format(offset + e.column().saturating_sub(1), e.to_string()))?;
            records.push(r);
        }
        offset += line.len();
    }
    let m = Manifest { dir, records };
    for r in &m.records {
        for p in [m.wav_path(r), m.blendshape_path(r)] {
            if !p.exists() {
                return Err(Error::io(
                    p,
                    std::io::Error::new(std::io::ErrorKind::NotFound, "referenced file missing"),
                ));
            }
        }
    }
    Ok(m)
}

/// One neutral clip and one emotional clip with the same speaker and tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct PairBatch {
    pub neutral: ClipRecord,
    pub emotional: ClipRecord,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Pairs {
    pub pairs: Vec<PairBatch>,
    /// Non-neutral clips without a neutral partner.
    pub warnings: usize,
}

impl IntoIterator for Pairs {
    type Item = PairBatch;
    type IntoIter = std::vec::IntoIter<PairBatch>;
    fn into_iter(self) -> Self::IntoIter {
        self.pairs.into_iter()
    }
}

/// Pairs every non-neutral clip with the first neutral clip of the same
/// speaker and token sequence, in manifest order.
pub fn iterate_pairs(manifest: &Manifest) -> Pairs {
    let mut neutral: BTreeMap<(usize, &[usize]), &ClipRecord> = BTreeMap::new();
    for r in manifest.records.iter().filter(|r| r.is_neutral()) {
        neutral
            .entry((r.speaker_id, r.content_token_ids.as_slice()))
            .or_insert(r);
    }
    let mut out = Pairs::default();
    for r in manifest.records.iter().filter(|r| !r.is_neutral()) {
        match neutral.get(&(r.speaker_id, r.content_token_ids.as_slice())) {
            Some(n) => out.pairs.push(PairBatch {
                neutral: (*n).clone(),
                emotional: r.clone(),
            }),
            None => out.warnings += 1,
        }
    }
    if out.warnings > 0 {
        log::warn!(
            "{} clips have no neutral partner and were skipped",
            out.warnings
        );
    }
    out
}

fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn rng_for(seed: u64, tag: &[u64]) -> ChaCha8Rng {
    let s = tag.iter().fold(mix(seed), |acc, &t| mix(acc ^ t));
    ChaCha8Rng::seed_from_u64(s)
}

const TAG_SPEAKER: u64 = 1;
const TAG_SCRIPT: u64 = 2;
const TAG_TOKEN: u64 = 3;
const TAG_EMOTION: u64 = 4;
const TAG_NOISE: u64 = 5;

/// Acoustic and articulatory signature of one emotion.
#[derive(Clone, Debug)]
struct EmotionStyle {
    tilt: f64,
    vibrato_hz: f64,
    upper: Vec<(usize, f64)>,
    lower: Vec<(usize, f64)>,
}

fn emotion_style(name: &str) -> EmotionStyle {
    let (tilt, vibrato_hz) = match name {
        "neutral" => (2.52, 0.0),
        "angry" => (0.0, 7.0),
        "disgust" => (1.44, 3.0),
        "contempt" => (0.72, 5.0),
        "fear" => (1.08, 9.0),
        "happy" => (0.36, 4.0),
        "sad" => (2.16, 2.0),
        _ => (1.8, 6.0),
    };
    let idx = EMOTION_NAMES.iter().position(|&n| n == name).unwrap_or(0) as u64;
    let mut rng = rng_for(0x5eed, &[TAG_EMOTION, idx]);
    let partition = Partition::default();
    let (upper, lower) = if name == NEUTRAL {
        (Vec::new(), Vec::new())
    } else {
        let pick = |rng: &mut ChaCha8Rng, pool: &[usize], n: usize, hi: f64| {
            let mut chosen = Vec::new();
            while chosen.len() < n {
                let c = pool[rng.random_range(0..pool.len())];
                if !chosen.iter().any(|&(k, _)| k == c) {
                    chosen.push((c, rng.random_range(0.15..hi)));
                }
            }
            chosen.sort_by_key(|&(k, _)| k);
            chosen
        };
        let u = pick(&mut rng, &partition.upper, 6, 0.6);
        let l = pick(&mut rng, &partition.lower, 3, 0.25);
        (u, l)
    };
    EmotionStyle {
        tilt,
        vibrato_hz,
        upper,
        lower,
    }
}

#[derive(Clone, Debug)]
struct Speaker {
    f0: f64,
    formant_scale: f64,
    upper_gain: f64,
    /// Style offsets, applied only when enabled.
    offsets: Vec<(usize, f64)>,
}

fn speaker(seed: u64, s: usize, k: usize) -> Speaker {
    let mut rng = rng_for(seed, &[TAG_SPEAKER, s as u64]);
    // Log-spaced pitch grid keeps speakers apart for any K.
    let pos = (s as f64 + 0.5 + rng.random_range(-0.25..0.25)) / k as f64;
    let f0 = 100.0 * 1.8f64.powf(pos);
    let formant_scale = rng.random_range(0.85..1.15);
    let upper_gain = rng.random_range(0.6..1.0);
    let pairs = [
        ("mouthSmileLeft", "mouthSmileRight"),
        ("mouthLeft", "mouthRight"),
        ("browOuterUpLeft", "browOuterUpRight"),
        ("eyeSquintLeft", "eyeSquintRight"),
    ];
    let mut offsets = Vec::new();
    for (l, r) in pairs {
        let a = rng.random_range(-0.08..0.08);
        let (side, amount) = if a >= 0.0 { (l, a) } else { (r, -a) };
        offsets.push((channel_index(side).expect("known channel"), amount));
    }
    Speaker {
        f0,
        formant_scale,
        upper_gain,
        offsets,
    }
}

/// Formants and lip pattern of one content token.
#[derive(Clone, Debug)]
struct Token {
    f1: f64,
    f2: f64,
    gain: f64,
    pattern: Vec<f64>,
}

fn token(seed: u64, v: usize) -> Token {
    let mut rng = rng_for(seed, &[TAG_TOKEN, v as u64]);
    let f1 = rng.random_range(300.0..800.0);
    let f2 = rng.random_range(900.0..2400.0);
    let gain = rng.random_range(0.6..1.0);
    let open = (f1 - 300.0) / 500.0;
    let front = (f2 - 900.0) / 1500.0;
    let mut pattern = vec![0.0; NUM_CHANNELS];
    let set =
        |p: &mut Vec<f64>, name: &str, v: f64| p[channel_index(name).expect("known channel")] = v;
    set(&mut pattern, "jawOpen", 0.15 + 0.6 * open);
    set(
        &mut pattern,
        "mouthFunnel",
        0.5 * (1.0 - front) * (1.0 - open),
    );
    set(&mut pattern, "mouthPucker", 0.6 * (1.0 - front).powi(2));
    for side in ["Left", "Right"] {
        set(&mut pattern, &format!("mouthSmile{side}"), 0.35 * front);
        set(
            &mut pattern,
            &format!("mouthStretch{side}"),
            0.3 * front * open,
        );
        set(&mut pattern, &format!("mouthLowerDown{side}"), 0.4 * open);
        set(&mut pattern, &format!("mouthUpperUp{side}"), 0.3 * front);
    }
    set(&mut pattern, "mouthClose", 0.2 * (1.0 - open));
    // A little of every other lower-face channel so all of them carry signal.
    for &k in &Partition::default().lower {
        if pattern[k] == 0.0 {
            pattern[k] = rng.random_range(0.0..0.12);
        }
    }
    Token {
        f1,
        f2,
        gain,
        pattern,
    }
}

/// Token ids, clip length in frames and onset times (ms) for content script `x`.
fn script(spec: &CorpusSpec, x: usize) -> (Vec<usize>, usize, Vec<f64>) {
    let mut rng = rng_for(spec.seed, &[TAG_SCRIPT, x as u64]);
    let frames = rng.random_range(spec.min_frames..=spec.max_frames);
    let total_ms = frames as f64 * 1000.0 / FRAME_RATE as f64;
    let n = ((total_ms - 40.0) / TOKEN_SLOT_MS).floor().max(1.0) as usize;
    let slot = (total_ms - 40.0) / n as f64;
    let mut tokens = Vec::with_capacity(n);
    let mut onsets = Vec::with_capacity(n);
    for i in 0..n {
        tokens.push(rng.random_range(0..spec.vocab_size));
        let room = (slot - GESTURE_MS).max(0.0);
        let jitter = if room > 0.0 {
            rng.random_range(0.0..room)
        } else {
            0.0
        };
        onsets.push(20.0 + i as f64 * slot + jitter);
    }
    (tokens, frames, onsets)
}

/// Raised-cosine gesture of width [`GESTURE_MS`] starting at `onset`.
fn gesture(t_ms: f64, onset: f64) -> f64 {
    let u = (t_ms - onset) / GESTURE_MS;
    if (0.0..=1.0).contains(&u) {
        0.5 - 0.5 * (2.0 * PI * u).cos()
    } else {
        0.0
    }
}

fn formant_gain(f: f64, f1: f64, f2: f64) -> f64 {
    let peak = |c: f64, bw: f64| 1.0 / (1.0 + ((f - c) / bw).powi(2));
    1.0 + peak(f1, 90.0) + 0.7 * peak(f2, 120.0) + 0.3 * peak(2.9 * f1.max(f2 / 1.4), 200.0)
}

struct ClipPlan<'a> {
    speaker: &'a Speaker,
    emotion: &'a EmotionStyle,
    tokens: Vec<&'a Token>,
    onsets: Vec<f64>,
    frames: usize,
}

fn token_at(plan: &ClipPlan, t_ms: f64) -> usize {
    plan.onsets
        .iter()
        .rposition(|&o| o <= t_ms + GESTURE_MS / 2.0)
        .unwrap_or(0)
}

fn synthesize_audio(
    plan: &ClipPlan,
    sample_rate: u32,
    noise: &mut ChaCha8Rng,
) -> Result<AudioClip> {
    let d = crate::signal::samples_per_frame(sample_rate);
    let n = plan.frames * d;
    let sr = sample_rate as f64;
    let nyquist_cap = MAX_HARMONIC_HZ.min(0.45 * sr);
    let spk = plan.speaker;
    let mut phase = 0.0;
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let t = i as f64 / sr;
        let t_ms = t * 1000.0;
        let f0 = spk.f0 * (1.0 + 0.03 * (2.0 * PI * plan.emotion.vibrato_hz * t).sin());
        phase += 2.0 * PI * f0 / sr;
        let k = token_at(plan, t_ms);
        let tok = plan.tokens[k];
        let f1 = tok.f1 * spk.formant_scale;
        let f2 = tok.f2 * spk.formant_scale;
        let env: f64 = 0.06
            + plan
                .tokens
                .iter()
                .zip(&plan.onsets)
                .map(|(tk, &o)| tk.gain * gesture(t_ms, o))
                .sum::<f64>();
        let mut s = 0.0;
        let mut h = 1;
        while h as f64 * f0 < nyquist_cap {
            let f = h as f64 * f0;
            s += (f / TILT_REF_HZ).powf(-plan.emotion.tilt)
                * formant_gain(f, f1, f2)
                * (h as f64 * phase).sin();
            h += 1;
        }
        out.push(env * s + NOISE_LEVEL * noise.random_range(-1.0..1.0));
    }
    let peak = out.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak > 0.0 {
        out.iter_mut().for_each(|v| *v *= PEAK_LEVEL / peak);
    }
    AudioClip::new(out, sample_rate)
}

fn articulate(plan: &ClipPlan, style_offsets: bool) -> Result<BlendshapeSequence> {
    let partition = Partition::default();
    let mut raw = Array2::<f64>::zeros((plan.frames, NUM_CHANNELS));
    for t in 0..plan.frames {
        let t_ms = t as f64 * 1000.0 / FRAME_RATE as f64;
        let mut activity = 0.0;
        for (tok, &o) in plan.tokens.iter().zip(&plan.onsets) {
            let g = gesture(t_ms, o);
            activity += g;
            for &k in &partition.lower {
                raw[[t, k]] += g * tok.pattern[k];
            }
        }
        for &(k, v) in &plan.emotion.lower {
            raw[[t, k]] += v;
        }
        let level = plan.speaker.upper_gain * (0.7 + 0.3 * activity.min(1.0));
        for &(k, v) in &plan.emotion.upper {
            raw[[t, k]] += level * v;
        }
        if style_offsets {
            for &(k, v) in &plan.speaker.offsets {
                raw[[t, k]] += v;
            }
        }
    }
    // One pass is not idempotent on a 150 ms gesture at 30 fps, so repeat
    // until the residual bound holds.
    let mut track = raw;
    for _ in 0..MAX_SMOOTH_PASSES {
        track = savgol_smooth(&track, sg::WINDOW, sg::ORDER)?.mapv(|v| v.clamp(0.0, 1.0));
        let seq = BlendshapeSequence::new(track.clone())?;
        if smoothness_residual(&seq)? <= SMOOTHNESS_BOUND {
            return Ok(seq);
        }
    }
    Err(Error::Numerical(format!(
        "smoothness residual above {SMOOTHNESS_BOUND} after {MAX_SMOOTH_PASSES} passes"
    )))
}

/// max |SG(track) - track| over all frames and channels.
pub fn smoothness_residual(seq: &BlendshapeSequence) -> Result<f64> {
    let again = savgol_smooth(seq.coeffs(), sg::WINDOW, sg::ORDER)?;
    Ok((&again - seq.coeffs())
        .iter()
        .fold(0.0f64, |m, v| m.max(v.abs())))
}

/// Least-squares slope of log10 mean mel power against log10 band centre,
/// over bands centred in [`TILT_BAND_HZ`]. Emotions with flatter harmonic
/// series score higher.
pub fn spectral_tilt(clip: &AudioClip) -> Result<f64> {
    let mel = mel_spectrogram(
        clip,
        crate::signal::DEFAULT_N_MELS,
        crate::signal::DEFAULT_WINDOW,
        crate::signal::DEFAULT_HOP,
    )?;
    let bank = MelFilterBank::new(
        mel.n_mels,
        mel.window.next_power_of_two(),
        clip.sample_rate(),
    );
    let (lo_hz, hi_hz) = TILT_BAND_HZ;
    let points: Vec<(f64, f64)> = bank
        .centers()
        .into_iter()
        .enumerate()
        .filter(|&(_, c)| (lo_hz..=hi_hz).contains(&c))
        .map(|(b, c)| {
            let power = mel.frames.column(b).iter().map(|v| v.exp_m1()).sum::<f64>()
                / mel.frames.nrows() as f64;
            (c.log10(), (power + 1e-12).log10())
        })
        .collect();
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = points.iter().map(|p| (p.0 - mx).powi(2)).sum();
    Ok(sxy / sxx)
}

/// Writes `wav/`, `blendshapes/` and `manifest.jsonl` under `out_dir`.
pub fn generate_corpus(spec: &CorpusSpec, out_dir: &Path) -> Result<Manifest> {
    spec.validate()?;
    let wav_dir = out_dir.join("wav");
    let bs_dir = out_dir.join("blendshapes");
    for d in [&wav_dir, &bs_dir] {
        fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    let records = generate_into(spec, |name, audio, bs| {
        audio.write_wav(&wav_dir.join(format!("{name}.wav")))?;
        bs.write_csv(&bs_dir.join(format!("{name}.csv")))
    })?;
    let manifest = Manifest {
        dir: out_dir.to_path_buf(),
        records,
    };
    let path = out_dir.join("manifest.jsonl");
    let mut f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    f.write_all(manifest.to_jsonl().as_bytes())
        .map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

/// Generates the corpus in memory. Audio is returned as it reads back from a
/// 16-bit file.
pub fn generate_in_memory(spec: &CorpusSpec) -> Result<Vec<(ClipRecord, ClipData)>> {
    spec.validate()?;
    let mut out = Vec::new();
    let records = generate_into(spec, |_, audio, bs| {
        out.push(ClipData {
            audio: audio.quantized(),
            blendshapes: bs.clone(),
        });
        Ok(())
    })?;
    Ok(records.into_iter().zip(out).collect())
}

fn generate_into(
    spec: &CorpusSpec,
    mut sink: impl FnMut(&str, &AudioClip, &BlendshapeSequence) -> Result<()>,
) -> Result<Vec<ClipRecord>> {
    let emotions = spec.emotion_list();
    let styles: Vec<EmotionStyle> = emotions.iter().map(|n| emotion_style(n)).collect();
    let speakers: Vec<Speaker> = (0..spec.speakers)
        .map(|s| speaker(spec.seed, s, spec.speakers))
        .collect();
    let vocab: Vec<Token> = (0..spec.vocab_size).map(|v| token(spec.seed, v)).collect();
    let mut records = Vec::with_capacity(spec.clip_count());
    for (s, spk) in speakers.iter().enumerate() {
        for (c, (emotion, style)) in emotions.iter().zip(&styles).enumerate() {
            for x in spec.first_clip..spec.first_clip + spec.clips_per_pair {
                let (token_ids, frames, onsets) = script(spec, x);
                let plan = ClipPlan {
                    speaker: spk,
                    emotion: style,
                    tokens: token_ids.iter().map(|&v| &vocab[v]).collect(),
                    onsets: onsets.clone(),
                    frames,
                };
                let mut noise = rng_for(spec.seed, &[TAG_NOISE, s as u64, c as u64, x as u64]);
                let audio = synthesize_audio(&plan, spec.sample_rate, &mut noise)?;
                let bs = articulate(&plan, spec.style_offsets)?;
                let clip_id = format!("s{s:02}_{emotion}_{x:03}");
                sink(&clip_id, &audio, &bs)?;
                records.push(ClipRecord {
                    wav_path: format!("wav/{clip_id}.wav"),
                    blendshape_path: format!("blendshapes/{clip_id}.csv"),
                    clip_id,
                    speaker_id: s,
                    emotion_id: c,
                    emotion: emotion.clone(),
                    content_token_ids: token_ids,
                    t: frames,
                    generator: Some(GeneratorInfo {
                        version: GENERATOR_VERSION,
                        seed: spec.seed,
                        sample_rate: spec.sample_rate,
                        f0_hz: spk.f0,
                        formant_scale: spk.formant_scale,
                        tilt: style.tilt,
                        vibrato_hz: style.vibrato_hz,
                        gesture_ms: GESTURE_MS,
                        onsets_ms: onsets,
                        sg_window: sg::WINDOW,
                        sg_order: sg::ORDER,
                        style_offsets: spec.style_offsets,
                    }),
                });
            }
        }
    }
    Ok(records)
}

/// Names of the 52 channels, re-exported for manifest consumers.
pub fn channel_names() -> &'static [&'static str; NUM_CHANNELS] {
    &ARKIT_NAMES
}
