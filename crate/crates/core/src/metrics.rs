//! Blendshape-space and vertex-space evaluation metrics.
//!
//! LBE, PBE and MBE compare coefficient tracks; BA compares audio onsets with
//! pauses in lip motion; LVE, EVE and FDD compare vertex trajectories.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array3, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::decoder::{channels_with_prefix, BlendshapeSequence, NUM_CHANNELS};
use crate::error::{Error, Result};
use crate::mesh::{apply_blendshapes, BlendshapeBasis};
use crate::signal::{mel_spectrogram, AudioClip, DEFAULT_HOP, DEFAULT_N_MELS, DEFAULT_WINDOW};

pub const DEFAULT_BA_SIGMA: f64 = 0.1;
/// Half-width, in mel frames, of the neighbourhood an onset peak must
/// dominate.
pub const ONSET_PEAK_RADIUS: usize = 5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RegionConfig {
    pub lip_channels: Vec<usize>,
    pub pronunciation_channels: Vec<usize>,
    pub lip_vertices: Vec<usize>,
    pub eye_forehead_vertices: Vec<usize>,
    pub upper_face_vertices: Vec<usize>,
    /// Seconds.
    pub ba_sigma: f64,
}

impl Default for RegionConfig {
    /// Lip: the 23 mouth channels. Pronunciation: mouth plus the 4 jaw
    /// channels. Vertex sets are empty until a mesh supplies them.
    fn default() -> Self {
        let lip = channels_with_prefix("mouth");
        let mut pron = channels_with_prefix("jaw");
        pron.extend(&lip);
        pron.sort_unstable();
        RegionConfig {
            lip_channels: lip,
            pronunciation_channels: pron,
            lip_vertices: Vec::new(),
            eye_forehead_vertices: Vec::new(),
            upper_face_vertices: Vec::new(),
            ba_sigma: DEFAULT_BA_SIGMA,
        }
    }
}

pub const LIP_MASK: &str = "lip";
pub const EYE_FOREHEAD_MASK: &str = "eye_forehead";
pub const UPPER_FACE_MASK: &str = "upper_face";

impl RegionConfig {
    /// Default channel sets plus the vertex sets named by a mesh's masks.
    pub fn for_masks(masks: &std::collections::BTreeMap<String, Vec<usize>>) -> Self {
        let get = |k: &str| masks.get(k).cloned().unwrap_or_default();
        RegionConfig {
            lip_vertices: get(LIP_MASK),
            eye_forehead_vertices: get(EYE_FOREHEAD_MASK),
            upper_face_vertices: get(UPPER_FACE_MASK),
            ..RegionConfig::default()
        }
    }

    pub fn validate_channels(&self) -> Result<()> {
        for (name, set) in [
            ("lip_channels", &self.lip_channels),
            ("pronunciation_channels", &self.pronunciation_channels),
        ] {
            if set.is_empty() {
                return Err(Error::Config(format!("{name} is empty")));
            }
            if let Some(&k) = set.iter().find(|&&k| k >= NUM_CHANNELS) {
                return Err(Error::Config(format!("{name} contains channel {k}")));
            }
        }
        if !(self.ba_sigma.is_finite() && self.ba_sigma > 0.0) {
            return Err(Error::Config("ba_sigma must be positive".into()));
        }
        Ok(())
    }

    pub fn validate_vertices(&self, num_vertices: usize) -> Result<()> {
        for (name, set) in [
            ("lip_vertices", &self.lip_vertices),
            ("eye_forehead_vertices", &self.eye_forehead_vertices),
            ("upper_face_vertices", &self.upper_face_vertices),
        ] {
            if set.is_empty() {
                return Err(Error::BadMask(format!("{name} is empty")));
            }
            if let Some(&v) = set.iter().find(|&&v| v >= num_vertices) {
                return Err(Error::BadMask(format!(
                    "{name} contains vertex {v} but the mesh has {num_vertices}"
                )));
            }
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let r: RegionConfig =
            serde_json::from_str(text).map_err(|e| crate::training::json_error(text, &e))?;
        r.validate_channels()?;
        Ok(r)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlendshapeMetrics {
    pub lbe: f64,
    pub pbe: f64,
    pub mbe: f64,
}

fn check_same(pred: &BlendshapeSequence, gt: &BlendshapeSequence) -> Result<()> {
    if pred.frames() != gt.frames() {
        return Err(Error::BadDims(format!(
            "prediction has {} frames, ground truth {}",
            pred.frames(),
            gt.frames()
        )));
    }
    if pred.frames() == 0 {
        return Err(Error::EmptyInput("no frames to compare".into()));
    }
    Ok(())
}

/// LBE and PBE: mean per-frame L2 norm of the error over the lip and
/// pronunciation channels. MBE: mean per-frame max absolute channel error.
pub fn blendshape_metrics(
    pred: &BlendshapeSequence,
    gt: &BlendshapeSequence,
    regions: &RegionConfig,
) -> Result<BlendshapeMetrics> {
    check_same(pred, gt)?;
    regions.validate_channels()?;
    let err = pred.coeffs() - gt.coeffs();
    let t = err.nrows() as f64;
    let region_l2 = |set: &[usize]| {
        err.rows()
            .into_iter()
            .map(|row| set.iter().map(|&k| row[k] * row[k]).sum::<f64>().sqrt())
            .sum::<f64>()
            / t
    };
    let mbe = err
        .rows()
        .into_iter()
        .map(|row| row.iter().fold(0.0f64, |m, v| m.max(v.abs())))
        .sum::<f64>()
        / t;
    Ok(BlendshapeMetrics {
        lbe: region_l2(&regions.lip_channels),
        pbe: region_l2(&regions.pronunciation_channels),
        mbe,
    })
}

/// Spectral flux of the log-mel spectrogram: `o_f = Σ_b max(0, M[f,b] - M[f-1,b])`,
/// with `o_0 = 0`.
pub fn onset_strength(clip: &AudioClip) -> Result<Vec<f64>> {
    let mel = mel_spectrogram(clip, DEFAULT_N_MELS, DEFAULT_WINDOW, DEFAULT_HOP)?;
    let m = &mel.frames;
    let mut out = vec![0.0; m.nrows()];
    for (f, o) in out.iter_mut().enumerate().skip(1) {
        *o = m
            .row(f)
            .iter()
            .zip(m.row(f - 1))
            .map(|(a, b)| (a - b).max(0.0))
            .sum();
    }
    Ok(out)
}

/// Audio beat times in seconds: onset-strength frames that are the strict
/// first maximum of their ±[`ONSET_PEAK_RADIUS`] neighbourhood and exceed
/// the envelope mean. Frame `f` is stamped at its centre, `(f·hop + hop/2)/sr`.
pub fn audio_beats(clip: &AudioClip) -> Result<Vec<f64>> {
    let env = onset_strength(clip)?;
    let mean = env.iter().sum::<f64>() / env.len() as f64;
    let sr = clip.sample_rate() as f64;
    let hop = DEFAULT_HOP as f64;
    Ok(local_peaks(&env, ONSET_PEAK_RADIUS)
        .into_iter()
        .filter(|&f| env[f] > mean)
        .map(|f| (f as f64 * hop + hop / 2.0) / sr)
        .collect())
}

fn local_peaks(x: &[f64], radius: usize) -> Vec<usize> {
    (0..x.len())
        .filter(|&i| {
            let lo = i.saturating_sub(radius);
            let hi = (i + radius + 1).min(x.len());
            (lo..i).all(|j| x[j] < x[i]) && (i + 1..hi).all(|j| x[j] <= x[i])
        })
        .collect()
}

/// Lip-channel speed per frame by central differences (one-sided at the
/// ends), in coefficient units per frame.
pub fn lip_speed(motion: &BlendshapeSequence, lip: &[usize]) -> Vec<f64> {
    let c = motion.coeffs();
    let t = c.nrows();
    (0..t)
        .map(|i| {
            let (a, b, h) = match (i.checked_sub(1), (i + 1 < t).then_some(i + 1)) {
                (Some(a), Some(b)) => (a, b, 2.0),
                (None, Some(b)) => (i, b, 1.0),
                (Some(a), None) => (a, i, 1.0),
                (None, None) => (i, i, 1.0),
            };
            lip.iter()
                .map(|&k| ((c[[b, k]] - c[[a, k]]) / h).powi(2))
                .sum::<f64>()
                .sqrt()
        })
        .collect()
}

/// Motion beat times in seconds: interior frames where lip speed has a
/// strict local minimum (ties on the right allowed). Visual frame `t` is
/// stamped at the centre of its audio snippet, `(t + 1/2)·D/sr`.
pub fn motion_beats(motion: &BlendshapeSequence, lip: &[usize], sample_rate: u32) -> Vec<f64> {
    let v = lip_speed(motion, lip);
    let d = crate::signal::samples_per_frame(sample_rate) as f64;
    let sr = sample_rate as f64;
    (1..v.len().saturating_sub(1))
        .filter(|&t| v[t] < v[t - 1] && v[t] <= v[t + 1])
        .map(|t| (t as f64 + 0.5) * d / sr)
        .collect()
}

/// `mean_i exp(-min_j (a_i - m_j)² / 2σ²)`; `None` without audio beats, 0
/// without motion beats.
pub fn beat_alignment_times(audio: &[f64], motion: &[f64], sigma: f64) -> Option<f64> {
    if audio.is_empty() {
        return None;
    }
    let total: f64 = audio
        .iter()
        .map(|&a| {
            let d2 = motion
                .iter()
                .map(|&m| (a - m) * (a - m))
                .fold(f64::INFINITY, f64::min);
            (-d2 / (2.0 * sigma * sigma)).exp()
        })
        .sum();
    Some(total / audio.len() as f64)
}

/// Beat alignment between a clip and a motion track aligned to its frames.
pub fn beat_alignment(
    clip: &AudioClip,
    motion: &BlendshapeSequence,
    regions: &RegionConfig,
) -> Result<Option<f64>> {
    regions.validate_channels()?;
    if motion.frames() != clip.frame_count() {
        return Err(Error::BadDims(format!(
            "motion has {} frames, audio spans {}",
            motion.frames(),
            clip.frame_count()
        )));
    }
    let a = audio_beats(clip)?;
    let m = motion_beats(motion, &regions.lip_channels, clip.sample_rate());
    Ok(beat_alignment_times(&a, &m, regions.ba_sigma))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VertexMetrics {
    pub lve: f64,
    pub eve: f64,
    /// Signed: predicted minus ground-truth motion spread.
    pub fdd: f64,
}

/// LVE, EVE and FDD over T×V×3 trajectories.
///
/// FDD averages over upper-face vertices the difference of temporal
/// (population) standard deviations of each vertex's distance from its mean
/// position.
pub fn vertex_metrics(
    pred: &Array3<f64>,
    gt: &Array3<f64>,
    regions: &RegionConfig,
) -> Result<VertexMetrics> {
    if pred.dim() != gt.dim() {
        return Err(Error::BadDims(format!(
            "trajectories of shape {:?} and {:?}",
            pred.dim(),
            gt.dim()
        )));
    }
    let (t, v, c) = pred.dim();
    if c != 3 {
        return Err(Error::BadDims(format!("vertices have {c} coordinates")));
    }
    if t == 0 {
        return Err(Error::EmptyInput("no frames to compare".into()));
    }
    regions.validate_vertices(v)?;
    let max_err = |set: &[usize]| {
        (0..t)
            .map(|f| {
                set.iter()
                    .map(|&i| {
                        (0..3)
                            .map(|k| (pred[[f, i, k]] - gt[[f, i, k]]).powi(2))
                            .sum::<f64>()
                            .sqrt()
                    })
                    .fold(0.0f64, f64::max)
            })
            .sum::<f64>()
            / t as f64
    };
    let spread = |traj: ArrayView2<f64>| -> f64 {
        let mean = traj.mean_axis(ndarray::Axis(0)).expect("t > 0");
        let dist: Vec<f64> = traj
            .rows()
            .into_iter()
            .map(|r| (&r - &mean).mapv(|x| x * x).sum().sqrt())
            .collect();
        std_dev(&dist)
    };
    let fdd = regions
        .upper_face_vertices
        .iter()
        .map(|&i| {
            spread(pred.slice(ndarray::s![.., i, ..])) - spread(gt.slice(ndarray::s![.., i, ..]))
        })
        .sum::<f64>()
        / regions.upper_face_vertices.len() as f64;
    Ok(VertexMetrics {
        lve: max_err(&regions.lip_vertices),
        eve: max_err(&regions.eye_forehead_vertices),
        fdd,
    })
}

/// Population standard deviation.
pub fn std_dev(x: &[f64]) -> f64 {
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    (x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n).sqrt()
}

/// Metrics of one clip. Absent values were not computable (no audio beats,
/// or no mesh basis).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClipReport {
    pub clip: String,
    pub lbe: f64,
    pub pbe: f64,
    pub mbe: f64,
    pub ba: Option<f64>,
    pub lve: Option<f64>,
    pub eve: Option<f64>,
    pub fdd: Option<f64>,
    pub fdd_abs: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub clips: Vec<ClipReport>,
    /// Corpus means; optional metrics average over the clips that have them.
    pub mean: ClipReport,
}

const CSV_HEADER: &str = "clip,lbe,pbe,mbe,ba,lve,eve,fdd,fdd_abs";

impl MetricReport {
    pub fn new(clips: Vec<ClipReport>) -> Result<Self> {
        if clips.is_empty() {
            return Err(Error::EmptyInput("no clips to report".into()));
        }
        let n = clips.len() as f64;
        let avg = |f: &dyn Fn(&ClipReport) -> f64| clips.iter().map(f).sum::<f64>() / n;
        let avg_opt = |f: &dyn Fn(&ClipReport) -> Option<f64>| {
            let v: Vec<f64> = clips.iter().filter_map(f).collect();
            (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
        };
        let mean = ClipReport {
            clip: "mean".into(),
            lbe: avg(&|c| c.lbe),
            pbe: avg(&|c| c.pbe),
            mbe: avg(&|c| c.mbe),
            ba: avg_opt(&|c| c.ba),
            lve: avg_opt(&|c| c.lve),
            eve: avg_opt(&|c| c.eve),
            fdd: avg_opt(&|c| c.fdd),
            fdd_abs: avg_opt(&|c| c.fdd_abs),
        };
        Ok(MetricReport { clips, mean })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// One row per clip followed by the `mean` row; absent values are empty.
    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        for c in self.clips.iter().chain(std::iter::once(&self.mean)) {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{}",
                c.clip,
                c.lbe,
                c.pbe,
                c.mbe,
                opt(c.ba),
                opt(c.lve),
                opt(c.eve),
                opt(c.fdd),
                opt(c.fdd_abs)
            );
        }
        out
    }

    /// Writes `report.json` and `report.csv` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (name, text) in [
            ("report.json", self.to_json()),
            ("report.csv", self.to_csv()),
        ] {
            let path = dir.join(name);
            fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }
}

/// Audio for clip `stem`: `audio_dir/<stem>.wav` when given, otherwise
/// `gt_dir/<stem>.wav` or the sibling `gt_dir/../wav/<stem>.wav`.
pub fn find_audio(stem: &str, gt_dir: &Path, audio_dir: Option<&Path>) -> Option<PathBuf> {
    let name = format!("{stem}.wav");
    let candidates = match audio_dir {
        Some(d) => vec![d.join(&name)],
        None => vec![
            gt_dir.join(&name),
            gt_dir.join("..").join("wav").join(&name),
        ],
    };
    candidates.into_iter().find(|p| p.is_file())
}

/// Scores every `*.csv` in `pred_dir` against the same file name in
/// `gt_dir`, in file-name order. Vertex metrics need a basis; empty vertex
/// sets in `regions` are filled from the basis masks. BA is reported when
/// the clip's audio is found.
pub fn evaluate_dirs(
    pred_dir: &Path,
    gt_dir: &Path,
    regions: &RegionConfig,
    basis: Option<&BlendshapeBasis>,
    audio_dir: Option<&Path>,
) -> Result<MetricReport> {
    regions.validate_channels()?;
    let mut regions = regions.clone();
    if let Some(b) = basis {
        let masks = RegionConfig::for_masks(&b.neutral.region_masks);
        for (set, fill) in [
            (&mut regions.lip_vertices, masks.lip_vertices),
            (
                &mut regions.eye_forehead_vertices,
                masks.eye_forehead_vertices,
            ),
            (&mut regions.upper_face_vertices, masks.upper_face_vertices),
        ] {
            if set.is_empty() {
                *set = fill;
            }
        }
        regions.validate_vertices(b.neutral.num_vertices())?;
    }
    let mut names: Vec<String> = fs::read_dir(pred_dir)
        .map_err(|e| Error::io(pred_dir, e))?
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| n.ends_with(".csv"))
        .collect();
    names.sort();
    let mut clips = Vec::with_capacity(names.len());
    for name in names {
        let stem = name.trim_end_matches(".csv");
        let pred = BlendshapeSequence::read_csv(&pred_dir.join(&name))?;
        let gt = BlendshapeSequence::read_csv(&gt_dir.join(&name))?;
        let bm = blendshape_metrics(&pred, &gt, &regions)?;
        let ba = match find_audio(stem, gt_dir, audio_dir) {
            Some(p) => beat_alignment(&AudioClip::read_wav(&p)?, &pred, &regions)?,
            None => None,
        };
        let vm = match basis {
            Some(b) => Some(vertex_metrics(
                &apply_blendshapes(b, &pred)?,
                &apply_blendshapes(b, &gt)?,
                &regions,
            )?),
            None => None,
        };
        clips.push(ClipReport {
            clip: stem.to_string(),
            lbe: bm.lbe,
            pbe: bm.pbe,
            mbe: bm.mbe,
            ba,
            lve: vm.map(|v| v.lve),
            eve: vm.map(|v| v.eve),
            fdd: vm.map(|v| v.fdd),
            fdd_abs: vm.map(|v| v.fdd.abs()),
        });
    }
    MetricReport::new(clips)
}
