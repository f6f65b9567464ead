//! Speaker × emotion style library.
//!
//! Each speaker `i` has a base style `R_i` (mean voiceprint, 512-d). Each
//! `(speaker, emotion)` key holds `P = [R_i ∥ Ē]` where `Ē` is the running
//! mean of clip-pooled emotion features (256-d). Retrieval compares the
//! query `[E ∥ R]` against every entry after reordering it to the entry
//! layout `[R ∥ E]`, and returns the entry of least cosine distance.
//!
//! The library is a plain value: readers share it by `&`, a writer needs
//! `&mut`, so a retrieval can never see a half-written entry. Wrap it in a
//! `RwLock` to share it across threads.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encoders::{EMOTION_DIM, VOICEPRINT_DIM};
use crate::error::{Error, Result};

pub const BASE_DIM: usize = VOICEPRINT_DIM;
pub const ENTRY_DIM: usize = VOICEPRINT_DIM + EMOTION_DIM;
pub const LIBRARY_VERSION: u32 = 1;

/// `1 - u·v / (‖u‖‖v‖)`, clamped to [0, 2].
pub fn cosine_distance(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::BadDims(format!(
            "cosine of lengths {} and {}",
            u.len(),
            v.len()
        )));
    }
    let nu = u.iter().map(|x| x * x).sum::<f64>();
    let nv = v.iter().map(|x| x * x).sum::<f64>();
    if nu == 0.0 || nv == 0.0 {
        return Err(Error::ZeroVector("cosine distance operand".into()));
    }
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    // One square root of the product keeps D(u, u) exactly zero.
    Ok((1.0 - dot / (nu * nv).sqrt()).clamp(0.0, 2.0))
}

/// Mean voiceprint per speaker.
pub fn build_base_styles<'a, I, V>(clips_by_speaker: I) -> Result<BTreeMap<String, Vec<f64>>>
where
    I: IntoIterator<Item = (&'a str, V)>,
    V: AsRef<[Vec<f64>]>,
{
    let mut out = BTreeMap::new();
    for (speaker, clips) in clips_by_speaker {
        let clips = clips.as_ref();
        if clips.is_empty() {
            return Err(Error::EmptySpeaker(speaker.to_owned()));
        }
        let dim = clips[0].len();
        let mut sum = vec![0.0; dim];
        for v in clips {
            if v.len() != dim {
                return Err(Error::BadDims(format!(
                    "voiceprints of speaker {speaker} differ in length"
                )));
            }
            sum.iter_mut().zip(v).for_each(|(s, x)| *s += x);
        }
        let n = clips.len() as f64;
        out.insert(speaker.to_owned(), sum.into_iter().map(|s| s / n).collect());
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct StyleEntry {
    /// Running mean of pooled emotion features.
    pub emotion_mean: Vec<f64>,
    pub count: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StyleLibrary {
    emotion_names: Vec<String>,
    base: BTreeMap<String, Vec<f64>>,
    entries: BTreeMap<(String, usize), StyleEntry>,
}

/// Result of a library lookup.
#[derive(Clone, Debug, PartialEq)]
pub struct Retrieval {
    pub speaker: String,
    pub emotion: usize,
    pub distance: f64,
    /// The 768-d entry `P`.
    pub entry: Vec<f64>,
}

impl Retrieval {
    pub fn key(&self) -> (&str, usize) {
        (&self.speaker, self.emotion)
    }
}

impl StyleLibrary {
    pub fn new(emotion_names: Vec<String>, base: BTreeMap<String, Vec<f64>>) -> Result<Self> {
        for (s, r) in &base {
            if r.len() != BASE_DIM {
                return Err(Error::BadDims(format!(
                    "base style of {s} has length {}",
                    r.len()
                )));
            }
        }
        Ok(StyleLibrary {
            emotion_names,
            base,
            entries: BTreeMap::new(),
        })
    }

    pub fn emotion_names(&self) -> &[String] {
        &self.emotion_names
    }

    pub fn base_styles(&self) -> &BTreeMap<String, Vec<f64>> {
        &self.base
    }

    pub fn base_style(&self, speaker: &str) -> Option<&[f64]> {
        self.base.get(speaker).map(Vec::as_slice)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Keys in ascending `(speaker, emotion)` order.
    pub fn keys(&self) -> impl Iterator<Item = (&str, usize)> {
        self.entries.keys().map(|(s, e)| (s.as_str(), *e))
    }

    pub fn entry(&self, speaker: &str, emotion: usize) -> Option<&StyleEntry> {
        self.entries.get(&(speaker.to_owned(), emotion))
    }

    /// `P = [R ∥ Ē]` for a key.
    pub fn entry_vector(&self, speaker: &str, emotion: usize) -> Option<Vec<f64>> {
        let e = self.entry(speaker, emotion)?;
        let r = &self.base[speaker];
        Some(r.iter().chain(&e.emotion_mean).copied().collect())
    }

    /// Fold one clip's pooled emotion feature into its key's running mean.
    pub fn add_clip(&mut self, speaker: &str, emotion: usize, pooled: &[f64]) -> Result<()> {
        if !self.base.contains_key(speaker) {
            return Err(Error::MissingBase(speaker.to_owned()));
        }
        if pooled.len() != EMOTION_DIM {
            return Err(Error::BadDims(format!(
                "pooled emotion feature of length {}",
                pooled.len()
            )));
        }
        if emotion >= self.emotion_names.len() {
            return Err(Error::BadLabel {
                label: emotion,
                classes: self.emotion_names.len(),
            });
        }
        let entry = self
            .entries
            .entry((speaker.to_owned(), emotion))
            .or_insert_with(|| StyleEntry {
                emotion_mean: vec![0.0; EMOTION_DIM],
                count: 0,
            });
        entry.count += 1;
        let n = entry.count as f64;
        for (m, x) in entry.emotion_mean.iter_mut().zip(pooled) {
            *m += (x - *m) / n;
        }
        Ok(())
    }

    /// Replace a speaker's base style (every entry of that speaker follows).
    pub fn set_base_style(&mut self, speaker: &str, r: Vec<f64>) -> Result<()> {
        if r.len() != BASE_DIM {
            return Err(Error::BadDims(format!("base style of length {}", r.len())));
        }
        self.base.insert(speaker.to_owned(), r);
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = self.to_json()?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> Result<String> {
        let mut speakers = BTreeMap::new();
        for (s, r) in &self.base {
            speakers.insert(
                s.clone(),
                SpeakerFile {
                    r: r.clone(),
                    entries: BTreeMap::new(),
                },
            );
        }
        for ((s, e), entry) in &self.entries {
            let p = self.entry_vector(s, *e).expect("entry exists");
            speakers.get_mut(s).expect("base exists").entries.insert(
                self.emotion_names[*e].clone(),
                EntryFile {
                    p,
                    count: entry.count,
                },
            );
        }
        let file = LibraryFile {
            version: LIBRARY_VERSION,
            emotion_names: self.emotion_names.clone(),
            speakers,
        };
        serde_json::to_string_pretty(&file).map_err(|e| Error::Numerical(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: LibraryFile = serde_json::from_str(text)
            .map_err(|e| Error::format(json_offset(text, &e), e.to_string()))?;
        let at = |key: &str| text.find(&format!("\"{key}\"")).unwrap_or(0);
        if file.version != LIBRARY_VERSION {
            return Err(Error::format(
                at("version"),
                format!("expected version {LIBRARY_VERSION}, found {}", file.version),
            ));
        }
        let mut lib = StyleLibrary {
            emotion_names: file.emotion_names,
            base: BTreeMap::new(),
            entries: BTreeMap::new(),
        };
        for (s, sf) in file.speakers {
            if sf.r.len() != BASE_DIM {
                return Err(Error::format(
                    at(&s),
                    format!("R of {s} has length {}", sf.r.len()),
                ));
            }
            for (name, ef) in sf.entries {
                let e = lib
                    .emotion_names
                    .iter()
                    .position(|n| *n == name)
                    .ok_or_else(|| Error::format(at(&name), format!("unknown emotion {name}")))?;
                if ef.p.len() != ENTRY_DIM || ef.p[..BASE_DIM] != sf.r[..] {
                    return Err(Error::format(
                        at(&s),
                        format!(
                            "entry ({s}, {name}) is not [R ∥ mean emotion] of length {ENTRY_DIM}"
                        ),
                    ));
                }
                lib.entries.insert(
                    (s.clone(), e),
                    StyleEntry {
                        emotion_mean: ef.p[BASE_DIM..].to_vec(),
                        count: ef.count,
                    },
                );
            }
            lib.base.insert(s, sf.r);
        }
        Ok(lib)
    }
}

/// Build a library from clip-pooled emotion features in one pass.
pub fn build_style_library<S: AsRef<str>>(
    features: &[(S, usize, Vec<f64>)],
    base: &BTreeMap<String, Vec<f64>>,
    emotion_names: &[String],
) -> Result<StyleLibrary> {
    let mut lib = StyleLibrary::new(emotion_names.to_vec(), base.clone())?;
    let mut sums: BTreeMap<(String, usize), (Vec<f64>, u64)> = BTreeMap::new();
    for (s, e, pooled) in features {
        let s = s.as_ref();
        if !base.contains_key(s) {
            return Err(Error::MissingBase(s.to_owned()));
        }
        if pooled.len() != EMOTION_DIM {
            return Err(Error::BadDims(format!(
                "pooled emotion feature of length {}",
                pooled.len()
            )));
        }
        if *e >= emotion_names.len() {
            return Err(Error::BadLabel {
                label: *e,
                classes: emotion_names.len(),
            });
        }
        let slot = sums
            .entry((s.to_owned(), *e))
            .or_insert_with(|| (vec![0.0; EMOTION_DIM], 0));
        slot.0.iter_mut().zip(pooled).for_each(|(a, x)| *a += x);
        slot.1 += 1;
    }
    for (key, (sum, n)) in sums {
        let emotion_mean = sum.into_iter().map(|v| v / n as f64).collect();
        lib.entries.insert(
            key,
            StyleEntry {
                emotion_mean,
                count: n,
            },
        );
    }
    Ok(lib)
}

/// Exhaustive cosine-argmin over the library for the query `[E ∥ R]`.
/// Ties go to the smallest `(speaker, emotion)` key.
pub fn retrieve_style(e_pooled: &[f64], r: &[f64], library: &StyleLibrary) -> Result<Retrieval> {
    if library.is_empty() {
        return Err(Error::EmptyLibrary);
    }
    if e_pooled.len() != EMOTION_DIM || r.len() != BASE_DIM {
        return Err(Error::BadDims(format!(
            "query parts of length {} and {}",
            e_pooled.len(),
            r.len()
        )));
    }
    // Entries are stored R-first.
    let query: Vec<f64> = r.iter().chain(e_pooled).copied().collect();
    let qn = query.iter().map(|x| x * x).sum::<f64>().sqrt();
    if qn == 0.0 {
        return Err(Error::ZeroVector("retrieval query".into()));
    }
    let mut best: Option<(f64, &(String, usize))> = None;
    let mut p = vec![0.0; ENTRY_DIM];
    for (key, entry) in &library.entries {
        let base = &library.base[&key.0];
        p[..BASE_DIM].copy_from_slice(base);
        p[BASE_DIM..].copy_from_slice(&entry.emotion_mean);
        let d = cosine_distance(&query, &p)?;
        if best.map_or(true, |(bd, _)| d < bd) {
            best = Some((d, key));
        }
    }
    let (distance, (speaker, emotion)) = best.expect("non-empty library");
    Ok(Retrieval {
        speaker: speaker.clone(),
        emotion: *emotion,
        distance,
        entry: library
            .entry_vector(speaker, *emotion)
            .expect("key present"),
    })
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LibraryFile {
    version: u32,
    emotion_names: Vec<String>,
    speakers: BTreeMap<String, SpeakerFile>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SpeakerFile {
    #[serde(rename = "R")]
    r: Vec<f64>,
    entries: BTreeMap<String, EntryFile>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EntryFile {
    #[serde(rename = "P")]
    p: Vec<f64>,
    count: u64,
}

/// Byte offset of a JSON error from its 1-based line and column.
pub(crate) fn json_offset(text: &str, e: &serde_json::Error) -> usize {
    let line = e.line();
    if line == 0 {
        return text.len();
    }
    let start: usize = text
        .split_inclusive('\n')
        .take(line - 1)
        .map(str::len)
        .sum();
    (start + e.column().saturating_sub(1)).min(text.len())
}
