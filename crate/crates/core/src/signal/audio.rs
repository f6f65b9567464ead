use std::f64::consts::PI;
use std::path::Path;

use crate::error::{Error, Result};

/// Visual frame rate every clip is aligned to.
pub const FRAME_RATE: u32 = 30;
pub const DEFAULT_SAMPLE_RATE: u32 = 16_000;

/// Mono waveform with amplitudes in [-1, 1], partitioned into
/// 30 fps snippets of `samples_per_frame` samples (last one zero-padded).
#[derive(Clone, Debug, PartialEq)]
pub struct AudioClip {
    samples: Vec<f64>,
    sample_rate: u32,
}

impl AudioClip {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::Config("sample rate must be positive".into()));
        }
        if samples.is_empty() {
            return Err(Error::EmptyInput("audio clip has no samples".into()));
        }
        Ok(AudioClip {
            samples,
            sample_rate,
        })
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    /// D: samples per visual frame, `sample_rate / 30` rounded up.
    pub fn samples_per_frame(&self) -> usize {
        samples_per_frame(self.sample_rate)
    }

    /// T: number of visual frames, the smallest T with D·T ≥ len.
    pub fn frame_count(&self) -> usize {
        self.samples.len().div_ceil(self.samples_per_frame())
    }

    /// The snippet a_t for frame `t`, zero-padded to D samples.
    pub fn frame(&self, t: usize) -> Vec<f64> {
        let d = self.samples_per_frame();
        let mut out = vec![0.0; d];
        let start = t * d;
        if start < self.samples.len() {
            let end = (start + d).min(self.samples.len());
            out[..end - start].copy_from_slice(&self.samples[start..end]);
        }
        out
    }

    pub fn read_wav(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let reader = hound::WavReader::new(std::io::BufReader::new(file))?;
        let spec = reader.spec();
        if spec.channels != 1 {
            return Err(Error::format(
                22,
                format!(
                    "{}: expected mono audio, found {} channels",
                    path.display(),
                    spec.channels
                ),
            ));
        }
        if spec.sample_format != hound::SampleFormat::Int || spec.bits_per_sample != 16 {
            return Err(Error::format(
                34,
                format!("{}: expected 16-bit PCM", path.display()),
            ));
        }
        let samples = reader
            .into_samples::<i16>()
            .map(|s| s.map(|v| v as f64 / 32768.0))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        AudioClip::new(samples, spec.sample_rate)
    }

    pub fn write_wav(&self, path: &Path) -> Result<()> {
        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: self.sample_rate,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let mut writer = hound::WavWriter::create(path, spec)?;
        for &s in &self.samples {
            writer.write_sample(quantize_i16(s))?;
        }
        writer.finalize()?;
        Ok(())
    }

    /// The clip as it reads back from a 16-bit WAV file.
    pub fn quantized(&self) -> AudioClip {
        AudioClip {
            samples: self
                .samples
                .iter()
                .map(|&s| quantize_i16(s) as f64 / 32768.0)
                .collect(),
            sample_rate: self.sample_rate,
        }
    }
}

pub fn samples_per_frame(sample_rate: u32) -> usize {
    (sample_rate as usize).div_ceil(FRAME_RATE as usize)
}

fn quantize_i16(s: f64) -> i16 {
    (s * 32768.0).round().clamp(-32768.0, 32767.0) as i16
}

const SINC_ZERO_CROSSINGS: f64 = 32.0;

/// Band-limited resampling with a Blackman-windowed sinc kernel.
///
/// Equal rates return the input unchanged. The output has
/// `round(len · target / source)` samples.
pub fn resample_audio(clip: &AudioClip, target_rate: u32) -> Result<AudioClip> {
    if target_rate == 0 {
        return Err(Error::Config("target rate must be positive".into()));
    }
    if clip.is_empty() {
        return Err(Error::EmptyInput("cannot resample an empty clip".into()));
    }
    if target_rate == clip.sample_rate {
        return Ok(clip.clone());
    }
    let src = clip.samples();
    let ratio = target_rate as f64 / clip.sample_rate as f64;
    let out_len = ((src.len() as f64 * ratio).round() as usize).max(1);
    // Anti-aliasing cutoff as a fraction of the input Nyquist rate.
    let cutoff = ratio.min(1.0) * 0.95;
    let half = (SINC_ZERO_CROSSINGS / cutoff).ceil();

    let mut out = Vec::with_capacity(out_len);
    for n in 0..out_len {
        let x = n as f64 / ratio;
        let lo = ((x - half).ceil() as isize).max(0);
        let hi = ((x + half).floor() as isize).min(src.len() as isize - 1);
        let mut acc = 0.0;
        let mut norm = 0.0;
        for k in lo..=hi {
            let d = x - k as f64;
            let w = cutoff * sinc(cutoff * d) * blackman(d / half);
            acc += w * src[k as usize];
            norm += w;
        }
        out.push(if norm != 0.0 { acc / norm } else { 0.0 });
    }
    AudioClip::new(out, target_rate)
}

fn sinc(x: f64) -> f64 {
    if x == 0.0 {
        1.0
    } else {
        (PI * x).sin() / (PI * x)
    }
}

/// Blackman window on u ∈ [-1, 1].
fn blackman(u: f64) -> f64 {
    if u.abs() >= 1.0 {
        return 0.0;
    }
    let a = PI * (u + 1.0);
    0.42 - 0.5 * a.cos() + 0.08 * (2.0 * a).cos()
}
