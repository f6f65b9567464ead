use std::f64::consts::PI;

use ndarray::Array2;
use rustfft::{num_complex::Complex, FftPlanner};

use super::audio::AudioClip;
use crate::error::{Error, Result};

pub const DEFAULT_N_MELS: usize = 80;
pub const DEFAULT_WINDOW: usize = 400;
pub const DEFAULT_HOP: usize = 160;

/// Log-compressed (`ln(1+x)`) mel filter-bank energies, one row per hop.
#[derive(Clone, Debug, PartialEq)]
pub struct MelSpectrogram {
    pub frames: Array2<f64>,
    pub hop: usize,
    pub window: usize,
    pub n_mels: usize,
}

impl MelSpectrogram {
    pub fn num_frames(&self) -> usize {
        self.frames.nrows()
    }
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular filters evenly spaced on the mel scale over 0..sample_rate/2.
#[derive(Clone, Debug)]
pub struct MelFilterBank {
    /// n_mels + 2 edge frequencies in Hz; filter k spans edges k..k+2.
    edges: Vec<f64>,
    n_fft: usize,
    sample_rate: u32,
    weights: Array2<f64>,
}

impl MelFilterBank {
    pub fn new(n_mels: usize, n_fft: usize, sample_rate: u32) -> Self {
        let top = hz_to_mel(sample_rate as f64 / 2.0);
        let edges: Vec<f64> = (0..n_mels + 2)
            .map(|i| mel_to_hz(top * i as f64 / (n_mels + 1) as f64))
            .collect();
        let bins = n_fft / 2 + 1;
        let mut weights = Array2::zeros((bins, n_mels));
        for b in 0..bins {
            let f = b as f64 * sample_rate as f64 / n_fft as f64;
            for k in 0..n_mels {
                let (l, c, r) = (edges[k], edges[k + 1], edges[k + 2]);
                let w = ((f - l) / (c - l)).min((r - f) / (r - c));
                if w > 0.0 {
                    weights[[b, k]] = w;
                }
            }
        }
        MelFilterBank {
            edges,
            n_fft,
            sample_rate,
            weights,
        }
    }

    /// Peak frequency (Hz) of each filter.
    pub fn centers(&self) -> Vec<f64> {
        self.edges[1..self.edges.len() - 1].to_vec()
    }

    pub fn n_fft(&self) -> usize {
        self.n_fft
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    /// (n_fft/2+1) × n_mels weight matrix.
    pub fn weights(&self) -> &Array2<f64> {
        &self.weights
    }
}

/// Mel spectrogram with a Hann window centered on each hop.
///
/// F = ceil(len / hop); frame f is centered on sample `f·hop + hop/2` and
/// zero-padded where it overhangs the clip.
pub fn mel_spectrogram(
    clip: &AudioClip,
    n_mels: usize,
    window: usize,
    hop: usize,
) -> Result<MelSpectrogram> {
    if hop == 0 || window < hop || n_mels == 0 {
        return Err(Error::Config(format!(
            "need window >= hop > 0 and n_mels >= 1 (window {window}, hop {hop}, n_mels {n_mels})"
        )));
    }
    let samples = clip.samples();
    if window > samples.len() {
        return Err(Error::TooShort(format!(
            "clip has {} samples, window needs {window}",
            samples.len()
        )));
    }
    let n_fft = window.next_power_of_two();
    let bank = MelFilterBank::new(n_mels, n_fft, clip.sample_rate());
    let hann: Vec<f64> = (0..window)
        .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / window as f64).cos())
        .collect();
    let fft = FftPlanner::new().plan_fft_forward(n_fft);

    let frames = samples.len().div_ceil(hop);
    let bins = n_fft / 2 + 1;
    let mut power = Array2::<f64>::zeros((frames, bins));
    let mut buf = vec![Complex::new(0.0, 0.0); n_fft];
    for f in 0..frames {
        let start = (f * hop + hop / 2) as isize - (window / 2) as isize;
        buf.iter_mut().for_each(|c| *c = Complex::new(0.0, 0.0));
        for (i, w) in hann.iter().enumerate() {
            let idx = start + i as isize;
            if idx >= 0 && (idx as usize) < samples.len() {
                buf[i].re = samples[idx as usize] * w;
            }
        }
        fft.process(&mut buf);
        for b in 0..bins {
            power[[f, b]] = buf[b].norm_sqr();
        }
    }
    let frames = power.dot(bank.weights()).mapv(f64::ln_1p);
    Ok(MelSpectrogram {
        frames,
        hop,
        window,
        n_mels,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn silence_is_all_zero() {
        let clip = AudioClip::new(vec![0.0; 8000], 16_000).unwrap();
        let mel = mel_spectrogram(&clip, 80, 400, 160).unwrap();
        assert!(mel.frames.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn one_second_gives_100_frames() {
        let clip = AudioClip::new(vec![0.01; 16_000], 16_000).unwrap();
        let mel = mel_spectrogram(&clip, 80, 400, 160).unwrap();
        assert_eq!(mel.num_frames(), 100);
        assert!(mel.frames.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn tone_at_band_center_peaks_in_that_band() {
        let bank = MelFilterBank::new(80, 512, 16_000);
        let centers = bank.centers();
        for k in [20usize, 35, 50, 65, 78] {
            let f0 = centers[k];
            let s = (0..16_000)
                .map(|i| 0.5 * (2.0 * PI * f0 * i as f64 / 16_000.0).sin())
                .collect();
            let clip = AudioClip::new(s, 16_000).unwrap();
            let mel = mel_spectrogram(&clip, 80, 400, 160).unwrap();
            let mean = mel.frames.mean_axis(ndarray::Axis(0)).unwrap();
            let arg = mean
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1))
                .unwrap()
                .0;
            assert_eq!(arg, k, "tone at {f0} Hz");
        }
    }

    #[test]
    fn window_longer_than_clip_is_too_short() {
        let clip = AudioClip::new(vec![0.0; 100], 16_000).unwrap();
        assert!(matches!(
            mel_spectrogram(&clip, 80, 400, 160),
            Err(Error::TooShort(_))
        ));
    }
}
