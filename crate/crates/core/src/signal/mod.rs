//! Audio I/O, resampling, mel front end, frame alignment and smoothing.

mod align;
mod audio;
mod mel;
mod savgol;

pub use align::{align_frames, interp_matrix};
pub use audio::{resample_audio, samples_per_frame, AudioClip, DEFAULT_SAMPLE_RATE, FRAME_RATE};
pub use mel::{
    hz_to_mel, mel_spectrogram, mel_to_hz, MelFilterBank, MelSpectrogram, DEFAULT_HOP,
    DEFAULT_N_MELS, DEFAULT_WINDOW,
};
pub use savgol::{savgol_coefficients, savgol_smooth};

/// Default Savitzky-Golay parameters used for blendshape tracks.
pub mod sg {
    pub use super::savgol::{DEFAULT_ORDER as ORDER, DEFAULT_WINDOW as WINDOW};
}
