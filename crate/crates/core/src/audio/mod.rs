//! Audio front end: additive synthesis of note sequences, the 136-band
//! logarithmic filterbank and log-magnitude spectrograms, excerpt slicing,
//! and WAV import/export for debugging.

pub mod filterbank;
pub mod spectrogram;
pub mod synth;
pub mod wav;

pub use filterbank::{build_filterbank, Filterbank};
pub use spectrogram::{excerpt, spectrogram, Spectrogram, EXCERPT_FRAMES, EXCERPT_SHIFT};
pub use synth::{synthesize, AudioBuffer, SAMPLE_RATE};

/// Frame rate of all spectrograms, frames per second.
pub const FRAME_RATE: f64 = 31.25;
/// FFT window size in samples.
pub const FFT_SIZE: usize = 2048;
/// Logarithmic filterbank resolution.
pub const BANDS_PER_OCTAVE: usize = 24;
pub const FMIN: f64 = 80.0;
pub const FMAX: f64 = 8000.0;
