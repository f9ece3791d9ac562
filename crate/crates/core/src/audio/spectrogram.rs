//! Log-magnitude filterbank spectrograms and excerpt slicing.

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use super::filterbank::Filterbank;
use super::synth::AudioBuffer;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Excerpt width in frames (1.2 s at 31.25 fps).
pub const EXCERPT_FRAMES: usize = 40;
/// The excerpt window is shifted this many frames past the target onset.
pub const EXCERPT_SHIFT: usize = 5;

#[derive(Clone, Debug)]
pub struct Spectrogram {
    /// [num_frames, num_bins], log(1 + filtered magnitude), all >= 0.
    pub frames: Tensor<f32>,
    pub frame_rate: f64,
    /// Center frequency per bin, from the filterbank.
    pub bin_frequencies: Vec<f32>,
}

impl Spectrogram {
    pub fn num_frames(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn num_bins(&self) -> usize {
        self.frames.shape()[1]
    }
}

/// Start sample of frame `i`: the hop 22050/31.25 = 705.6 samples is
/// fractional, so starts are rounded per frame to honor the exact rate.
pub fn frame_start(index: usize, sample_rate: f64, frame_rate: f64) -> usize {
    (index as f64 * sample_rate / frame_rate).round() as usize
}

/// Number of frames whose full window fits in `len` samples.
pub fn num_frames(len: usize, fft_size: usize, sample_rate: f64, frame_rate: f64) -> usize {
    if len < fft_size {
        return 0;
    }
    let hop = sample_rate / frame_rate;
    // closed-form guess, then correct for per-frame rounding
    let mut n = ((len - fft_size) as f64 / hop).floor() as usize + 1;
    while frame_start(n, sample_rate, frame_rate) + fft_size <= len {
        n += 1;
    }
    while n > 0 && frame_start(n - 1, sample_rate, frame_rate) + fft_size > len {
        n -= 1;
    }
    n
}

/// Windowed-FFT magnitude spectrogram compressed through `filterbank` and
/// log(1 + x). Frame starts are `round(i * sample_rate / frame_rate)`.
pub fn spectrogram(
    audio: &AudioBuffer,
    fft_size: usize,
    frame_rate: f64,
    filterbank: &Filterbank,
) -> Result<Spectrogram> {
    if audio.samples.len() < fft_size {
        return Err(Error::invalid(format!(
            "audio too short: {} samples < one {fft_size}-sample window",
            audio.samples.len()
        )));
    }
    if filterbank.fft_size != fft_size {
        return Err(Error::shape(format!(
            "filterbank built for FFT size {}, spectrogram uses {fft_size}",
            filterbank.fft_size
        )));
    }
    let fs = audio.sample_rate as f64;
    let n = num_frames(audio.samples.len(), fft_size, fs, frame_rate);
    let bins = filterbank.num_bands();
    let mut frames = Tensor::zeros(&[n, bins]);

    // symmetric Hann window
    let window: Vec<f32> = (0..fft_size)
        .map(|i| 0.5 * (1.0 - (std::f32::consts::TAU * i as f32 / (fft_size - 1) as f32).cos()))
        .collect();

    let mut planner = FftPlanner::<f32>::new();
    let fft = planner.plan_fft_forward(fft_size);
    let mut buf = vec![Complex::new(0.0f32, 0.0); fft_size];
    let mut mags = vec![0.0f32; fft_size / 2 + 1];

    for i in 0..n {
        let start = frame_start(i, fs, frame_rate);
        for (b, (&s, &w)) in buf.iter_mut().zip(audio.samples[start..start + fft_size].iter().zip(&window)) {
            *b = Complex::new(s * w, 0.0);
        }
        fft.process(&mut buf);
        for (m, c) in mags.iter_mut().zip(&buf[..fft_size / 2 + 1]) {
            *m = c.norm();
        }
        let row = &mut frames.data_mut()[i * bins..(i + 1) * bins];
        filterbank.apply(&mags, row);
        for v in row.iter_mut() {
            *v = v.ln_1p();
        }
    }

    Ok(Spectrogram {
        frames,
        frame_rate,
        bin_frequencies: filterbank.band_center_frequencies.clone(),
    })
}

/// Slice the `context`-frame window ending `shift` frames after the onset,
/// transposed to [bins, frames]. The onset column is `context - 1 - shift`.
pub fn excerpt(
    spec: &Spectrogram,
    onset_frame: usize,
    context: usize,
    shift: usize,
) -> Result<Tensor<f32>> {
    let end = onset_frame + shift;
    if end + 1 < context {
        return Err(Error::ExcerptTooEarly { onset_frame, needed: context - shift - 1 });
    }
    if end >= spec.num_frames() {
        return Err(Error::invalid(format!(
            "excerpt needs frame {end} but spectrogram has {}",
            spec.num_frames()
        )));
    }
    let first = end + 1 - context;
    let bins = spec.num_bins();
    let mut out = Tensor::zeros(&[bins, context]);
    for f in 0..context {
        let src = &spec.frames.data()[(first + f) * bins..(first + f + 1) * bins];
        for (b, &v) in src.iter().enumerate() {
            out.data_mut()[b * context + f] = v;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio::{build_filterbank, BANDS_PER_OCTAVE, FFT_SIZE, FMAX, FMIN, FRAME_RATE, SAMPLE_RATE};
    use crate::error::Error;

    fn default_fb() -> Filterbank {
        build_filterbank(FFT_SIZE, SAMPLE_RATE as f64, BANDS_PER_OCTAVE, FMIN, FMAX).unwrap()
    }

    fn sine(freq: f64, seconds: f64) -> AudioBuffer {
        let n = (seconds * SAMPLE_RATE as f64).round() as usize;
        let samples = (0..n)
            .map(|i| (std::f64::consts::TAU * freq * i as f64 / SAMPLE_RATE as f64).sin() as f32 * 0.8)
            .collect();
        AudioBuffer { samples, sample_rate: SAMPLE_RATE }
    }

    #[test]
    fn two_seconds_at_defaults_gives_60_frames() {
        // brute-force count of rounded starts whose window fits in 44100
        // samples; the closed-form floor((len - fft)/hop) + 1 agrees
        let len = 44100usize;
        let mut expected = 0;
        loop {
            let start = (expected as f64 * 705.6).round() as usize;
            if start + FFT_SIZE > len {
                break;
            }
            expected += 1;
        }
        assert_eq!(expected, ((len - FFT_SIZE) as f64 / 705.6).floor() as usize + 1);
        assert_eq!(expected, 60);
        assert_eq!(num_frames(len, FFT_SIZE, SAMPLE_RATE as f64, FRAME_RATE), 60);

        let fb = default_fb();
        let spec = spectrogram(&sine(440.0, 2.0), FFT_SIZE, FRAME_RATE, &fb).unwrap();
        assert_eq!(spec.num_frames(), 60);
        assert_eq!(spec.num_bins(), 136);
    }

    #[test]
    fn frame_rate_is_exact_by_index_arithmetic() {
        // every 5th frame start is integral: 5 * 705.6 = 3528
        for k in 0..50 {
            assert_eq!(frame_start(5 * k, SAMPLE_RATE as f64, FRAME_RATE), 3528 * k);
        }
        // 125 frames span exactly 4 seconds of samples
        assert_eq!(frame_start(125, SAMPLE_RATE as f64, FRAME_RATE), 4 * SAMPLE_RATE as usize);
    }

    #[test]
    fn pure_tone_peaks_at_the_band_nearest_its_frequency() {
        let fb = default_fb();
        let spec = spectrogram(&sine(440.0, 2.0), FFT_SIZE, FRAME_RATE, &fb).unwrap();
        // band whose center is nearest 440 Hz
        let nearest = fb
            .band_center_frequencies
            .iter()
            .enumerate()
            .min_by(|(_, a), (_, b)| {
                (**a - 440.0).abs().partial_cmp(&(**b - 440.0).abs()).unwrap()
            })
            .map(|(i, _)| i)
            .unwrap();
        let bins = spec.num_bins();
        for f in 0..spec.num_frames() {
            let row = &spec.frames.data()[f * bins..(f + 1) * bins];
            let argmax = row
                .iter()
                .enumerate()
                .max_by(|(_, a), (_, b)| a.partial_cmp(b).unwrap())
                .map(|(i, _)| i)
                .unwrap();
            assert_eq!(argmax, nearest, "frame {f}");
        }
        // the peak band center is within one band of 440 Hz
        let c = fb.band_center_frequencies[nearest] as f64;
        assert!((c - 440.0).abs() < 440.0 * (2f64.powf(1.0 / 24.0) - 1.0) * 1.5, "center {c}");
    }

    #[test]
    fn silence_gives_all_zero_spectrogram() {
        let audio = AudioBuffer { samples: vec![0.0; 44100], sample_rate: SAMPLE_RATE };
        let spec = spectrogram(&audio, FFT_SIZE, FRAME_RATE, &default_fb()).unwrap();
        assert!(spec.frames.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn values_are_nonnegative() {
        let (audio, _) = crate::audio::synthesize(&[crate::score::NoteEvent::new(69, 4)], 0.5).unwrap();
        let spec = spectrogram(&audio, FFT_SIZE, FRAME_RATE, &default_fb()).unwrap();
        assert!(spec.frames.data().iter().all(|&v| v >= 0.0 && v.is_finite()));
    }

    #[test]
    fn too_short_audio_rejected() {
        let audio = AudioBuffer { samples: vec![0.0; 2047], sample_rate: SAMPLE_RATE };
        assert!(spectrogram(&audio, FFT_SIZE, FRAME_RATE, &default_fb()).is_err());
    }

    #[test]
    fn excerpt_boundaries() {
        let fb = default_fb();
        let spec = spectrogram(&sine(440.0, 4.0), FFT_SIZE, FRAME_RATE, &fb).unwrap();
        // onset 34, shift 5 -> frames 0..=39 works
        assert!(excerpt(&spec, 34, 40, 5).is_ok());
        // onset 33 -> too early, distinct error
        match excerpt(&spec, 33, 40, 5) {
            Err(Error::ExcerptTooEarly { onset_frame: 33, .. }) => {}
            other => panic!("expected ExcerptTooEarly, got {other:?}"),
        }
    }

    #[test]
    fn excerpt_is_a_pure_transposed_slice() {
        let fb = default_fb();
        let spec = spectrogram(&sine(523.25, 4.0), FFT_SIZE, FRAME_RATE, &fb).unwrap();
        let ex = excerpt(&spec, 100, 40, 5).unwrap();
        assert_eq!(ex.shape(), &[136, 40]);
        // frames 66..=105; onset frame 100 sits at column 34
        for f in 0..40 {
            for b in 0..136 {
                assert_eq!(ex.at2(b, f), spec.frames.at2(66 + f, b));
            }
        }
        assert_eq!(100 - 66, 34);
    }

    #[test]
    fn silence_then_tone_has_zero_frames_only_in_pure_silence() {
        let mut samples = vec![0.0f32; 22050];
        let tone = sine(440.0, 1.0);
        samples.extend_from_slice(&tone.samples);
        let audio = AudioBuffer { samples, sample_rate: SAMPLE_RATE };
        let spec = spectrogram(&audio, FFT_SIZE, FRAME_RATE, &default_fb()).unwrap();
        let bins = spec.num_bins();
        for f in 0..spec.num_frames() {
            let start = frame_start(f, SAMPLE_RATE as f64, FRAME_RATE);
            let all_silence = start + FFT_SIZE <= 22050;
            let row = &spec.frames.data()[f * bins..(f + 1) * bins];
            let zero = row.iter().all(|&v| v == 0.0);
            assert_eq!(zero, all_silence, "frame {f}");
        }
    }
}
