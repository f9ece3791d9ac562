//! Normalized logarithmic triangular filterbank.
//!
//! Target center frequencies are geometrically spaced (`bands_per_octave`
//! steps per octave, anchored at A4 = 440 Hz) and trimmed to [fmin, fmax].
//! Each interior target spans a triangle from the previous to the next
//! target; the triangle is sampled at the FFT bin frequencies strictly
//! inside its base. Filters with empty support are dropped, each filter is
//! normalized to unit sum, and consecutive duplicates (distinct low-frequency
//! targets that collapse onto the same bins) are merged. At the default
//! parameters this yields exactly 136 bands.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct Filterbank {
    /// Dense filter matrix [num_bands, num_fft_bins]; each row sums to 1.
    pub weights: Tensor<f32>,
    /// Target center frequency per band, strictly increasing.
    pub band_center_frequencies: Vec<f32>,
    /// Sparse form of `weights`: (first bin, weights) per band.
    rows: Vec<(usize, Vec<f32>)>,
    pub fft_size: usize,
    pub sample_rate: f64,
}

impl Filterbank {
    pub fn num_bands(&self) -> usize {
        self.band_center_frequencies.len()
    }

    pub fn num_fft_bins(&self) -> usize {
        self.fft_size / 2 + 1
    }

    /// Apply the filterbank to a magnitude spectrum.
    pub fn apply(&self, magnitudes: &[f32], out: &mut [f32]) {
        debug_assert_eq!(magnitudes.len(), self.num_fft_bins());
        debug_assert_eq!(out.len(), self.num_bands());
        for (o, (start, ws)) in out.iter_mut().zip(&self.rows) {
            let mut acc = 0.0f32;
            for (w, &m) in ws.iter().zip(&magnitudes[*start..*start + ws.len()]) {
                acc += w * m;
            }
            *o = acc;
        }
    }
}

/// Geometric target frequencies covering [fmin, fmax] at the given
/// resolution, anchored at 440 Hz.
fn log_target_frequencies(bands_per_octave: usize, fmin: f64, fmax: f64) -> Vec<f64> {
    let bpo = bands_per_octave as f64;
    let left = ((fmin / 440.0).log2() * bpo).floor() as i64;
    let right = ((fmax / 440.0).log2() * bpo).ceil() as i64;
    (left..right)
        .map(|i| 440.0 * 2f64.powf(i as f64 / bpo))
        .filter(|&f| f >= fmin && f <= fmax)
        .collect()
}

pub fn build_filterbank(
    fft_size: usize,
    sample_rate: f64,
    bands_per_octave: usize,
    fmin: f64,
    fmax: f64,
) -> Result<Filterbank> {
    if !(fmin < fmax && fmax <= sample_rate / 2.0) {
        return Err(Error::invalid(format!(
            "filterbank needs fmin < fmax <= nyquist, got {fmin}..{fmax} at fs {sample_rate}"
        )));
    }
    let num_fft_bins = fft_size / 2 + 1;
    let bin_hz = sample_rate / fft_size as f64;
    let targets = log_target_frequencies(bands_per_octave, fmin, fmax);
    if targets.len() < 3 {
        return Err(Error::invalid(format!(
            "filterbank parameters yield only {} target frequencies",
            targets.len()
        )));
    }

    let mut rows: Vec<(usize, Vec<f32>)> = Vec::new();
    let mut centers: Vec<f32> = Vec::new();
    for i in 1..targets.len() - 1 {
        let (lo, center, hi) = (targets[i - 1], targets[i], targets[i + 1]);
        let first_bin = (lo / bin_hz).floor() as usize + 1;
        let mut ws = Vec::new();
        let mut start = None;
        for k in first_bin..num_fft_bins {
            let f = k as f64 * bin_hz;
            if f <= lo {
                continue;
            }
            if f >= hi {
                break;
            }
            let w = if f <= center { (f - lo) / (center - lo) } else { (hi - f) / (hi - center) };
            if start.is_none() {
                start = Some(k);
            }
            ws.push(w);
        }
        let Some(start) = start else { continue };
        let sum: f64 = ws.iter().sum();
        let ws: Vec<f32> = ws.iter().map(|&w| (w / sum) as f32).collect();
        if let Some((prev_start, prev_ws)) = rows.last() {
            if *prev_start == start && prev_ws == &ws {
                continue; // duplicate of the previous filter; merge
            }
        }
        rows.push((start, ws));
        centers.push(center as f32);
    }

    if rows.len() < 2 {
        return Err(Error::invalid(format!("filterbank collapsed to {} bands", rows.len())));
    }

    let mut weights = Tensor::zeros(&[rows.len(), num_fft_bins]);
    for (b, (start, ws)) in rows.iter().enumerate() {
        for (j, &w) in ws.iter().enumerate() {
            weights.data_mut()[b * num_fft_bins + start + j] = w;
        }
    }

    Ok(Filterbank {
        weights,
        band_center_frequencies: centers,
        rows,
        fft_size,
        sample_rate,
    })
}
