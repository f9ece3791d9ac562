//! Additive synthesis of monophonic note sequences. Replaces an external
//! sampler with a deterministic tone generator that preserves the onset and
//! pitch structure: 8 harmonics at half-amplitude steps, 10 ms linear
//! attack, exponential decay (tau = 0.6 s), 10 ms release inside the note
//! duration.

use crate::error::{Error, Result};
use crate::score::NoteEvent;

pub const SAMPLE_RATE: u32 = 22050;

const HARMONICS: usize = 8;
const ATTACK_S: f64 = 0.010;
const RELEASE_S: f64 = 0.010;
const DECAY_TAU_S: f64 = 0.6;
const PEAK_TARGET: f32 = 0.8;

/// Mono audio, samples in [-1, 1].
#[derive(Clone, Debug)]
pub struct AudioBuffer {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
}

impl AudioBuffer {
    pub fn duration_seconds(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

pub fn midi_to_hz(midi_pitch: u8) -> f64 {
    440.0 * 2f64.powf((midi_pitch as f64 - 69.0) / 12.0)
}

/// A tied run of notes collapses to one sustained tone with one onset.
struct SoundingEvent {
    midi_pitch: u8,
    onset_quarters: f64,
    duration_quarters: f64,
    /// Index of the first (onset-carrying) note of the tie chain.
    note_index: usize,
}

fn collapse_ties(notes: &[NoteEvent]) -> Result<Vec<SoundingEvent>> {
    let mut events: Vec<SoundingEvent> = Vec::new();
    let mut clock = 0.0f64;
    let mut open: Option<usize> = None; // index into events
    for (i, n) in notes.iter().enumerate() {
        match open.take() {
            Some(e) => {
                if events[e].midi_pitch != n.midi_pitch {
                    return Err(Error::invalid(format!(
                        "tie between different pitches at note {i}: {} -> {}",
                        events[e].midi_pitch, n.midi_pitch
                    )));
                }
                events[e].duration_quarters += n.quarters();
                if n.tie_to_next && i + 1 < notes.len() {
                    open = Some(e);
                }
            }
            None => {
                events.push(SoundingEvent {
                    midi_pitch: n.midi_pitch,
                    onset_quarters: clock,
                    duration_quarters: n.quarters(),
                    note_index: i,
                });
                if n.tie_to_next && i + 1 < notes.len() {
                    open = Some(events.len() - 1);
                }
            }
        }
        clock += n.quarters();
    }
    Ok(events)
}

/// Synthesize a note sequence at `tempo` seconds per quarter note. Returns
/// the audio plus one exact onset time per sounding event, paired with the
/// index of the note that carries the onset (ties produce a single onset on
/// their first note).
pub fn synthesize(notes: &[NoteEvent], tempo: f64) -> Result<(AudioBuffer, Vec<(usize, f64)>)> {
    if notes.is_empty() {
        return Err(Error::invalid("synthesize: empty piece"));
    }
    if tempo <= 0.0 {
        return Err(Error::invalid(format!("synthesize: tempo {tempo} must be positive")));
    }
    for n in notes {
        n.validate()?;
    }
    let events = collapse_ties(notes)?;
    let total_quarters: f64 = notes.iter().map(|n| n.quarters()).sum();
    let fs = SAMPLE_RATE as f64;
    let total_samples = (total_quarters * tempo * fs).ceil() as usize + 1;
    let mut samples = vec![0.0f32; total_samples];

    let harm_norm: f64 = (0..HARMONICS).map(|k| 0.5f64.powi(k as i32)).sum();

    let mut onsets = Vec::with_capacity(events.len());
    for ev in &events {
        let onset_s = ev.onset_quarters * tempo;
        let dur_s = ev.duration_quarters * tempo;
        onsets.push((ev.note_index, onset_s));
        let f0 = midi_to_hz(ev.midi_pitch);
        let start = (onset_s * fs).round() as usize;
        let n_samples = (dur_s * fs).round() as usize;
        for n in 0..n_samples.min(total_samples.saturating_sub(start)) {
            let t = n as f64 / fs;
            let attack = (t / ATTACK_S).min(1.0);
            let release = ((dur_s - t) / RELEASE_S).clamp(0.0, 1.0);
            let env = attack * (-t / DECAY_TAU_S).exp() * release;
            if env <= 0.0 {
                continue;
            }
            let mut v = 0.0f64;
            let phase = std::f64::consts::TAU * f0 * t;
            for k in 0..HARMONICS {
                let amp = 0.5f64.powi(k as i32) / harm_norm;
                v += amp * (phase * (k + 1) as f64).sin();
            }
            samples[start + n] += (env * v) as f32;
        }
    }

    // peak-normalize to 0.8 before analysis
    let peak = samples.iter().fold(0.0f32, |m, &v| m.max(v.abs()));
    if peak > 0.0 {
        let scale = PEAK_TARGET / peak;
        for v in &mut samples {
            *v *= scale;
        }
    }

    Ok((AudioBuffer { samples, sample_rate: SAMPLE_RATE }, onsets))
}
