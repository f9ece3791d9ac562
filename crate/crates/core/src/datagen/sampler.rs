//! Random monophonic piece generation: a bounded random walk over pitch
//! with configurable feature probabilities.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::Piece;
use crate::error::{Error, Result};
use crate::score::{is_black_key, Accidental, NoteEvent, MAX_PITCH, MIN_PITCH};

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct SamplerConfig {
    pub min_notes: usize,
    pub max_notes: usize,
    /// Probability that a quarter/half note is dotted.
    pub p_dotted: f64,
    /// Probability that a note is tied to the previous one.
    pub p_tie: f64,
    /// Probability that a note lands on a black key (rendered as sharp/flat).
    pub p_accidental: f64,
    /// Relative weights of eighth, quarter and half durations.
    pub duration_weights: [f64; 3],
    /// Per-piece tempo jitter: tempo = 0.5 * (1 + jitter * u), u in [-1, 1].
    pub tempo_jitter: f64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            min_notes: 10,
            max_notes: 16,
            p_dotted: 0.15,
            p_tie: 0.10,
            p_accidental: 0.10,
            duration_weights: [0.35, 0.45, 0.20],
            tempo_jitter: 0.05,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.min_notes == 0 || self.min_notes > self.max_notes {
            return Err(Error::invalid(format!(
                "note count range {}..={} invalid",
                self.min_notes, self.max_notes
            )));
        }
        for (name, p) in [("p_dotted", self.p_dotted), ("p_tie", self.p_tie), ("p_accidental", self.p_accidental)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::invalid(format!("{name} = {p} not a probability")));
            }
        }
        if self.duration_weights.iter().any(|&w| w < 0.0)
            || self.duration_weights.iter().sum::<f64>() <= 0.0
        {
            return Err(Error::invalid("duration_weights must be nonnegative with positive sum"));
        }
        if !(0.0..0.5).contains(&self.tempo_jitter) {
            return Err(Error::invalid(format!("tempo_jitter = {} out of range", self.tempo_jitter)));
        }
        Ok(())
    }
}

fn nearest_natural(pitch: u8) -> u8 {
    if !is_black_key(pitch) {
        return pitch;
    }
    if pitch > MIN_PITCH {
        pitch - 1
    } else {
        pitch + 1
    }
}

fn nearest_black(pitch: u8) -> Option<u8> {
    if is_black_key(pitch) {
        return Some(pitch);
    }
    if pitch + 1 <= MAX_PITCH && is_black_key(pitch + 1) {
        return Some(pitch + 1);
    }
    if pitch - 1 >= MIN_PITCH && is_black_key(pitch - 1) {
        return Some(pitch - 1);
    }
    None
}

fn draw_duration<R: Rng>(rng: &mut R, cfg: &SamplerConfig) -> u8 {
    let total: f64 = cfg.duration_weights.iter().sum();
    let mut u = rng.gen::<f64>() * total;
    for (i, &w) in cfg.duration_weights.iter().enumerate() {
        if u < w {
            return [1u8, 2, 4][i];
        }
        u -= w;
    }
    4
}

/// Sample one piece. Deterministic for a fixed rng state.
pub fn sample_piece<R: Rng>(rng: &mut R, id: String, cfg: &SamplerConfig) -> Result<Piece> {
    cfg.validate()?;
    let n = rng.gen_range(cfg.min_notes..=cfg.max_notes);
    let tempo = 0.5 * (1.0 + cfg.tempo_jitter * rng.gen_range(-1.0..=1.0));

    let naturals: Vec<u8> = (MIN_PITCH..=MAX_PITCH).filter(|&p| !is_black_key(p)).collect();
    let mut pitch = naturals[rng.gen_range(0..naturals.len())];
    let mut notes: Vec<NoteEvent> = Vec::with_capacity(n);

    for i in 0..n {
        let eighths = {
            let base = draw_duration(rng, cfg);
            if base >= 2 && rng.gen::<f64>() < cfg.p_dotted {
                base + base / 2 // 2 -> 3, 4 -> 6
            } else {
                base
            }
        };

        let tie_from_prev = i > 0 && rng.gen::<f64>() < cfg.p_tie;
        let (midi, accidental) = if tie_from_prev {
            // a tie repeats the previous pitch and spelling
            let prev = notes.last_mut().unwrap();
            prev.tie_to_next = true;
            (prev.midi_pitch, prev.accidental)
        } else {
            let step = rng.gen_range(-5i16..=5);
            let candidate =
                (pitch as i16 + step).clamp(MIN_PITCH as i16, MAX_PITCH as i16) as u8;
            if rng.gen::<f64>() < cfg.p_accidental {
                match nearest_black(candidate) {
                    Some(black) => {
                        let acc = if rng.gen::<bool>() { Accidental::Sharp } else { Accidental::Flat };
                        (black, acc)
                    }
                    None => (nearest_natural(candidate), Accidental::None),
                }
            } else {
                (nearest_natural(candidate), Accidental::None)
            }
        };
        pitch = midi;

        notes.push(NoteEvent {
            midi_pitch: midi,
            eighths,
            accidental,
            tie_to_next: false,
            dotted: matches!(eighths, 3 | 6),
        });
    }

    Ok(Piece { id, notes, tempo })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn plain_config() -> SamplerConfig {
        SamplerConfig {
            p_dotted: 0.0,
            p_tie: 0.0,
            p_accidental: 0.0,
            tempo_jitter: 0.0,
            ..SamplerConfig::default()
        }
    }

    #[test]
    fn zero_probabilities_give_plain_untied_naturals() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for i in 0..50 {
            let piece = sample_piece(&mut rng, format!("p{i}"), &plain_config()).unwrap();
            assert!((piece.tempo - 0.5).abs() < 1e-12);
            for n in &piece.notes {
                assert_eq!(n.accidental, Accidental::None);
                assert!(!n.tie_to_next);
                assert!(!n.dotted);
                assert!(!is_black_key(n.midi_pitch));
                n.validate().unwrap();
            }
        }
    }

    #[test]
    fn same_seed_same_piece() {
        let cfg = SamplerConfig::default();
        let a = sample_piece(&mut ChaCha8Rng::seed_from_u64(99), "x".into(), &cfg).unwrap();
        let b = sample_piece(&mut ChaCha8Rng::seed_from_u64(99), "x".into(), &cfg).unwrap();
        assert_eq!(a.notes, b.notes);
        assert_eq!(a.tempo, b.tempo);
    }

    #[test]
    fn sampled_notes_always_validate() {
        let cfg = SamplerConfig { p_dotted: 0.3, p_tie: 0.2, p_accidental: 0.3, ..SamplerConfig::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for i in 0..200 {
            let piece = sample_piece(&mut rng, format!("p{i}"), &cfg).unwrap();
            for n in &piece.notes {
                n.validate().unwrap();
            }
            // ties always join equal pitches
            for w in piece.notes.windows(2) {
                if w[0].tie_to_next {
                    assert_eq!(w[0].midi_pitch, w[1].midi_pitch);
                }
            }
        }
    }

    #[test]
    fn duration_distribution_matches_weights() {
        // 10,000 notes: empirical fractions within +-2% of configured weights
        let cfg = plain_config();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut counts = [0usize; 3];
        let mut total = 0usize;
        let mut i = 0;
        while total < 10_000 {
            let piece = sample_piece(&mut rng, format!("p{i}"), &cfg).unwrap();
            i += 1;
            for n in &piece.notes {
                let idx = match n.eighths {
                    1 => 0,
                    2 => 1,
                    4 => 2,
                    other => panic!("unexpected duration {other}"),
                };
                counts[idx] += 1;
                total += 1;
            }
        }
        for (i, &want) in cfg.duration_weights.iter().enumerate() {
            let got = counts[i] as f64 / total as f64;
            assert!((got - want).abs() < 0.02, "duration {i}: {got} vs {want}");
        }
    }
}
