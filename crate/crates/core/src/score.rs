//! Procedural staff renderer: a monophonic note sequence becomes a 40x390
//! grayscale staff image with exact note-head x coordinates.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const IMAGE_HEIGHT: usize = 40;
pub const IMAGE_WIDTH: usize = 390;
/// Staff line rows, top to bottom (5 px spacing).
pub const STAFF_ROWS: [usize; 5] = [12, 17, 22, 27, 32];
/// Renderable pitch range; two ledger lines at most.
pub const MIN_PITCH: u8 = 60;
pub const MAX_PITCH: u8 = 81;

const FIRST_NOTE_X: f32 = 28.0;
const LAST_NOTE_X: f32 = 382.0;
/// One classification bucket is 390/40 px wide; heads must stay at least
/// this far apart so no bucket ever holds two notes.
pub const MIN_HEAD_DISTANCE: f32 = IMAGE_WIDTH as f32 / 40.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Accidental {
    None,
    Sharp,
    Flat,
}

/// One symbolic note. Durations are in eighth notes: 1 = eighth,
/// 2 = quarter, 3 = dotted quarter, 4 = half, 6 = dotted half.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NoteEvent {
    pub midi_pitch: u8,
    pub eighths: u8,
    pub accidental: Accidental,
    pub tie_to_next: bool,
    pub dotted: bool,
}

impl NoteEvent {
    pub fn new(midi_pitch: u8, eighths: u8) -> Self {
        NoteEvent {
            midi_pitch,
            eighths,
            accidental: Accidental::None,
            tie_to_next: false,
            dotted: matches!(eighths, 3 | 6),
        }
    }

    /// Duration in quarter notes.
    pub fn quarters(&self) -> f64 {
        self.eighths as f64 / 2.0
    }

    pub fn validate(&self) -> Result<()> {
        if !(MIN_PITCH..=MAX_PITCH).contains(&self.midi_pitch) {
            return Err(Error::invalid(format!(
                "pitch {} outside renderable range {MIN_PITCH}..={MAX_PITCH}",
                self.midi_pitch
            )));
        }
        if !matches!(self.eighths, 1 | 2 | 3 | 4 | 6) {
            return Err(Error::invalid(format!("unsupported duration: {} eighths", self.eighths)));
        }
        if self.dotted != matches!(self.eighths, 3 | 6) {
            return Err(Error::invalid(format!(
                "dotted flag {} inconsistent with {} eighths",
                self.dotted, self.eighths
            )));
        }
        let black = is_black_key(self.midi_pitch);
        match self.accidental {
            Accidental::None if black => {
                Err(Error::invalid(format!("pitch {} needs an accidental", self.midi_pitch)))
            }
            Accidental::Sharp | Accidental::Flat if !black => {
                Err(Error::invalid(format!("natural pitch {} cannot carry an accidental", self.midi_pitch)))
            }
            _ => Ok(()),
        }
    }
}

pub fn is_black_key(midi_pitch: u8) -> bool {
    matches!(midi_pitch % 12, 1 | 3 | 6 | 8 | 10)
}

/// Bounding box of a rendered note head.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct HeadBox {
    pub note_index: usize,
    pub row0: usize,
    pub row1: usize,
    pub col0: usize,
    pub col1: usize,
}

impl HeadBox {
    pub fn contains(&self, row: usize, col: usize) -> bool {
        (self.row0..=self.row1).contains(&row) && (self.col0..=self.col1).contains(&col)
    }
}

/// Rendered staff with exact note-head x coordinates, 1.0 = ink.
#[derive(Clone, Debug)]
pub struct StaffImage {
    pub pixels: Tensor<f32>,
    /// (note index, head center column) per note, strictly increasing in x.
    pub note_annotations: Vec<(usize, f32)>,
    pub head_boxes: Vec<HeadBox>,
}

/// Vertical head position in half-spaces above the bottom staff line
/// (treble clef: E4 -> 0, F5 -> 8, C4 -> -2). Sharps sit on the position of
/// the natural below, flats on the natural above.
pub fn pitch_to_staff_position(midi_pitch: u8, accidental: Accidental) -> Result<i32> {
    if !(MIN_PITCH..=MAX_PITCH).contains(&midi_pitch) {
        return Err(Error::invalid(format!("pitch {midi_pitch} out of range")));
    }
    let natural = match accidental {
        Accidental::None => midi_pitch,
        Accidental::Sharp => midi_pitch - 1,
        Accidental::Flat => midi_pitch + 1,
    };
    let letter = match natural % 12 {
        0 => 0,  // C
        2 => 1,  // D
        4 => 2,  // E
        5 => 3,  // F
        7 => 4,  // G
        9 => 5,  // A
        11 => 6, // B
        other => {
            return Err(Error::invalid(format!(
                "accidental {accidental:?} on pitch {midi_pitch} does not resolve to a natural (pc {other})"
            )))
        }
    };
    let octave = natural as i32 / 12 - 1;
    let steps_from_c4 = (octave - 4) * 7 + letter;
    Ok(steps_from_c4 - 2)
}

/// Continuous y coordinate of a staff position (bottom line = row 32).
pub fn staff_position_to_row(position: i32) -> f32 {
    STAFF_ROWS[4] as f32 - 2.5 * position as f32
}

struct Canvas {
    px: Vec<f32>,
}

impl Canvas {
    fn new() -> Self {
        Canvas { px: vec![0.0; IMAGE_HEIGHT * IMAGE_WIDTH] }
    }

    fn ink(&mut self, row: i32, col: i32) {
        if (0..IMAGE_HEIGHT as i32).contains(&row) && (0..IMAGE_WIDTH as i32).contains(&col) {
            self.px[row as usize * IMAGE_WIDTH + col as usize] = 1.0;
        }
    }

    fn hline(&mut self, row: i32, c0: i32, c1: i32) {
        for c in c0..=c1 {
            self.ink(row, c);
        }
    }

    fn vline(&mut self, col: i32, r0: i32, r1: i32) {
        for r in r0..=r1 {
            self.ink(r, col);
        }
    }

    fn ellipse(&mut self, cy: f32, cx: f32, ry: f32, rx: f32) {
        let r0 = (cy - ry).floor() as i32;
        let r1 = (cy + ry).ceil() as i32;
        let c0 = (cx - rx).floor() as i32;
        let c1 = (cx + rx).ceil() as i32;
        for r in r0..=r1 {
            for c in c0..=c1 {
                let dy = (r as f32 - cy) / ry;
                let dx = (c as f32 - cx) / rx;
                if dx * dx + dy * dy < 1.0 {
                    self.ink(r, c);
                }
            }
        }
    }

    fn ring(&mut self, cy: f32, cx: f32, radius: f32) {
        let r0 = (cy - radius).floor() as i32 - 1;
        let r1 = (cy + radius).ceil() as i32 + 1;
        for r in r0..=r1 {
            for c in (cx - radius).floor() as i32 - 1..=(cx + radius).ceil() as i32 + 1 {
                let d = ((r as f32 - cy).powi(2) + (c as f32 - cx).powi(2)).sqrt();
                if (d - radius).abs() < 0.7 {
                    self.ink(r, c);
                }
            }
        }
    }
}

const SHARP_GLYPH: [&str; 7] = ["#.#", "#.#", "###", "#.#", "###", "#.#", "#.#"];
const FLAT_GLYPH: [&str; 7] = ["#..", "#..", "#..", "##.", "#.#", "##.", "#.."];

fn stamp(canvas: &mut Canvas, pattern: &[&str], top: i32, left: i32) {
    for (dr, row) in pattern.iter().enumerate() {
        for (dc, ch) in row.bytes().enumerate() {
            if ch == b'#' {
                canvas.ink(top + dr as i32, left + dc as i32);
            }
        }
    }
}

fn draw_clef(canvas: &mut Canvas) {
    // stand-in treble clef: stem, two loops and a foot blob, columns 2..=16
    canvas.vline(9, 6, 34);
    canvas.ring(26.0, 9.0, 5.0);
    canvas.ring(14.0, 9.0, 3.5);
    canvas.ellipse(34.0, 7.5, 1.6, 2.2);
}

/// Natural (unscaled) horizontal gap that follows a note of the given
/// duration: 14 px base plus 8 px per additional eighth.
fn natural_gap(eighths: u8) -> f32 {
    14.0 + 8.0 * (eighths as f32 - 1.0)
}

/// Head x coordinates: natural spacing, then uniformly rescaled so the last
/// note lands at the right margin.
fn layout(notes: &[NoteEvent]) -> Result<Vec<f32>> {
    let mut xs = Vec::with_capacity(notes.len());
    let mut x = FIRST_NOTE_X;
    for n in notes {
        xs.push(x);
        x += natural_gap(n.eighths);
    }
    if notes.len() >= 2 {
        let natural_span = xs[xs.len() - 1] - FIRST_NOTE_X;
        let factor = (LAST_NOTE_X - FIRST_NOTE_X) / natural_span;
        for v in xs.iter_mut() {
            *v = FIRST_NOTE_X + (*v - FIRST_NOTE_X) * factor;
        }
        let min_gap = xs.windows(2).map(|w| w[1] - w[0]).fold(f32::INFINITY, f32::min);
        if min_gap < MIN_HEAD_DISTANCE {
            let fits = ((LAST_NOTE_X - FIRST_NOTE_X) / MIN_HEAD_DISTANCE) as usize + 1;
            return Err(Error::StaffOverflow { requested: notes.len(), fits });
        }
    }
    Ok(xs)
}

/// Render a monophonic note sequence. Deterministic: identical inputs give
/// identical pixels.
pub fn render_staff(notes: &[NoteEvent]) -> Result<StaffImage> {
    if notes.is_empty() {
        return Err(Error::invalid("render_staff: empty note list"));
    }
    for n in notes {
        n.validate()?;
    }
    let xs = layout(notes)?;

    let mut canvas = Canvas::new();
    for &row in &STAFF_ROWS {
        canvas.hline(row as i32, 0, IMAGE_WIDTH as i32 - 1);
    }
    draw_clef(&mut canvas);

    let mut annotations = Vec::with_capacity(notes.len());
    let mut head_boxes = Vec::with_capacity(notes.len());
    let mut head_rows = Vec::with_capacity(notes.len());

    for (i, (note, &x)) in notes.iter().zip(&xs).enumerate() {
        let pos = pitch_to_staff_position(note.midi_pitch, note.accidental)?;
        let y = staff_position_to_row(pos);
        let xi = x.round() as i32;
        let yi = y.round() as i32;

        // ledger lines (first below at C4, first above at A5)
        if pos <= -2 {
            canvas.hline(staff_position_to_row(-2).round() as i32, xi - 5, xi + 5);
        }
        if pos >= 10 {
            canvas.hline(staff_position_to_row(10).round() as i32, xi - 5, xi + 5);
        }

        // head: filled for quarter/eighth (and their dots), hollow for half
        let hollow = matches!(note.eighths, 4 | 6);
        canvas.ellipse(y, x, 1.9, 3.1);
        if hollow {
            // carve out the interior
            let r0 = (y - 0.9).floor() as i32;
            let r1 = (y + 0.9).ceil() as i32;
            for r in r0..=r1 {
                for c in (x - 1.6).floor() as i32..=(x + 1.6).ceil() as i32 {
                    let dy = (r as f32 - y) / 0.95;
                    let dx = (c as f32 - x) / 1.7;
                    if dx * dx + dy * dy < 1.0 && (0..IMAGE_HEIGHT as i32).contains(&r) && (0..IMAGE_WIDTH as i32).contains(&c) {
                        canvas.px[r as usize * IMAGE_WIDTH + c as usize] = 0.0;
                    }
                }
            }
        }

        // stem with optional eighth flag
        let stem_up = pos < 4;
        if stem_up {
            let sc = xi + 3;
            canvas.vline(sc, yi - 12, yi);
            if note.eighths == 1 {
                canvas.ink(yi - 12, sc + 1);
                canvas.ink(yi - 11, sc + 2);
                canvas.ink(yi - 10, sc + 2);
                canvas.ink(yi - 9, sc + 1);
            }
        } else {
            let sc = xi - 3;
            canvas.vline(sc, yi, yi + 12);
            if note.eighths == 1 {
                canvas.ink(yi + 12, sc + 1);
                canvas.ink(yi + 11, sc + 2);
                canvas.ink(yi + 10, sc + 2);
                canvas.ink(yi + 9, sc + 1);
            }
        }

        if note.dotted {
            for dr in 0..2 {
                for dc in 0..2 {
                    canvas.ink(yi - 1 + dr, xi + 5 + dc);
                }
            }
        }

        match note.accidental {
            Accidental::Sharp => stamp(&mut canvas, &SHARP_GLYPH, yi - 3, xi - 9),
            Accidental::Flat => stamp(&mut canvas, &FLAT_GLYPH, yi - 3, xi - 9),
            Accidental::None => {}
        }

        annotations.push((i, x));
        head_boxes.push(HeadBox {
            note_index: i,
            row0: (yi - 2).max(0) as usize,
            row1: (yi + 2).min(IMAGE_HEIGHT as i32 - 1) as usize,
            col0: (xi - 3).max(0) as usize,
            col1: (xi + 3).min(IMAGE_WIDTH as i32 - 1) as usize,
        });
        head_rows.push(y);
    }

    // tie arcs between consecutive equal-pitch heads
    for (i, note) in notes.iter().enumerate() {
        if note.tie_to_next && i + 1 < notes.len() {
            let (x0, x1) = (xs[i], xs[i + 1]);
            let base = head_rows[i] + 4.0;
            let span = x1 - x0 - 8.0;
            if span > 2.0 {
                let c0 = (x0 + 4.0).round() as i32;
                let c1 = (x1 - 4.0).round() as i32;
                for c in c0..=c1 {
                    let t = (c as f32 - x0 - 4.0) / span;
                    let r = base + 2.0 * 4.0 * t * (1.0 - t);
                    canvas.ink(r.round() as i32, c);
                }
            }
        }
    }

    let pixels = Tensor::from_vec(&[IMAGE_HEIGHT, IMAGE_WIDTH], canvas.px)?;
    Ok(StaffImage { pixels, note_annotations: annotations, head_boxes })
}

/// Write a staff image (or any [H,W] tensor in [0,1] with 1 = ink) as a
/// binary PGM, ink mapped to black.
pub fn write_pgm(image: &Tensor<f32>, path: &Path) -> Result<()> {
    if image.rank() != 2 {
        return Err(Error::shape(format!("write_pgm expects [H,W], got {:?}", image.shape())));
    }
    let (h, w) = (image.shape()[0], image.shape()[1]);
    let mut bytes = Vec::with_capacity(32 + h * w);
    bytes.extend_from_slice(format!("P5\n{w} {h}\n255\n").as_bytes());
    for &v in image.data() {
        let g = ((1.0 - v.clamp(0.0, 1.0)) * 255.0).round() as u8;
        bytes.push(g);
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Read a binary PGM written by [`write_pgm`] back into a [H,W] tensor.
pub fn read_pgm(path: &Path) -> Result<Tensor<f32>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    let header_end = bytes
        .windows(1)
        .enumerate()
        .filter(|(_, w)| w[0] == b'\n')
        .map(|(i, _)| i)
        .nth(2)
        .ok_or_else(|| Error::format(path, "truncated PGM header"))?;
    let header = std::str::from_utf8(&bytes[..header_end])
        .map_err(|_| Error::format(path, "non-utf8 PGM header"))?;
    let mut lines = header.lines();
    if lines.next() != Some("P5") {
        return Err(Error::format(path, "not a binary PGM"));
    }
    let dims = lines.next().ok_or_else(|| Error::format(path, "missing dimensions"))?;
    let mut it = dims.split_whitespace();
    let w: usize = it
        .next()
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| Error::format(path, "bad width"))?;
    let h: usize = it
        .next()
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| Error::format(path, "bad height"))?;
    let data = &bytes[header_end + 1..];
    if data.len() != w * h {
        return Err(Error::format(path, format!("expected {} pixels, got {}", w * h, data.len())));
    }
    let values = data.iter().map(|&b| 1.0 - b as f32 / 255.0).collect();
    Tensor::from_vec(&[h, w], values)
}
