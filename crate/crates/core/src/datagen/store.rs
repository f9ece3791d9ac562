//! Dataset building and persistence: manifests (JSON lines), binary excerpt
//! stores, PGM staff images and the symbolic pieces themselves.

use std::collections::{BTreeMap, HashMap};
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{sample_piece, BucketGrid, Piece, SamplerConfig};
use crate::audio::{self, spectrogram::frame_start, Spectrogram};
use crate::error::{Error, Result};
use crate::score::{self, StaffImage};
use crate::tensor::Tensor;

const EXCERPT_MAGIC: &[u8; 4] = b"SMEX";
const EXCERPT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        }
    }

    pub fn all() -> [Split; 3] {
        [Split::Train, Split::Valid, Split::Test]
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub seed: u64,
    pub train_pieces: usize,
    pub valid_pieces: usize,
    pub test_pieces: usize,
    pub num_buckets: usize,
    pub sampler: SamplerConfig,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            seed: 1,
            train_pieces: 1600,
            valid_pieces: 200,
            test_pieces: 200,
            num_buckets: 40,
            sampler: SamplerConfig::default(),
        }
    }
}

impl DatasetConfig {
    pub fn pieces_for(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train_pieces,
            Split::Valid => self.valid_pieces,
            Split::Test => self.test_pieces,
        }
    }
}

/// One line of a manifest file.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ManifestRecord {
    pub piece_id: String,
    pub note_index: usize,
    pub image_file: String,
    pub excerpt_offset: usize,
    pub x_true: f32,
    pub onset_frame: usize,
    pub split: Split,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SplitStats {
    pub pieces: usize,
    pub examples: usize,
    pub skipped_too_early: usize,
    pub dropped_frame_collisions: usize,
}

/// dataset.json: everything needed to interpret the binary blobs.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub version: u32,
    pub config: DatasetConfig,
    pub excerpt_bins: usize,
    pub excerpt_frames: usize,
    /// Global standardization statistics of the train-split excerpts.
    pub excerpt_mean: f64,
    pub excerpt_std: f64,
    pub splits: BTreeMap<String, SplitStats>,
}

#[derive(Clone, Debug)]
pub struct DatasetSummary {
    pub meta: DatasetMeta,
    pub out_dir: PathBuf,
}

struct BuiltExample {
    note_index: usize,
    x_true: f32,
    onset_frame: usize,
    excerpt: Tensor<f32>,
}

struct BuiltPiece {
    piece: Piece,
    image: StaffImage,
    examples: Vec<BuiltExample>,
    skipped_too_early: usize,
    dropped_collisions: usize,
}

/// Map an onset time to its spectrogram frame.
pub fn onset_to_frame(onset_seconds: f64, frame_rate: f64) -> usize {
    (onset_seconds * frame_rate).round() as usize
}

fn build_piece(piece: Piece, fb: &audio::Filterbank) -> Result<BuiltPiece> {
    let image = score::render_staff(&piece.notes)?;
    let (mut buffer, onsets) = audio::synthesize(&piece.notes, piece.tempo)?;

    // pad with silence so the last onset keeps its 5-frame lookahead
    let last_frame = onsets
        .iter()
        .map(|&(_, t)| onset_to_frame(t, audio::FRAME_RATE))
        .max()
        .unwrap_or(0);
    let needed = frame_start(
        last_frame + audio::EXCERPT_SHIFT,
        audio::SAMPLE_RATE as f64,
        audio::FRAME_RATE,
    ) + audio::FFT_SIZE;
    if buffer.samples.len() < needed {
        buffer.samples.resize(needed, 0.0);
    }

    let spec: Spectrogram = audio::spectrogram(&buffer, audio::FFT_SIZE, audio::FRAME_RATE, fb)?;

    let mut examples = Vec::new();
    let mut skipped_too_early = 0usize;
    let mut dropped_collisions = 0usize;
    let mut prev_frame: Option<usize> = None;
    for &(note_index, t) in &onsets {
        let frame = onset_to_frame(t, audio::FRAME_RATE);
        if prev_frame == Some(frame) {
            dropped_collisions += 1;
            continue;
        }
        prev_frame = Some(frame);
        match audio::excerpt(&spec, frame, audio::EXCERPT_FRAMES, audio::EXCERPT_SHIFT) {
            Ok(excerpt) => {
                let x_true = image.note_annotations[note_index].1;
                examples.push(BuiltExample { note_index, x_true, onset_frame: frame, excerpt });
            }
            Err(Error::ExcerptTooEarly { .. }) => skipped_too_early += 1,
            Err(e) => return Err(e),
        }
    }

    Ok(BuiltPiece { piece, image, examples, skipped_too_early, dropped_collisions })
}

const PIECE_RETRIES: usize = 32;

fn sample_renderable_piece(
    rng: &mut ChaCha8Rng,
    id: &str,
    sampler: &SamplerConfig,
) -> Result<Piece> {
    for _ in 0..PIECE_RETRIES {
        let piece = sample_piece(rng, id.to_string(), sampler)?;
        match score::render_staff(&piece.notes) {
            Ok(_) => return Ok(piece),
            Err(Error::StaffOverflow { .. }) => continue,
            Err(e) => return Err(e),
        }
    }
    Err(Error::invalid(format!(
        "could not sample a renderable piece for {id} in {PIECE_RETRIES} attempts"
    )))
}

/// Generate and persist all three splits under `out_dir`. Layout:
/// dataset.json, manifest_<split>.jsonl, excerpts_<split>.bin,
/// pieces_<split>.jsonl, images/<piece_id>.pgm. Regeneration from the same
/// config is byte-identical.
pub fn build_dataset(config: &DatasetConfig, out_dir: &Path) -> Result<DatasetSummary> {
    config.sampler.validate()?;
    BucketGrid::new(config.num_buckets, score::IMAGE_WIDTH as f32)?;
    std::fs::create_dir_all(out_dir.join("images")).map_err(|e| Error::io(out_dir, e))?;

    let fb = audio::build_filterbank(
        audio::FFT_SIZE,
        audio::SAMPLE_RATE as f64,
        audio::BANDS_PER_OCTAVE,
        audio::FMIN,
        audio::FMAX,
    )?;

    let mut splits = BTreeMap::new();
    let mut excerpt_sum = 0.0f64;
    let mut excerpt_sumsq = 0.0f64;
    let mut excerpt_count = 0usize;

    for (split_idx, split) in Split::all().into_iter().enumerate() {
        // disjoint seed stream per split; per-piece seeds drawn up front so
        // piece generation is independent of the draw counts of its siblings
        let mut split_rng = ChaCha8Rng::seed_from_u64(config.seed);
        split_rng.set_stream(split_idx as u64 + 1);
        let n_pieces = config.pieces_for(split);
        let piece_seeds: Vec<u64> = (0..n_pieces).map(|_| split_rng.gen()).collect();

        let pieces: Vec<Piece> = piece_seeds
            .iter()
            .enumerate()
            .map(|(i, &s)| {
                let id = format!("{}_{i:05}", split.as_str());
                let mut rng = ChaCha8Rng::seed_from_u64(s);
                sample_renderable_piece(&mut rng, &id, &config.sampler)
            })
            .collect::<Result<_>>()?;

        let built: Vec<BuiltPiece> =
            pieces.into_par_iter().map(|p| build_piece(p, &fb)).collect::<Result<_>>()?;

        // persist: images, pieces, manifest, excerpts
        let mut manifest = BufWriter::new(
            std::fs::File::create(out_dir.join(format!("manifest_{}.jsonl", split.as_str())))
                .map_err(|e| Error::io(out_dir, e))?,
        );
        let mut pieces_out = BufWriter::new(
            std::fs::File::create(out_dir.join(format!("pieces_{}.jsonl", split.as_str())))
                .map_err(|e| Error::io(out_dir, e))?,
        );
        let excerpt_path = out_dir.join(format!("excerpts_{}.bin", split.as_str()));
        let mut excerpts = BufWriter::new(
            std::fs::File::create(&excerpt_path).map_err(|e| Error::io(&excerpt_path, e))?,
        );

        let total_examples: usize = built.iter().map(|b| b.examples.len()).sum();
        let (bins, frames) = built
            .iter()
            .find_map(|b| b.examples.first())
            .map(|e| (e.excerpt.shape()[0], e.excerpt.shape()[1]))
            .unwrap_or((fb.num_bands(), audio::EXCERPT_FRAMES));
        excerpts.write_all(EXCERPT_MAGIC).map_err(|e| Error::io(&excerpt_path, e))?;
        for v in [EXCERPT_VERSION, total_examples as u32, bins as u32, frames as u32] {
            excerpts.write_all(&v.to_le_bytes()).map_err(|e| Error::io(&excerpt_path, e))?;
        }

        let mut stats = SplitStats {
            pieces: n_pieces,
            examples: 0,
            skipped_too_early: 0,
            dropped_frame_collisions: 0,
        };
        let mut offset = 0usize;
        for b in &built {
            let image_file = format!("images/{}.pgm", b.piece.id);
            score::write_pgm(&b.image.pixels, &out_dir.join(&image_file))?;
            let line = serde_json::to_string(&b.piece)
                .map_err(|e| Error::format(out_dir, format!("piece serialization: {e}")))?;
            pieces_out
                .write_all(line.as_bytes())
                .and_then(|_| pieces_out.write_all(b"\n"))
                .map_err(|e| Error::io(out_dir, e))?;

            for ex in &b.examples {
                let record = ManifestRecord {
                    piece_id: b.piece.id.clone(),
                    note_index: ex.note_index,
                    image_file: image_file.clone(),
                    excerpt_offset: offset,
                    x_true: ex.x_true,
                    onset_frame: ex.onset_frame,
                    split,
                };
                let line = serde_json::to_string(&record)
                    .map_err(|e| Error::format(out_dir, format!("manifest serialization: {e}")))?;
                manifest
                    .write_all(line.as_bytes())
                    .and_then(|_| manifest.write_all(b"\n"))
                    .map_err(|e| Error::io(out_dir, e))?;
                for &v in ex.excerpt.data() {
                    excerpts
                        .write_all(&v.to_le_bytes())
                        .map_err(|e| Error::io(&excerpt_path, e))?;
                }
                if split == Split::Train {
                    for &v in ex.excerpt.data() {
                        excerpt_sum += v as f64;
                        excerpt_sumsq += (v as f64) * (v as f64);
                    }
                    excerpt_count += ex.excerpt.len();
                }
                offset += 1;
            }
            stats.examples += b.examples.len();
            stats.skipped_too_early += b.skipped_too_early;
            stats.dropped_frame_collisions += b.dropped_collisions;
        }
        manifest.flush().map_err(|e| Error::io(out_dir, e))?;
        pieces_out.flush().map_err(|e| Error::io(out_dir, e))?;
        excerpts.flush().map_err(|e| Error::io(&excerpt_path, e))?;
        splits.insert(split.as_str().to_string(), stats);
    }

    let mean = excerpt_sum / excerpt_count.max(1) as f64;
    let var = (excerpt_sumsq / excerpt_count.max(1) as f64 - mean * mean).max(1e-12);
    let meta = DatasetMeta {
        version: 1,
        config: config.clone(),
        excerpt_bins: fb.num_bands(),
        excerpt_frames: audio::EXCERPT_FRAMES,
        excerpt_mean: mean,
        excerpt_std: var.sqrt(),
        splits,
    };
    let meta_path = out_dir.join("dataset.json");
    let json = serde_json::to_string_pretty(&meta)
        .map_err(|e| Error::format(&meta_path, format!("meta serialization: {e}")))?;
    std::fs::write(&meta_path, json + "\n").map_err(|e| Error::io(&meta_path, e))?;

    Ok(DatasetSummary { meta, out_dir: out_dir.to_path_buf() })
}

/// SHA-256 of dataset.json; identifies a generated dataset in checkpoints.
pub fn dataset_fingerprint(dir: &Path) -> Result<String> {
    let path = dir.join("dataset.json");
    let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let mut h = Sha256::new();
    h.update(&bytes);
    Ok(format!("{:x}", h.finalize()))
}

/// A split loaded into memory for training or evaluation.
pub struct LoadedSplit {
    pub meta: DatasetMeta,
    pub split: Split,
    pub records: Vec<ManifestRecord>,
    /// Per record: index into `images`/`pieces` (one per piece).
    pub piece_index: Vec<usize>,
    pub images: Vec<Tensor<f32>>,
    pub pieces: Vec<Piece>,
    /// Raw (unstandardized) excerpts, contiguous [count * bins * frames].
    pub excerpts: Vec<f32>,
    pub excerpt_bins: usize,
    pub excerpt_frames: usize,
}

impl LoadedSplit {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn excerpt(&self, record_idx: usize) -> &[f32] {
        let n = self.excerpt_bins * self.excerpt_frames;
        let off = self.records[record_idx].excerpt_offset * n;
        &self.excerpts[off..off + n]
    }

    pub fn image(&self, record_idx: usize) -> &Tensor<f32> {
        &self.images[self.piece_index[record_idx]]
    }
}

pub fn load_meta(dir: &Path) -> Result<DatasetMeta> {
    let path = dir.join("dataset.json");
    let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_slice(&bytes).map_err(|e| Error::format(&path, format!("dataset.json: {e}")))
}

pub fn load_split(dir: &Path, split: Split) -> Result<LoadedSplit> {
    let meta = load_meta(dir)?;

    let manifest_path = dir.join(format!("manifest_{}.jsonl", split.as_str()));
    let file = std::fs::File::open(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let mut records = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(&manifest_path, e))?;
        if line.is_empty() {
            continue;
        }
        let rec: ManifestRecord = serde_json::from_str(&line)
            .map_err(|e| Error::format(&manifest_path, format!("manifest line: {e}")))?;
        records.push(rec);
    }

    let pieces_path = dir.join(format!("pieces_{}.jsonl", split.as_str()));
    let file = std::fs::File::open(&pieces_path).map_err(|e| Error::io(&pieces_path, e))?;
    let mut pieces = Vec::new();
    let mut piece_ids = HashMap::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(&pieces_path, e))?;
        if line.is_empty() {
            continue;
        }
        let piece: Piece = serde_json::from_str(&line)
            .map_err(|e| Error::format(&pieces_path, format!("piece line: {e}")))?;
        piece_ids.insert(piece.id.clone(), pieces.len());
        pieces.push(piece);
    }

    let mut images = Vec::with_capacity(pieces.len());
    for piece in &pieces {
        images.push(score::read_pgm(&dir.join(format!("images/{}.pgm", piece.id)))?);
    }

    let piece_index = records
        .iter()
        .map(|r| {
            piece_ids.get(&r.piece_id).copied().ok_or_else(|| {
                Error::format(&manifest_path, format!("unknown piece id {}", r.piece_id))
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let excerpt_path = dir.join(format!("excerpts_{}.bin", split.as_str()));
    let mut bytes = Vec::new();
    std::fs::File::open(&excerpt_path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(&excerpt_path, e))?;
    if bytes.len() < 20 || &bytes[0..4] != EXCERPT_MAGIC {
        return Err(Error::format(&excerpt_path, "bad excerpt store magic"));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
    let version = word(4);
    if version != EXCERPT_VERSION {
        return Err(Error::format(&excerpt_path, format!("unsupported version {version}")));
    }
    let count = word(8) as usize;
    let bins = word(12) as usize;
    let frames = word(16) as usize;
    let expect = count * bins * frames * 4;
    if bytes.len() != 20 + expect {
        return Err(Error::format(
            &excerpt_path,
            format!("expected {} payload bytes, got {}", expect, bytes.len() - 20),
        ));
    }
    let excerpts: Vec<f32> = bytes[20..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    if count != records.len() {
        return Err(Error::format(
            &excerpt_path,
            format!("{count} excerpts but {} manifest records", records.len()),
        ));
    }

    Ok(LoadedSplit {
        meta,
        split,
        records,
        piece_index,
        images,
        pieces,
        excerpts,
        excerpt_bins: bins,
        excerpt_frames: frames,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config(seed: u64) -> DatasetConfig {
        DatasetConfig {
            seed,
            train_pieces: 6,
            valid_pieces: 2,
            test_pieces: 2,
            ..DatasetConfig::default()
        }
    }

    #[test]
    fn build_load_roundtrip_and_invariants() {
        let dir = tempfile::tempdir().unwrap();
        let summary = build_dataset(&tiny_config(11), dir.path()).unwrap();
        assert_eq!(summary.meta.excerpt_bins, 136);
        assert_eq!(summary.meta.excerpt_frames, 40);
        assert!(summary.meta.excerpt_std > 0.0);

        let grid = BucketGrid::default_grid();
        for split in Split::all() {
            let loaded = load_split(dir.path(), split).unwrap();
            assert!(!loaded.is_empty(), "{split:?} empty");
            for i in 0..loaded.len() {
                let rec = &loaded.records[i];
                assert_eq!(rec.split, split);
                // x_true is the renderer's annotation for that note,
                // bit-exact
                let piece = &loaded.pieces[loaded.piece_index[i]];
                let rendered = score::render_staff(&piece.notes).unwrap();
                assert_eq!(rendered.note_annotations[rec.note_index].1, rec.x_true);
                // soft target sums to 1 and brackets x_true
                let t = grid.soft_target(rec.x_true).unwrap();
                let sum: f32 = t.data().iter().sum();
                assert!((sum - 1.0).abs() < 1e-6);
                let nz: Vec<usize> = (0..t.len()).filter(|&b| t.data()[b] != 0.0).collect();
                assert!(!nz.is_empty() && nz.len() <= 2);
                if nz.len() == 2 {
                    assert_eq!(nz[1], nz[0] + 1);
                    assert!(grid.center(nz[0]) <= rec.x_true && rec.x_true <= grid.center(nz[1]));
                }
                // excerpts have the documented shape
                assert_eq!(loaded.excerpt(i).len(), 136 * 40);
            }
        }
    }

    #[test]
    fn early_notes_are_skipped() {
        let dir = tempfile::tempdir().unwrap();
        let summary = build_dataset(&tiny_config(3), dir.path()).unwrap();
        let train = &summary.meta.splits["train"];
        // the first ~1.1 s of each piece cannot produce examples
        assert!(train.skipped_too_early > 0);
        let loaded = load_split(dir.path(), Split::Train).unwrap();
        let notes_total: usize = loaded.pieces.iter().map(|p| p.notes.len()).sum();
        assert!(loaded.len() < notes_total);
    }

    #[test]
    fn splits_have_disjoint_piece_ids() {
        let dir = tempfile::tempdir().unwrap();
        build_dataset(&tiny_config(5), dir.path()).unwrap();
        let mut seen = std::collections::HashSet::new();
        for split in Split::all() {
            let loaded = load_split(dir.path(), split).unwrap();
            for p in &loaded.pieces {
                assert!(seen.insert(p.id.clone()), "duplicate piece id {}", p.id);
            }
        }
    }

    #[test]
    fn onset_frame_mapping_rounds() {
        assert_eq!(onset_to_frame(1.0, 31.25), 31);
        assert_eq!(onset_to_frame(0.0, 31.25), 0);
        assert_eq!(onset_to_frame(1.088, 31.25), 34);
    }

    #[test]
    fn regeneration_is_byte_identical() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        build_dataset(&tiny_config(42), a.path()).unwrap();
        build_dataset(&tiny_config(42), b.path()).unwrap();
        let fa = dataset_fingerprint(a.path()).unwrap();
        let fb = dataset_fingerprint(b.path()).unwrap();
        assert_eq!(fa, fb);
        // every file byte-identical
        for entry in walk(a.path()) {
            let rel = entry.strip_prefix(a.path()).unwrap();
            let x = std::fs::read(&entry).unwrap();
            let y = std::fs::read(b.path().join(rel)).unwrap();
            assert_eq!(x, y, "file {rel:?} differs");
        }
    }

    fn walk(dir: &Path) -> Vec<PathBuf> {
        let mut out = Vec::new();
        let mut stack = vec![dir.to_path_buf()];
        while let Some(d) = stack.pop() {
            for e in std::fs::read_dir(&d).unwrap() {
                let p = e.unwrap().path();
                if p.is_dir() {
                    stack.push(p);
                } else {
                    out.push(p);
                }
            }
        }
        out.sort();
        out
    }

    #[test]
    fn fresh_seed_changes_content() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        build_dataset(&tiny_config(1), a.path()).unwrap();
        build_dataset(&tiny_config(2), b.path()).unwrap();
        let la = load_split(a.path(), Split::Train).unwrap();
        let lb = load_split(b.path(), Split::Train).unwrap();
        assert_ne!(la.pieces[0].notes, lb.pieces[0].notes);
    }
}
