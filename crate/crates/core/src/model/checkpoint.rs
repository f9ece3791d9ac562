//! Binary checkpoint format: magic + version, a length-prefixed JSON
//! metadata block, then per-tensor records (name length, name, dtype tag,
//! rank, dims, little-endian payload). Save -> load -> save is byte-exact.

use std::collections::BTreeMap;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Model, ModelConfig, ModelParams};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"SMCK";
const VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;

/// Serializable ChaCha8 state, so training can resume mid-stream.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct RngState {
    pub seed_hex: String,
    pub stream: u64,
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        let seed = rng.get_seed();
        RngState {
            seed_hex: seed.iter().map(|b| format!("{b:02x}")).collect(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        if self.seed_hex.len() != 64 {
            return Err(Error::invalid("rng seed must be 32 bytes of hex"));
        }
        let mut seed = [0u8; 32];
        for (i, chunk) in self.seed_hex.as_bytes().chunks(2).enumerate() {
            let s = std::str::from_utf8(chunk).map_err(|_| Error::invalid("bad rng seed hex"))?;
            seed[i] = u8::from_str_radix(s, 16).map_err(|_| Error::invalid("bad rng seed hex"))?;
        }
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        let pos: u128 =
            self.word_pos.parse().map_err(|_| Error::invalid("bad rng word position"))?;
        rng.set_word_pos(pos);
        Ok(rng)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model_config: ModelConfig,
    pub epoch: usize,
    pub rng: RngState,
    pub dataset_fingerprint: String,
    /// Free-form scalar records (validation metrics, learning rate, ...),
    /// BTreeMap so serialization order is stable.
    pub extra: BTreeMap<String, String>,
}

fn write_tensor(out: &mut impl Write, name: &str, t: &Tensor<f32>) -> std::io::Result<()> {
    out.write_all(&(name.len() as u32).to_le_bytes())?;
    out.write_all(name.as_bytes())?;
    out.write_all(&[DTYPE_F32])?;
    out.write_all(&(t.rank() as u32).to_le_bytes())?;
    for &d in t.shape() {
        out.write_all(&(d as u32).to_le_bytes())?;
    }
    for &v in t.data() {
        out.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

/// Save model parameters plus any extra tensors (optimizer velocities are
/// stored as "opt.v.<param>").
pub fn save_checkpoint(
    path: &Path,
    model: &Model<f32>,
    extra_tensors: &[(String, &Tensor<f32>)],
    meta: &CheckpointMeta,
) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    let io_err = |e: std::io::Error| Error::io(path, e);

    out.write_all(MAGIC).map_err(io_err)?;
    out.write_all(&VERSION.to_le_bytes()).map_err(io_err)?;
    let meta_json = serde_json::to_vec(meta)
        .map_err(|e| Error::format(path, format!("meta serialization: {e}")))?;
    out.write_all(&(meta_json.len() as u32).to_le_bytes()).map_err(io_err)?;
    out.write_all(&meta_json).map_err(io_err)?;

    let count = model.params.len() + extra_tensors.len();
    out.write_all(&(count as u32).to_le_bytes()).map_err(io_err)?;
    for (name, t) in model.params.iter() {
        write_tensor(&mut out, name, t).map_err(io_err)?;
    }
    for (name, t) in extra_tensors {
        write_tensor(&mut out, name, t).map_err(io_err)?;
    }
    out.flush().map_err(io_err)
}

pub struct LoadedCheckpoint {
    pub model: Model<f32>,
    /// Tensors beyond the model parameters, e.g. optimizer state.
    pub extra_tensors: Vec<(String, Tensor<f32>)>,
    pub meta: CheckpointMeta,
}

pub fn load_checkpoint(path: &Path) -> Result<LoadedCheckpoint> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    let mut pos = 0usize;
    let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
        if *pos + n > bytes.len() {
            return Err(Error::format(path, "truncated checkpoint"));
        }
        let s = &bytes[*pos..*pos + n];
        *pos += n;
        Ok(s)
    };
    let read_u32 = |pos: &mut usize| -> Result<u32> {
        Ok(u32::from_le_bytes(take(pos, 4)?.try_into().unwrap()))
    };

    if take(&mut pos, 4)? != MAGIC {
        return Err(Error::format(path, "bad checkpoint magic"));
    }
    let version = read_u32(&mut pos)?;
    if version != VERSION {
        return Err(Error::format(path, format!("unsupported checkpoint version {version}")));
    }
    let meta_len = read_u32(&mut pos)? as usize;
    let meta: CheckpointMeta = serde_json::from_slice(take(&mut pos, meta_len)?)
        .map_err(|e| Error::format(path, format!("metadata: {e}")))?;

    let count = read_u32(&mut pos)? as usize;
    let mut tensors: Vec<(String, Tensor<f32>)> = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = read_u32(&mut pos)? as usize;
        let name = std::str::from_utf8(take(&mut pos, name_len)?)
            .map_err(|_| Error::format(path, "non-utf8 tensor name"))?
            .to_string();
        let dtype = take(&mut pos, 1)?[0];
        if dtype != DTYPE_F32 {
            return Err(Error::format(path, format!("tensor {name}: unsupported dtype {dtype}")));
        }
        let rank = read_u32(&mut pos)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u32(&mut pos)? as usize);
        }
        let len: usize = shape.iter().product();
        let payload = take(&mut pos, len * 4)?;
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        tensors.push((name, Tensor::from_vec(&shape, data)?));
    }
    if pos != bytes.len() {
        return Err(Error::format(path, "trailing bytes after tensor records"));
    }

    // validate against the config-derived parameter table
    let expected = Model::<f32>::expected_shapes(&meta.model_config)?;
    let mut params = ModelParams::default();
    let mut extra_tensors = Vec::new();
    let mut loaded: BTreeMap<String, Tensor<f32>> = BTreeMap::new();
    for (name, t) in tensors {
        if name.starts_with("opt.") {
            extra_tensors.push((name, t));
        } else {
            loaded.insert(name, t);
        }
    }
    for (name, shape) in &expected {
        match loaded.remove(name) {
            Some(t) if t.shape() == &shape[..] => params.insert(name, t),
            Some(t) => {
                return Err(Error::shape(format!(
                    "checkpoint parameter {name}: expected {:?}, got {:?}",
                    shape,
                    t.shape()
                )))
            }
            None => {
                return Err(Error::format(path, format!("checkpoint missing parameter {name}")))
            }
        }
    }
    if let Some((name, _)) = loaded.into_iter().next() {
        return Err(Error::format(path, format!("checkpoint has unexpected tensor {name}")));
    }

    Ok(LoadedCheckpoint {
        model: Model { config: meta.model_config.clone(), params },
        extra_tensors,
        meta,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::Mode;

    fn meta(config: ModelConfig) -> CheckpointMeta {
        CheckpointMeta {
            model_config: config,
            epoch: 3,
            rng: RngState::capture(&ChaCha8Rng::seed_from_u64(9)),
            dataset_fingerprint: "test".into(),
            extra: BTreeMap::new(),
        }
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let cfg = ModelConfig::tiny_gradcheck();
        let model: Model<f32> = Model::init(cfg.clone(), 5).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.ckpt");
        let p2 = dir.path().join("b.ckpt");
        let vel = Tensor::filled(&[4], 0.5f32);
        let extra = vec![("opt.v.head.out.bias".to_string(), &vel)];
        save_checkpoint(&p1, &model, &extra, &meta(cfg)).unwrap();
        let loaded = load_checkpoint(&p1).unwrap();
        assert_eq!(loaded.extra_tensors.len(), 1);
        let extra2: Vec<(String, &Tensor<f32>)> =
            loaded.extra_tensors.iter().map(|(n, t)| (n.clone(), t)).collect();
        save_checkpoint(&p2, &loaded.model, &extra2, &loaded.meta).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn eval_forward_identical_after_roundtrip() {
        let cfg = ModelConfig::tiny_gradcheck();
        let model: Model<f32> = Model::init(cfg.clone(), 6).unwrap();
        let images = Tensor::filled(&[1, 1, cfg.image_shape.0, cfg.image_shape.1], 0.4f32);
        let excerpts = Tensor::filled(&[1, 1, cfg.excerpt_shape.0, cfg.excerpt_shape.1], 0.2f32);
        let before = model.forward(&images, &excerpts, Mode::Eval, None).unwrap();

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&path, &model, &[], &meta(cfg)).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        let after = loaded.model.forward(&images, &excerpts, Mode::Eval, None).unwrap();
        assert_eq!(before.probs.data(), after.probs.data());
    }

    #[test]
    fn mismatched_bucket_count_names_the_output_layer() {
        let cfg = ModelConfig::tiny_gradcheck();
        let model: Model<f32> = Model::init(cfg.clone(), 6).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        // lie about B in the metadata
        let mut bad_meta = meta(cfg);
        bad_meta.model_config.num_buckets = 8;
        save_checkpoint(&path, &model, &[], &bad_meta).unwrap();
        let err = match load_checkpoint(&path) {
            Err(e) => e,
            Ok(_) => panic!("expected a shape error"),
        };
        assert!(err.to_string().contains("head.out"), "{err}");
    }

    #[test]
    fn rng_state_roundtrip_resumes_stream() {
        use rand::RngCore;
        let mut rng = ChaCha8Rng::seed_from_u64(1234);
        rng.set_stream(7);
        rng.next_u64();
        rng.next_u64();
        let state = RngState::capture(&rng);
        let mut restored = state.restore().unwrap();
        assert_eq!(rng.next_u64(), restored.next_u64());
        assert_eq!(rng.next_u64(), restored.next_u64());
    }
}
