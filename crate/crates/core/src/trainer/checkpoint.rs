//! Versioned binary checkpoint container.
//!
//! ```text
//! magic "CQACKPT\0" | version u32 | header length u64 | header JSON
//! | tensor count u32 | records... | SHA-256 of everything before it
//! record: name length u32 | name | dtype u8 | ndim u8 | dims u64... | data
//! ```
//! All integers and tensor data are little-endian.

use std::fs;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{OptimizerState, RunConfig};
use crate::error::{Error, Result};
use crate::model::{init_shape, DType, ModelParams, Scalar};

const MAGIC: &[u8; 8] = b"CQACKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;

/// Position of a ChaCha stream, enough to rebuild the generator exactly.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    seed: String,
    stream: u64,
    word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        RngState {
            seed: rng.get_seed().iter().map(|b| format!("{b:02x}")).collect(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        let bad = || Error::CheckpointCorrupt("malformed rng state".into());
        if self.seed.len() != 64 {
            return Err(bad());
        }
        let mut seed = [0u8; 32];
        for (i, b) in seed.iter_mut().enumerate() {
            *b = u8::from_str_radix(&self.seed[2 * i..2 * i + 2], 16).map_err(|_| bad())?;
        }
        let word_pos: u128 = self.word_pos.parse().map_err(|_| bad())?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(word_pos);
        Ok(rng)
    }
}

/// Complete training state.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    /// Vocabulary tokens in id order.
    pub vocab: Vec<String>,
    pub step: u64,
    /// Dropout generator position.
    pub rng: RngState,
    pub params: ModelParams<f32>,
    pub optimizer: OptimizerState<f32>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: RunConfig,
    vocab: Vec<String>,
    step: u64,
    rng: RngState,
}

fn write_tensors<F: Scalar>(out: &mut Vec<u8>, prefix: &str, params: &ModelParams<F>) {
    for (name, t) in params.tensors() {
        let name = format!("{prefix}{name}");
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(F::DTYPE as u8);
        out.push(t.ndim() as u8);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &x in t.iter() {
            x.write_le(out);
        }
    }
}

pub fn encode_checkpoint(ckpt: &Checkpoint) -> Vec<u8> {
    let header = Header {
        config: ckpt.config.clone(),
        vocab: ckpt.vocab.clone(),
        step: ckpt.step,
        rng: ckpt.rng.clone(),
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    let count = 3 * ckpt.params.tensors().len();
    out.extend_from_slice(&(count as u32).to_le_bytes());
    write_tensors(&mut out, "param.", &ckpt.params);
    write_tensors(&mut out, "adam.m.", &ckpt.optimizer.m);
    write_tensors(&mut out, "adam.v.", &ckpt.optimizer.v);
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    out
}

/// Writes atomically: a temporary sibling file is renamed into place.
pub fn save_checkpoint(path: impl AsRef<Path>, ckpt: &Checkpoint) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_checkpoint(ckpt);
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::CheckpointCorrupt("unexpected end of data".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::CheckpointCorrupt("length overflow".into()))
    }
}

fn read_tensors<F: Scalar>(r: &mut Reader<'_>, prefix: &str, params: &mut ModelParams<F>) -> Result<()> {
    for (name, mut t) in params.tensors_mut() {
        let expected = format!("{prefix}{name}");
        let name_len = r.u32()? as usize;
        let found = r.take(name_len)?;
        if found != expected.as_bytes() {
            return Err(Error::CheckpointCorrupt(format!(
                "expected tensor {expected}, found {}",
                String::from_utf8_lossy(found)
            )));
        }
        let dtype = DType::from_tag(r.u8()?)
            .ok_or_else(|| Error::CheckpointCorrupt(format!("unknown dtype for {expected}")))?;
        if dtype != F::DTYPE {
            return Err(Error::CheckpointCorrupt(format!("{expected} has dtype {dtype:?}, expected {:?}", F::DTYPE)));
        }
        let ndim = r.u8()? as usize;
        let dims = (0..ndim).map(|_| r.len()).collect::<Result<Vec<_>>>()?;
        if dims != t.shape() {
            return Err(Error::CheckpointCorrupt(format!(
                "{expected} has shape {dims:?}, expected {:?}",
                t.shape()
            )));
        }
        let size = dtype.size();
        let data = r.take(t.len() * size)?;
        for (x, chunk) in t.iter_mut().zip(data.chunks_exact(size)) {
            *x = F::read_le(chunk);
        }
    }
    Ok(())
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < MAGIC.len() + 4 || &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::CheckpointCorrupt("not a checkpoint file (bad magic)".into()));
    }
    let version = u32::from_le_bytes(bytes[MAGIC.len()..MAGIC.len() + 4].try_into().expect("4 bytes"));
    if version > CHECKPOINT_VERSION || version == 0 {
        return Err(Error::CheckpointVersion {
            found: version,
            supported: CHECKPOINT_VERSION,
        });
    }
    if bytes.len() < MAGIC.len() + 4 + DIGEST_LEN {
        return Err(Error::CheckpointCorrupt("checksum mismatch (file truncated)".into()));
    }
    let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
    if Sha256::digest(body).as_slice() != digest {
        return Err(Error::CheckpointCorrupt("checksum mismatch".into()));
    }

    let mut r = Reader {
        bytes: body,
        pos: MAGIC.len() + 4,
    };
    let header_len = r.len()?;
    let header: Header = serde_json::from_slice(r.take(header_len)?)
        .map_err(|e| Error::CheckpointCorrupt(format!("header: {e}")))?;
    header.config.model.validate()?;
    let mut params: ModelParams<f32> = init_shape(&header.config.model);
    let mut optimizer = OptimizerState::new(&params);
    optimizer.step = header.step;
    let count = r.u32()? as usize;
    if count != 3 * params.tensors().len() {
        return Err(Error::CheckpointCorrupt(format!("unexpected tensor count {count}")));
    }
    read_tensors(&mut r, "param.", &mut params)?;
    read_tensors(&mut r, "adam.m.", &mut optimizer.m)?;
    read_tensors(&mut r, "adam.v.", &mut optimizer.v)?;
    if r.pos != body.len() {
        return Err(Error::CheckpointCorrupt("trailing bytes after tensors".into()));
    }
    Ok(Checkpoint {
        config: header.config,
        vocab: header.vocab,
        step: header.step,
        rng: header.rng,
        params,
        optimizer,
    })
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::featurizer::FeaturizerConfig;
    use crate::model::{init_params, ModelConfig};
    use crate::trainer::TrainConfig;
    use rand::RngCore;

    fn sample() -> Checkpoint {
        let model = ModelConfig {
            vocab_size: 10,
            hidden: 4,
            layers: 1,
            heads: 2,
            ffn_size: 8,
            max_positions: 16,
            dropout_rate: 0.1,
            use_hae: true,
            seed: 3,
        };
        let params = init_params::<f32>(&model).unwrap();
        let mut optimizer = OptimizerState::new(&params);
        optimizer.m = params.clone();
        optimizer.v.span_start.fill(f32::MIN_POSITIVE);
        optimizer.step = 7;
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        rng.set_stream(1);
        rng.next_u64();
        rng.next_u32();
        Checkpoint {
            config: RunConfig {
                model,
                train: TrainConfig {
                    total_steps: 20,
                    ..TrainConfig::default()
                },
                featurizer: FeaturizerConfig {
                    max_seq_len: 16,
                    doc_stride: 4,
                    max_question_len: 6,
                    ..FeaturizerConfig::default()
                },
                history_turns: 2,
            },
            vocab: (0..10).map(|i| format!("t{i}")).collect(),
            step: 7,
            rng: RngState::capture(&rng),
            params,
            optimizer,
        }
    }

    #[test]
    fn round_trip_is_exact() {
        let ckpt = sample();
        let bytes = encode_checkpoint(&ckpt);
        let back = decode_checkpoint(&bytes).unwrap();
        assert_eq!(back, ckpt);
        assert_eq!(encode_checkpoint(&back), bytes);
    }

    #[test]
    fn rng_state_resumes_stream() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        rng.set_stream(5);
        for _ in 0..13 {
            rng.next_u32();
        }
        let mut restored = RngState::capture(&rng).restore().unwrap();
        for _ in 0..100 {
            assert_eq!(rng.next_u64(), restored.next_u64());
        }
    }

    #[test]
    fn truncation_fails_checksum() {
        let bytes = encode_checkpoint(&sample());
        for cut in [1, 33, bytes.len() / 2] {
            let err = decode_checkpoint(&bytes[..bytes.len() - cut]).unwrap_err();
            assert!(err.to_string().contains("checksum"), "{err}");
        }
    }

    #[test]
    fn flipped_bit_fails_checksum() {
        let mut bytes = encode_checkpoint(&sample());
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0x10;
        assert!(matches!(decode_checkpoint(&bytes), Err(Error::CheckpointCorrupt(_))));
    }

    #[test]
    fn future_version_rejected() {
        let mut bytes = encode_checkpoint(&sample());
        bytes[8..12].copy_from_slice(&(CHECKPOINT_VERSION + 1).to_le_bytes());
        let n = bytes.len() - DIGEST_LEN;
        let digest = Sha256::digest(&bytes[..n]);
        bytes[n..].copy_from_slice(&digest);
        match decode_checkpoint(&bytes) {
            Err(Error::CheckpointVersion { found, supported }) => {
                assert_eq!(found, CHECKPOINT_VERSION + 1);
                assert_eq!(supported, CHECKPOINT_VERSION);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn bad_magic() {
        assert!(matches!(decode_checkpoint(b"hello world"), Err(Error::CheckpointCorrupt(_))));
    }

    #[test]
    fn save_and_load_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt-7.bin");
        let ckpt = sample();
        save_checkpoint(&path, &ckpt).unwrap();
        assert_eq!(load_checkpoint(&path).unwrap(), ckpt);
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 1);
    }
}
