//! Self-describing binary checkpoints.
//!
//! ```text
//! magic      b"WQE\x01" (4 bytes)
//! version    u32 LE
//! width      u8, 4 = f32, 8 = f64
//! config     u32 LE length + ModelConfig JSON
//! vocab hash u32 LE length + hex SHA-256 of the vocabulary
//! count      u64 LE parameter count
//! params     count little-endian floats, layout order
//! digest     SHA-256 of every preceding byte (32 bytes)
//! ```

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};
use thiserror::Error;

use super::{Layout, Model, ModelConfig, Real};
use crate::encode::Vocab;

const MAGIC: &[u8; 4] = b"WQE\x01";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("checkpoint format version {found} is not supported (expected {FORMAT_VERSION})")]
    FormatVersionMismatch { found: u32 },
    #[error("checkpoint stores {found}-byte floats, expected {expected}")]
    PrecisionMismatch { found: u8, expected: u8 },
    #[error("checkpoint was trained with vocabulary {found}, not {expected}")]
    VocabHashMismatch { found: String, expected: String },
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> CheckpointError + '_ {
    move |source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub fn encode_checkpoint<T: Real>(model: &Model<T>, vocab: &Vocab) -> Vec<u8> {
    let config = serde_json::to_vec(&model.config).expect("config serializes");
    let hash = vocab.content_hash();
    let mut out = Vec::with_capacity(64 + config.len() + model.params.len() * T::WIDTH as usize);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.push(T::WIDTH);
    out.extend_from_slice(&(config.len() as u32).to_le_bytes());
    out.extend_from_slice(&config);
    out.extend_from_slice(&(hash.len() as u32).to_le_bytes());
    out.extend_from_slice(hash.as_bytes());
    out.extend_from_slice(&(model.params.len() as u64).to_le_bytes());
    for p in &model.params {
        p.write_le(&mut out);
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        if self.bytes.len() - self.pos < n {
            return Err(CheckpointError::Corrupt("unexpected end of file".into()));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn decode_checkpoint<T: Real>(
    bytes: &[u8],
    vocab: &Vocab,
) -> Result<Model<T>, CheckpointError> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4).map_err(|_| CheckpointError::BadMagic)? != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = r
        .u32()
        .map_err(|_| CheckpointError::FormatVersionMismatch { found: 0 })?;
    if version != FORMAT_VERSION {
        return Err(CheckpointError::FormatVersionMismatch { found: version });
    }
    // Verify the digest before trusting any length field.
    if bytes.len() < 32 + r.pos {
        return Err(CheckpointError::Corrupt("file truncated".into()));
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err(CheckpointError::Corrupt(
            "checksum mismatch (truncated or modified)".into(),
        ));
    }
    let width = r.take(1)?[0];
    if width != T::WIDTH {
        return Err(CheckpointError::PrecisionMismatch {
            found: width,
            expected: T::WIDTH,
        });
    }
    let config_len = r.u32()? as usize;
    let config: ModelConfig = serde_json::from_slice(r.take(config_len)?)
        .map_err(|e| CheckpointError::Corrupt(format!("config: {e}")))?;
    let hash_len = r.u32()? as usize;
    let hash = String::from_utf8(r.take(hash_len)?.to_vec())
        .map_err(|_| CheckpointError::Corrupt("vocab hash is not UTF-8".into()))?;
    let expected = vocab.content_hash();
    if hash != expected {
        return Err(CheckpointError::VocabHashMismatch {
            found: hash,
            expected,
        });
    }
    let count = u64::from_le_bytes(r.take(8)?.try_into().unwrap()) as usize;
    config
        .validate()
        .map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
    let layout = Layout::new(&config);
    if layout.total != count {
        return Err(CheckpointError::Corrupt(format!(
            "{count} parameters stored, config implies {}",
            layout.total
        )));
    }
    let w = T::WIDTH as usize;
    let raw = r.take(count * w)?;
    if r.pos != body.len() {
        return Err(CheckpointError::Corrupt("trailing bytes".into()));
    }
    let params = raw.chunks_exact(w).map(T::read_le).collect();
    Ok(Model {
        config,
        layout,
        params,
    })
}

/// Writes atomically: the file appears complete or not at all.
pub fn save_checkpoint<T: Real>(
    model: &Model<T>,
    vocab: &Vocab,
    path: &Path,
) -> Result<(), CheckpointError> {
    let bytes = encode_checkpoint(model, vocab);
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    let mut f = fs::File::create(&tmp).map_err(io_err(&tmp))?;
    f.write_all(&bytes).map_err(io_err(&tmp))?;
    f.sync_all().map_err(io_err(&tmp))?;
    fs::rename(&tmp, path).map_err(io_err(path))
}

pub fn load_checkpoint<T: Real>(path: &Path, vocab: &Vocab) -> Result<Model<T>, CheckpointError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    decode_checkpoint(&bytes, vocab)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_model;

    fn vocab(extra: &str) -> Vocab {
        let mut pieces: Vec<String> = ["<pad>", "<unk>", "<s>", "[SEP]", "<GAP>", "<mask>"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        pieces.push(extra.to_string());
        Vocab::from_pieces(pieces).unwrap()
    }

    fn model() -> Model<f32> {
        init_model(&ModelConfig {
            vocab_size: 7,
            d_model: 8,
            n_layers: 1,
            n_heads: 2,
            d_ff: 16,
            dropout: 0.0,
            max_seq_length: 16,
            seed: 9,
        })
        .unwrap()
    }

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let m = model();
        save_checkpoint(&m, &vocab("a"), &path).unwrap();
        let back: Model<f32> = load_checkpoint(&path, &vocab("a")).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn wrong_vocab_refused() {
        let bytes = encode_checkpoint(&model(), &vocab("a"));
        assert!(matches!(
            decode_checkpoint::<f32>(&bytes, &vocab("b")),
            Err(CheckpointError::VocabHashMismatch { .. })
        ));
    }

    #[test]
    fn truncation_and_corruption_detected() {
        let bytes = encode_checkpoint(&model(), &vocab("a"));
        for cut in [0, 3, 7, 20, bytes.len() / 2, bytes.len() - 1] {
            let err = decode_checkpoint::<f32>(&bytes[..cut], &vocab("a")).unwrap_err();
            assert!(
                matches!(
                    err,
                    CheckpointError::Corrupt(_)
                        | CheckpointError::BadMagic
                        | CheckpointError::FormatVersionMismatch { .. }
                ),
                "cut {cut}: {err}"
            );
        }
        let mut flipped = bytes.clone();
        let mid = flipped.len() - 40;
        flipped[mid] ^= 0x55;
        assert!(matches!(
            decode_checkpoint::<f32>(&flipped, &vocab("a")),
            Err(CheckpointError::Corrupt(_))
        ));
        let mut versioned = bytes;
        versioned[4] = 9;
        assert!(matches!(
            decode_checkpoint::<f32>(&versioned, &vocab("a")),
            Err(CheckpointError::FormatVersionMismatch { found: 9 })
        ));
    }

    #[test]
    fn precision_mismatch_refused() {
        let bytes = encode_checkpoint(&model(), &vocab("a"));
        assert!(matches!(
            decode_checkpoint::<f64>(&bytes, &vocab("a")),
            Err(CheckpointError::PrecisionMismatch {
                found: 4,
                expected: 8
            })
        ));
    }
}
