//! Checkpoint serialization.
//!
//! Layout: the magic `ALNCKPT1`, a little-endian u32 header length, a JSON
//! header (format version, model config, step counter, RNG state, tensor
//! declarations), the raw little-endian f32 tensor blobs in declared order
//! (parameters, then optimizer first/second moments when present), and a
//! trailing 64-bit checksum of all preceding bytes.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use super::{AdamState, Model, ModelConfig, Params};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"ALNCKPT1";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("cannot access checkpoint {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("bad checkpoint: {0}")]
    BadCheckpoint(String),
    #[error("checkpoint truncated: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("checkpoint checksum mismatch")]
    ChecksumMismatch,
    #[error("unsupported checkpoint format version {0}")]
    UnsupportedVersion(u32),
    #[error("checkpoint config does not match the expected config")]
    ConfigMismatch,
}

/// Serializable RNG state: ChaCha8 seed plus stream position.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RngState {
    pub seed: [u8; 32],
    pub word_pos_hi: u64,
    pub word_pos_lo: u64,
}

impl RngState {
    pub fn from_rng(rng: &rand_chacha::ChaCha8Rng) -> Self {
        let pos = rng.get_word_pos();
        RngState {
            seed: rng.get_seed(),
            word_pos_hi: (pos >> 64) as u64,
            word_pos_lo: pos as u64,
        }
    }

    pub fn to_rng(&self) -> rand_chacha::ChaCha8Rng {
        use rand_chacha::rand_core::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::from_seed(self.seed);
        rng.set_word_pos(u128::from(self.word_pos_hi) << 64 | u128::from(self.word_pos_lo));
        rng
    }

    pub fn zeroed() -> Self {
        RngState {
            seed: [0; 32],
            word_pos_hi: 0,
            word_pos_lo: 0,
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorDecl {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    version: u32,
    config: ModelConfig,
    step: u64,
    rng: RngState,
    optimizer: bool,
    opt_step: u64,
    tensors: Vec<TensorDecl>,
}

/// Everything a checkpoint holds.
#[derive(Debug, Clone)]
pub struct LoadedCheckpoint {
    pub model: Model,
    pub optimizer: Option<AdamState<f32>>,
    pub step: u64,
    pub rng: RngState,
}

impl LoadedCheckpoint {
    /// Reject checkpoints whose architecture differs from the run's config
    /// (the seed field may differ; it only affects initialization).
    pub fn require_config(&self, expected: &ModelConfig) -> Result<(), CheckpointError> {
        let got = self.model.config();
        let same = got.layers == expected.layers
            && got.model_dim == expected.model_dim
            && got.heads == expected.heads
            && got.context_len == expected.context_len
            && got.vocab_size == expected.vocab_size;
        if same {
            Ok(())
        } else {
            Err(CheckpointError::ConfigMismatch)
        }
    }
}

fn checksum64(bytes: &[u8]) -> u64 {
    let digest = Sha256::digest(bytes);
    u64::from_le_bytes(digest[..8].try_into().expect("digest is 32 bytes"))
}

fn push_blob(out: &mut Vec<u8>, params: &Params<f32>) {
    params.for_each_tensor(&mut |_, _, data| {
        for x in data {
            out.extend_from_slice(&x.to_le_bytes());
        }
    });
}

/// Encode a checkpoint to bytes.
pub fn checkpoint_to_bytes(
    model: &Model,
    optimizer: Option<&AdamState<f32>>,
    step: u64,
    rng: &RngState,
) -> Vec<u8> {
    let mut tensors = Vec::new();
    model.params().for_each_tensor(&mut |name, (rows, cols), _| {
        tensors.push(TensorDecl {
            name: name.to_string(),
            rows,
            cols,
        });
    });
    let header = Header {
        version: FORMAT_VERSION,
        config: model.config().clone(),
        step,
        rng: rng.clone(),
        optimizer: optimizer.is_some(),
        opt_step: optimizer.map_or(0, |s| s.step),
        tensors,
    };
    let header_bytes = serde_json::to_vec(&header).expect("header serializes");

    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&(header_bytes.len() as u32).to_le_bytes());
    out.extend_from_slice(&header_bytes);
    push_blob(&mut out, model.params());
    if let Some(state) = optimizer {
        push_blob(&mut out, &state.m);
        push_blob(&mut out, &state.v);
    }
    let sum = checksum64(&out);
    out.extend_from_slice(&sum.to_le_bytes());
    out
}

fn read_params(
    cfg: &ModelConfig,
    decls: &[TensorDecl],
    blob: &[u8],
    cursor: &mut usize,
) -> Result<Params<f32>, CheckpointError> {
    let mut params = Params::<f32>::zeros(cfg);
    let mut decl_idx = 0usize;
    let mut failure: Option<CheckpointError> = None;
    params.for_each_tensor_mut(&mut |name, data| {
        if failure.is_some() {
            return;
        }
        let Some(decl) = decls.get(decl_idx) else {
            failure = Some(CheckpointError::BadCheckpoint(
                "missing tensor declaration".into(),
            ));
            return;
        };
        if decl.name != name || decl.rows * decl.cols != data.len() {
            failure = Some(CheckpointError::BadCheckpoint(format!(
                "tensor {name} does not match declaration {}",
                decl.name
            )));
            return;
        }
        decl_idx += 1;
        let need = data.len() * 4;
        if blob.len() < *cursor + need {
            failure = Some(CheckpointError::Truncated {
                expected: *cursor + need,
                found: blob.len(),
            });
            return;
        }
        for (i, x) in data.iter_mut().enumerate() {
            let at = *cursor + i * 4;
            *x = f32::from_le_bytes(blob[at..at + 4].try_into().expect("4 bytes"));
        }
        *cursor += need;
    });
    match failure {
        Some(e) => Err(e),
        None => Ok(params),
    }
}

/// Decode a checkpoint from bytes.
pub fn checkpoint_from_bytes(bytes: &[u8]) -> Result<LoadedCheckpoint, CheckpointError> {
    if bytes.len() < CHECKPOINT_MAGIC.len() + 4 + 8 {
        return Err(CheckpointError::Truncated {
            expected: CHECKPOINT_MAGIC.len() + 4 + 8,
            found: bytes.len(),
        });
    }
    if &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(CheckpointError::BadCheckpoint("bad magic".into()));
    }
    let body_len = bytes.len() - 8;
    let declared = checksum64(&bytes[..body_len]);
    let stored = u64::from_le_bytes(bytes[body_len..].try_into().expect("8 bytes"));
    if declared != stored {
        return Err(CheckpointError::ChecksumMismatch);
    }

    let header_len = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    if bytes.len() < 12 + header_len + 8 {
        return Err(CheckpointError::Truncated {
            expected: 12 + header_len + 8,
            found: bytes.len(),
        });
    }
    let header: Header = serde_json::from_slice(&bytes[12..12 + header_len])
        .map_err(|e| CheckpointError::BadCheckpoint(format!("header: {e}")))?;
    if header.version != FORMAT_VERSION {
        return Err(CheckpointError::UnsupportedVersion(header.version));
    }
    header
        .config
        .validate()
        .map_err(|e| CheckpointError::BadCheckpoint(e.to_string()))?;

    let blob = &bytes[12 + header_len..body_len];
    let mut cursor = 0usize;
    let params = read_params(&header.config, &header.tensors, blob, &mut cursor)?;
    let optimizer = if header.optimizer {
        let m = read_params(&header.config, &header.tensors, blob, &mut cursor)?;
        let v = read_params(&header.config, &header.tensors, blob, &mut cursor)?;
        Some(AdamState {
            m,
            v,
            step: header.opt_step,
        })
    } else {
        None
    };
    if cursor != blob.len() {
        return Err(CheckpointError::BadCheckpoint(format!(
            "{} trailing bytes after tensors",
            blob.len() - cursor
        )));
    }
    let model = Model::from_parts(header.config, params)
        .map_err(|e| CheckpointError::BadCheckpoint(e.to_string()))?;
    Ok(LoadedCheckpoint {
        model,
        optimizer,
        step: header.step,
        rng: header.rng,
    })
}

/// Save a checkpoint file.
pub fn save_checkpoint(
    path: impl AsRef<Path>,
    model: &Model,
    optimizer: Option<&AdamState<f32>>,
    step: u64,
    rng: &RngState,
) -> Result<(), CheckpointError> {
    let path = path.as_ref();
    fs::write(path, checkpoint_to_bytes(model, optimizer, step, rng)).map_err(|source| {
        CheckpointError::Io {
            path: path.display().to_string(),
            source,
        }
    })
}

/// Load a checkpoint file.
pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<LoadedCheckpoint, CheckpointError> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    })?;
    checkpoint_from_bytes(&bytes)
}
