//! Encoder + heads bundle, inference-time encoding, and the binary
//! checkpoint format.
//!
//! Checkpoint layout (little-endian):
//!
//! ```text
//! magic "HYRECKPT" | version u32 | config (8 × u32, seed u64) | config hash u64
//! tensor count u32 | per tensor: name len u32, name, rows u32, cols u32, rows*cols × f32
//! checksum u64 (FNV-1a of every preceding byte)
//! ```

use std::fs;
use std::io::{self, Write};
use std::path::Path;

use ndarray::Axis;
use rayon::prelude::*;
use thiserror::Error;

use crate::encoder::{EncoderConfig, EncoderError, EncoderParams, Mat, PaddedBatch};
use crate::hash::fnv1a;
use crate::heads::{
    bag, dense_vector, term_weights, union_probs, DenseVector, HeadError, HeadParams, SparseRepresentation,
    TermWeights, UnionProbs, HEAD_TENSOR_NAMES,
};
use crate::text::{TokenizedText, Vocab};

const MAGIC: &[u8; 8] = b"HYRECKPT";
const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Head(#[from] HeadError),
    #[error("checkpoint i/o: {0}")]
    Io(#[from] io::Error),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("checkpoint config hash {found:016x} does not match expected {expected:016x}")]
    ConfigMismatch { expected: u64, found: u64 },
    #[error("vocabulary has {vocab} entries but the model expects {model}")]
    VocabMismatch { vocab: usize, model: usize },
}

/// Result of encoding one text at inference time.
#[derive(Debug, Clone)]
pub struct Encoded {
    pub sparse: SparseRepresentation,
    pub dense: DenseVector,
    pub union_probs: UnionProbs,
    pub term_weights: TermWeights,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub encoder: EncoderParams,
    pub heads: HeadParams,
}

impl Model {
    pub fn init(config: EncoderConfig) -> Result<Self, ModelError> {
        let encoder = EncoderParams::init(config)?;
        let heads = HeadParams::init(config.hidden_size, config.seed);
        Ok(Self { encoder, heads })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.encoder.config
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            encoder: self.encoder.zeros_like(),
            heads: HeadParams::zeros(self.config().hidden_size),
        }
    }

    pub fn num_params(&self) -> usize {
        self.encoder.num_params() + HeadParams::count(self.config().hidden_size)
    }

    pub fn named_tensors(&self) -> Vec<(String, &Mat)> {
        let mut out = self.encoder.named_tensors();
        out.extend(
            HEAD_TENSOR_NAMES
                .iter()
                .zip(self.heads.tensors())
                .map(|(n, t)| (n.to_string(), t)),
        );
        out
    }

    /// Mutable tensors in `named_tensors` order.
    pub fn tensors_mut(&mut self) -> Vec<&mut Mat> {
        let mut out = self.encoder.tensors_mut();
        out.extend(self.heads.tensors_mut());
        out
    }

    pub fn check_vocab(&self, vocab: &Vocab) -> Result<(), ModelError> {
        if vocab.len() != self.config().vocab_size {
            return Err(ModelError::VocabMismatch {
                vocab: vocab.len(),
                model: self.config().vocab_size,
            });
        }
        Ok(())
    }

    /// Rounds every parameter to the nearest f32, matching what a
    /// checkpoint round-trip produces.
    pub fn round_to_f32(&mut self) {
        for t in self.tensors_mut() {
            t.mapv_inplace(|v| f64::from(v as f32));
        }
    }

    /// Encodes texts into sparse + dense representations, in chunks of
    /// `chunk` texts per padded batch.
    pub fn encode(&self, texts: &[TokenizedText], vocab: &Vocab) -> Result<Vec<Encoded>, ModelError> {
        const CHUNK: usize = 32;
        let chunks: Vec<Result<Vec<Encoded>, ModelError>> = texts
            .par_chunks(CHUNK)
            .map(|chunk| self.encode_chunk(chunk, vocab))
            .collect();
        let mut out = Vec::with_capacity(texts.len());
        for c in chunks {
            out.extend(c?);
        }
        Ok(out)
    }

    pub fn encode_one(&self, text: &TokenizedText, vocab: &Vocab) -> Result<Encoded, ModelError> {
        Ok(self.encode_chunk(std::slice::from_ref(text), vocab)?.remove(0))
    }

    fn encode_chunk(&self, texts: &[TokenizedText], vocab: &Vocab) -> Result<Vec<Encoded>, ModelError> {
        let refs: Vec<&TokenizedText> = texts.iter().collect();
        let batch = PaddedBatch::from_texts(&refs, vocab.pad_id());
        let out = self.encoder.forward(&batch)?;
        texts
            .iter()
            .enumerate()
            .map(|(b, tok)| {
                let mask = batch.mask(b);
                let l = out.lexicon.index_axis(Axis(0), b);
                let d = out.dense.index_axis(Axis(0), b);
                let probs = union_probs(l, &self.heads, mask);
                let weights = term_weights(l, &self.heads, mask);
                let dense = dense_vector(d, &self.heads)?;
                let sparse = bag(tok, &probs, &weights, vocab);
                Ok(Encoded {
                    sparse,
                    dense,
                    union_probs: probs,
                    term_weights: weights,
                })
            })
            .collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        buf.extend_from_slice(&self.config().to_bytes());
        buf.extend_from_slice(&self.config().fingerprint().to_le_bytes());
        let tensors = self.named_tensors();
        buf.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
        for (name, t) in tensors {
            buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
            buf.extend_from_slice(name.as_bytes());
            buf.extend_from_slice(&(t.nrows() as u32).to_le_bytes());
            buf.extend_from_slice(&(t.ncols() as u32).to_le_bytes());
            for &v in t.iter() {
                buf.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        let checksum = fnv1a(&buf);
        buf.extend_from_slice(&checksum.to_le_bytes());
        buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ModelError> {
        if bytes.len() < MAGIC.len() + 8 {
            return Err(ModelError::Corrupt("file too short".into()));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 8);
        let stored = u64::from_le_bytes(tail.try_into().unwrap());
        let mut r = Reader { buf: body, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(ModelError::Corrupt("bad magic".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(ModelError::Corrupt(format!("unsupported version {version}")));
        }
        if fnv1a(body) != stored {
            return Err(ModelError::Corrupt("checksum mismatch".into()));
        }
        let mut dims = [0usize; 8];
        for d in &mut dims {
            *d = r.u32()? as usize;
        }
        let config = EncoderConfig {
            hidden_size: dims[0],
            heads: dims[1],
            layers_ssb: dims[2],
            layers_gle: dims[3],
            layers_lde: dims[4],
            ffn_size: dims[5],
            max_len: dims[6],
            vocab_size: dims[7],
            seed: r.u64()?,
        };
        let hash = r.u64()?;
        if hash != config.fingerprint() {
            return Err(ModelError::ConfigMismatch {
                expected: config.fingerprint(),
                found: hash,
            });
        }
        config.validate()?;
        let mut model = Model {
            encoder: EncoderParams::init(config)?.zeros_like(),
            heads: HeadParams::zeros(config.hidden_size),
        };
        let names: Vec<String> = model.named_tensors().into_iter().map(|(n, _)| n).collect();
        let count = r.u32()? as usize;
        if count != names.len() {
            return Err(ModelError::Corrupt(format!(
                "expected {} tensors, found {count}",
                names.len()
            )));
        }
        for (expected, slot) in names.iter().zip(model.tensors_mut()) {
            let len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| ModelError::Corrupt("tensor name is not UTF-8".into()))?;
            if name != expected {
                return Err(ModelError::Corrupt(format!("expected tensor {expected}, found {name}")));
            }
            let rows = r.u32()? as usize;
            let cols = r.u32()? as usize;
            if (rows, cols) != slot.dim() {
                return Err(ModelError::Corrupt(format!(
                    "tensor {name} has shape {rows}x{cols}, expected {:?}",
                    slot.dim()
                )));
            }
            for v in slot.iter_mut() {
                let x = f32::from_le_bytes(r.take(4)?.try_into().unwrap());
                if !x.is_finite() {
                    return Err(ModelError::Corrupt(format!("non-finite value in {name}")));
                }
                *v = f64::from(x);
            }
        }
        if r.pos != body.len() {
            return Err(ModelError::Corrupt("trailing bytes".into()));
        }
        Ok(model)
    }

    /// Writes the checkpoint via a temporary file and rename.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), ModelError> {
        write_atomic(path.as_ref(), &self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ModelError> {
        Self::from_bytes(&fs::read(path)?)
    }

    /// Loads a checkpoint and rejects it unless its config hash equals
    /// `expected`'s.
    pub fn load_expecting(path: impl AsRef<Path>, expected: &EncoderConfig) -> Result<Self, ModelError> {
        let model = Self::load(path)?;
        if model.config().fingerprint() != expected.fingerprint() {
            return Err(ModelError::ConfigMismatch {
                expected: expected.fingerprint(),
                found: model.config().fingerprint(),
            });
        }
        Ok(model)
    }
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> io::Result<()> {
    let tmp = path.with_extension(format!(
        "{}.tmp",
        path.extension().and_then(|e| e.to_str()).unwrap_or("")
    ));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(tmp, path)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ModelError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| ModelError::Corrupt("unexpected end of file".into()))?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32, ModelError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, ModelError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}
