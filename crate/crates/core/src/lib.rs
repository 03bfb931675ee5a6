//! Hybrid lexicon + dense retrieval from a single encoder.
//!
//! One encoder produces both a word-level sparse representation (learned
//! term weights, with tokenizer terms merged into words by a BMES union
//! head) and a sequence-level dense vector. Both are L2-normalized so their
//! match scores can be summed directly.
//!
//! Modules, bottom-up:
//! - [`text`]: vocabulary and offset-preserving tokenization
//! - [`segmentation`]: reference segmenter and BMES label alignment
//! - [`encoder`]: shared backbone with lexicon and dense branches
//! - [`heads`]: projectors, bagging and normalization
//! - [`model`]: encoder + heads, inference and checkpoints
//! - [`index`]: inverted index, dense store and top-k search
//! - [`train`]: losses, optimizer loop, hard-negative mining, synthetic data
//! - [`eval`]: TREC run/qrels evaluation
//! - [`selfcheck`]: oracle suites runnable from the CLI

pub mod encoder;
pub mod eval;
pub mod hash;
pub mod heads;
pub mod index;
pub mod jsonl;
pub mod model;
pub mod segmentation;
pub mod selfcheck;
pub mod text;
pub mod train;

pub use encoder::{EncoderConfig, EncoderParams, PaddedBatch};
pub use heads::{DenseVector, HeadParams, SparseRepresentation, UnitId};
pub use model::{Encoded, Model};
pub use text::{tokenize, TokenizedText, Vocab};
