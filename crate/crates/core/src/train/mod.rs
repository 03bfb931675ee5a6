//! Training: losses, the optimization loop, hard-negative mining and the
//! synthetic desk-scale dataset.

pub mod loss;
pub mod mining;
pub mod optim;
pub mod synthetic;

use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoder::EncoderError;
use crate::model::{Model, ModelError};
use crate::segmentation::Labeller;
use crate::text::Vocab;

pub use loss::{
    contrastive_loss, total_loss, total_loss_and_grads, union_loss, LabelledText, LossParts, LossWeights, PairIndices,
    TrainBatch,
};
pub use mining::{mine_hard_negatives, MinedNegative, MiningConfig};
pub use optim::{schedule, AdamW, AdamWConfig};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("{tokens} real tokens but {labels} labels")]
    Align { tokens: usize, labels: usize },
    #[error("invalid batch: {0}")]
    Batch(String),
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("non-finite loss at step {step}: lexicon {lexicon}, dense {dense}, union {union}")]
    NonFinite {
        step: usize,
        lexicon: f64,
        dense: f64,
        union: f64,
    },
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub temperature: f64,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Hard negatives per query.
    pub negatives: usize,
    pub seed: u64,
    pub weight_lexicon: f64,
    pub weight_dense: f64,
    pub weight_union: f64,
    pub warmup_ratio: f64,
    pub weight_decay: f64,
    /// Stops early after this many steps when set.
    pub max_steps: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            temperature: 0.05,
            lr: 2e-3,
            epochs: 5,
            batch_size: 16,
            negatives: 3,
            seed: 42,
            weight_lexicon: 1.0,
            weight_dense: 1.0,
            weight_union: 1.0,
            warmup_ratio: 0.1,
            weight_decay: 0.01,
            max_steps: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.temperature.is_nan() || self.temperature <= 0.0 {
            return Err(TrainError::Config("temperature must be positive".into()));
        }
        if self.batch_size < 2 {
            return Err(TrainError::Config("batch size must be at least 2".into()));
        }
        if self.lr.is_nan() || self.lr < 0.0 {
            return Err(TrainError::Config("learning rate must be non-negative".into()));
        }
        Ok(())
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            lexicon: self.weight_lexicon,
            dense: self.weight_dense,
            union: self.weight_union,
        }
    }

    pub fn steps_per_epoch(&self, examples: usize) -> usize {
        examples.div_ceil(self.batch_size)
    }

    pub fn total_steps(&self, examples: usize) -> usize {
        let full = self.epochs * self.steps_per_epoch(examples);
        self.max_steps.map_or(full, |m| m.min(full))
    }
}

/// One dataset line: `{"query": ..., "pos": ..., "negs": [...]}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub query: String,
    pub pos: String,
    #[serde(default)]
    pub negs: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingExample {
    pub query: LabelledText,
    pub pos: LabelledText,
    pub negs: Vec<LabelledText>,
}

/// Tokenizes and labels every record. Negatives identical to the positive
/// are dropped.
pub fn label_dataset(records: &[DatasetRecord], labeller: &Labeller) -> Vec<TrainingExample> {
    let lab = |s: &str| {
        let (tok, labels) = labeller.label(s);
        LabelledText { tok, labels }
    };
    records
        .iter()
        .map(|r| TrainingExample {
            query: lab(&r.query),
            pos: lab(&r.pos),
            negs: r.negs.iter().filter(|n| **n != r.pos).map(|n| lab(n)).collect(),
        })
        .collect()
}

/// Packs examples into one batch, keeping at most `negatives` hard
/// negatives per query (chosen with `rng` when there are more).
pub fn make_batch(examples: &[&TrainingExample], negatives: usize, rng: &mut ChaCha8Rng) -> TrainBatch {
    let mut batch = TrainBatch::default();
    for ex in examples {
        let query = batch.texts.len();
        batch.texts.push(ex.query.clone());
        let pos = batch.texts.len();
        batch.texts.push(ex.pos.clone());
        let mut chosen: Vec<usize> = (0..ex.negs.len()).collect();
        if chosen.len() > negatives {
            chosen.shuffle(rng);
            chosen.truncate(negatives);
            chosen.sort_unstable();
        }
        let mut negs = Vec::with_capacity(chosen.len());
        for i in chosen {
            negs.push(batch.texts.len());
            batch.texts.push(ex.negs[i].clone());
        }
        batch.pairs.push(PairIndices { query, pos, negs });
    }
    batch
}

/// Fraction of real tokens whose most probable union class equals the
/// reference label.
pub fn tag_accuracy(model: &Model, vocab: &Vocab, texts: &[LabelledText]) -> Result<f64, TrainError> {
    let toks: Vec<_> = texts.iter().map(|t| t.tok.clone()).collect();
    let enc = model.encode(&toks, vocab)?;
    let mut right = 0usize;
    let mut total = 0usize;
    for (e, t) in enc.iter().zip(texts) {
        let predicted = e.union_probs.argmax();
        total += t.labels.len();
        right += predicted.iter().zip(&t.labels.0).filter(|(a, b)| a == b).count();
    }
    Ok(if total == 0 { 1.0 } else { right as f64 / total as f64 })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLoss {
    pub step: usize,
    pub parts: LossParts,
}

pub const LOSS_CSV_HEADER: &str = "step,loss_lex,loss_den,loss_union,total";

pub fn write_loss_csv(mut w: impl Write, log: &[StepLoss]) -> std::io::Result<()> {
    writeln!(w, "{LOSS_CSV_HEADER}")?;
    for s in log {
        let p = s.parts;
        writeln!(
            w,
            "{},{:.9},{:.9},{:.9},{:.9}",
            s.step, p.lexicon, p.dense, p.union, p.total
        )?;
    }
    Ok(())
}

pub fn loss_csv(log: &[StepLoss]) -> String {
    let mut buf = Vec::new();
    write_loss_csv(&mut buf, log).expect("writing to memory");
    String::from_utf8(buf).expect("ascii")
}

/// Trains `model` in place and returns the per-step loss log.
///
/// Examples are reshuffled every epoch from a generator seeded with
/// `config.seed`, so a fixed seed reproduces the run exactly.
pub fn train(
    config: &TrainConfig,
    dataset: &[TrainingExample],
    model: &mut Model,
    vocab: &Vocab,
) -> Result<Vec<StepLoss>, TrainError> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    model.check_vocab(vocab)?;
    let total = config.total_steps(dataset.len());
    let mut opt = AdamW::new(
        AdamWConfig {
            lr: config.lr,
            weight_decay: config.weight_decay,
            ..Default::default()
        },
        model,
    );
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let weights = config.loss_weights();
    let mut log = Vec::with_capacity(total);
    let mut step = 0;
    'epochs: for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..dataset.len()).collect();
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.batch_size) {
            if step >= total {
                break 'epochs;
            }
            step += 1;
            let examples: Vec<&TrainingExample> = chunk.iter().map(|&i| &dataset[i]).collect();
            let batch = make_batch(&examples, config.negatives, &mut rng);
            let (parts, grads) = total_loss_and_grads(model, &batch, vocab, config.temperature, weights)?;
            if !parts.is_finite() {
                return Err(TrainError::NonFinite {
                    step,
                    lexicon: parts.lexicon,
                    dense: parts.dense,
                    union: parts.union,
                });
            }
            opt.step(model, &grads, schedule(step, total, config.warmup_ratio));
            log.push(StepLoss { step, parts });
            if step % 20 == 0 || step == total {
                log::info!(
                    "epoch {} step {step}/{total}: total {:.4} (lex {:.4}, den {:.4}, union {:.4})",
                    epoch + 1,
                    parts.total,
                    parts.lexicon,
                    parts.dense,
                    parts.union
                );
            }
        }
    }
    Ok(log)
}
