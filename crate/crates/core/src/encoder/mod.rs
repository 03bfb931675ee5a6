//! Global-local-aware encoder: a shared backbone followed by two parallel
//! transformer branches, one feeding the lexicon heads and one feeding the
//! dense head.
//!
//! ```text
//!   embeddings -> backbone (S) -+-> lexicon branch (L)
//!                               +-> dense branch   (D)
//! ```
//!
//! The two branches read the same backbone states and never read each
//! other, so parameters of one branch cannot influence the other's output.

pub(crate) mod layer;

use ndarray::{s, Array3, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::text::{TermId, TokenizedText};
use layer::{layer_backward, layer_forward, layer_norm, layer_norm_backward, LayerCache, NormCache};
pub use layer::{LayerParams, Mat, NormParams};

#[derive(Debug, Error, PartialEq)]
pub enum EncoderError {
    #[error("invalid encoder config: {0}")]
    Config(String),
    #[error("sequence length {len} exceeds max_len {max_len}")]
    Length { len: usize, max_len: usize },
    #[error("token id {id} out of range for vocabulary of {vocab_size}")]
    TokenOutOfRange { id: TermId, vocab_size: usize },
    #[error("malformed batch: {0}")]
    Batch(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub hidden_size: usize,
    pub heads: usize,
    pub layers_ssb: usize,
    pub layers_gle: usize,
    pub layers_lde: usize,
    pub ffn_size: usize,
    pub max_len: usize,
    pub vocab_size: usize,
    pub seed: u64,
}

impl EncoderConfig {
    /// Desk-scale defaults: H=64, 4 heads, one layer per stack, max_len 64.
    pub fn desk(vocab_size: usize) -> Self {
        Self {
            hidden_size: 64,
            heads: 4,
            layers_ssb: 1,
            layers_gle: 1,
            layers_lde: 1,
            ffn_size: 256,
            max_len: 64,
            vocab_size,
            seed: 42,
        }
    }

    /// A 12-layer budget split into a backbone of `12 - n` layers and two
    /// branches of `n` layers each.
    pub fn with_branch_split(mut self, branch_layers: usize) -> Self {
        let branch_layers = branch_layers.min(12);
        self.layers_ssb = 12 - branch_layers;
        self.layers_gle = branch_layers;
        self.layers_lde = branch_layers;
        self
    }

    pub fn validate(&self) -> Result<(), EncoderError> {
        let err = |m: String| Err(EncoderError::Config(m));
        if self.hidden_size == 0 || self.heads == 0 {
            return err("hidden_size and heads must be positive".into());
        }
        if !self.hidden_size.is_multiple_of(self.heads) {
            return err(format!(
                "hidden_size {} is not divisible by heads {}",
                self.hidden_size, self.heads
            ));
        }
        if self.layers_ssb + self.layers_gle == 0 || self.layers_ssb + self.layers_lde == 0 {
            return err("each branch needs at least one layer including the backbone".into());
        }
        if self.ffn_size == 0 || self.vocab_size == 0 {
            return err("ffn_size and vocab_size must be positive".into());
        }
        if self.max_len < 2 {
            return err("max_len must be at least 2".into());
        }
        Ok(())
    }

    /// Canonical little-endian encoding, shared by the checkpoint header.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 * 4 + 8);
        for v in [
            self.hidden_size,
            self.heads,
            self.layers_ssb,
            self.layers_gle,
            self.layers_lde,
            self.ffn_size,
            self.max_len,
            self.vocab_size,
        ] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        out.extend_from_slice(&self.seed.to_le_bytes());
        out
    }

    pub fn fingerprint(&self) -> u64 {
        crate::hash::fnv1a(&self.to_bytes())
    }
}

/// All encoder tensors. The embeddings belong to the backbone group.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub config: EncoderConfig,
    pub token_embedding: Mat,
    pub position_embedding: Mat,
    pub embedding_norm: NormParams,
    pub backbone: Vec<LayerParams>,
    pub lexicon: Vec<LayerParams>,
    pub dense: Vec<LayerParams>,
}

/// Which of the three parameter groups a tensor belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Stack {
    Backbone,
    Lexicon,
    Dense,
}

impl Stack {
    pub fn prefix(self) -> &'static str {
        match self {
            Stack::Backbone => "backbone",
            Stack::Lexicon => "lexicon",
            Stack::Dense => "dense",
        }
    }
}

impl EncoderParams {
    /// Deterministic initialisation from `config.seed`: Xavier-uniform
    /// weights, uniform embeddings, zero biases, unit norm scales.
    pub fn init(config: EncoderConfig) -> Result<Self, EncoderError> {
        config.validate()?;
        let h = config.hidden_size;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let emb_bound = (3.0 / h as f64).sqrt();
        let token_embedding = layer::uniform(&mut rng, config.vocab_size, h, emb_bound);
        let position_embedding = layer::uniform(&mut rng, config.max_len, h, emb_bound);
        let mut stack = |n: usize| -> Vec<LayerParams> {
            (0..n)
                .map(|_| LayerParams::init(&mut rng, h, config.ffn_size))
                .collect()
        };
        let backbone = stack(config.layers_ssb);
        let lexicon = stack(config.layers_gle);
        let dense = stack(config.layers_lde);
        Ok(Self {
            config,
            token_embedding,
            position_embedding,
            embedding_norm: NormParams::new(h),
            backbone,
            lexicon,
            dense,
        })
    }

    /// Same shapes, all zeros. Used as a gradient accumulator.
    pub fn zeros_like(&self) -> Self {
        let c = self.config;
        let h = c.hidden_size;
        let z = |n: usize| (0..n).map(|_| LayerParams::zeros(h, c.ffn_size)).collect();
        Self {
            config: c,
            token_embedding: Mat::zeros(self.token_embedding.dim()),
            position_embedding: Mat::zeros(self.position_embedding.dim()),
            embedding_norm: NormParams::zeros(h),
            backbone: z(c.layers_ssb),
            lexicon: z(c.layers_gle),
            dense: z(c.layers_lde),
        }
    }

    /// Closed form: embeddings + embedding norm + every layer.
    pub fn expected_count(c: &EncoderConfig) -> usize {
        let h = c.hidden_size;
        c.vocab_size * h
            + c.max_len * h
            + 2 * h
            + (c.layers_ssb + c.layers_gle + c.layers_lde) * LayerParams::count(h, c.ffn_size)
    }

    pub fn num_params(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn stack(&self, which: Stack) -> &[LayerParams] {
        match which {
            Stack::Backbone => &self.backbone,
            Stack::Lexicon => &self.lexicon,
            Stack::Dense => &self.dense,
        }
    }

    pub fn stack_mut(&mut self, which: Stack) -> &mut Vec<LayerParams> {
        match which {
            Stack::Backbone => &mut self.backbone,
            Stack::Lexicon => &mut self.lexicon,
            Stack::Dense => &mut self.dense,
        }
    }

    /// Every tensor with a stable dotted name, in a fixed order.
    pub fn named_tensors(&self) -> Vec<(String, &Mat)> {
        let mut out: Vec<(String, &Mat)> = vec![
            ("backbone.embed.token".into(), &self.token_embedding),
            ("backbone.embed.position".into(), &self.position_embedding),
            ("backbone.embed.norm.gamma".into(), &self.embedding_norm.gamma),
            ("backbone.embed.norm.beta".into(), &self.embedding_norm.beta),
        ];
        for which in [Stack::Backbone, Stack::Lexicon, Stack::Dense] {
            for (i, l) in self.stack(which).iter().enumerate() {
                for (name, t) in layer::LAYER_TENSOR_NAMES.iter().zip(l.tensors()) {
                    out.push((format!("{}.{i}.{name}", which.prefix()), t));
                }
            }
        }
        out
    }

    /// Mutable tensors in `named_tensors` order.
    pub fn tensors_mut(&mut self) -> Vec<&mut Mat> {
        let mut out: Vec<&mut Mat> = vec![
            &mut self.token_embedding,
            &mut self.position_embedding,
            &mut self.embedding_norm.gamma,
            &mut self.embedding_norm.beta,
        ];
        for l in self.backbone.iter_mut() {
            out.extend(l.tensors_mut());
        }
        for l in self.lexicon.iter_mut() {
            out.extend(l.tensors_mut());
        }
        for l in self.dense.iter_mut() {
            out.extend(l.tensors_mut());
        }
        out
    }

    fn add_sequence_grads(&mut self, g: &SequenceGrads) {
        for (id, row) in &g.token_rows {
            let mut dst = self.token_embedding.row_mut(*id);
            dst += row;
        }
        let n = g.position.nrows();
        let mut pos = self.position_embedding.slice_mut(s![..n, ..]);
        pos += &g.position;
        self.embedding_norm.gamma += &g.embedding_norm.gamma;
        self.embedding_norm.beta += &g.embedding_norm.beta;
        for (dst, src) in [
            (&mut self.backbone, &g.backbone),
            (&mut self.lexicon, &g.lexicon),
            (&mut self.dense, &g.dense),
        ] {
            for (a, b) in dst.iter_mut().zip(src) {
                a.add_assign(b);
            }
        }
    }
}

/// Right-padded token ids and attention mask, `batch_size × seq_len`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PaddedBatch {
    ids: Vec<TermId>,
    mask: Vec<u8>,
    batch_size: usize,
    seq_len: usize,
}

impl PaddedBatch {
    pub fn new(ids: Vec<TermId>, mask: Vec<u8>, batch_size: usize, seq_len: usize) -> Result<Self, EncoderError> {
        if ids.len() != batch_size * seq_len || mask.len() != ids.len() {
            return Err(EncoderError::Batch(format!(
                "expected {batch_size}x{seq_len} ids and mask, got {} and {}",
                ids.len(),
                mask.len()
            )));
        }
        for row in mask.chunks(seq_len.max(1)) {
            let active = row.iter().take_while(|&&m| m == 1).count();
            if active < 2 || row[active..].iter().any(|&m| m != 0) {
                return Err(EncoderError::Batch(
                    "mask rows must be a prefix of at least two ones followed by zeros".into(),
                ));
            }
        }
        Ok(Self {
            ids,
            mask,
            batch_size,
            seq_len,
        })
    }

    /// Pads every text to the longest one with `pad_id`.
    pub fn from_texts(texts: &[&TokenizedText], pad_id: TermId) -> Self {
        let seq_len = texts.iter().map(|t| t.len()).max().unwrap_or(0);
        let mut ids = Vec::with_capacity(texts.len() * seq_len);
        let mut mask = Vec::with_capacity(texts.len() * seq_len);
        for t in texts {
            ids.extend_from_slice(&t.token_ids);
            mask.extend_from_slice(&t.attention_mask);
            for _ in t.len()..seq_len {
                ids.push(pad_id);
                mask.push(0);
            }
        }
        Self {
            ids,
            mask,
            batch_size: texts.len(),
            seq_len,
        }
    }

    pub fn batch_size(&self) -> usize {
        self.batch_size
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    pub fn ids(&self, b: usize) -> &[TermId] {
        &self.ids[b * self.seq_len..(b + 1) * self.seq_len]
    }

    pub fn mask(&self, b: usize) -> &[u8] {
        &self.mask[b * self.seq_len..(b + 1) * self.seq_len]
    }

    /// Same rows in a new order: row `i` of the result is row `order[i]`.
    pub fn permuted(&self, order: &[usize]) -> Self {
        let mut ids = Vec::with_capacity(self.ids.len());
        let mut mask = Vec::with_capacity(self.mask.len());
        for &b in order {
            ids.extend_from_slice(self.ids(b));
            mask.extend_from_slice(self.mask(b));
        }
        Self {
            ids,
            mask,
            batch_size: order.len(),
            seq_len: self.seq_len,
        }
    }
}

/// Backbone, lexicon-branch and dense-branch states, each `[B, N, H]`.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderOutputs {
    pub backbone: Array3<f64>,
    pub lexicon: Array3<f64>,
    pub dense: Array3<f64>,
}

/// Everything the backward pass needs from a forward pass.
#[derive(Debug, Clone)]
pub struct EncoderCache {
    seqs: Vec<SequenceCache>,
}

#[derive(Debug, Clone)]
struct SequenceCache {
    embed_norm: NormCache,
    backbone: Vec<LayerCache>,
    lexicon: Vec<LayerCache>,
    dense: Vec<LayerCache>,
}

struct SequenceOutput {
    s: Mat,
    l: Mat,
    d: Mat,
    cache: SequenceCache,
}

struct SequenceGrads {
    token_rows: Vec<(usize, ndarray::Array1<f64>)>,
    position: Mat,
    embedding_norm: NormParams,
    backbone: Vec<LayerParams>,
    lexicon: Vec<LayerParams>,
    dense: Vec<LayerParams>,
}

fn run_stack(layers: &[LayerParams], x: Mat, mask: &[u8], heads: usize) -> (Mat, Vec<LayerCache>) {
    let mut caches = Vec::with_capacity(layers.len());
    let mut cur = x;
    for l in layers {
        let (y, c) = layer_forward(l, &cur, mask, heads);
        caches.push(c);
        cur = y;
    }
    (cur, caches)
}

fn backprop_stack(
    layers: &[LayerParams],
    caches: &[LayerCache],
    dy: Mat,
    heads: usize,
    grads: &mut [LayerParams],
) -> Mat {
    let mut d = dy;
    for ((l, c), g) in layers.iter().zip(caches).zip(grads.iter_mut()).rev() {
        d = layer_backward(l, c, &d, heads, g);
    }
    d
}

impl EncoderParams {
    fn check_batch(&self, batch: &PaddedBatch) -> Result<(), EncoderError> {
        if batch.seq_len > self.config.max_len {
            return Err(EncoderError::Length {
                len: batch.seq_len,
                max_len: self.config.max_len,
            });
        }
        if let Some(&id) = batch.ids.iter().find(|&&id| id as usize >= self.config.vocab_size) {
            return Err(EncoderError::TokenOutOfRange {
                id,
                vocab_size: self.config.vocab_size,
            });
        }
        Ok(())
    }

    fn forward_sequence(&self, ids: &[TermId], mask: &[u8]) -> SequenceOutput {
        let heads = self.config.heads;
        let n = ids.len();
        let mut x = self.position_embedding.slice(s![..n, ..]).to_owned();
        for (i, &id) in ids.iter().enumerate() {
            let mut row = x.row_mut(i);
            row += &self.token_embedding.row(id as usize);
        }
        let (emb, embed_norm) = layer_norm(&x, &self.embedding_norm);
        let (s, backbone) = run_stack(&self.backbone, emb, mask, heads);
        let (l, lexicon) = run_stack(&self.lexicon, s.clone(), mask, heads);
        let (d, dense) = run_stack(&self.dense, s.clone(), mask, heads);
        SequenceOutput {
            s,
            l,
            d,
            cache: SequenceCache {
                embed_norm,
                backbone,
                lexicon,
                dense,
            },
        }
    }

    fn run(&self, batch: &PaddedBatch) -> Result<(EncoderOutputs, EncoderCache), EncoderError> {
        self.check_batch(batch)?;
        let seqs: Vec<SequenceOutput> = (0..batch.batch_size)
            .into_par_iter()
            .map(|b| self.forward_sequence(batch.ids(b), batch.mask(b)))
            .collect();
        let shape = (batch.batch_size, batch.seq_len, self.config.hidden_size);
        let mut out = EncoderOutputs {
            backbone: Array3::zeros(shape),
            lexicon: Array3::zeros(shape),
            dense: Array3::zeros(shape),
        };
        for (b, seq) in seqs.iter().enumerate() {
            out.backbone.index_axis_mut(Axis(0), b).assign(&seq.s);
            out.lexicon.index_axis_mut(Axis(0), b).assign(&seq.l);
            out.dense.index_axis_mut(Axis(0), b).assign(&seq.d);
        }
        let cache = EncoderCache {
            seqs: seqs.into_iter().map(|s| s.cache).collect(),
        };
        Ok((out, cache))
    }

    /// Encodes a padded batch. Padded key positions receive no attention.
    pub fn forward(&self, batch: &PaddedBatch) -> Result<EncoderOutputs, EncoderError> {
        self.run(batch).map(|(o, _)| o)
    }

    /// Forward pass that also keeps the activations needed by [`backward`](Self::backward).
    pub fn forward_with_cache(&self, batch: &PaddedBatch) -> Result<(EncoderOutputs, EncoderCache), EncoderError> {
        self.run(batch)
    }

    /// Parameter gradients given upstream gradients on the lexicon and dense
    /// branch outputs (both `[B, N, H]`). The backbone output is not
    /// consumed directly by any loss. Per-sequence gradients are summed in
    /// batch order, so the result does not depend on thread scheduling.
    pub fn backward(
        &self,
        batch: &PaddedBatch,
        cache: &EncoderCache,
        grad_lexicon: &Array3<f64>,
        grad_dense: &Array3<f64>,
    ) -> EncoderParams {
        let heads = self.config.heads;
        let h = self.config.hidden_size;
        let f = self.config.ffn_size;
        let per_seq: Vec<SequenceGrads> = (0..batch.batch_size)
            .into_par_iter()
            .map(|b| {
                let c = &cache.seqs[b];
                let zeros = |n: usize| -> Vec<LayerParams> { (0..n).map(|_| LayerParams::zeros(h, f)).collect() };
                let mut g_lex = zeros(self.lexicon.len());
                let mut g_den = zeros(self.dense.len());
                let mut g_bb = zeros(self.backbone.len());
                let dl = grad_lexicon.index_axis(Axis(0), b).to_owned();
                let dd = grad_dense.index_axis(Axis(0), b).to_owned();
                let mut ds = backprop_stack(&self.lexicon, &c.lexicon, dl, heads, &mut g_lex);
                ds += &backprop_stack(&self.dense, &c.dense, dd, heads, &mut g_den);
                let demb = backprop_stack(&self.backbone, &c.backbone, ds, heads, &mut g_bb);
                let mut g_norm = NormParams::zeros(h);
                let dx = layer_norm_backward(&demb, &self.embedding_norm, &c.embed_norm, &mut g_norm);
                let ids = batch.ids(b);
                let mask = batch.mask(b);
                let token_rows = ids
                    .iter()
                    .enumerate()
                    .filter(|(i, _)| mask[*i] == 1)
                    .map(|(i, &id)| (id as usize, dx.row(i).to_owned()))
                    .collect();
                SequenceGrads {
                    token_rows,
                    position: dx,
                    embedding_norm: g_norm,
                    backbone: g_bb,
                    lexicon: g_lex,
                    dense: g_den,
                }
            })
            .collect();
        let mut grads = self.zeros_like();
        for g in &per_seq {
            grads.add_sequence_grads(g);
        }
        grads
    }
}
