//! Contrastive and union losses, and the full training objective with its
//! gradient with respect to every model parameter.

use std::collections::BTreeMap;

use ndarray::{s, Array1, Array2, Array3, Axis};

use crate::encoder::PaddedBatch;
use crate::heads::{real_range, softmax_rows, UnionProbs};
use crate::model::Model;
use crate::segmentation::BmesLabels;
use crate::text::{TermId, TokenizedText, Vocab};

use super::TrainError;

/// A tokenized text with its reference BMES labels over the real tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelledText {
    pub tok: TokenizedText,
    pub labels: BmesLabels,
}

/// One query with its positive and hard negatives, as indices into
/// [`TrainBatch::texts`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PairIndices {
    pub query: usize,
    pub pos: usize,
    pub negs: Vec<usize>,
}

/// Texts encoded together in one step. Every text contributes to the union
/// loss; `pairs` drive the two contrastive losses.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainBatch {
    pub texts: Vec<LabelledText>,
    pub pairs: Vec<PairIndices>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub lexicon: f64,
    pub dense: f64,
    pub union: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lexicon: 1.0,
            dense: 1.0,
            union: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossParts {
    pub lexicon: f64,
    pub dense: f64,
    pub union: f64,
    pub total: f64,
}

impl LossParts {
    pub fn is_finite(&self) -> bool {
        self.lexicon.is_finite() && self.dense.is_finite() && self.union.is_finite() && self.total.is_finite()
    }
}

/// `-log(e^{pos/τ} / (e^{pos/τ} + Σ e^{neg/τ}))` with max-subtraction.
/// Returns the loss and its gradient with respect to `[pos, negs...]`.
pub fn contrastive_with_grad(pos: f64, negs: &[f64], tau: f64) -> (f64, Vec<f64>) {
    if negs.is_empty() {
        log::debug!("contrastive loss with no negatives");
    }
    let logits: Vec<f64> = std::iter::once(pos)
        .chain(negs.iter().copied())
        .map(|s| s / tau)
        .collect();
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    let loss = if logits[0] == max {
        exps[1..].iter().sum::<f64>().ln_1p()
    } else {
        sum.ln() - (logits[0] - max)
    };
    let grad = exps
        .iter()
        .enumerate()
        .map(|(i, e)| (e / sum - if i == 0 { 1.0 } else { 0.0 }) / tau)
        .collect();
    (loss.max(0.0), grad)
}

pub fn contrastive_loss(pos: f64, negs: &[f64], tau: f64) -> f64 {
    contrastive_with_grad(pos, negs, tau).0
}

/// Mean over tokens of `-ln p(true class)`.
pub fn union_loss(probs: &UnionProbs, labels: &BmesLabels) -> Result<f64, TrainError> {
    if probs.len() != labels.len() {
        return Err(TrainError::Align {
            tokens: probs.len(),
            labels: labels.len(),
        });
    }
    if labels.is_empty() {
        return Ok(0.0);
    }
    let sum: f64 = labels
        .0
        .iter()
        .enumerate()
        .map(|(i, l)| -probs.0[[i, l.index()]].ln())
        .sum();
    Ok(sum / labels.len() as f64)
}

/// Per-text head activations kept for the backward pass.
struct TextState {
    range: std::ops::Range<usize>,
    probs: Array2<f64>,
    weight_logits: Array1<f64>,
    /// Token weights divided by their L2 norm (zero when the norm is zero).
    unit_weights: Array1<f64>,
    weight_norm: f64,
    /// Term id → (max normalized weight, real-token index holding it).
    pooled: BTreeMap<TermId, (f64, usize)>,
    dense_unit: Array1<f64>,
    dense_norm: f64,
}

fn text_state(
    model: &Model,
    l: ndarray::ArrayView2<f64>,
    d: ndarray::ArrayView2<f64>,
    mask: &[u8],
    tok: &TokenizedText,
    unk: TermId,
) -> TextState {
    let heads = &model.heads;
    let range = real_range(mask);
    let real = l.slice(s![range.clone(), ..]);
    let mut probs = real.dot(&heads.union_w) + &heads.union_b;
    softmax_rows(&mut probs);
    let weight_logits = (real.dot(&heads.weight_w) + &heads.weight_b).index_axis_move(Axis(1), 0);
    let weights = weight_logits.mapv(crate::heads::saturate);
    let weight_norm = weights.dot(&weights).sqrt();
    let unit_weights = if weight_norm > 0.0 {
        &weights / weight_norm
    } else {
        Array1::zeros(weights.len())
    };
    let mut pooled: BTreeMap<TermId, (f64, usize)> = BTreeMap::new();
    for (i, &id) in tok.real_ids().iter().enumerate().take(unit_weights.len()) {
        let w = unit_weights[i];
        if id == unk || w <= 0.0 {
            continue;
        }
        let e = pooled.entry(id).or_insert((w, i));
        if w > e.0 {
            *e = (w, i);
        }
    }
    let dense_raw = d.row(0).dot(&heads.dense_w) + heads.dense_b.row(0);
    let dense_norm = dense_raw.dot(&dense_raw).sqrt();
    let dense_unit = if dense_norm > 0.0 {
        &dense_raw / dense_norm
    } else {
        Array1::zeros(dense_raw.len())
    };
    TextState {
        range,
        probs,
        weight_logits,
        unit_weights,
        weight_norm,
        pooled,
        dense_unit,
        dense_norm,
    }
}

fn lexicon_score(a: &TextState, b: &TextState) -> f64 {
    a.pooled
        .iter()
        .filter_map(|(id, (wa, _))| b.pooled.get(id).map(|(wb, _)| wa * wb))
        .sum()
}

/// Candidates of pair `i`: its positive, its hard negatives, then the
/// positives of the other pairs whose text differs from its own positive.
fn candidates(batch: &TrainBatch, i: usize) -> Vec<usize> {
    let pair = &batch.pairs[i];
    let pos_text = &batch.texts[pair.pos].tok.original_text;
    let mut out = vec![pair.pos];
    out.extend(pair.negs.iter().copied());
    for (j, other) in batch.pairs.iter().enumerate() {
        if j != i && batch.texts[other.pos].tok.original_text != *pos_text && !out.contains(&other.pos) {
            out.push(other.pos);
        }
    }
    out
}

fn validate(batch: &TrainBatch) -> Result<(), TrainError> {
    let n = batch.texts.len();
    for t in &batch.texts {
        if t.labels.len() != t.tok.real_len() {
            return Err(TrainError::Align {
                tokens: t.tok.real_len(),
                labels: t.labels.len(),
            });
        }
    }
    for p in &batch.pairs {
        if p.query >= n || p.pos >= n || p.negs.iter().any(|&j| j >= n) {
            return Err(TrainError::Batch("pair index out of range".into()));
        }
    }
    Ok(())
}

/// Loss value only.
pub fn total_loss(
    model: &Model,
    batch: &TrainBatch,
    vocab: &Vocab,
    tau: f64,
    weights: LossWeights,
) -> Result<LossParts, TrainError> {
    Ok(run(model, batch, vocab, tau, weights, false)?.0)
}

/// Loss and the gradient of the weighted total with respect to every
/// parameter, returned as a model-shaped tensor set.
pub fn total_loss_and_grads(
    model: &Model,
    batch: &TrainBatch,
    vocab: &Vocab,
    tau: f64,
    weights: LossWeights,
) -> Result<(LossParts, Model), TrainError> {
    let (parts, grads) = run(model, batch, vocab, tau, weights, true)?;
    Ok((parts, grads.expect("gradients requested")))
}

fn run(
    model: &Model,
    batch: &TrainBatch,
    vocab: &Vocab,
    tau: f64,
    weights: LossWeights,
    want_grads: bool,
) -> Result<(LossParts, Option<Model>), TrainError> {
    validate(batch)?;
    if batch.texts.is_empty() {
        return Ok((LossParts::default(), want_grads.then(|| model.zeros_like())));
    }
    let refs: Vec<&TokenizedText> = batch.texts.iter().map(|t| &t.tok).collect();
    let padded = PaddedBatch::from_texts(&refs, vocab.pad_id());
    let (out, cache) = model.encoder.forward_with_cache(&padded)?;
    let unk = vocab.unk_id();
    let states: Vec<TextState> = (0..batch.texts.len())
        .map(|b| {
            text_state(
                model,
                out.lexicon.index_axis(Axis(0), b),
                out.dense.index_axis(Axis(0), b),
                padded.mask(b),
                &batch.texts[b].tok,
                unk,
            )
        })
        .collect();

    // Union cross-entropy, averaged over every real token in the batch.
    let total_tokens: usize = batch.texts.iter().map(|t| t.labels.len()).sum();
    let mut union_sum = 0.0;
    for (st, t) in states.iter().zip(&batch.texts) {
        for (i, l) in t.labels.0.iter().enumerate() {
            union_sum -= st.probs[[i, l.index()]].ln();
        }
    }
    let union = if total_tokens > 0 {
        union_sum / total_tokens as f64
    } else {
        0.0
    };

    // Contrastive losses; gradients collected on the pair scores.
    let n_pairs = batch.pairs.len();
    let mut lex_sum = 0.0;
    let mut den_sum = 0.0;
    let mut lex_edges: Vec<(usize, usize, f64)> = Vec::new();
    let mut den_edges: Vec<(usize, usize, f64)> = Vec::new();
    for i in 0..n_pairs {
        let q = batch.pairs[i].query;
        let cands = candidates(batch, i);
        let lex: Vec<f64> = cands.iter().map(|&c| lexicon_score(&states[q], &states[c])).collect();
        let den: Vec<f64> = cands
            .iter()
            .map(|&c| states[q].dense_unit.dot(&states[c].dense_unit))
            .collect();
        let (ll, lg) = contrastive_with_grad(lex[0], &lex[1..], tau);
        let (dl, dg) = contrastive_with_grad(den[0], &den[1..], tau);
        lex_sum += ll;
        den_sum += dl;
        let scale = 1.0 / n_pairs as f64;
        for (k, &c) in cands.iter().enumerate() {
            lex_edges.push((q, c, lg[k] * scale * weights.lexicon));
            den_edges.push((q, c, dg[k] * scale * weights.dense));
        }
    }
    let (lexicon, dense) = if n_pairs > 0 {
        (lex_sum / n_pairs as f64, den_sum / n_pairs as f64)
    } else {
        (0.0, 0.0)
    };
    let parts = LossParts {
        lexicon,
        dense,
        union,
        total: weights.lexicon * lexicon + weights.dense * dense + weights.union * union,
    };
    if !want_grads {
        return Ok((parts, None));
    }

    let mut grads = model.zeros_like();
    let h = model.config().hidden_size;
    let shape = (batch.texts.len(), padded.seq_len(), h);
    let mut grad_l = Array3::<f64>::zeros(shape);
    let mut grad_d = Array3::<f64>::zeros(shape);

    // Score gradients → pooled weights / unit dense vectors.
    let mut d_pooled: Vec<BTreeMap<TermId, f64>> = vec![BTreeMap::new(); states.len()];
    for &(a, b, g) in &lex_edges {
        if g == 0.0 {
            continue;
        }
        for (id, (wa, _)) in &states[a].pooled {
            if let Some((wb, _)) = states[b].pooled.get(id) {
                *d_pooled[a].entry(*id).or_default() += g * wb;
                *d_pooled[b].entry(*id).or_default() += g * wa;
            }
        }
    }
    let mut d_unit: Vec<Array1<f64>> = vec![Array1::zeros(h); states.len()];
    for &(a, b, g) in &den_edges {
        let vb = states[b].dense_unit.clone();
        let va = states[a].dense_unit.clone();
        d_unit[a].scaled_add(g, &vb);
        d_unit[b].scaled_add(g, &va);
    }

    let heads = &model.heads;
    for (b, st) in states.iter().enumerate() {
        let l = out.lexicon.index_axis(Axis(0), b);
        let real = l.slice(s![st.range.clone(), ..]);
        let n = st.probs.nrows();
        let mut d_real = Array2::<f64>::zeros((n, h));

        // Union head.
        if total_tokens > 0 && weights.union != 0.0 {
            let mut du = st.probs.clone();
            for (i, lab) in batch.texts[b].labels.0.iter().enumerate() {
                du[[i, lab.index()]] -= 1.0;
            }
            du *= weights.union / total_tokens as f64;
            grads.heads.union_w += &real.t().dot(&du);
            grads.heads.union_b += &du.sum_axis(Axis(0)).insert_axis(Axis(0));
            d_real += &du.dot(&heads.union_w.t());
        }

        // Weight head through max-pooling and token-level normalization.
        if !d_pooled[b].is_empty() && st.weight_norm > 0.0 {
            let mut d_unit_w = Array1::<f64>::zeros(n);
            for (id, g) in &d_pooled[b] {
                let (_, i) = st.pooled[id];
                d_unit_w[i] += g;
            }
            let proj = st.unit_weights.dot(&d_unit_w);
            let d_w = (&d_unit_w - &(&st.unit_weights * proj)) / st.weight_norm;
            let d_x =
                Array1::from_iter(
                    d_w.iter()
                        .zip(&st.weight_logits)
                        .map(|(&g, &x)| if x > 0.0 { g / (1.0 + x) } else { 0.0 }),
                );
            let d_x2 = d_x.view().insert_axis(Axis(1));
            grads.heads.weight_w += &real.t().dot(&d_x2);
            grads.heads.weight_b[[0, 0]] += d_x.sum();
            d_real += &d_x2.dot(&heads.weight_w.t());
        }
        grad_l
            .index_axis_mut(Axis(0), b)
            .slice_mut(s![st.range.clone(), ..])
            .assign(&d_real);

        // Dense head through normalization.
        if st.dense_norm > 0.0 && d_unit[b].iter().any(|&v| v != 0.0) {
            let v = &st.dense_unit;
            let dv = &d_unit[b];
            let dz = (dv - &(v * v.dot(dv))) / st.dense_norm;
            let cls = out.dense.slice(s![b, 0, ..]);
            let cls2 = cls.insert_axis(Axis(1));
            let dz2 = dz.view().insert_axis(Axis(0));
            grads.heads.dense_w += &(&cls2 * &dz2);
            grads.heads.dense_b += &dz2;
            grad_d.slice_mut(s![b, 0, ..]).assign(&heads.dense_w.dot(&dz));
        }
    }

    grads.encoder = model.encoder.backward(&padded, &cache, &grad_l, &grad_d);
    Ok((parts, Some(grads)))
}
