//! Union, weight and dense projectors, the bagging step and the
//! normalization applied to both representations before scoring.

use std::collections::btree_map::Entry;
use std::collections::BTreeMap;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::encoder::layer::{affine, xavier, zeros_row};
use crate::encoder::Mat;
use crate::hash::fnv1a;
use crate::segmentation::{groups_of, repair, Bmes};
use crate::text::{TokenizedText, Vocab};

/// Identifier of a matching unit: a base term id, or a composed-word id
/// with the high bit set.
pub type UnitId = u64;

pub const COMPOSED_NAMESPACE: u64 = 1 << 63;

/// Scale applied after L2 normalization so that the f32-rounded vector
/// still has norm at most 1 (f32 rounding moves each component by at most
/// a relative 2^-24).
pub(crate) const NORM_SHRINK: f64 = 1.0 - 1.0 / (1u64 << 22) as f64;

#[derive(Debug, Error, PartialEq)]
pub enum HeadError {
    #[error("dense projection is the zero vector")]
    DegenerateVector,
}

pub fn composed_word_id(surface: &str) -> UnitId {
    fnv1a(surface.as_bytes()) | COMPOSED_NAMESPACE
}

pub fn is_composed(id: UnitId) -> bool {
    id & COMPOSED_NAMESPACE != 0
}

/// Projector weights: union `H→4`, weight `H→1`, dense `H→H`.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams {
    pub union_w: Mat,
    pub union_b: Mat,
    pub weight_w: Mat,
    pub weight_b: Mat,
    pub dense_w: Mat,
    pub dense_b: Mat,
}

pub(crate) const HEAD_TENSOR_NAMES: [&str; 6] = [
    "union_proj.w",
    "union_proj.b",
    "weight_proj.w",
    "weight_proj.b",
    "dense_proj.w",
    "dense_proj.b",
];

impl HeadParams {
    pub fn init(h: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x4845_4144_5321);
        Self {
            union_w: xavier(&mut rng, h, 4),
            union_b: zeros_row(4),
            weight_w: xavier(&mut rng, h, 1),
            weight_b: zeros_row(1),
            dense_w: xavier(&mut rng, h, h),
            dense_b: zeros_row(h),
        }
    }

    pub fn zeros(h: usize) -> Self {
        Self {
            union_w: Mat::zeros((h, 4)),
            union_b: zeros_row(4),
            weight_w: Mat::zeros((h, 1)),
            weight_b: zeros_row(1),
            dense_w: Mat::zeros((h, h)),
            dense_b: zeros_row(h),
        }
    }

    pub fn hidden_size(&self) -> usize {
        self.dense_w.nrows()
    }

    pub fn count(h: usize) -> usize {
        (h * 4 + 4) + (h + 1) + (h * h + h)
    }

    pub fn tensors(&self) -> [&Mat; 6] {
        [
            &self.union_w,
            &self.union_b,
            &self.weight_w,
            &self.weight_b,
            &self.dense_w,
            &self.dense_b,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut Mat; 6] {
        [
            &mut self.union_w,
            &mut self.union_b,
            &mut self.weight_w,
            &mut self.weight_b,
            &mut self.dense_w,
            &mut self.dense_b,
        ]
    }
}

/// Rows of `[S, B, M, E]` probabilities, one per real token.
#[derive(Debug, Clone, PartialEq)]
pub struct UnionProbs(pub Array2<f64>);

impl UnionProbs {
    pub fn len(&self) -> usize {
        self.0.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.0.nrows() == 0
    }

    /// Per-token argmax; ties go to the lowest class index.
    pub fn argmax(&self) -> Vec<Bmes> {
        self.0
            .rows()
            .into_iter()
            .map(|row| {
                let mut best = 0;
                for c in 1..4 {
                    if row[c] > row[best] {
                        best = c;
                    }
                }
                Bmes::from_index(best).unwrap()
            })
            .collect()
    }
}

/// Non-negative importance per real token.
#[derive(Debug, Clone, PartialEq)]
pub struct TermWeights(pub Vec<f64>);

/// L2-normalized sequence embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseVector(pub Vec<f32>);

impl DenseVector {
    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn dot(&self, other: &DenseVector) -> f64 {
        self.0
            .iter()
            .zip(&other.0)
            .map(|(&a, &b)| f64::from(a) * f64::from(b))
            .sum()
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SparseUnit {
    pub weight: f32,
    pub surface: String,
    /// Highest winning-class union probability among the unit's tokens.
    pub confidence: f32,
}

/// Unit id → weight map used for lexicon matching.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SparseRepresentation {
    pub units: BTreeMap<UnitId, SparseUnit>,
}

impl SparseRepresentation {
    pub fn from_weights<I: IntoIterator<Item = (UnitId, f32)>>(weights: I) -> Self {
        let units = weights
            .into_iter()
            .map(|(id, w)| {
                (
                    id,
                    SparseUnit {
                        weight: w,
                        surface: String::new(),
                        confidence: 1.0,
                    },
                )
            })
            .collect();
        Self { units }
    }

    pub fn len(&self) -> usize {
        self.units.len()
    }

    pub fn is_empty(&self) -> bool {
        self.units.is_empty()
    }

    pub fn weight(&self, id: UnitId) -> Option<f32> {
        self.units.get(&id).map(|u| u.weight)
    }

    pub fn norm(&self) -> f64 {
        self.units
            .values()
            .map(|u| f64::from(u.weight) * f64::from(u.weight))
            .sum::<f64>()
            .sqrt()
    }

    /// Sum of weight products over shared units.
    pub fn dot(&self, other: &SparseRepresentation) -> f64 {
        let (small, large) = if self.len() <= other.len() {
            (self, other)
        } else {
            (other, self)
        };
        small
            .units
            .iter()
            .filter_map(|(id, u)| large.units.get(id).map(|v| f64::from(u.weight) * f64::from(v.weight)))
            .sum()
    }
}

/// Indices of the real tokens (mask 1, excluding the first and last active
/// positions, which are `[CLS]` and `[SEP]`).
pub(crate) fn real_range(mask: &[u8]) -> std::ops::Range<usize> {
    let active = mask.iter().filter(|&&m| m == 1).count();
    1..active.saturating_sub(1).max(1)
}

pub(crate) fn softmax_rows(logits: &mut Array2<f64>) {
    for mut row in logits.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
}

/// `softmax(l_i · w_u + b_u)` for every real token of one sequence
/// (`lexicon` is `[N, H]`).
pub fn union_probs(lexicon: ArrayView2<f64>, params: &HeadParams, mask: &[u8]) -> UnionProbs {
    let real = lexicon.slice(ndarray::s![real_range(mask), ..]);
    let mut logits = affine(&real, &params.union_w, &params.union_b);
    softmax_rows(&mut logits);
    UnionProbs(logits)
}

/// Pre-activation `l_i · w_w + b_w` for every real token.
pub(crate) fn weight_logits(lexicon: ArrayView2<f64>, params: &HeadParams, mask: &[u8]) -> Array1<f64> {
    let real = lexicon.slice(ndarray::s![real_range(mask), ..]);
    affine(&real, &params.weight_w, &params.weight_b).index_axis_move(Axis(1), 0)
}

/// `ln(1 + relu(x))`.
pub fn saturate(x: f64) -> f64 {
    x.max(0.0).ln_1p()
}

/// `log(1 + relu(l_i · w_w + b_w))` for every real token.
pub fn term_weights(lexicon: ArrayView2<f64>, params: &HeadParams, mask: &[u8]) -> TermWeights {
    TermWeights(
        weight_logits(lexicon, params, mask)
            .iter()
            .map(|&x| saturate(x))
            .collect(),
    )
}

/// Unnormalized projection of the `[CLS]` state.
pub(crate) fn dense_projection(cls: ArrayView1<f64>, params: &HeadParams) -> Array1<f64> {
    cls.dot(&params.dense_w) + params.dense_b.row(0)
}

/// Projects `d_CLS` (position 0 of `dense`, `[N, H]`) and L2-normalizes it.
pub fn dense_vector(dense: ArrayView2<f64>, params: &HeadParams) -> Result<DenseVector, HeadError> {
    let z = dense_projection(dense.row(0), params);
    normalize_dense(z.view())
}

pub(crate) fn normalize_dense(z: ArrayView1<f64>) -> Result<DenseVector, HeadError> {
    let norm = z.dot(&z).sqrt();
    if norm.is_nan() || norm <= 0.0 || !norm.is_finite() {
        return Err(HeadError::DegenerateVector);
    }
    Ok(DenseVector(
        z.iter().map(|&v| (v / norm * NORM_SHRINK) as f32).collect(),
    ))
}

/// Divides every weight by the representation's L2 norm. An empty or
/// all-zero representation is returned unchanged.
pub fn normalize_sparse(rep: SparseRepresentation) -> SparseRepresentation {
    let norm = rep.norm();
    if norm.is_nan() || norm <= 0.0 {
        return rep;
    }
    let mut rep = rep;
    for u in rep.units.values_mut() {
        u.weight = (f64::from(u.weight) / norm * NORM_SHRINK) as f32;
    }
    rep
}

/// Groups tokens into words with the union head's argmax labels and builds
/// the normalized sparse representation.
///
/// Singletons keep their base term id (an `[UNK]` token is keyed by its
/// surface instead). Multi-token words are keyed by the composed-word id of
/// their concatenated surface and take the max member weight. Repeated
/// units merge by max, zero-weight units are dropped, and the result is
/// L2-normalized.
pub fn bag(tok: &TokenizedText, probs: &UnionProbs, weights: &TermWeights, vocab: &Vocab) -> SparseRepresentation {
    let n = tok.real_len().min(probs.len()).min(weights.0.len());
    let mut labels = probs.argmax();
    labels.truncate(n);
    let labels = repair(&labels);
    let ids = tok.real_ids();

    let mut pre: BTreeMap<UnitId, (f64, String, f64)> = BTreeMap::new();
    for group in groups_of(&labels) {
        let weight = group.iter().map(|&i| weights.0[i]).fold(0.0, f64::max);
        let confidence = group
            .iter()
            .map(|&i| probs.0.row(i).fold(0.0f64, |m, &p| m.max(p)))
            .fold(0.0, f64::max);
        let surface: String = group.iter().map(|&i| tok.surface(i + 1)).collect();
        let id = if group.len() == 1 && ids[group[0]] != vocab.unk_id() {
            UnitId::from(ids[group[0]])
        } else {
            composed_word_id(&surface)
        };
        match pre.entry(id) {
            Entry::Vacant(e) => {
                e.insert((weight, surface, confidence));
            }
            Entry::Occupied(mut e) => {
                let slot = e.get_mut();
                slot.0 = slot.0.max(weight);
                slot.2 = slot.2.max(confidence);
            }
        }
    }

    let norm = pre.values().map(|(w, _, _)| w * w).sum::<f64>().sqrt();
    if norm.is_nan() || norm <= 0.0 {
        return SparseRepresentation::default();
    }
    let units = pre
        .into_iter()
        .filter(|(_, (w, _, _))| *w > 0.0)
        .map(|(id, (w, surface, confidence))| {
            (
                id,
                SparseUnit {
                    weight: (w / norm * NORM_SHRINK) as f32,
                    surface,
                    confidence: confidence as f32,
                },
            )
        })
        .collect();
    SparseRepresentation { units }
}
