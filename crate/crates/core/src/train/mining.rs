//! Hard-negative mining from a first-stage hybrid index.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::eval::Qrels;
use crate::hash::fnv1a;
use crate::index::{IndexArtifacts, IndexError};
use crate::model::Model;
use crate::text::{tokenize, Vocab};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MiningConfig {
    /// Retrieval depth.
    pub depth: usize,
    /// Best (smallest) 1-based rank eligible for sampling.
    pub min_rank: usize,
    pub per_query: usize,
    pub k_candidates: usize,
    pub seed: u64,
}

impl Default for MiningConfig {
    fn default() -> Self {
        Self {
            depth: 100,
            min_rank: 20,
            per_query: 3,
            k_candidates: 1000,
            seed: 42,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MinedNegative {
    pub doc_id: String,
    /// 1-based rank in the first-stage hybrid ranking.
    pub rank: usize,
}

/// Samples from the non-positive documents at ranks `min_rank..=depth` of
/// `ranked`. Takes all of them when fewer than `per_query` qualify.
/// The result is ordered by rank.
pub fn select_negatives(
    ranked: &[String],
    is_positive: impl Fn(&str) -> bool,
    cfg: &MiningConfig,
    rng: &mut ChaCha8Rng,
) -> Vec<MinedNegative> {
    let mut pool: Vec<MinedNegative> = ranked
        .iter()
        .enumerate()
        .map(|(i, d)| (i + 1, d))
        .filter(|&(rank, d)| rank >= cfg.min_rank && rank <= cfg.depth && !is_positive(d))
        .map(|(rank, d)| MinedNegative {
            doc_id: d.clone(),
            rank,
        })
        .collect();
    if pool.len() > cfg.per_query {
        pool.shuffle(rng);
        pool.truncate(cfg.per_query);
        pool.sort_by_key(|n| n.rank);
    }
    pool
}

/// For every `(qid, text)` query, retrieves the hybrid top `depth` from
/// `index` and samples hard negatives. The generator for each query is
/// seeded from the config seed and the query id, so results do not depend
/// on query order.
pub fn mine_hard_negatives(
    model: &Model,
    vocab: &Vocab,
    index: &IndexArtifacts,
    queries: &[(String, String)],
    qrels: &Qrels,
    cfg: &MiningConfig,
) -> Result<BTreeMap<String, Vec<MinedNegative>>, IndexError> {
    let toks: Vec<_> = queries
        .iter()
        .map(|(_, t)| tokenize(t, vocab, model.config().max_len))
        .collect();
    let encoded = model.encode(&toks, vocab)?;
    let mut out = BTreeMap::new();
    for ((qid, _), enc) in queries.iter().zip(&encoded) {
        let hits = index.search_hybrid(&enc.sparse, &enc.dense, cfg.depth, cfg.k_candidates.max(cfg.depth))?;
        if hits.is_empty() {
            log::warn!("query {qid}: nothing retrieved");
        }
        let ranked: Vec<String> = hits.into_iter().map(|h| h.doc_id).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ fnv1a(qid.as_bytes()));
        let negs = select_negatives(&ranked, |d| qrels.is_relevant(qid, d), cfg, &mut rng);
        out.insert(qid.clone(), negs);
    }
    Ok(out)
}
