//! Oracle checks shared by the `selfcheck` command and the test suites.

use std::path::Path;

use ndarray::Array2;
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::encoder::EncoderConfig;
use crate::heads::{DenseVector, SparseRepresentation, UnitId, NORM_SHRINK};
use crate::index::{IndexArtifacts, IndexBuilder, ScoredHit};
use crate::model::Model;
use crate::segmentation::{Bmes, BmesLabels};
use crate::text::{TokenizedText, Vocab};
use crate::train::{total_loss, total_loss_and_grads, LabelledText, LossWeights, PairIndices, TrainBatch};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl CheckResult {
    fn new(name: &str, passed: bool, detail: String) -> Self {
        Self {
            name: name.to_string(),
            passed,
            detail,
        }
    }
}

// ---------------------------------------------------------------- gradients

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckConfig {
    pub seed: u64,
    pub samples: usize,
    pub step: f64,
    pub tolerance: f64,
    pub temperature: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            seed: 3,
            samples: 240,
            step: 1e-3,
            tolerance: 1e-4,
            temperature: 0.05,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradSample {
    pub tensor: String,
    pub row: usize,
    pub col: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub samples: Vec<GradSample>,
    pub max_rel_error: f64,
    pub groups: Vec<String>,
}

/// Relative error `|a - n| / max(|a|, |n|, 1e-6)`. The floor keeps
/// coordinates whose true gradient is zero from dividing by rounding noise.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// A model with hidden size 8, 2 heads, one layer per stack and length 6.
pub fn tiny_model(seed: u64) -> (Model, Vocab) {
    let vocab = Vocab::from_tokens((0..12).map(|i| format!("t{i}"))).expect("distinct tokens");
    let config = EncoderConfig {
        hidden_size: 8,
        heads: 2,
        layers_ssb: 1,
        layers_gle: 1,
        layers_lde: 1,
        ffn_size: 32,
        max_len: 6,
        vocab_size: vocab.len(),
        seed,
    };
    let mut model = Model::init(config).expect("valid tiny config");
    // Keep the weight head away from the ReLU kink at zero.
    model.heads.weight_b[[0, 0]] = 0.5;
    (model, vocab)
}

fn random_text(rng: &mut ChaCha8Rng, vocab: &Vocab, real: usize) -> LabelledText {
    let mut ids = vec![vocab.cls_id()];
    let mut surface = String::new();
    let mut offsets = vec![None];
    for i in 0..real {
        let k = rng.random_range(0..12);
        ids.push(vocab.id(&format!("t{k}")).expect("token exists"));
        surface.push_str(&format!("t{k} "));
        offsets.push(Some(crate::text::Offset::new(i, i + 1)));
    }
    ids.push(vocab.sep_id());
    offsets.push(None);
    let n = ids.len();
    let tok = TokenizedText {
        token_ids: ids,
        offsets,
        attention_mask: vec![1; n],
        original_text: surface,
    };
    let mut raw = Vec::with_capacity(real);
    while raw.len() < real {
        match rng.random_range(0..3) {
            0 if raw.len() + 2 <= real => raw.extend([Bmes::B, Bmes::E]),
            1 if raw.len() + 3 <= real => raw.extend([Bmes::B, Bmes::M, Bmes::E]),
            _ => raw.push(Bmes::S),
        }
    }
    LabelledText {
        tok,
        labels: BmesLabels(raw),
    }
}

/// Two queries, each with a positive and one hard negative, texts of
/// 2 to 4 real tokens (sequence length up to 6).
pub fn tiny_batch(seed: u64, vocab: &Vocab) -> TrainBatch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut batch = TrainBatch::default();
    for _ in 0..2 {
        let base = batch.texts.len();
        for _ in 0..3 {
            let len = rng.random_range(2..=4);
            batch.texts.push(random_text(&mut rng, vocab, len));
        }
        batch.pairs.push(PairIndices {
            query: base,
            pos: base + 1,
            negs: vec![base + 2],
        });
    }
    batch
}

fn group_of(name: &str) -> &str {
    name.split('.').next().unwrap_or(name)
}

/// Compares analytic gradients of the full objective with central
/// differences on coordinates sampled evenly across every tensor.
pub fn gradient_check(cfg: &GradCheckConfig) -> GradCheckReport {
    let (model, vocab) = tiny_model(cfg.seed);
    let batch = tiny_batch(cfg.seed.wrapping_add(1), &vocab);
    let weights = LossWeights::default();
    let (_, grads) =
        total_loss_and_grads(&model, &batch, &vocab, cfg.temperature, weights).expect("tiny batch is valid");

    let names: Vec<(String, (usize, usize))> = model.named_tensors().into_iter().map(|(n, t)| (n, t.dim())).collect();
    let grad_tensors: Vec<Array2<f64>> = grads.named_tensors().into_iter().map(|(_, t)| t.clone()).collect();

    // Token-embedding rows of unused tokens have zero gradient; sample used
    // rows only so the check exercises real signal.
    let used: Vec<usize> = {
        let mut ids: Vec<usize> = batch
            .texts
            .iter()
            .flat_map(|t| t.tok.token_ids.iter().map(|&i| i as usize))
            .collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    };

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(2));
    let per_tensor = cfg.samples.div_ceil(names.len()).max(1);
    let mut coords = Vec::new();
    for (ti, (name, (rows, cols))) in names.iter().enumerate() {
        for _ in 0..per_tensor {
            let r = if name == "backbone.embed.token" {
                *used.choose(&mut rng).unwrap()
            } else if name == "backbone.embed.position" {
                rng.random_range(0..(*rows).min(6))
            } else {
                rng.random_range(0..*rows)
            };
            let c = rng.random_range(0..*cols);
            coords.push((ti, r, c));
        }
    }

    let loss_at = |m: &Model| {
        total_loss(m, &batch, &vocab, cfg.temperature, weights)
            .expect("tiny batch is valid")
            .total
    };
    let samples: Vec<GradSample> = coords
        .into_iter()
        .map(|(ti, r, c)| {
            let mut plus = model.clone();
            plus.tensors_mut()[ti][[r, c]] += cfg.step;
            let mut minus = model.clone();
            minus.tensors_mut()[ti][[r, c]] -= cfg.step;
            let numeric = (loss_at(&plus) - loss_at(&minus)) / (2.0 * cfg.step);
            let analytic = grad_tensors[ti][[r, c]];
            GradSample {
                tensor: names[ti].0.clone(),
                row: r,
                col: c,
                analytic,
                numeric,
                rel_error: relative_error(analytic, numeric),
            }
        })
        .collect();
    let max_rel_error = samples.iter().map(|s| s.rel_error).fold(0.0, f64::max);
    let mut groups: Vec<String> = samples.iter().map(|s| group_of(&s.tensor).to_string()).collect();
    groups.sort();
    groups.dedup();
    GradCheckReport {
        samples,
        max_rel_error,
        groups,
    }
}

// -------------------------------------------------------- index vs brute force

/// Random unit-norm representations over a small unit universe so that
/// queries and documents overlap often.
pub fn random_representations(
    rng: &mut ChaCha8Rng,
    n: usize,
    hidden: usize,
    universe: u64,
) -> Vec<(SparseRepresentation, DenseVector)> {
    (0..n)
        .map(|_| {
            let units = rng.random_range(0..8);
            let mut w: Vec<(UnitId, f64)> = (0..units)
                .map(|_| (rng.random_range(0..universe), rng.random_range(0.0..1.0)))
                .collect();
            w.sort_by_key(|p| p.0);
            w.dedup_by_key(|p| p.0);
            let norm = w.iter().map(|p| p.1 * p.1).sum::<f64>().sqrt();
            let sparse = if norm > 0.0 {
                SparseRepresentation::from_weights(w.iter().map(|&(id, x)| (id, (x / norm * NORM_SHRINK) as f32)))
            } else {
                SparseRepresentation::default()
            };
            let z: Vec<f64> = (0..hidden).map(|_| rng.random_range(-1.0..1.0)).collect();
            let zn = z.iter().map(|v| v * v).sum::<f64>().sqrt();
            let dense = DenseVector(z.iter().map(|v| (v / zn * NORM_SHRINK) as f32).collect());
            (sparse, dense)
        })
        .collect()
}

/// Exhaustive ranking by `key`, ties broken by doc id.
pub fn brute_force_ranking(ids: &[String], scores: &[f64]) -> Vec<String> {
    let mut order: Vec<usize> = (0..ids.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then_with(|| ids[a].cmp(&ids[b])));
    order.into_iter().map(|i| ids[i].clone()).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct OracleReport {
    pub queries: usize,
    pub max_lexicon_error: f64,
    pub max_dense_error: f64,
    pub hybrid_mismatches: usize,
    pub bound_violations: usize,
}

fn within_bounds(h: &ScoredHit) -> bool {
    (0.0..=1.0).contains(&h.s_lex) && (-1.0..=1.0).contains(&h.s_den) && h.s_total == h.s_lex + h.s_den
}

/// Index search against exhaustive evaluation on one random corpus.
pub fn index_oracle(seed: u64, docs: usize, queries: usize, hidden: usize) -> OracleReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let doc_reps = random_representations(&mut rng, docs, hidden, 60);
    let mut ids: Vec<String> = (0..docs)
        .map(|i| format!("doc{:04}", (i * 7919) % docs.max(1)))
        .collect();
    ids.shuffle(&mut rng);
    let mut builder = IndexBuilder::new(hidden, 0, 0);
    for (id, (s, d)) in ids.iter().zip(&doc_reps) {
        builder.add(id, s, d).expect("distinct ids");
    }
    let index = builder.finish();
    let query_reps = random_representations(&mut rng, queries, hidden, 60);
    let mut report = OracleReport {
        queries,
        ..Default::default()
    };
    for (qs, qd) in &query_reps {
        let lex: Vec<f64> = doc_reps.iter().map(|(s, _)| qs.dot(s)).collect();
        let den: Vec<f64> = doc_reps.iter().map(|(_, d)| qd.dot(d)).collect();
        let lookup = |hits: &[ScoredHit], f: &dyn Fn(&ScoredHit) -> f64, want: &[f64]| -> f64 {
            hits.iter()
                .map(|h| {
                    let i = ids.iter().position(|x| *x == h.doc_id).expect("known doc");
                    (f(h) - want[i]).abs()
                })
                .fold(0.0, f64::max)
        };

        let lex_hits = index.search_lexicon(qs, docs);
        let expected_lex: Vec<String> = brute_force_ranking(&ids, &lex)
            .into_iter()
            .filter(|id| lex[ids.iter().position(|x| x == id).unwrap()] > 0.0)
            .collect();
        let got_lex: Vec<String> = lex_hits.iter().map(|h| h.doc_id.clone()).collect();
        report.max_lexicon_error = report.max_lexicon_error.max(lookup(&lex_hits, &|h| h.s_lex, &lex));
        if got_lex.len() != expected_lex.len() {
            report.max_lexicon_error = f64::INFINITY;
        }

        let den_hits = index.search_dense(qd, docs).expect("matching dimension");
        report.max_dense_error = report.max_dense_error.max(lookup(&den_hits, &|h| h.s_den, &den));
        if den_hits.len() != docs {
            report.max_dense_error = f64::INFINITY;
        }

        let total: Vec<f64> = lex.iter().zip(&den).map(|(a, b)| a + b).collect();
        let expected = brute_force_ranking(&ids, &total);
        let hyb = index.search_hybrid(qs, qd, docs, docs).expect("matching dimension");
        let got: Vec<String> = hyb.iter().map(|h| h.doc_id.clone()).collect();
        if got != expected {
            report.hybrid_mismatches += 1;
        }
        report.bound_violations += lex_hits
            .iter()
            .chain(&den_hits)
            .chain(&hyb)
            .filter(|h| !within_bounds(h))
            .count();
    }
    report
}

// ------------------------------------------------------------ norm checks

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct NormReport {
    pub texts: usize,
    pub max_dense_deviation: f64,
    pub max_sparse_deviation: f64,
    pub empty_sparse: usize,
    pub bound_violations: usize,
}

/// Random texts over the vocabulary's non-special tokens.
pub fn random_texts(vocab: &Vocab, n: usize, max_chars: usize, seed: u64) -> Vec<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pool: Vec<&str> = vocab
        .tokens()
        .iter()
        .enumerate()
        .filter(|(i, t)| !vocab.is_special(*i as u32) && !t.starts_with("##"))
        .map(|(_, t)| t.as_str())
        .collect();
    (0..n)
        .map(|_| {
            let len = rng.random_range(1..=max_chars.max(1));
            (0..len)
                .map(|_| *pool.choose(&mut rng).unwrap_or(&""))
                .collect::<Vec<_>>()
                .join(" ")
        })
        .collect()
}

/// Encodes `texts` and checks unit norms and pairwise score bounds between
/// consecutive texts.
pub fn norm_check(model: &Model, vocab: &Vocab, texts: &[String]) -> NormReport {
    let toks: Vec<TokenizedText> = texts
        .iter()
        .map(|t| crate::text::tokenize(t, vocab, model.config().max_len))
        .collect();
    let enc = model.encode(&toks, vocab).expect("model matches vocabulary");
    let mut r = NormReport {
        texts: texts.len(),
        ..Default::default()
    };
    for (i, e) in enc.iter().enumerate() {
        r.max_dense_deviation = r.max_dense_deviation.max((e.dense.norm() - 1.0).abs());
        if e.sparse.is_empty() {
            r.empty_sparse += 1;
        } else {
            r.max_sparse_deviation = r.max_sparse_deviation.max((e.sparse.norm() - 1.0).abs());
        }
        if let Some(next) = enc.get((i + 1) % enc.len()) {
            let s_lex = e.sparse.dot(&next.sparse);
            let s_den = e.dense.dot(&next.dense);
            if !(0.0..=1.0).contains(&s_lex) || !(-1.0..=1.0).contains(&s_den) {
                r.bound_violations += 1;
            }
        }
    }
    r
}

// ---------------------------------------------------------------- suite

#[derive(Debug, Clone)]
pub struct SelfCheckInputs<'a> {
    pub seed: u64,
    /// Model and vocabulary for the norm check; a fresh random model over a
    /// small vocabulary is used when absent.
    pub model: Option<(&'a Model, &'a Vocab)>,
    pub checkpoint: Option<&'a Path>,
    /// Texts to index; an empty list makes the index checks vacuous.
    pub corpus: Option<&'a [String]>,
}

/// Runs every check and returns one named result per check.
pub fn run_selfcheck(inputs: &SelfCheckInputs) -> Vec<CheckResult> {
    let mut out = Vec::new();

    let grad = gradient_check(&GradCheckConfig {
        seed: inputs.seed,
        ..Default::default()
    });
    out.push(CheckResult::new(
        "gradient",
        grad.max_rel_error < 1e-4,
        format!(
            "{} coordinates, max relative error {:.3e}",
            grad.samples.len(),
            grad.max_rel_error
        ),
    ));

    let index = index_oracle(inputs.seed, 200, 50, 16);
    let index_ok = index.max_lexicon_error <= 1e-9
        && index.max_dense_error <= 1e-6
        && index.hybrid_mismatches == 0
        && index.bound_violations == 0;
    out.push(CheckResult::new(
        "index-oracle",
        index_ok,
        format!(
            "{} queries, lexicon err {:.2e}, dense err {:.2e}, hybrid mismatches {}",
            index.queries, index.max_lexicon_error, index.max_dense_error, index.hybrid_mismatches
        ),
    ));

    let fallback;
    let (model, vocab) = match inputs.model {
        Some(mv) => mv,
        None => {
            let vocab = Vocab::from_tokens(crate::train::synthetic::World::new(&Default::default()).characters())
                .expect("distinct characters");
            let mut cfg = EncoderConfig::desk(vocab.len());
            cfg.hidden_size = 32;
            cfg.ffn_size = 64;
            cfg.seed = inputs.seed;
            fallback = (Model::init(cfg).expect("valid config"), vocab);
            (&fallback.0, &fallback.1)
        }
    };
    let texts = random_texts(vocab, 200, 20, inputs.seed);
    let norms = norm_check(model, vocab, &texts);
    out.push(CheckResult::new(
        "normalization",
        norms.max_dense_deviation <= 1e-6 && norms.max_sparse_deviation <= 1e-6 && norms.bound_violations == 0,
        format!(
            "{} texts, dense dev {:.2e}, sparse dev {:.2e}",
            norms.texts, norms.max_dense_deviation, norms.max_sparse_deviation
        ),
    ));

    if let Some(corpus) = inputs.corpus {
        let result = index_round_trip(model, vocab, corpus);
        out.push(match result {
            Ok(n) => CheckResult::new("index-round-trip", true, format!("{n} documents")),
            Err(e) => CheckResult::new("index-round-trip", false, e),
        });
    }

    if let Some(path) = inputs.checkpoint {
        out.push(match Model::load(path) {
            Ok(m) => CheckResult::new("checkpoint", true, format!("{} parameters", m.num_params())),
            Err(e) => CheckResult::new("checkpoint", false, e.to_string()),
        });
    }
    out
}

/// Indexes `texts`, persists and reopens the index, and checks that every
/// stored representation equals a fresh encoding and that search results
/// are unchanged.
pub fn index_round_trip(model: &Model, vocab: &Vocab, texts: &[String]) -> Result<usize, String> {
    let corpus: Vec<crate::index::CorpusRecord> = texts
        .iter()
        .enumerate()
        .map(|(i, t)| crate::index::CorpusRecord {
            id: format!("doc{i}"),
            text: t.clone(),
        })
        .collect();
    let dir = std::env::temp_dir().join(format!("hyrec-selfcheck-{}", std::process::id()));
    let built = crate::index::index_corpus(&corpus, model, vocab, Some(&dir)).map_err(|e| e.to_string())?;
    let reopened = IndexArtifacts::open(&dir).map_err(|e| e.to_string());
    let _ = std::fs::remove_dir_all(&dir);
    let reopened = reopened?;
    if reopened != built {
        return Err("reopened index differs from the built one".into());
    }
    let toks: Vec<TokenizedText> = texts
        .iter()
        .map(|t| crate::text::tokenize(t, vocab, model.config().max_len))
        .collect();
    let enc = model.encode(&toks, vocab).map_err(|e| e.to_string())?;
    for (i, e) in enc.iter().enumerate() {
        let o = i as u32;
        let stored = reopened.doc_sparse(o);
        let fresh: Vec<(UnitId, f32)> = e.sparse.units.iter().map(|(&k, u)| (k, u.weight)).collect();
        let kept: Vec<(UnitId, f32)> = stored.units.iter().map(|(&k, u)| (k, u.weight)).collect();
        let fresh_nonzero: Vec<(UnitId, f32)> = fresh.into_iter().filter(|p| p.1 > 0.0).collect();
        if kept != fresh_nonzero || reopened.doc_dense(o) != e.dense {
            return Err(format!("document {i} differs after reopening"));
        }
        let a = built
            .search_hybrid(&e.sparse, &e.dense, 10, 1000)
            .map_err(|e| e.to_string())?;
        let b = reopened
            .search_hybrid(&e.sparse, &e.dense, 10, 1000)
            .map_err(|e| e.to_string())?;
        if a != b {
            return Err(format!("search results differ for document {i}"));
        }
    }
    Ok(texts.len())
}
