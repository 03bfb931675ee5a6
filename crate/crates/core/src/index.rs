//! Inverted index over sparse units plus an exhaustive dense store.
//!
//! On disk an index is a directory:
//!
//! - `docs.tsv`: `ordinal<TAB>doc-id` per line
//! - `postings.bin`: records `[unit u64][count u32][count × (ordinal u32, weight f32)]`
//! - `dense.bin`: `doc_count × H` f32, row-major
//! - `meta.json`: counts, fingerprints and file digests, written last
//!
//! All binary data is little-endian.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::eval::Run;
use crate::heads::{is_composed, DenseVector, SparseRepresentation, UnitId};
use crate::model::{write_atomic, Model, ModelError};
use crate::text::{tokenize, Vocab};

const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum IndexError {
    #[error("duplicate document id {0:?}")]
    DuplicateDoc(String),
    #[error("document id {0:?} contains a tab or newline")]
    InvalidDocId(String),
    #[error("composed-word hash collision on {id:016x}: {first:?} vs {second:?}")]
    HashCollision { id: UnitId, first: String, second: String },
    #[error("dense dimension {found} does not match index dimension {expected}")]
    Dim { expected: usize, found: usize },
    #[error("index is corrupt: {0}")]
    Corrupt(String),
    #[error("index was built with a different {0}")]
    Fingerprint(&'static str),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

/// One corpus line: `{"id": ..., "text": ...}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusRecord {
    pub id: String,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndexMeta {
    pub format_version: u32,
    pub doc_count: usize,
    pub hidden_size: usize,
    pub config_hash: String,
    pub vocab_hash: String,
    pub unit_count: usize,
    pub posting_count: usize,
    pub docs_sha256: String,
    pub postings_sha256: String,
    pub dense_sha256: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoredHit {
    pub doc_id: String,
    pub s_lex: f64,
    pub s_den: f64,
    pub s_total: f64,
}

type Postings = Vec<(u32, f32)>;

/// An immutable, searchable index.
#[derive(Debug, Clone, PartialEq)]
pub struct IndexArtifacts {
    meta: IndexMeta,
    doc_ids: Vec<String>,
    ordinals: HashMap<String, u32>,
    postings: BTreeMap<UnitId, Postings>,
    dense: Vec<f32>,
}

/// Accumulates documents, then freezes into [`IndexArtifacts`].
#[derive(Debug)]
pub struct IndexBuilder {
    hidden_size: usize,
    config_hash: u64,
    vocab_hash: u64,
    doc_ids: Vec<String>,
    ordinals: HashMap<String, u32>,
    postings: BTreeMap<UnitId, Postings>,
    surfaces: HashMap<UnitId, String>,
    dense: Vec<f32>,
}

impl IndexBuilder {
    pub fn new(hidden_size: usize, config_hash: u64, vocab_hash: u64) -> Self {
        Self {
            hidden_size,
            config_hash,
            vocab_hash,
            doc_ids: Vec::new(),
            ordinals: HashMap::new(),
            postings: BTreeMap::new(),
            surfaces: HashMap::new(),
            dense: Vec::new(),
        }
    }

    pub fn add(&mut self, doc_id: &str, sparse: &SparseRepresentation, dense: &DenseVector) -> Result<(), IndexError> {
        if doc_id.contains(['\t', '\n', '\r']) {
            return Err(IndexError::InvalidDocId(doc_id.to_string()));
        }
        if self.ordinals.contains_key(doc_id) {
            return Err(IndexError::DuplicateDoc(doc_id.to_string()));
        }
        if dense.dim() != self.hidden_size {
            return Err(IndexError::Dim {
                expected: self.hidden_size,
                found: dense.dim(),
            });
        }
        for (&id, unit) in &sparse.units {
            if is_composed(id) && !unit.surface.is_empty() {
                match self.surfaces.get(&id) {
                    Some(s) if *s != unit.surface => {
                        return Err(IndexError::HashCollision {
                            id,
                            first: s.clone(),
                            second: unit.surface.clone(),
                        })
                    }
                    Some(_) => {}
                    None => {
                        self.surfaces.insert(id, unit.surface.clone());
                    }
                }
            }
        }
        let ordinal = self.doc_ids.len() as u32;
        for (&id, unit) in &sparse.units {
            if unit.weight > 0.0 {
                self.postings.entry(id).or_default().push((ordinal, unit.weight));
            }
        }
        self.dense.extend_from_slice(&dense.0);
        self.ordinals.insert(doc_id.to_string(), ordinal);
        self.doc_ids.push(doc_id.to_string());
        Ok(())
    }

    pub fn finish(self) -> IndexArtifacts {
        let mut idx = IndexArtifacts {
            meta: IndexMeta {
                format_version: FORMAT_VERSION,
                doc_count: self.doc_ids.len(),
                hidden_size: self.hidden_size,
                config_hash: format!("{:016x}", self.config_hash),
                vocab_hash: format!("{:016x}", self.vocab_hash),
                unit_count: self.postings.len(),
                posting_count: self.postings.values().map(Vec::len).sum(),
                docs_sha256: String::new(),
                postings_sha256: String::new(),
                dense_sha256: String::new(),
            },
            doc_ids: self.doc_ids,
            ordinals: self.ordinals,
            postings: self.postings,
            dense: self.dense,
        };
        idx.meta.docs_sha256 = sha256_hex(idx.docs_bytes().as_bytes());
        idx.meta.postings_sha256 = sha256_hex(&idx.postings_bytes());
        idx.meta.dense_sha256 = sha256_hex(&idx.dense_bytes());
        idx
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Encodes every record with `model` and builds an index; when `out` is
/// given the index is also written there.
pub fn index_corpus(
    corpus: &[CorpusRecord],
    model: &Model,
    vocab: &Vocab,
    out: Option<&Path>,
) -> Result<IndexArtifacts, IndexError> {
    model.check_vocab(vocab)?;
    let max_len = model.config().max_len;
    let toks: Vec<_> = corpus.iter().map(|r| tokenize(&r.text, vocab, max_len)).collect();
    let encoded = model.encode(&toks, vocab)?;
    let mut builder = IndexBuilder::new(
        model.config().hidden_size,
        model.config().fingerprint(),
        vocab.fingerprint(),
    );
    for (rec, enc) in corpus.iter().zip(&encoded) {
        builder.add(&rec.id, &enc.sparse, &enc.dense)?;
    }
    let idx = builder.finish();
    if let Some(dir) = out {
        idx.save(dir)?;
    }
    Ok(idx)
}

/// Orders by score descending, then doc id ascending, keeping `k`.
fn top_k<F>(candidates: Vec<u32>, k: usize, doc_ids: &[String], score: F) -> Vec<u32>
where
    F: Fn(u32) -> f64,
{
    let mut scored: Vec<(f64, u32)> = candidates.into_iter().map(|o| (score(o), o)).collect();
    let cmp = |a: &(f64, u32), b: &(f64, u32)| {
        b.0.total_cmp(&a.0)
            .then_with(|| doc_ids[a.1 as usize].cmp(&doc_ids[b.1 as usize]))
    };
    if scored.len() > k && k > 0 {
        scored.select_nth_unstable_by(k - 1, cmp);
        scored.truncate(k);
    }
    scored.sort_unstable_by(cmp);
    scored.truncate(k);
    scored.into_iter().map(|(_, o)| o).collect()
}

impl IndexArtifacts {
    pub fn meta(&self) -> &IndexMeta {
        &self.meta
    }

    pub fn doc_count(&self) -> usize {
        self.doc_ids.len()
    }

    pub fn hidden_size(&self) -> usize {
        self.meta.hidden_size
    }

    pub fn doc_id(&self, ordinal: u32) -> &str {
        &self.doc_ids[ordinal as usize]
    }

    pub fn ordinal(&self, doc_id: &str) -> Option<u32> {
        self.ordinals.get(doc_id).copied()
    }

    pub fn postings(&self, unit: UnitId) -> &[(u32, f32)] {
        self.postings.get(&unit).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn unit_count(&self) -> usize {
        self.postings.len()
    }

    /// Checks the artifacts were produced by this model and vocabulary.
    pub fn check_fingerprints(&self, model: &Model, vocab: &Vocab) -> Result<(), IndexError> {
        if self.meta.config_hash != format!("{:016x}", model.config().fingerprint()) {
            return Err(IndexError::Fingerprint("model config"));
        }
        if self.meta.vocab_hash != format!("{:016x}", vocab.fingerprint()) {
            return Err(IndexError::Fingerprint("vocabulary"));
        }
        Ok(())
    }

    /// Stored dense vector of a document.
    pub fn doc_dense(&self, ordinal: u32) -> DenseVector {
        let h = self.hidden_size();
        let o = ordinal as usize;
        DenseVector(self.dense[o * h..(o + 1) * h].to_vec())
    }

    /// Reassembles a document's sparse weights from the postings.
    pub fn doc_sparse(&self, ordinal: u32) -> SparseRepresentation {
        SparseRepresentation::from_weights(self.postings.iter().filter_map(|(&id, list)| {
            list.binary_search_by_key(&ordinal, |&(o, _)| o)
                .ok()
                .map(|i| (id, list[i].1))
        }))
    }

    /// `s_lex` of every document, accumulated by postings traversal.
    pub fn lexicon_scores(&self, q: &SparseRepresentation) -> Vec<f64> {
        let mut acc = vec![0.0f64; self.doc_count()];
        for (id, unit) in &q.units {
            let qw = f64::from(unit.weight);
            for &(o, w) in self.postings(*id) {
                acc[o as usize] += qw * f64::from(w);
            }
        }
        acc
    }

    /// `s_den` of every document by exhaustive inner product.
    pub fn dense_scores(&self, q: &DenseVector) -> Result<Vec<f64>, IndexError> {
        let h = self.hidden_size();
        if q.dim() != h {
            return Err(IndexError::Dim {
                expected: h,
                found: q.dim(),
            });
        }
        if h == 0 {
            return Ok(vec![0.0; self.doc_count()]);
        }
        Ok(self
            .dense
            .chunks_exact(h)
            .map(|row| row.iter().zip(&q.0).map(|(&a, &b)| f64::from(a) * f64::from(b)).sum())
            .collect())
    }

    fn hit(&self, o: u32, s_lex: f64, s_den: f64) -> ScoredHit {
        debug_assert!((0.0..=1.0).contains(&s_lex), "s_lex {s_lex} out of bounds");
        debug_assert!((-1.0..=1.0).contains(&s_den), "s_den {s_den} out of bounds");
        ScoredHit {
            doc_id: self.doc_id(o).to_string(),
            s_lex,
            s_den,
            s_total: s_lex + s_den,
        }
    }

    /// Top-`k` documents sharing at least one unit with `q`.
    pub fn search_lexicon(&self, q: &SparseRepresentation, k: usize) -> Vec<ScoredHit> {
        let acc = self.lexicon_scores(q);
        let mut touched = vec![false; self.doc_count()];
        for id in q.units.keys() {
            for &(o, _) in self.postings(*id) {
                touched[o as usize] = true;
            }
        }
        let cands: Vec<u32> = (0..self.doc_count() as u32).filter(|&o| touched[o as usize]).collect();
        top_k(cands, k, &self.doc_ids, |o| acc[o as usize])
            .into_iter()
            .map(|o| self.hit(o, acc[o as usize], 0.0))
            .collect()
    }

    pub fn search_dense(&self, q: &DenseVector, k: usize) -> Result<Vec<ScoredHit>, IndexError> {
        let scores = self.dense_scores(q)?;
        let cands: Vec<u32> = (0..self.doc_count() as u32).collect();
        Ok(top_k(cands, k, &self.doc_ids, |o| scores[o as usize])
            .into_iter()
            .map(|o| self.hit(o, 0.0, scores[o as usize]))
            .collect())
    }

    /// Union of each branch's top-`k_candidates`, rescored exactly with
    /// `s_lex + s_den`.
    pub fn search_hybrid(
        &self,
        q_sparse: &SparseRepresentation,
        q_dense: &DenseVector,
        k: usize,
        k_candidates: usize,
    ) -> Result<Vec<ScoredHit>, IndexError> {
        let k_candidates = k_candidates.max(k);
        let lex = self.lexicon_scores(q_sparse);
        let den = self.dense_scores(q_dense)?;
        let mut in_set = vec![false; self.doc_count()];
        for o in self.search_lexicon(q_sparse, k_candidates) {
            in_set[self.ordinals[&o.doc_id] as usize] = true;
        }
        let all: Vec<u32> = (0..self.doc_count() as u32).collect();
        for o in top_k(all, k_candidates, &self.doc_ids, |o| den[o as usize]) {
            in_set[o as usize] = true;
        }
        let cands: Vec<u32> = (0..self.doc_count() as u32).filter(|&o| in_set[o as usize]).collect();
        Ok(top_k(cands, k, &self.doc_ids, |o| lex[o as usize] + den[o as usize])
            .into_iter()
            .map(|o| self.hit(o, lex[o as usize], den[o as usize]))
            .collect())
    }

    fn docs_bytes(&self) -> String {
        let mut s = String::new();
        for (i, id) in self.doc_ids.iter().enumerate() {
            s.push_str(&format!("{i}\t{id}\n"));
        }
        s
    }

    fn postings_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        for (&id, list) in &self.postings {
            buf.extend_from_slice(&id.to_le_bytes());
            buf.extend_from_slice(&(list.len() as u32).to_le_bytes());
            for &(o, w) in list {
                buf.extend_from_slice(&o.to_le_bytes());
                buf.extend_from_slice(&w.to_le_bytes());
            }
        }
        buf
    }

    fn dense_bytes(&self) -> Vec<u8> {
        self.dense.iter().flat_map(|v| v.to_le_bytes()).collect()
    }

    /// Writes the four files; `meta.json` goes last and marks the index complete.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<(), IndexError> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        let meta_path = dir.join("meta.json");
        if meta_path.exists() {
            fs::remove_file(&meta_path)?;
        }
        write_atomic(&dir.join("docs.tsv"), self.docs_bytes().as_bytes())?;
        write_atomic(&dir.join("postings.bin"), &self.postings_bytes())?;
        write_atomic(&dir.join("dense.bin"), &self.dense_bytes())?;
        let meta = serde_json::to_vec_pretty(&self.meta).expect("meta serializes");
        write_atomic(&meta_path, &meta)?;
        Ok(())
    }

    pub fn open(dir: impl AsRef<Path>) -> Result<Self, IndexError> {
        let dir = dir.as_ref();
        let meta_bytes = fs::read(dir.join("meta.json")).map_err(|e| {
            if e.kind() == std::io::ErrorKind::NotFound {
                IndexError::Corrupt("meta.json missing (incomplete index)".into())
            } else {
                IndexError::Io(e)
            }
        })?;
        let meta: IndexMeta =
            serde_json::from_slice(&meta_bytes).map_err(|e| IndexError::Corrupt(format!("meta.json: {e}")))?;
        if meta.format_version != FORMAT_VERSION {
            return Err(IndexError::Corrupt(format!(
                "unsupported format {}",
                meta.format_version
            )));
        }
        let docs = fs::read(dir.join("docs.tsv"))?;
        let postings = fs::read(dir.join("postings.bin"))?;
        let dense = fs::read(dir.join("dense.bin"))?;
        for (name, bytes, digest) in [
            ("docs.tsv", &docs, &meta.docs_sha256),
            ("postings.bin", &postings, &meta.postings_sha256),
            ("dense.bin", &dense, &meta.dense_sha256),
        ] {
            if sha256_hex(bytes) != *digest {
                return Err(IndexError::Corrupt(format!("{name} digest mismatch")));
            }
        }

        let docs = String::from_utf8(docs).map_err(|_| IndexError::Corrupt("docs.tsv is not UTF-8".into()))?;
        let mut doc_ids = Vec::with_capacity(meta.doc_count);
        let mut ordinals = HashMap::with_capacity(meta.doc_count);
        for (i, line) in docs.lines().enumerate() {
            let (ord, id) = line
                .split_once('\t')
                .ok_or_else(|| IndexError::Corrupt(format!("docs.tsv line {}", i + 1)))?;
            if ord.parse::<usize>().ok() != Some(i) {
                return Err(IndexError::Corrupt(format!("docs.tsv line {} ordinal", i + 1)));
            }
            ordinals.insert(id.to_string(), i as u32);
            doc_ids.push(id.to_string());
        }
        if doc_ids.len() != meta.doc_count {
            return Err(IndexError::Corrupt("doc count mismatch".into()));
        }

        let mut map = BTreeMap::new();
        let mut pos = 0;
        let take = |pos: &mut usize, n: usize| -> Result<&[u8], IndexError> {
            let s = postings
                .get(*pos..*pos + n)
                .ok_or_else(|| IndexError::Corrupt("postings.bin truncated".into()))?;
            *pos += n;
            Ok(s)
        };
        while pos < postings.len() {
            let id = u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap());
            let count = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
            let mut list = Vec::with_capacity(count);
            for _ in 0..count {
                let o = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap());
                let w = f32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap());
                if o as usize >= meta.doc_count {
                    return Err(IndexError::Corrupt(format!("posting ordinal {o} out of range")));
                }
                list.push((o, w));
            }
            map.insert(id, list);
        }

        if dense.len() != meta.doc_count * meta.hidden_size * 4 {
            return Err(IndexError::Corrupt("dense.bin size mismatch".into()));
        }
        let dense = dense
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(Self {
            meta,
            doc_ids,
            ordinals,
            postings: map,
            dense,
        })
    }
}

/// Which branch scores a search.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SearchMode {
    Lexicon,
    Dense,
    Hybrid,
}

impl std::str::FromStr for SearchMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "lexicon" | "sparse" => Ok(Self::Lexicon),
            "dense" => Ok(Self::Dense),
            "hybrid" => Ok(Self::Hybrid),
            other => Err(format!("unknown search mode {other:?}")),
        }
    }
}

/// Encodes `(qid, text)` queries and searches each one, returning a run.
pub fn search_queries(
    index: &IndexArtifacts,
    model: &Model,
    vocab: &Vocab,
    queries: &[(String, String)],
    mode: SearchMode,
    k: usize,
    k_candidates: usize,
) -> Result<Run, IndexError> {
    let toks: Vec<_> = queries
        .iter()
        .map(|(_, t)| tokenize(t, vocab, model.config().max_len))
        .collect();
    let encoded = model.encode(&toks, vocab)?;
    let mut run = Run::default();
    for ((qid, _), enc) in queries.iter().zip(&encoded) {
        let hits = match mode {
            SearchMode::Lexicon => index.search_lexicon(&enc.sparse, k),
            SearchMode::Dense => index.search_dense(&enc.dense, k)?,
            SearchMode::Hybrid => index.search_hybrid(&enc.sparse, &enc.dense, k, k_candidates)?,
        };
        let score = |h: &ScoredHit| match mode {
            SearchMode::Lexicon => h.s_lex,
            SearchMode::Dense => h.s_den,
            SearchMode::Hybrid => h.s_total,
        };
        run.0
            .insert(qid.clone(), hits.iter().map(|h| (h.doc_id.clone(), score(h))).collect());
    }
    Ok(run)
}
