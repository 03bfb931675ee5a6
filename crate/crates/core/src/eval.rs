//! TREC-format qrels/run parsing and @k ranking metrics.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

fn parse_err(line: usize, message: impl Into<String>) -> EvalError {
    EvalError::Parse {
        line,
        message: message.into(),
    }
}

/// Relevance judgments: query id → doc id → grade.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Qrels(pub BTreeMap<String, HashMap<String, u32>>);

impl Qrels {
    /// Lines of `qid 0 docid rel`. Blank lines are ignored.
    pub fn parse(text: &str) -> Result<Self, EvalError> {
        let mut map: BTreeMap<String, HashMap<String, u32>> = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.is_empty() {
                continue;
            }
            if fields.len() != 4 {
                return Err(parse_err(i + 1, format!("expected 4 fields, got {}", fields.len())));
            }
            let rel: u32 = fields[3]
                .parse()
                .map_err(|_| parse_err(i + 1, format!("bad relevance {:?}", fields[3])))?;
            map.entry(fields[0].to_string())
                .or_default()
                .insert(fields[2].to_string(), rel);
        }
        Ok(Self(map))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, EvalError> {
        Self::parse(&fs::read_to_string(path)?)
    }

    pub fn grade(&self, qid: &str, doc: &str) -> u32 {
        self.0.get(qid).and_then(|m| m.get(doc)).copied().unwrap_or(0)
    }

    pub fn is_relevant(&self, qid: &str, doc: &str) -> bool {
        self.grade(qid, doc) > 0
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (q, docs) in &self.0 {
            let mut docs: Vec<_> = docs.iter().collect();
            docs.sort();
            for (d, r) in docs {
                writeln!(out, "{q} 0 {d} {r}").unwrap();
            }
        }
        out
    }
}

/// Ranked output per query, best first.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Run(pub BTreeMap<String, Vec<(String, f64)>>);

impl Run {
    /// Lines of `qid Q0 docid rank score tag`; each query's entries are
    /// ordered by score descending, then by the file's rank.
    pub fn parse(text: &str) -> Result<Self, EvalError> {
        let mut raw: BTreeMap<String, Vec<(f64, u64, String)>> = BTreeMap::new();
        let mut seen: HashSet<(String, String)> = HashSet::new();
        for (i, line) in text.lines().enumerate() {
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.is_empty() {
                continue;
            }
            if fields.len() != 6 {
                return Err(parse_err(i + 1, format!("expected 6 fields, got {}", fields.len())));
            }
            let rank: u64 = fields[3]
                .parse()
                .map_err(|_| parse_err(i + 1, format!("bad rank {:?}", fields[3])))?;
            let score: f64 = fields[4]
                .parse()
                .ok()
                .filter(|s: &f64| s.is_finite())
                .ok_or_else(|| parse_err(i + 1, format!("bad score {:?}", fields[4])))?;
            if !seen.insert((fields[0].to_string(), fields[2].to_string())) {
                return Err(parse_err(
                    i + 1,
                    format!("duplicate doc {:?} for query {:?}", fields[2], fields[0]),
                ));
            }
            raw.entry(fields[0].to_string())
                .or_default()
                .push((score, rank, fields[2].to_string()));
        }
        let map = raw
            .into_iter()
            .map(|(q, mut v)| {
                v.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
                (q, v.into_iter().map(|(s, _, d)| (d, s)).collect())
            })
            .collect();
        Ok(Self(map))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, EvalError> {
        Self::parse(&fs::read_to_string(path)?)
    }

    pub fn to_text(&self, tag: &str) -> String {
        let mut out = String::new();
        for (q, docs) in &self.0 {
            for (rank, (d, s)) in docs.iter().enumerate() {
                writeln!(out, "{q} Q0 {d} {} {s:.9} {tag}", rank + 1).unwrap();
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct QueryMetrics {
    pub ndcg: f64,
    pub recall: f64,
    pub mrr: f64,
    pub map: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub k: usize,
    pub queries: usize,
    pub skipped: usize,
    pub ndcg: f64,
    pub recall: f64,
    pub mrr: f64,
    pub map: f64,
}

/// Metrics for one ranked list. `None` when the query has no relevant doc.
pub fn query_metrics(ranked: &[&str], judged: &HashMap<String, u32>, k: usize) -> Option<QueryMetrics> {
    let total_rel = judged.values().filter(|&&g| g > 0).count();
    if total_rel == 0 {
        return None;
    }
    let grade = |d: &str| judged.get(d).copied().unwrap_or(0);
    let discount = |rank: usize| 1.0 / ((rank + 1) as f64).log2();

    let top = &ranked[..ranked.len().min(k)];
    let mut dcg = 0.0;
    let mut hits = 0usize;
    let mut mrr = 0.0;
    let mut ap = 0.0;
    for (i, d) in top.iter().enumerate() {
        let g = grade(d);
        dcg += f64::from(g) * discount(i + 1);
        if g > 0 {
            hits += 1;
            if mrr == 0.0 {
                mrr = 1.0 / (i + 1) as f64;
            }
            ap += hits as f64 / (i + 1) as f64;
        }
    }
    let mut ideal: Vec<u32> = judged.values().copied().filter(|&g| g > 0).collect();
    ideal.sort_unstable_by(|a, b| b.cmp(a));
    let idcg: f64 = ideal
        .iter()
        .take(k)
        .enumerate()
        .map(|(i, &g)| f64::from(g) * discount(i + 1))
        .sum();
    Some(QueryMetrics {
        ndcg: if idcg > 0.0 { dcg / idcg } else { 0.0 },
        recall: hits as f64 / total_rel as f64,
        mrr,
        map: ap / total_rel.min(k) as f64,
    })
}

/// Macro-averaged metrics over the run's queries that have judgments.
pub fn evaluate(run: &Run, qrels: &Qrels, k: usize) -> EvalReport {
    let mut sum = QueryMetrics::default();
    let mut n = 0usize;
    let mut skipped = 0usize;
    for (q, docs) in &run.0 {
        let Some(judged) = qrels.0.get(q) else {
            log::warn!("query {q} has no judgments; skipped");
            skipped += 1;
            continue;
        };
        let ranked: Vec<&str> = docs.iter().map(|(d, _)| d.as_str()).collect();
        match query_metrics(&ranked, judged, k) {
            Some(m) => {
                sum.ndcg += m.ndcg;
                sum.recall += m.recall;
                sum.mrr += m.mrr;
                sum.map += m.map;
                n += 1;
            }
            None => {
                log::warn!("query {q} has no relevant documents; skipped");
                skipped += 1;
            }
        }
    }
    let avg = |x: f64| if n == 0 { 0.0 } else { x / n as f64 };
    EvalReport {
        k,
        queries: n,
        skipped,
        ndcg: avg(sum.ndcg),
        recall: avg(sum.recall),
        mrr: avg(sum.mrr),
        map: avg(sum.map),
    }
}
