//! Seeded generator for a small pseudo-Chinese retrieval task.
//!
//! Every document mentions one entity (a 3-character name) and one concept.
//! Queries spell concepts in a different surface form than documents, so
//! the entity is only recoverable by exact lexical match and the concept
//! only by a learned association. Character pools are disjoint per word
//! class and every multi-character word is in the generated lexicon, so the
//! reference segmentation of every text is exact.

use std::collections::{BTreeMap, HashMap};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::eval::Qrels;
use crate::index::CorpusRecord;
use crate::segmentation::{Lexicon, RuleSet};
use crate::text::Vocab;

use super::DatasetRecord;

/// Common characters the generator draws from, in pool order.
const CHARSET: &str = "\
的是在不了有和人这中大为上个国我以要他时来用们生到作地于出就分对成会可主发年动同工也能下过子说产种面而方后多定行学法所民得经三之进着等部度家电力里如水化高自理起小物现实加量都两体制机当使点从业本去把性好应开它合还因由其些然前外天政四日那社义事平形相全表间样与关各重新线内数正心反你明看原又么利比或但质气第向道命此变条只没结解问意建月公无系军很情者最立代想已通并提直题党程展五果料象员革位入常文总次品式活设及管特件长求老头基资边流路级少图山统接知较将组见计别她手角期根论运农指几九区强放决西被干做必战先回则任取据处队南给色光门即保治北造百规热领七海口东导器压志世金增争济阶油思术极交受联什认六共权收证改清己美再采转更单风切打白教速花带安场身车例真务具万每目至达走积示议声报斗完类八离华名确才科张信马节话米整空元况今集温传土许步群广石记需段研界拉林律叫且究观越织装影算低持音众书布复容儿须际商非验连断深难近矿千周委素技备半办青省列习响约支般史感劳便团往酸历市克何除消构府称太准精值号率族维划选标写存候毛亲快效斯院查江型眼王按格养易置派层片始却专状育厂京识适属圆包火住调满县局照参红细引听该铁价严龙飞";

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticConfig {
    pub seed: u64,
    pub concepts: usize,
    /// Characters per entity position; entities are all combinations.
    pub entity_pool: usize,
    pub train_entities: usize,
    pub eval_entities: usize,
    pub train_pairs: usize,
    pub general_queries: usize,
    pub docs_per_entity: usize,
    pub adversarial_queries: usize,
    /// Distractors of each kind per adversarial query.
    pub distractors: usize,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            concepts: 24,
            entity_pool: 10,
            train_entities: 160,
            eval_entities: 80,
            train_pairs: 500,
            general_queries: 60,
            docs_per_entity: 3,
            adversarial_queries: 40,
            distractors: 3,
        }
    }
}

/// Word inventory shared by all splits.
#[derive(Debug, Clone)]
pub struct World {
    pools: [Vec<char>; 3],
    /// (query form, document form) per concept.
    concepts: Vec<(String, String)>,
    doc_chars: Vec<char>,
    doc_words: Vec<String>,
    query_chars: Vec<char>,
    query_words: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QueryKind {
    Entity,
    Concept,
    Both,
}

/// A held-out evaluation set.
#[derive(Debug, Clone)]
pub struct EvalSplit {
    pub corpus: Vec<CorpusRecord>,
    pub queries: Vec<(String, String)>,
    pub qrels: Qrels,
}

#[derive(Debug, Clone)]
pub struct SyntheticData {
    pub vocab: Vocab,
    pub lexicon: Lexicon,
    pub lexicon_entries: Vec<(String, u64)>,
    pub train: Vec<DatasetRecord>,
    pub general: EvalSplit,
    pub adversarial: EvalSplit,
}

impl SyntheticData {
    /// The generator's segmentation uses no pattern rules.
    pub fn rules(&self) -> RuleSet {
        RuleSet::empty()
    }
}

fn charset() -> Vec<char> {
    let mut seen = std::collections::HashSet::new();
    CHARSET.chars().filter(|c| seen.insert(*c)).collect()
}

#[derive(Debug, Clone)]
struct Doc {
    entity: String,
    concept: usize,
    text: String,
}

impl World {
    pub fn new(cfg: &SyntheticConfig) -> Self {
        let chars = charset();
        let mut it = chars.into_iter();
        let mut take = |n: usize| -> Vec<char> {
            let v: Vec<char> = it.by_ref().take(n).collect();
            assert_eq!(v.len(), n, "character set too small for this configuration");
            v
        };
        let pools = [take(cfg.entity_pool), take(cfg.entity_pool), take(cfg.entity_pool)];
        let concepts = (0..cfg.concepts)
            .map(|_| {
                let a: String = take(2).into_iter().collect();
                let b: String = take(2).into_iter().collect();
                (a, b)
            })
            .collect();
        let doc_chars = take(10);
        let doc_words = (0..8).map(|_| take(2).into_iter().collect()).collect();
        let query_chars = take(4);
        let query_words = (0..4).map(|_| take(2).into_iter().collect()).collect();
        Self {
            pools,
            concepts,
            doc_chars,
            doc_words,
            query_chars,
            query_words,
        }
    }

    /// Every character the world can emit, in a fixed order.
    pub fn characters(&self) -> Vec<String> {
        let mut out: Vec<char> = self.pools.iter().flatten().copied().collect();
        for (a, b) in &self.concepts {
            out.extend(a.chars());
            out.extend(b.chars());
        }
        out.extend(&self.doc_chars);
        out.extend(self.doc_words.iter().flat_map(|w| w.chars()));
        out.extend(&self.query_chars);
        out.extend(self.query_words.iter().flat_map(|w| w.chars()));
        out.into_iter().map(String::from).collect()
    }

    /// Every multi-character word: all entity combinations, both concept
    /// forms and the filler words.
    pub fn lexicon_entries(&self) -> Vec<(String, u64)> {
        let mut out = Vec::new();
        for &a in &self.pools[0] {
            for &b in &self.pools[1] {
                for &c in &self.pools[2] {
                    out.push((format!("{a}{b}{c}"), 10));
                }
            }
        }
        for (a, b) in &self.concepts {
            out.push((a.clone(), 50));
            out.push((b.clone(), 50));
        }
        for w in self.doc_words.iter().chain(&self.query_words) {
            out.push((w.clone(), 100));
        }
        out
    }

    pub fn vocab(&self) -> Vocab {
        Vocab::from_tokens(self.characters()).expect("world characters are distinct")
    }

    pub fn lexicon(&self) -> Lexicon {
        Lexicon::from_entries(self.lexicon_entries()).expect("world lexicon is non-empty")
    }

    pub fn concept_count(&self) -> usize {
        self.concepts.len()
    }

    fn entity(&self, rng: &mut ChaCha8Rng) -> String {
        self.pools.iter().map(|p| *p.choose(rng).unwrap()).collect()
    }

    /// Same entity with one position replaced.
    fn near_miss(&self, entity: &str, rng: &mut ChaCha8Rng) -> String {
        let mut chars: Vec<char> = entity.chars().collect();
        let pos = rng.random_range(0..3);
        let pool = &self.pools[pos];
        loop {
            let c = *pool.choose(rng).unwrap();
            if c != chars[pos] {
                chars[pos] = c;
                return chars.into_iter().collect();
            }
        }
    }

    fn doc_filler(&self, rng: &mut ChaCha8Rng) -> Vec<String> {
        let n = rng.random_range(0..=2);
        (0..n)
            .map(|_| {
                if rng.random_bool(0.5) {
                    self.doc_chars.choose(rng).unwrap().to_string()
                } else {
                    self.doc_words.choose(rng).unwrap().clone()
                }
            })
            .collect()
    }

    fn query_filler(&self, rng: &mut ChaCha8Rng) -> Option<String> {
        match rng.random_range(0..3) {
            0 => None,
            1 => Some(self.query_chars.choose(rng).unwrap().to_string()),
            _ => Some(self.query_words.choose(rng).unwrap().clone()),
        }
    }

    /// Words of a document about `entity` and `concept`.
    fn doc_words(&self, entity: &str, concept: usize, rng: &mut ChaCha8Rng) -> Vec<String> {
        let mut core = [entity.to_string(), self.concepts[concept].1.clone()];
        if rng.random_bool(0.5) {
            core.swap(0, 1);
        }
        let mut words = self.doc_filler(rng);
        words.push(core[0].clone());
        words.extend(self.doc_filler(rng));
        words.push(core[1].clone());
        words.extend(self.doc_filler(rng));
        words
    }

    fn doc(&self, entity: &str, concept: usize, rng: &mut ChaCha8Rng) -> Doc {
        Doc {
            entity: entity.to_string(),
            concept,
            text: self.doc_words(entity, concept, rng).concat(),
        }
    }

    fn query(&self, kind: QueryKind, entity: &str, concept: usize, rng: &mut ChaCha8Rng) -> String {
        let mut parts: Vec<String> = match kind {
            QueryKind::Entity => vec![entity.to_string()],
            QueryKind::Concept => vec![self.concepts[concept].0.clone()],
            QueryKind::Both => vec![entity.to_string(), self.concepts[concept].0.clone()],
        };
        parts.shuffle(rng);
        if let Some(f) = self.query_filler(rng) {
            let at = rng.random_range(0..=parts.len());
            parts.insert(at, f);
        }
        parts.concat()
    }

    fn other_concept(&self, c: usize, rng: &mut ChaCha8Rng) -> usize {
        loop {
            let o = rng.random_range(0..self.concepts.len());
            if o != c {
                return o;
            }
        }
    }

    /// Random sentences with their word boundaries, for segmentation checks.
    pub fn sentences(&self, n: usize, seed: u64) -> Vec<(String, Vec<String>)> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let e = self.entity(&mut rng);
                let c = rng.random_range(0..self.concepts.len());
                let mut words = self.doc_words(&e, c, &mut rng);
                if rng.random_bool(0.5) {
                    words.push(self.concepts[c].0.clone());
                }
                (words.concat(), words)
            })
            .collect()
    }
}

fn distinct_entities(world: &World, n: usize, exclude: &[String], rng: &mut ChaCha8Rng) -> Vec<String> {
    let mut seen: std::collections::HashSet<String> = exclude.iter().cloned().collect();
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let e = world.entity(rng);
        if seen.insert(e.clone()) {
            out.push(e);
        }
    }
    out
}

/// Shuffles docs, assigns ids and derives binary qrels from the generating
/// attributes: a doc is relevant when it matches every attribute the query
/// asks for.
fn finish_split(
    mut docs: Vec<Doc>,
    queries: Vec<(QueryKind, String, usize, String)>,
    rng: &mut ChaCha8Rng,
) -> EvalSplit {
    docs.shuffle(rng);
    let corpus: Vec<CorpusRecord> = docs
        .iter()
        .enumerate()
        .map(|(i, d)| CorpusRecord {
            id: format!("d{i:05}"),
            text: d.text.clone(),
        })
        .collect();
    let mut qrels: BTreeMap<String, HashMap<String, u32>> = BTreeMap::new();
    let mut query_list = Vec::with_capacity(queries.len());
    for (qi, (kind, entity, concept, text)) in queries.into_iter().enumerate() {
        let qid = format!("q{qi:04}");
        for (doc, rec) in docs.iter().zip(&corpus) {
            let relevant = match kind {
                QueryKind::Entity => doc.entity == entity,
                QueryKind::Concept => doc.concept == concept,
                QueryKind::Both => doc.entity == entity && doc.concept == concept,
            };
            if relevant {
                qrels.entry(qid.clone()).or_default().insert(rec.id.clone(), 1);
            }
        }
        query_list.push((qid, text));
    }
    EvalSplit {
        corpus,
        queries: query_list,
        qrels: Qrels(qrels),
    }
}

pub fn generate(cfg: &SyntheticConfig) -> SyntheticData {
    let world = World::new(cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let train_entities = distinct_entities(&world, cfg.train_entities, &[], &mut rng);
    let eval_entities = distinct_entities(&world, cfg.eval_entities, &train_entities, &mut rng);
    let nc = world.concept_count();

    let mut train = Vec::with_capacity(cfg.train_pairs);
    for i in 0..cfg.train_pairs {
        let kind = match i % 4 {
            0 => QueryKind::Entity,
            1 => QueryKind::Concept,
            _ => QueryKind::Both,
        };
        let e = train_entities.choose(&mut rng).unwrap().clone();
        let c = rng.random_range(0..nc);
        let query = world.query(kind, &e, c, &mut rng);
        let pos = world.doc(&e, c, &mut rng).text;
        let random_doc = |rng: &mut ChaCha8Rng| {
            let e2 = train_entities.choose(rng).unwrap().clone();
            let c2 = world.other_concept(c, rng);
            world.doc(&e2, c2, rng).text
        };
        let negs = match kind {
            QueryKind::Entity => {
                let n1 = world.near_miss(&e, &mut rng);
                let n2 = world.near_miss(&e, &mut rng);
                vec![
                    world.doc(&n1, c, &mut rng).text,
                    world.doc(&n2, rng.random_range(0..nc), &mut rng).text,
                    random_doc(&mut rng),
                ]
            }
            QueryKind::Concept => (0..3).map(|_| random_doc(&mut rng)).collect(),
            QueryKind::Both => {
                let c2 = world.other_concept(c, &mut rng);
                let near = world.near_miss(&e, &mut rng);
                vec![
                    world.doc(&e, c2, &mut rng).text,
                    world.doc(&near, c, &mut rng).text,
                    random_doc(&mut rng),
                ]
            }
        };
        train.push(DatasetRecord { query, pos, negs });
    }

    // General split: a few docs per held-out entity, mixed query kinds.
    let mut docs = Vec::new();
    for e in &eval_entities {
        let mut concepts: Vec<usize> = (0..nc).collect();
        concepts.shuffle(&mut rng);
        for &c in concepts.iter().take(cfg.docs_per_entity) {
            docs.push(world.doc(e, c, &mut rng));
        }
    }
    let mut queries = Vec::with_capacity(cfg.general_queries);
    for i in 0..cfg.general_queries {
        let kind = match i % 3 {
            0 => QueryKind::Entity,
            1 => QueryKind::Concept,
            _ => QueryKind::Both,
        };
        let d = docs.choose(&mut rng).unwrap().clone();
        let text = world.query(kind, &d.entity, d.concept, &mut rng);
        queries.push((kind, d.entity, d.concept, text));
    }
    let general = finish_split(docs, queries, &mut rng);

    // Adversarial split: each query's positive sits among docs sharing only
    // the entity or only the concept.
    let adv_entities = distinct_entities(&world, cfg.adversarial_queries, &train_entities, &mut rng);
    let mut docs = Vec::new();
    let mut queries = Vec::with_capacity(cfg.adversarial_queries);
    for e in &adv_entities {
        let c = rng.random_range(0..nc);
        docs.push(world.doc(e, c, &mut rng));
        let mut others: Vec<usize> = (0..nc).filter(|&o| o != c).collect();
        others.shuffle(&mut rng);
        for &o in others.iter().take(cfg.distractors) {
            docs.push(world.doc(e, o, &mut rng));
        }
        for _ in 0..cfg.distractors {
            let near = world.near_miss(e, &mut rng);
            docs.push(world.doc(&near, c, &mut rng));
        }
        let text = world.query(QueryKind::Both, e, c, &mut rng);
        queries.push((QueryKind::Both, e.clone(), c, text));
    }
    let adversarial = finish_split(docs, queries, &mut rng);

    SyntheticData {
        vocab: world.vocab(),
        lexicon: world.lexicon(),
        lexicon_entries: world.lexicon_entries(),
        train,
        general,
        adversarial,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::segmentation::{segment, span_groups, Labeller};
    use crate::text::tokenize;

    #[test]
    fn charset_is_large_enough_and_cjk() {
        let chars = charset();
        let cfg = SyntheticConfig::default();
        let needed = 3 * cfg.entity_pool + 4 * cfg.concepts + 10 + 16 + 4 + 8;
        assert!(chars.len() >= needed, "{} < {needed}", chars.len());
        assert!(chars.iter().all(|&c| crate::text::is_cjk(c)));
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = SyntheticConfig {
            train_pairs: 20,
            ..Default::default()
        };
        let a = generate(&cfg);
        let b = generate(&cfg);
        assert_eq!(a.train, b.train);
        assert_eq!(a.general.corpus, b.general.corpus);
        assert_eq!(a.adversarial.qrels, b.adversarial.qrels);
    }

    #[test]
    fn every_query_has_a_relevant_doc() {
        let data = generate(&SyntheticConfig::default());
        for split in [&data.general, &data.adversarial] {
            for (qid, _) in &split.queries {
                assert!(split.qrels.0.get(qid).is_some_and(|m| !m.is_empty()), "{qid}");
            }
        }
        for (qid, _) in &data.adversarial.queries {
            assert_eq!(data.adversarial.qrels.0[qid].len(), 1);
        }
    }

    #[test]
    fn positives_differ_from_negatives() {
        let data = generate(&SyntheticConfig::default());
        assert_eq!(data.train.len(), 500);
        for r in &data.train {
            assert_eq!(r.negs.len(), 3);
            assert!(!r.negs.contains(&r.pos));
        }
    }

    #[test]
    fn segmentation_recovers_generated_words() {
        let cfg = SyntheticConfig::default();
        let world = World::new(&cfg);
        let vocab = world.vocab();
        let lexicon = world.lexicon();
        for (text, words) in world.sentences(200, 3) {
            let tok = tokenize(&text, &vocab, 64);
            assert!(tok.real_ids().iter().all(|&id| id != vocab.unk_id()));
            let seg = segment(&text, &lexicon, &RuleSet::empty());
            let surfaces: Vec<String> = span_groups(&tok, &seg)
                .iter()
                .map(|g| g.iter().map(|&i| tok.surface(i + 1)).collect())
                .collect();
            assert_eq!(surfaces, words);
        }
        let lab = Labeller::new(vocab, lexicon, RuleSet::empty(), 64);
        let (_, labels) = lab.label(&world.sentences(1, 9)[0].0);
        assert!(labels.is_valid());
    }
}
