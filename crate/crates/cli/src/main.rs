//! `hyrec`: label, train, index, search, evaluate and self-check.
//!
//! Exit codes: 0 success, 1 a check failed, 2 usage or I/O error.

mod config;
mod manifest;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use hyrec::eval::{evaluate, Qrels, Run};
use hyrec::index::{index_corpus, search_queries, CorpusRecord, IndexArtifacts, SearchMode};
use hyrec::jsonl;
use hyrec::model::{write_atomic, Model};
use hyrec::segmentation::{Labeller, Lexicon, RuleSet};
use hyrec::selfcheck::{run_selfcheck, SelfCheckInputs};
use hyrec::train::synthetic::{generate, EvalSplit, SyntheticConfig};
use hyrec::train::{label_dataset, loss_csv, mine_hard_negatives, train, DatasetRecord, MiningConfig};
use hyrec::Vocab;
use serde::{Deserialize, Serialize};

use config::Config;
use manifest::{manifest_path, ManifestBuilder};

#[derive(Debug, Parser)]
#[command(name = "hyrec", version, about = "Hybrid lexicon + dense retrieval")]
struct Cli {
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Seed for model initialisation, shuffling and sampling.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// TOML configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Produce BMES labels for a line-delimited corpus.
    Label {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        /// Word list (`word<TAB>freq`); the bundled lexicon when omitted.
        #[arg(long)]
        lexicon: Option<PathBuf>,
        /// One regex per line; the built-in rules when omitted.
        #[arg(long)]
        rules: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model on `{"query","pos","negs"}` records.
    Train {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        lexicon: Option<PathBuf>,
        #[arg(long)]
        rules: Option<PathBuf>,
        /// Checkpoint path to write.
        #[arg(long)]
        out: PathBuf,
        /// Loss CSV path (defaults to `<out>.loss.csv`).
        #[arg(long)]
        loss_log: Option<PathBuf>,
        /// Start from an existing checkpoint instead of a fresh model.
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        max_steps: Option<usize>,
    },
    /// Encode a corpus and write an index directory.
    Index {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Search `{"id","text"}` queries and write a TREC run file.
    Search {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        index: PathBuf,
        #[arg(long)]
        queries: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "hybrid")]
        mode: SearchMode,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        k_candidates: Option<usize>,
    },
    /// Score a run against qrels and print a JSON report.
    Eval {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        qrels: PathBuf,
        #[arg(long, default_value_t = 10)]
        k: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Mine hard negatives from ranks 20-100 of a hybrid index.
    Mine {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        index: PathBuf,
        #[arg(long)]
        queries: PathBuf,
        #[arg(long)]
        qrels: PathBuf,
        #[arg(long, default_value_t = 3)]
        per_query: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the gradient, index and normalization oracle checks.
    Selfcheck {
        #[arg(long, requires = "vocab")]
        model: Option<PathBuf>,
        #[arg(long)]
        vocab: Option<PathBuf>,
        /// Line-delimited corpus to index and round-trip.
        #[arg(long)]
        corpus: Option<PathBuf>,
    },
    /// Write the synthetic training and evaluation data.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        pairs: Option<usize>,
    },
}

#[derive(Debug)]
enum CliError {
    Check(String),
    Usage(String),
}

type CliResult = Result<(), CliError>;

fn usage<E: std::fmt::Display>(context: impl std::fmt::Display) -> impl FnOnce(E) -> CliError {
    move |e| CliError::Usage(format!("{context}: {e}"))
}

/// A text input line; `id` is optional for labelling.
#[derive(Debug, Deserialize)]
struct TextRecord {
    #[serde(default)]
    #[allow(dead_code)]
    id: Option<String>,
    text: String,
}

#[derive(Debug, Serialize)]
struct LabelRecord<'a> {
    text: &'a str,
    labels: Vec<u8>,
}

#[derive(Debug, Serialize)]
struct MinedRecord {
    qid: String,
    negatives: Vec<MinedEntry>,
}

#[derive(Debug, Serialize)]
struct MinedEntry {
    doc_id: String,
    rank: usize,
}

fn load_vocab(path: &Path) -> Result<Vocab, CliError> {
    Vocab::load(path).map_err(usage(path.display()))
}

fn load_model(path: &Path, vocab: &Vocab) -> Result<Model, CliError> {
    let model = Model::load(path).map_err(usage(path.display()))?;
    model.check_vocab(vocab).map_err(usage(path.display()))?;
    Ok(model)
}

fn load_labeller(
    vocab: Vocab,
    lexicon: Option<&Path>,
    rules: Option<&Path>,
    max_len: usize,
) -> Result<Labeller, CliError> {
    let lexicon = match lexicon {
        Some(p) => Lexicon::load(p).map_err(usage(p.display()))?,
        None => Lexicon::bundled(),
    };
    let rules = match rules {
        Some(p) => RuleSet::load(p).map_err(usage(p.display()))?,
        None => RuleSet::default_rules(),
    };
    Ok(Labeller::new(vocab, lexicon, rules, max_len))
}

fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>, CliError> {
    jsonl::read(path).map_err(usage(path.display()))
}

fn queries_of(records: Vec<CorpusRecord>) -> Vec<(String, String)> {
    records.into_iter().map(|r| (r.id, r.text)).collect()
}

fn write_file(path: &Path, bytes: &[u8]) -> CliResult {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(usage(parent.display()))?;
    }
    write_atomic(path, bytes).map_err(usage(path.display()))
}

fn to_json<T: Serialize>(v: &T) -> serde_json::Value {
    serde_json::to_value(v).expect("serializable")
}

fn cmd_label(
    cli: &Cli,
    cfg: &Config,
    input: &Path,
    vocab: &Path,
    lexicon: Option<&Path>,
    rules: Option<&Path>,
    out: &Path,
) -> CliResult {
    let manifest = ManifestBuilder::new("label", to_json(&cfg.model), cli.seed)
        .input(input)
        .input(vocab);
    let records: Vec<TextRecord> = read_jsonl(input)?;
    let v = load_vocab(vocab)?;
    let max_len = cfg.encoder(v.len(), 0).max_len;
    let labeller = load_labeller(v, lexicon, rules, max_len)?;
    let lines: Vec<LabelRecord> = records
        .iter()
        .map(|r| {
            let (_, labels) = labeller.label(&r.text);
            LabelRecord {
                text: &r.text,
                labels: labels.as_indices(),
            }
        })
        .collect();
    write_file(out, jsonl::to_string(&lines).as_bytes())?;
    manifest
        .write(&[out], &manifest_path(out))
        .map_err(usage(out.display()))?;
    log::info!("labelled {} texts into {}", lines.len(), out.display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_train(
    cli: &Cli,
    cfg: &Config,
    dataset: &Path,
    vocab: &Path,
    lexicon: Option<&Path>,
    rules: Option<&Path>,
    out: &Path,
    loss_log: Option<&Path>,
    init: Option<&Path>,
    overrides: (Option<usize>, Option<f64>, Option<usize>),
) -> CliResult {
    let mut tc = cfg.train.clone();
    if let Some(s) = cli.seed {
        tc.seed = s;
    }
    let (epochs, lr, max_steps) = overrides;
    tc.epochs = epochs.unwrap_or(tc.epochs);
    tc.lr = lr.unwrap_or(tc.lr);
    tc.max_steps = max_steps.or(tc.max_steps);

    let records: Vec<DatasetRecord> = read_jsonl(dataset)?;
    let v = load_vocab(vocab)?;
    let mut model = match init {
        Some(p) => load_model(p, &v)?,
        None => Model::init(cfg.encoder(v.len(), tc.seed)).map_err(usage("model config"))?,
    };
    let mut manifest = ManifestBuilder::new(
        "train",
        serde_json::json!({ "model": model.config(), "train": tc }),
        Some(tc.seed),
    )
    .input(dataset)
    .input(vocab);
    if let Some(p) = init {
        manifest = manifest.input(p);
    }
    let labeller = load_labeller(v.clone(), lexicon, rules, model.config().max_len)?;
    let examples = label_dataset(&records, &labeller);
    let log = train(&tc, &examples, &mut model, &v).map_err(|e| match e {
        hyrec::train::TrainError::NonFinite { .. } => CliError::Check(e.to_string()),
        other => CliError::Usage(other.to_string()),
    })?;
    model.round_to_f32();
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(usage(parent.display()))?;
    }
    model.save(out).map_err(usage(out.display()))?;
    let loss_path = loss_log.map(Path::to_path_buf).unwrap_or_else(|| {
        let mut n = out.file_name().unwrap_or_default().to_os_string();
        n.push(".loss.csv");
        out.with_file_name(n)
    });
    write_file(&loss_path, loss_csv(&log).as_bytes())?;
    manifest
        .write(&[out, &loss_path], &manifest_path(out))
        .map_err(usage(out.display()))?;
    if let (Some(first), Some(last)) = (log.first(), log.last()) {
        log::info!(
            "{} steps, total loss {:.4} -> {:.4}; wrote {}",
            log.len(),
            first.parts.total,
            last.parts.total,
            out.display()
        );
    }
    Ok(())
}

fn cmd_index(cli: &Cli, model: &Path, vocab: &Path, corpus: &Path, out: &Path) -> CliResult {
    let manifest = ManifestBuilder::new("index", serde_json::Value::Null, cli.seed)
        .input(model)
        .input(vocab)
        .input(corpus);
    let v = load_vocab(vocab)?;
    let m = load_model(model, &v)?;
    let records: Vec<CorpusRecord> = read_jsonl(corpus)?;
    let idx = index_corpus(&records, &m, &v, Some(out)).map_err(usage(out.display()))?;
    manifest
        .write(&[out], &manifest_path(out))
        .map_err(usage(out.display()))?;
    log::info!("indexed {} documents, {} units", idx.doc_count(), idx.unit_count());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_search(
    cli: &Cli,
    cfg: &Config,
    model: &Path,
    vocab: &Path,
    index: &Path,
    queries: &Path,
    out: &Path,
    mode: SearchMode,
    k: Option<usize>,
    k_candidates: Option<usize>,
) -> CliResult {
    let k = k.unwrap_or(cfg.search.k);
    let kc = k_candidates.unwrap_or(cfg.search.k_candidates);
    if k == 0 {
        return Err(CliError::Usage("k must be at least 1".into()));
    }
    let manifest = ManifestBuilder::new(
        "search",
        serde_json::json!({ "mode": mode, "k": k, "k_candidates": kc }),
        cli.seed,
    )
    .input(model)
    .input(vocab)
    .input(index)
    .input(queries);
    let v = load_vocab(vocab)?;
    let m = load_model(model, &v)?;
    let idx = IndexArtifacts::open(index).map_err(usage(index.display()))?;
    idx.check_fingerprints(&m, &v).map_err(usage(index.display()))?;
    let qs = queries_of(read_jsonl(queries)?);
    let run = search_queries(&idx, &m, &v, &qs, mode, k, kc.max(k)).map_err(usage("search"))?;
    let tag = format!(
        "hyrec-{}",
        serde_json::to_value(mode).unwrap().as_str().unwrap_or("run")
    );
    write_file(out, run.to_text(&tag).as_bytes())?;
    manifest
        .write(&[out], &manifest_path(out))
        .map_err(usage(out.display()))?;
    Ok(())
}

fn cmd_eval(run: &Path, qrels: &Path, k: usize, out: Option<&Path>) -> CliResult {
    let r = Run::load(run).map_err(usage(run.display()))?;
    let q = Qrels::load(qrels).map_err(usage(qrels.display()))?;
    let report = evaluate(&r, &q, k);
    let json = serde_json::to_string_pretty(&report).expect("report serializes");
    println!("{json}");
    if let Some(p) = out {
        write_file(p, format!("{json}\n").as_bytes())?;
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_mine(
    cli: &Cli,
    cfg: &Config,
    model: &Path,
    vocab: &Path,
    index: &Path,
    queries: &Path,
    qrels: &Path,
    per_query: usize,
    out: &Path,
) -> CliResult {
    let mc = MiningConfig {
        per_query,
        k_candidates: cfg.search.k_candidates,
        seed: cli.seed.unwrap_or(MiningConfig::default().seed),
        ..Default::default()
    };
    let manifest = ManifestBuilder::new("mine", serde_json::json!({ "per_query": per_query }), Some(mc.seed))
        .input(model)
        .input(index)
        .input(queries)
        .input(qrels);
    let v = load_vocab(vocab)?;
    let m = load_model(model, &v)?;
    let idx = IndexArtifacts::open(index).map_err(usage(index.display()))?;
    idx.check_fingerprints(&m, &v).map_err(usage(index.display()))?;
    let q = Qrels::load(qrels).map_err(usage(qrels.display()))?;
    let qs = queries_of(read_jsonl(queries)?);
    let mined = mine_hard_negatives(&m, &v, &idx, &qs, &q, &mc).map_err(usage("mining"))?;
    let records: Vec<MinedRecord> = mined
        .into_iter()
        .map(|(qid, negs)| MinedRecord {
            qid,
            negatives: negs
                .into_iter()
                .map(|n| MinedEntry {
                    doc_id: n.doc_id,
                    rank: n.rank,
                })
                .collect(),
        })
        .collect();
    write_file(out, jsonl::to_string(&records).as_bytes())?;
    manifest
        .write(&[out], &manifest_path(out))
        .map_err(usage(out.display()))?;
    Ok(())
}

fn cmd_selfcheck(cli: &Cli, model: Option<&Path>, vocab: Option<&Path>, corpus: Option<&Path>) -> CliResult {
    let vocab = match vocab {
        Some(vp) => Some(load_vocab(vp)?),
        None => None,
    };
    // A checkpoint that fails to load is reported by the named check; the
    // remaining checks then run against a fresh model.
    let loaded = match (model, vocab.as_ref()) {
        (Some(mp), Some(v)) => Model::load(mp).ok().filter(|m| m.check_vocab(v).is_ok()),
        _ => None,
    };
    let texts: Option<Vec<String>> = match corpus {
        Some(p) => Some(read_jsonl::<TextRecord>(p)?.into_iter().map(|r| r.text).collect()),
        None => None,
    };
    let inputs = SelfCheckInputs {
        seed: cli.seed.unwrap_or(3),
        model: loaded.as_ref().zip(vocab.as_ref()),
        checkpoint: model,
        corpus: texts.as_deref(),
    };
    let results = run_selfcheck(&inputs);
    let stdout = std::io::stdout();
    let mut w = stdout.lock();
    for r in &results {
        let _ = writeln!(w, "{} {}: {}", if r.passed { "PASS" } else { "FAIL" }, r.name, r.detail);
    }
    let failed: Vec<&str> = results.iter().filter(|r| !r.passed).map(|r| r.name.as_str()).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Check(format!("failed checks: {}", failed.join(", "))))
    }
}

fn write_split(dir: &Path, split: &EvalSplit) -> CliResult {
    fs::create_dir_all(dir).map_err(usage(dir.display()))?;
    let queries: Vec<CorpusRecord> = split
        .queries
        .iter()
        .map(|(id, text)| CorpusRecord {
            id: id.clone(),
            text: text.clone(),
        })
        .collect();
    write_file(&dir.join("corpus.jsonl"), jsonl::to_string(&split.corpus).as_bytes())?;
    write_file(&dir.join("queries.jsonl"), jsonl::to_string(&queries).as_bytes())?;
    write_file(&dir.join("qrels.txt"), split.qrels.to_text().as_bytes())
}

fn cmd_synth(cli: &Cli, out: &Path, pairs: Option<usize>) -> CliResult {
    let mut sc = SyntheticConfig::default();
    if let Some(s) = cli.seed {
        sc.seed = s;
    }
    if let Some(p) = pairs {
        sc.train_pairs = p;
    }
    let data = generate(&sc);
    fs::create_dir_all(out).map_err(usage(out.display()))?;
    let mut vocab = data.vocab.tokens().join("\n");
    vocab.push('\n');
    write_file(&out.join("vocab.txt"), vocab.as_bytes())?;
    let mut lex = String::from("# word\tfrequency\n");
    for (w, f) in &data.lexicon_entries {
        lex.push_str(&format!("{w}\t{f}\n"));
    }
    write_file(&out.join("lexicon.tsv"), lex.as_bytes())?;
    write_file(&out.join("rules.txt"), b"")?;
    write_file(&out.join("train.jsonl"), jsonl::to_string(&data.train).as_bytes())?;
    write_split(&out.join("general"), &data.general)?;
    write_split(&out.join("adversarial"), &data.adversarial)?;
    let manifest = ManifestBuilder::new(
        "synth",
        serde_json::json!({ "train_pairs": sc.train_pairs }),
        Some(sc.seed),
    );
    manifest
        .write(&[out], &manifest_path(out))
        .map_err(usage(out.display()))?;
    log::info!("wrote synthetic data to {}", out.display());
    Ok(())
}

fn run(cli: &Cli) -> CliResult {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(usage("threads"))?;
    }
    let cfg = Config::load(cli.config.as_deref()).map_err(CliError::Usage)?;
    match &cli.command {
        Command::Label {
            input,
            vocab,
            lexicon,
            rules,
            out,
        } => cmd_label(cli, &cfg, input, vocab, lexicon.as_deref(), rules.as_deref(), out),
        Command::Train {
            dataset,
            vocab,
            lexicon,
            rules,
            out,
            loss_log,
            init,
            epochs,
            lr,
            max_steps,
        } => cmd_train(
            cli,
            &cfg,
            dataset,
            vocab,
            lexicon.as_deref(),
            rules.as_deref(),
            out,
            loss_log.as_deref(),
            init.as_deref(),
            (*epochs, *lr, *max_steps),
        ),
        Command::Index {
            model,
            vocab,
            corpus,
            out,
        } => cmd_index(cli, model, vocab, corpus, out),
        Command::Search {
            model,
            vocab,
            index,
            queries,
            out,
            mode,
            k,
            k_candidates,
        } => cmd_search(cli, &cfg, model, vocab, index, queries, out, *mode, *k, *k_candidates),
        Command::Eval { run, qrels, k, out } => cmd_eval(run, qrels, *k, out.as_deref()),
        Command::Mine {
            model,
            vocab,
            index,
            queries,
            qrels,
            per_query,
            out,
        } => cmd_mine(cli, &cfg, model, vocab, index, queries, qrels, *per_query, out),
        Command::Selfcheck { model, vocab, corpus } => {
            cmd_selfcheck(cli, model.as_deref(), vocab.as_deref(), corpus.as_deref())
        }
        Command::Synth { out, pairs } => cmd_synth(cli, out, *pairs),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Check(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
