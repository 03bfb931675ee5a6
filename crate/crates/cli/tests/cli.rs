use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn hyrec(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hyrec"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Synthetic data directory with `pairs` training pairs.
fn synth(dir: &Path, pairs: usize) -> PathBuf {
    let out = dir.join("data");
    ok(&hyrec(&["synth", "--out", s(&out), "--pairs", &pairs.to_string()]));
    out
}

fn train_args<'a>(data: &'a Path, ckpt: &'a Path, csv: &'a Path) -> Vec<String> {
    vec![
        "train".into(),
        "--dataset".into(),
        data.join("train.jsonl").display().to_string(),
        "--vocab".into(),
        data.join("vocab.txt").display().to_string(),
        "--lexicon".into(),
        data.join("lexicon.tsv").display().to_string(),
        "--rules".into(),
        data.join("rules.txt").display().to_string(),
        "--out".into(),
        ckpt.display().to_string(),
        "--loss-log".into(),
        csv.display().to_string(),
    ]
}

fn run_train(data: &Path, ckpt: &Path, csv: &Path, extra: &[&str]) {
    let mut args = train_args(data, ckpt, csv);
    args.extend(extra.iter().map(|a| a.to_string()));
    let refs: Vec<&str> = args.iter().map(String::as_str).collect();
    ok(&hyrec(&refs));
}

fn totals(csv: &Path) -> Vec<f64> {
    fs::read_to_string(csv)
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.rsplit(',').next().unwrap().parse().unwrap())
        .collect()
}

#[test]
fn label_empty_input_gives_empty_output() {
    let dir = TempDir::new().unwrap();
    let data = synth(dir.path(), 8);
    let input = dir.path().join("in.jsonl");
    let out = dir.path().join("out.jsonl");
    fs::write(&input, "").unwrap();
    ok(&hyrec(&[
        "label",
        "--input",
        s(&input),
        "--vocab",
        s(&data.join("vocab.txt")),
        "--out",
        s(&out),
    ]));
    assert_eq!(fs::read_to_string(&out).unwrap(), "");
}

#[test]
fn label_reduplicated_name_sentence() {
    let dir = TempDir::new().unwrap();
    let text = "李一一一下子想不起她是谁";
    let mut vocab: Vec<String> = ["[PAD]", "[UNK]", "[CLS]", "[SEP]"]
        .iter()
        .map(|t| t.to_string())
        .collect();
    for c in text.chars() {
        if !vocab.contains(&c.to_string()) {
            vocab.push(c.to_string());
        }
    }
    let p = |n: &str| dir.path().join(n);
    fs::write(p("vocab.txt"), vocab.join("\n") + "\n").unwrap();
    fs::write(p("lexicon.tsv"), "一下子\t10\n想不起\t10\n一一\t5\n").unwrap();
    fs::write(p("rules.txt"), "[李王张刘陈杨赵黄周吴]([\\p{Han}])\\1\n").unwrap();
    fs::write(p("in.jsonl"), format!("{{\"text\":\"{text}\"}}\n")).unwrap();
    ok(&hyrec(&[
        "label",
        "--input",
        s(&p("in.jsonl")),
        "--vocab",
        s(&p("vocab.txt")),
        "--lexicon",
        s(&p("lexicon.tsv")),
        "--rules",
        s(&p("rules.txt")),
        "--out",
        s(&p("out.jsonl")),
    ]));
    let line: serde_json::Value = serde_json::from_str(fs::read_to_string(p("out.jsonl")).unwrap().trim()).unwrap();
    assert_eq!(line["text"], text);
    // S=0 B=1 M=2 E=3: three 3-character words, then three single characters.
    let labels: Vec<u64> = line["labels"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v.as_u64().unwrap())
        .collect();
    assert_eq!(labels, vec![1, 2, 3, 1, 2, 3, 1, 2, 3, 0, 0, 0]);
    assert!(p("out.jsonl.manifest.json").exists());
}

#[test]
fn label_malformed_line_reports_line_number() {
    let dir = TempDir::new().unwrap();
    let data = synth(dir.path(), 8);
    let input = dir.path().join("in.jsonl");
    fs::write(&input, "{\"text\":\"的\"}\n{\"text\": oops}\n").unwrap();
    let out = hyrec(&[
        "label",
        "--input",
        s(&input),
        "--vocab",
        s(&data.join("vocab.txt")),
        "--out",
        s(&dir.path().join("out.jsonl")),
    ]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("line 2"), "{err}");
}

#[test]
fn train_missing_dataset_exits_with_usage_error() {
    let dir = TempDir::new().unwrap();
    let data = synth(dir.path(), 8);
    let out = hyrec(&[
        "train",
        "--dataset",
        s(&dir.path().join("absent.jsonl")),
        "--vocab",
        s(&data.join("vocab.txt")),
        "--out",
        s(&dir.path().join("m.ckpt")),
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn fixed_seed_training_reproduces_loss_log() {
    let dir = TempDir::new().unwrap();
    let data = synth(dir.path(), 48);
    let (a, b) = (dir.path().join("a.ckpt"), dir.path().join("b.ckpt"));
    let (ca, cb) = (dir.path().join("a.csv"), dir.path().join("b.csv"));
    run_train(&data, &a, &ca, &["--epochs", "1", "--max-steps", "3", "--seed", "11"]);
    run_train(&data, &b, &cb, &["--epochs", "1", "--max-steps", "3", "--seed", "11"]);
    let log = fs::read(&ca).unwrap();
    assert_eq!(log, fs::read(&cb).unwrap());
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    assert_eq!(totals(&ca).len(), 3);
}

#[test]
fn two_hundred_step_run_halves_loss() {
    let dir = TempDir::new().unwrap();
    // 640 pairs at batch 16 give 40 steps per epoch, 200 over 5 epochs.
    let data = synth(dir.path(), 640);
    let (ckpt, csv) = (dir.path().join("m.ckpt"), dir.path().join("loss.csv"));
    run_train(&data, &ckpt, &csv, &["--epochs", "5"]);
    let t = totals(&csv);
    assert_eq!(t.len(), 200);
    let first = t[..5].iter().sum::<f64>() / 5.0;
    let last = t[t.len() - 5..].iter().sum::<f64>() / 5.0;
    assert!(last <= 0.5 * first, "first {first} last {last}");
}

/// A briefly trained model plus an index over the general split.
struct Pipeline {
    dir: TempDir,
    data: PathBuf,
    ckpt: PathBuf,
}

impl Pipeline {
    fn new() -> Self {
        let dir = TempDir::new().unwrap();
        let data = synth(dir.path(), 32);
        let ckpt = dir.path().join("m.ckpt");
        run_train(
            &data,
            &ckpt,
            &dir.path().join("loss.csv"),
            &["--epochs", "1", "--max-steps", "2"],
        );
        Self { dir, data, ckpt }
    }

    fn index(&self, name: &str) -> PathBuf {
        let out = self.dir.path().join(name);
        ok(&hyrec(&[
            "index",
            "--model",
            s(&self.ckpt),
            "--vocab",
            s(&self.data.join("vocab.txt")),
            "--corpus",
            s(&self.data.join("general/corpus.jsonl")),
            "--out",
            s(&out),
        ]));
        out
    }
}

#[test]
fn index_search_and_reindex() {
    let p = Pipeline::new();
    let a = p.index("idx_a");
    let b = p.index("idx_b");
    assert_eq!(
        fs::read(a.join("meta.json")).unwrap(),
        fs::read(b.join("meta.json")).unwrap()
    );
    assert!(a.join("manifest.json").exists());

    for mode in ["hybrid", "lexicon", "dense"] {
        let run = p.dir.path().join(format!("run_{mode}.txt"));
        ok(&hyrec(&[
            "search",
            "--model",
            s(&p.ckpt),
            "--vocab",
            s(&p.data.join("vocab.txt")),
            "--index",
            s(&a),
            "--queries",
            s(&p.data.join("general/queries.jsonl")),
            "--out",
            s(&run),
            "--k",
            "10",
            "--mode",
            mode,
        ]));
        let mut per_query: BTreeMap<String, usize> = BTreeMap::new();
        for line in fs::read_to_string(&run).unwrap().lines() {
            let fields: Vec<&str> = line.split_whitespace().collect();
            assert_eq!(fields.len(), 6, "{line}");
            *per_query.entry(fields[0].to_string()).or_default() += 1;
        }
        assert!(!per_query.is_empty());
        assert!(per_query.values().all(|&n| n <= 10), "{mode}: {per_query:?}");

        let report = ok(&hyrec(&[
            "eval",
            "--run",
            s(&run),
            "--qrels",
            s(&p.data.join("general/qrels.txt")),
        ]));
        let v: serde_json::Value = serde_json::from_str(&report).unwrap();
        let ndcg = v["ndcg"].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&ndcg));
    }
}

#[test]
fn eval_hand_built_run() {
    let dir = TempDir::new().unwrap();
    let run = dir.path().join("run.txt");
    let qrels = dir.path().join("qrels.txt");
    fs::write(&run, "q1 Q0 d1 1 2.0 t\nq1 Q0 d2 2 1.0 t\n").unwrap();
    fs::write(&qrels, "q1 0 d2 1\n").unwrap();
    let out = ok(&hyrec(&["eval", "--run", s(&run), "--qrels", s(&qrels), "--k", "10"]));
    let v: serde_json::Value = serde_json::from_str(&out).unwrap();
    // One relevant document at rank 2: DCG = 1/log2(3), ideal DCG = 1.
    let expected = 1.0 / 3f64.log2();
    assert!((v["ndcg"].as_f64().unwrap() - expected).abs() < 1e-9);
    assert!((v["mrr"].as_f64().unwrap() - 0.5).abs() < 1e-12);
    assert!((v["recall"].as_f64().unwrap() - 1.0).abs() < 1e-12);
    assert!((v["map"].as_f64().unwrap() - 0.5).abs() < 1e-12);
}

#[test]
fn selfcheck_fresh_model_passes() {
    let out = hyrec(&["selfcheck"]);
    let text = ok(&out);
    for name in ["gradient", "index-oracle", "normalization"] {
        assert!(text.contains(&format!("PASS {name}")), "{text}");
    }
}

#[test]
fn selfcheck_names_corrupted_checkpoint() {
    let p = Pipeline::new();
    let bad = p.dir.path().join("bad.ckpt");
    let mut bytes = fs::read(&p.ckpt).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0xff;
    fs::write(&bad, bytes).unwrap();
    let out = hyrec(&["selfcheck", "--model", s(&bad), "--vocab", s(&p.data.join("vocab.txt"))]);
    assert_eq!(out.status.code(), Some(1));
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("FAIL checkpoint"), "{text}");

    let good = ok(&hyrec(&[
        "selfcheck",
        "--model",
        s(&p.ckpt),
        "--vocab",
        s(&p.data.join("vocab.txt")),
    ]));
    assert!(good.contains("PASS checkpoint"), "{good}");
}

#[test]
fn selfcheck_empty_corpus_passes() {
    let dir = TempDir::new().unwrap();
    let corpus = dir.path().join("empty.jsonl");
    fs::write(&corpus, "").unwrap();
    let text = ok(&hyrec(&["selfcheck", "--corpus", s(&corpus)]));
    assert!(text.contains("PASS index-round-trip"), "{text}");
}

#[test]
fn mined_negatives_are_not_positives() {
    let p = Pipeline::new();
    let idx = p.index("idx");
    let out = p.dir.path().join("mined.jsonl");
    ok(&hyrec(&[
        "mine",
        "--model",
        s(&p.ckpt),
        "--vocab",
        s(&p.data.join("vocab.txt")),
        "--index",
        s(&idx),
        "--queries",
        s(&p.data.join("general/queries.jsonl")),
        "--qrels",
        s(&p.data.join("general/qrels.txt")),
        "--out",
        s(&out),
    ]));
    let qrels = fs::read_to_string(p.data.join("general/qrels.txt")).unwrap();
    let positives: std::collections::HashSet<(String, String)> = qrels
        .lines()
        .map(|l| {
            let f: Vec<&str> = l.split_whitespace().collect();
            (f[0].to_string(), f[2].to_string())
        })
        .collect();
    let mut count = 0;
    for line in fs::read_to_string(&out).unwrap().lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        let qid = v["qid"].as_str().unwrap().to_string();
        for n in v["negatives"].as_array().unwrap() {
            let rank = n["rank"].as_u64().unwrap();
            assert!((20..=100).contains(&rank));
            assert!(!positives.contains(&(qid.clone(), n["doc_id"].as_str().unwrap().to_string())));
            count += 1;
        }
    }
    assert!(count > 0);
}

#[test]
fn unknown_config_key_is_a_usage_error() {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("c.toml");
    fs::write(&cfg, "[train]\nlearning_rate = 1\n").unwrap();
    let run = dir.path().join("r.txt");
    fs::write(&run, "").unwrap();
    let out = hyrec(&["--config", s(&cfg), "eval", "--run", s(&run), "--qrels", s(&run)]);
    assert_eq!(out.status.code(), Some(2));
}
