use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use edgekit::synthetic::ToyGrammar;
use edgekit::treebank::write_conllu;

const TINY: [&str; 7] = [
    "encoder.word_dim=8",
    "encoder.char_dim=4",
    "encoder.char_filters=4",
    "encoder.lstm_hidden=8",
    "encoder.lstm_layers=1",
    "encoder.out_dim=8",
    "min_freq=1",
];

fn edgekit(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_edgekit"))
        .args(args)
        .env_remove("EDGEKIT_LR")
        .output()
        .expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Corpus {
    _dir: tempfile::TempDir,
    root: PathBuf,
    train: PathBuf,
    dev: PathBuf,
}

fn corpus() -> Corpus {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().to_path_buf();
    let g = ToyGrammar::default();
    let train = root.join("train.conllu");
    let dev = root.join("dev.conllu");
    fs::write(&train, write_conllu(&g.treebank(40, 1))).unwrap();
    fs::write(&dev, write_conllu(&g.treebank(10, 2))).unwrap();
    Corpus {
        _dir: dir,
        root,
        train,
        dev,
    }
}

fn train(c: &Corpus, out: &str, extra: &[&str]) -> PathBuf {
    let out_dir = c.root.join(out);
    let mut args = vec!["--threads", "1", "train", "--train", s(&c.train), "--dev", s(&c.dev), "--out-dir", s(&out_dir)];
    for t in TINY {
        args.extend(["--set", t]);
    }
    args.extend(["--set", "epochs=3", "--set", "lr=0.005"]);
    args.extend(extra);
    let o = edgekit(&args);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    out_dir.join("model.ckpt")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn missing_dev_file_fails_with_one_line_reason() {
    let c = corpus();
    let o = edgekit(&["train", "--train", s(&c.train), "--dev", "/nonexistent/dev.conllu", "--out-dir", s(&c.root)]);
    assert_eq!(o.status.code(), Some(2));
    let e = stderr(&o);
    assert!(e.starts_with("error[io]:"), "{e}");
    assert!(e.contains("dev treebank"));
    assert_eq!(e.trim_end().lines().count(), 1);
}

#[test]
fn config_precedence_file_env_set() {
    let c = corpus();
    let cfg = c.root.join("c.toml");
    fs::write(&cfg, "lr = 0.1\nepochs = 4\n").unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_edgekit"))
        .args(["train", "--train", s(&c.train), "--dev", s(&c.dev), "--out-dir", s(&c.root)])
        .args(["--config", s(&cfg), "--set", "epochs=9", "--show-config"])
        .env("EDGEKIT_LR", "0.3")
        .env("EDGEKIT_EPOCHS", "6")
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(v["lr"], 0.3);
    assert_eq!(v["epochs"], 9);

    let bad = edgekit(&["train", "--train", s(&c.train), "--dev", s(&c.dev), "--out-dir", s(&c.root), "--set", "bogus=1"]);
    assert!(stderr(&bad).starts_with("error[config]:"));
}

#[test]
fn full_pipeline() {
    let c = corpus();
    let edge = train(&c, "edge", &[]);
    let label = train(&c, "label", &["--set", "task=label"]);
    let log = fs::read_to_string(c.root.join("edge/train.log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 3);

    // parsing before precompute names the missing artifact
    let out = c.root.join("out.conllu");
    let o = edgekit(&["parse", "--checkpoint", s(&edge), "--input", s(&c.dev), "--output", s(&out)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).starts_with("error[missing-artifact]:"));
    assert!(stderr(&o).contains("edgekit precompute"));

    for ck in [&edge, &label] {
        let o = edgekit(&["--threads", "1", "precompute", "--checkpoint", s(ck), "--train", s(&c.train)]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    let summary = fs::read(edge.with_extension("summary")).unwrap();
    let index = fs::read(edge.with_extension("index")).unwrap();
    edgekit(&["--threads", "1", "precompute", "--checkpoint", s(&edge), "--train", s(&c.train)]);
    assert_eq!(fs::read(edge.with_extension("summary")).unwrap(), summary);
    assert_eq!(fs::read(edge.with_extension("index")).unwrap(), index);

    let parse = |mode: &str, decoder: &str, path: &Path| {
        let o = edgekit(&[
            "parse",
            "--checkpoint",
            s(&edge),
            "--label-checkpoint",
            s(&label),
            "--input",
            s(&c.dev),
            "--output",
            s(path),
            "--mode",
            mode,
            "--decoder",
            decoder,
        ]);
        assert!(o.status.success(), "{}", stderr(&o));
        fs::read_to_string(path).unwrap()
    };
    let fast = parse("fast", "greedy", &c.root.join("fast.conllu"));
    let slow = parse("explainable", "greedy", &c.root.join("slow.conllu"));
    assert_eq!(fast, slow);
    let cle = parse("fast", "cle", &c.root.join("cle.conllu"));
    for (a, b) in fast.lines().zip(cle.lines()) {
        let (fa, fb): (Vec<&str>, Vec<&str>) = (a.split('\t').collect(), b.split('\t').collect());
        assert_eq!(fa.len(), fb.len());
        for k in 0..fa.len() {
            if k != 6 && k != 7 {
                assert_eq!(fa[k], fb[k]);
            }
        }
    }

    // rationales
    let jsonl = c.root.join("why.jsonl");
    let o = edgekit(&["explain", "--checkpoint", s(&edge), "--input", s(&c.dev), "--k", "3", "--output", s(&jsonl)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let lines: Vec<String> = fs::read_to_string(&jsonl).unwrap().lines().map(String::from).collect();
    let dev_tokens = edgekit::treebank::parse_conllu(&fs::read_to_string(&c.dev).unwrap()).unwrap().num_tokens();
    assert_eq!(lines.len(), dev_tokens);
    for l in &lines {
        let v: serde_json::Value = serde_json::from_str(l).unwrap();
        for key in ["sentence", "head_form", "dep_form", "j", "i"] {
            assert!(v["query"].get(key).is_some());
        }
        let n = v["neighbors"].as_array().unwrap();
        assert_eq!(n.len(), 3);
        for key in ["train_sentence_id", "j", "i", "head_form", "dep_form", "gold_label", "similarity"] {
            assert!(n[0].get(key).is_some());
        }
        let sims: Vec<f64> = n.iter().map(|x| x["similarity"].as_f64().unwrap()).collect();
        assert!(sims.windows(2).all(|w| w[0] >= w[1]));
    }

    // evaluation
    let o = edgekit(&["eval", "--gold", s(&c.dev), "--pred", s(&c.dev)]);
    assert!(stdout(&o).contains("UAS 100.00  LAS 100.00"), "{}", stdout(&o));
    let reports = c.root.join("reports");
    let o = edgekit(&[
        "eval",
        "--gold",
        s(&c.dev),
        "--checkpoint",
        s(&edge),
        s(&edge),
        "--label-checkpoint",
        s(&label),
        s(&label),
        "--min-uas",
        "101",
        "--report-dir",
        s(&reports),
    ]);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
    assert!(stdout(&o).contains("mean of 2"));
    let summary: serde_json::Value = serde_json::from_str(&fs::read_to_string(reports.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["version"], 1);
    assert_eq!(summary["reports"].as_array().unwrap().len(), 3);

    // subclass test guards against label supervision
    let o = edgekit(&["subclass", "--checkpoint", s(&label), "--dev", s(&c.dev)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("label supervision"));
    let o = edgekit(&["subclass", "--checkpoint", s(&edge), "--dev", s(&c.dev), "--min-las", "0"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("subclass LAS"));

    // hubness
    let hub = c.root.join("hub");
    let o = edgekit(&[
        "hubness",
        "--checkpoint",
        s(&edge),
        "--queries",
        s(&c.dev),
        "--top",
        "20",
        "--report-dir",
        s(&hub),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("conservation"));
    assert!(stdout(&o).contains(" ok"));
    let tsv = fs::read_to_string(hub.join("model.hubness.tsv")).unwrap();
    assert_eq!(tsv.lines().count(), 21);
}

#[test]
fn seed_override_changes_the_training_log() {
    let c = corpus();
    train(&c, "a", &["--seed", "1"]);
    train(&c, "b", &["--seed", "1"]);
    train(&c, "c", &["--seed", "2"]);
    let read = |d: &str| fs::read(c.root.join(d).join("train.log.jsonl")).unwrap();
    assert_eq!(read("a"), read("b"));
    assert_ne!(read("a"), read("c"));
}

#[test]
fn empty_input_gives_empty_output() {
    let c = corpus();
    let edge = train(&c, "w", &["--set", "scoring=weight"]);
    let empty = c.root.join("empty.conllu");
    fs::write(&empty, "").unwrap();
    let out = c.root.join("empty.out");
    let o = edgekit(&["parse", "--checkpoint", s(&edge), "--input", s(&empty), "--output", s(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(fs::read_to_string(&out).unwrap(), "");
}
