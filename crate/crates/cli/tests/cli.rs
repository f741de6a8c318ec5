use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use ulmfit::corpus::synthetic::{author_documents, general_text, SyntheticConfig};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_ulmfit"));
    c.env("RUST_LOG", "warn");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn ulmfit")
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap_or(-1)
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

struct Workspace {
    _dir: tempfile::TempDir,
    root: PathBuf,
}

impl Workspace {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        let syn = SyntheticConfig {
            n_authors: 3,
            samples_per_author: 10,
            words_per_sample: 20,
            ..SyntheticConfig::default()
        };
        for doc in author_documents(&syn, 7).unwrap() {
            let d = root.join("authors").join(doc.author.as_ref().unwrap());
            fs::create_dir_all(&d).unwrap();
            fs::write(d.join("a.txt"), &doc.text).unwrap();
        }
        fs::write(root.join("general.txt"), general_text(&syn, 7, 3000).unwrap()).unwrap();
        Workspace { _dir: dir, root }
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    fn config(&self, name: &str, stage: &str, corpus: &str, checkpoint_in: Option<&str>) -> PathBuf {
        let mut v = serde_json::json!({
            "train": {"stage": stage, "epochs": 1, "batch_size": 4, "bptt": 8, "unfreeze_epochs": 1,
                      "max_tokens": 60, "lr": 0.01},
            "model": {"embedding_size": 6, "hidden_size": 8, "n_layers": 2, "head_hidden": 6},
            "data": {"chunk_words": 20, "folds": 2},
            "lr_find": {"lr_start": 1e-4, "lr_end": 1.0, "steps": 8},
            "corpus": p(&self.path(corpus)),
            "tokenizer": p(&self.path("vocab/vocab.txt")),
        });
        if let Some(ck) = checkpoint_in {
            v["checkpoint_in"] = Value::from(p(&self.path(ck)));
        }
        let path = self.path(name);
        fs::write(&path, serde_json::to_string(&v).unwrap()).unwrap();
        path
    }
}

fn ok(o: &Output) {
    assert_eq!(code(o), 0, "stderr: {}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn full_pipeline_through_the_command_line() {
    let ws = Workspace::new();
    let vocab_out = ws.path("vocab");
    ok(&run(&["build-vocab", "--mode", "char", "--corpus", p(&ws.path("general.txt")), "--out", p(&vocab_out)]));
    assert!(vocab_out.join("vocab.txt").is_file());

    let pre = ws.config("pre.json", "pretrain", "general.txt", None);
    ok(&run(&["pretrain", "--config", p(&pre), "--out", p(&ws.path("pre"))]));
    for f in ["checkpoint/manifest.json", "checkpoint/weights.bin", "report.json", "train.log"] {
        assert!(ws.path("pre").join(f).exists(), "{f}");
    }
    let report: Value = serde_json::from_str(&fs::read_to_string(ws.path("pre/report.json")).unwrap()).unwrap();
    assert!(report["best_valid_loss"].as_f64().unwrap().is_finite());

    let ft = ws.config("ft.json", "finetune", "authors", Some("pre/checkpoint"));
    ok(&run(&["finetune", "--config", p(&ft), "--out", p(&ws.path("ft"))]));

    let cls = ws.config("cls.json", "classify", "authors", Some("ft/checkpoint"));
    ok(&run(&["train-classifier", "--config", p(&cls), "--out", p(&ws.path("cls"))]));
    let metrics: Value = serde_json::from_str(&fs::read_to_string(ws.path("cls/metrics.json")).unwrap()).unwrap();
    let acc = metrics["accuracy"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&acc));
    let split: Value = serde_json::from_str(&fs::read_to_string(ws.path("cls/split.json")).unwrap()).unwrap();
    assert_eq!(split["authors"].as_array().unwrap().len(), 3);

    let text = ws.path("authors/author1/a.txt");
    let o = run(&["predict", "--checkpoint", p(&ws.path("cls/checkpoint")), "--text-file", p(&text)]);
    ok(&o);
    let pred: Value = serde_json::from_str(&stdout(&o)).unwrap();
    let probs: Vec<f64> = pred["probabilities"].as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).collect();
    assert_eq!(probs.len(), 3);
    assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    assert!(pred["labels"].as_array().unwrap().contains(&pred["author"]));

    let eval_cfg = ws.config("eval.json", "classify", "authors", Some("cls/checkpoint"));
    let o = run(&["evaluate", "--config", p(&eval_cfg), "--weighted-f1"]);
    ok(&o);
    let m: Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(m["accuracy"], metrics["accuracy"]);
    assert!(m["weighted_f1"].is_number());

    let o = run(&["generate", "--checkpoint", p(&ws.path("ft/checkpoint")), "--prompt", "ab", "--n-tokens", "5", "--temperature", "0"]);
    ok(&o);
    let again = run(&["generate", "--checkpoint", p(&ws.path("ft/checkpoint")), "--prompt", "ab", "--n-tokens", "5", "--temperature", "0"]);
    assert_eq!(stdout(&o), stdout(&again));
    assert!(stdout(&o).starts_with("ab"));

    let o = run(&["lr-find", "--config", p(&cls), "--out", p(&ws.path("lr"))]);
    ok(&o);
    let csv = stdout(&o);
    assert!(csv.starts_with("lr,smoothed_loss\n"));
    assert!(csv.contains("suggested_lr,"));

    let o = run(&["kfold", "--config", p(&cls), "--out", p(&ws.path("kf"))]);
    ok(&o);
    let kf: Value = serde_json::from_str(&fs::read_to_string(ws.path("kf/kfold.json")).unwrap()).unwrap();
    assert_eq!(kf["folds"].as_array().unwrap().len(), 2);
    assert!(kf["accuracy"]["margin_of_error"].is_number());

    // A classifier checkpoint cannot be fine-tuned as a language model.
    let wrong = ws.config("wrong.json", "finetune", "authors", Some("cls/checkpoint"));
    let o = run(&["finetune", "--config", p(&wrong), "--out", p(&ws.path("wrong"))]);
    assert_eq!(code(&o), 2);
}

#[test]
fn subset_is_balanced_and_seeded() {
    let ws = Workspace::new();
    let cfg = ws.config("c.json", "classify", "authors", None);
    let a = run(&["subset", "--n-authors", "2", "--seed", "3", "--config", p(&cfg), "--out", p(&ws.path("s1"))]);
    ok(&a);
    let b = run(&["subset", "--n-authors", "2", "--seed", "3", "--config", p(&cfg), "--out", p(&ws.path("s2"))]);
    assert_eq!(stdout(&a), stdout(&b));
    let v: Value = serde_json::from_str(&stdout(&a)).unwrap();
    assert_eq!(v["authors"].as_array().unwrap().len(), 2);
    assert_eq!(v["indices"].as_array().unwrap().len(), 2 * v["per_author"].as_u64().unwrap() as usize);
    assert!(ws.path("s1/subset.json").is_file());
}

#[test]
fn pretrain_is_reproducible_for_a_seed() {
    let ws = Workspace::new();
    ok(&run(&["build-vocab", "--mode", "char", "--corpus", p(&ws.path("general.txt")), "--out", p(&ws.path("vocab"))]));
    let cfg = ws.config("pre.json", "pretrain", "general.txt", None);
    for out in ["a", "b"] {
        ok(&run(&["pretrain", "--seed", "11", "--config", p(&cfg), "--out", p(&ws.path(out))]));
    }
    for f in ["manifest.json", "weights.bin"] {
        let a = fs::read(ws.path("a/checkpoint").join(f)).unwrap();
        let b = fs::read(ws.path("b/checkpoint").join(f)).unwrap();
        assert!(a == b, "{f} differs");
    }
}

#[test]
fn help_and_version_exit_zero() {
    assert_eq!(code(&run(&["--help"])), 0);
    assert_eq!(code(&run(&["--version"])), 0);
    assert_eq!(code(&run(&["pretrain", "--help"])), 0);
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(code(&run(&[])), 1);
    assert_eq!(code(&run(&["no-such-command"])), 1);
    assert_eq!(code(&run(&["subset"])), 1);
    assert_eq!(code(&run(&["pretrain", "--seed", "abc"])), 1);
    // Required paths missing from both flags and config.
    assert_eq!(code(&run(&["pretrain", "--out", "/nonexistent-never"])), 1);

    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    fs::write(&bad, r#"{"train": {"epochz": 3}}"#).unwrap();
    let o = run(&["pretrain", "--config", p(&bad)]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("epochz"));
    fs::write(&bad, r#"{"train": {"batch_size": 0}}"#).unwrap();
    assert_eq!(code(&run(&["pretrain", "--config", p(&bad)])), 1);
}

#[test]
fn data_and_checkpoint_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing");
    assert_eq!(code(&run(&["build-vocab", "--mode", "word", "--corpus", p(&missing), "--out", p(dir.path())])), 2);
    let o = run(&["predict", "--checkpoint", p(&missing), "--text-file", p(&missing)]);
    assert_eq!(code(&o), 2);
    assert!(!String::from_utf8_lossy(&o.stderr).is_empty());
    let cfg = dir.path().join("c.json");
    fs::write(&cfg, "{not json").unwrap();
    assert_eq!(code(&run(&["pretrain", "--config", p(&cfg)])), 1);
}

#[test]
fn corrupted_checkpoint_is_rejected() {
    let ws = Workspace::new();
    ok(&run(&["build-vocab", "--mode", "char", "--corpus", p(&ws.path("general.txt")), "--out", p(&ws.path("vocab"))]));
    let cfg = ws.config("pre.json", "pretrain", "general.txt", None);
    ok(&run(&["pretrain", "--config", p(&cfg), "--out", p(&ws.path("pre"))]));
    let w = ws.path("pre/checkpoint/weights.bin");
    let mut bytes = fs::read(&w).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x40;
    fs::write(&w, bytes).unwrap();
    let o = run(&["generate", "--checkpoint", p(&ws.path("pre/checkpoint")), "--prompt", "ab"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn divergence_saves_weights_and_exits_three() {
    let ws = Workspace::new();
    ok(&run(&["build-vocab", "--mode", "char", "--corpus", p(&ws.path("general.txt")), "--out", p(&ws.path("vocab"))]));
    let cfg = ws.config("pre.json", "pretrain", "general.txt", None);
    let mut v: Value = serde_json::from_str(&fs::read_to_string(&cfg).unwrap()).unwrap();
    v["train"]["lr"] = Value::from(1e12);
    fs::write(&cfg, v.to_string()).unwrap();
    let o = run(&["pretrain", "--config", p(&cfg), "--out", p(&ws.path("pre"))]);
    assert_eq!(code(&o), 3, "{}", String::from_utf8_lossy(&o.stderr));
    let report: Value = serde_json::from_str(&fs::read_to_string(ws.path("pre/report.json")).unwrap()).unwrap();
    assert!(report["diverged"].is_string());
    ok(&run(&["generate", "--checkpoint", p(&ws.path("pre/checkpoint")), "--prompt", "ab", "--n-tokens", "3"]));
}
