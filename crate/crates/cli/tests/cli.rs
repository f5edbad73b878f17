use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use graphtext_core::autograd::Graph;
use graphtext_core::checkpoint::{init_from_checkpoint, load_checkpoint};
use graphtext_core::encoder::{encode, EncoderInput};
use graphtext_core::graph_data::{linearize, load_corpus};
use graphtext_core::{EncoderVariant, Model};
use tempfile::TempDir;

const CORPUS: &str = r#"{"entities": ["alice", "paris"], "triples": [[1, "born in", 2]], "text": "alice was born in paris"}
{"entities": ["bob", "lima", "acme"], "triples": [[1, "lives in", 2], [1, "works for", 3]], "text": "bob lives in lima and works for acme"}
{"entities": ["carol", "oslo"], "triples": [[1, "visited", 2]], "text": "carol visited oslo last year"}
"#;

const CONFIG: &str = r#"{"d_model": 16, "d_ff": 32, "enc_heads": 2, "dec_heads": 2, "enc_layers": 1, "dec_layers": 1,
 "max_input_len": 40, "max_output_len": 16, "learning_rate": 0.003, "epochs": 2, "batch_size": 2}"#;

fn bin(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_graphtext")).args(args).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

struct Fixture {
    dir: TempDir,
}

impl Fixture {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("corpus.jsonl"), CORPUS).unwrap();
        fs::write(dir.path().join("cfg.json"), CONFIG).unwrap();
        Self { dir }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn s(&self, name: &str) -> String {
        self.path(name).to_string_lossy().into_owned()
    }

    fn pretrain(&self, out: &str, extra: &[&str]) -> Output {
        let mut args = vec!["pretrain", "--config", &self.s("cfg.json")]
            .into_iter()
            .map(String::from)
            .collect::<Vec<_>>();
        args.extend(["--corpus".into(), self.s("corpus.jsonl"), "--out".into(), self.s(out)]);
        args.extend(extra.iter().map(|s| s.to_string()));
        bin(&args.iter().map(String::as_str).collect::<Vec<_>>())
    }
}

fn log_rows(dir: &Path) -> Vec<serde_json::Value> {
    fs::read_to_string(dir.join("log.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

#[test]
fn pretrain_finetune_generate_eval() {
    let f = Fixture::new();
    let o = f.pretrain("pre", &["--seed", "3"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let pre = f.path("pre");
    assert!(pre.join("config.resolved.json").exists());
    assert_eq!(log_rows(&pre).len(), 4);
    assert!(pre.join("checkpoints/epoch-2/manifest.json").exists());

    let o = bin(&[
        "finetune",
        "--config",
        &f.s("cfg.json"),
        "--corpus",
        &f.s("corpus.jsonl"),
        "--init",
        &f.s("pre/checkpoints/epoch-2"),
        "--out",
        &f.s("ft"),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let rows = log_rows(&f.path("ft"));
    assert!(rows.iter().all(|r| r["l_graph"] == 0.0 && r["l_ot"] == 0.0));

    let o = bin(&[
        "generate",
        "--ckpt",
        &f.s("ft/checkpoints/epoch-2"),
        "--input",
        &f.s("corpus.jsonl"),
        "--beam",
        "3",
        "--out",
        &f.s("gen.txt"),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(fs::read_to_string(f.path("gen.txt")).unwrap().lines().count(), 3);

    let o = bin(&["eval", "--hyp", &f.s("gen.txt"), "--ref", &f.s("gen.txt")]);
    assert_eq!(code(&o), 0);
    let report: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert!(report["rouge_l_f"].as_f64().unwrap() >= 0.0);
}

#[test]
fn eval_of_identical_files_is_perfect() {
    let f = Fixture::new();
    fs::write(f.path("a.txt"), "the cat sat on the mat\nbob lives in lima\n").unwrap();
    let o = bin(&["eval", "--hyp", &f.s("a.txt"), "--ref", &f.s("a.txt")]);
    assert_eq!(code(&o), 0);
    let report: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert!((report["bleu"].as_f64().unwrap() - 100.0).abs() < 1e-9);
    assert!((report["rouge_l_f"].as_f64().unwrap() - 100.0).abs() < 1e-9);
}

#[test]
fn text_only_weights_zero_other_losses() {
    let f = Fixture::new();
    let o = f.pretrain("w", &["--weights", "1,0,0", "--max-steps", "2"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let rows = log_rows(&f.path("w"));
    assert_eq!(rows.len(), 2);
    for r in rows {
        assert_eq!(r["l_graph"], 0.0);
        assert_eq!(r["l_ot"], 0.0);
        assert_eq!(r["total"], r["l_text"]);
    }
}

#[test]
fn same_seed_same_artifacts() {
    let f = Fixture::new();
    assert_eq!(code(&f.pretrain("a", &["--seed", "5", "--max-steps", "3"])), 0);
    assert_eq!(code(&f.pretrain("b", &["--seed", "5", "--max-steps", "3"])), 0);
    for file in ["log.jsonl", "checkpoints/epoch-2/params.bin"] {
        assert_eq!(fs::read(f.path("a").join(file)).unwrap(), fs::read(f.path("b").join(file)).unwrap());
    }
}

#[test]
fn seq_checkpoint_initializes_joint() {
    let f = Fixture::new();
    assert_eq!(code(&f.pretrain("seq", &["--variant", "SEQ", "--max-steps", "2"])), 0);
    let ckpt = f.path("seq/checkpoints/epoch-1");
    let (seq, vocab) = load_checkpoint::<f64>(&ckpt).unwrap();
    let mut cfg = seq.config.clone();
    cfg.encoder.variant = EncoderVariant::Joint;
    let mut joint = Model::seeded(cfg, 9).unwrap();
    init_from_checkpoint(&mut joint, &ckpt).unwrap();

    for pair in load_corpus(f.path("corpus.jsonl")).unwrap() {
        let lin = linearize(&pair.graph).unwrap();
        let input = EncoderInput::from_graph(&vocab, &lin, &lin.tokens, None).unwrap();
        let states = |m: &Model| {
            let mut g = Graph::new();
            let out = encode(&mut g, m.net(), &input).unwrap();
            g.value(out.states).clone()
        };
        assert_eq!(states(&seq), states(&joint));
    }
}

#[test]
fn user_errors_exit_one() {
    let f = Fixture::new();
    let missing = f.s("nope.jsonl");
    let o = bin(&["pretrain", "--config", &f.s("cfg.json"), "--corpus", &missing, "--out", &f.s("x")]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("nope.jsonl"));

    assert_eq!(code(&bin(&["frobnicate"])), 1);
    assert_eq!(code(&bin(&["pretrain", "--weights", "1,0"])), 1);

    fs::write(f.path("bad.json"), r#"{"dmodel": 3}"#).unwrap();
    let o = bin(&["pretrain", "--config", &f.s("bad.json"), "--corpus", &f.s("corpus.jsonl"), "--out", &f.s("x")]);
    assert_eq!(code(&o), 1);

    fs::write(f.path("broken.jsonl"), "{not json}\n").unwrap();
    let o = bin(&["linearize", "--corpus", &f.s("broken.jsonl")]);
    assert_eq!(code(&o), 1);

    let o = bin(&["generate", "--ckpt", &f.s("none"), "--input", &f.s("corpus.jsonl"), "--out", &f.s("g.txt")]);
    assert_eq!(code(&o), 1);
}

#[test]
fn incompatible_init_is_rejected() {
    let f = Fixture::new();
    assert_eq!(code(&f.pretrain("small", &["--max-steps", "1"])), 0);
    fs::write(f.path("wide.json"), CONFIG.replace("\"d_model\": 16", "\"d_model\": 24")).unwrap();
    let o = bin(&[
        "finetune",
        "--config",
        &f.s("wide.json"),
        "--corpus",
        &f.s("corpus.jsonl"),
        "--init",
        &f.s("small/checkpoints/epoch-1"),
        "--out",
        &f.s("ft"),
    ]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("checkpoint"));
}

#[test]
fn linearize_prints_units() {
    let f = Fixture::new();
    let o = bin(&["linearize", "--corpus", &f.s("corpus.jsonl")]);
    assert_eq!(code(&o), 0);
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(text.contains("alice"));
    assert!(text.contains("works for"));
}

#[test]
fn help_exits_zero() {
    assert_eq!(code(&bin(&["--help"])), 0);
}
