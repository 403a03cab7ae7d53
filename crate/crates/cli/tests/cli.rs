//! End-to-end runs of the `msync` binary on a small generated data set.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use msync_core::corpus::{write_conll2000, write_ptb, write_raw, TaggedSentence};
use msync_core::synth::generate;

const LM: &str = "d_model=8\nseq_layers=1\nsyn_layers=1\nlabel_emb_dim=4\nheads=2\nff_dim=12\n\
char_emb_dim=4\nchar_filters=1:3,2:3\nwarmup=10\nbatch_size=8\nepochs=1\n";
const CHUNKER: &str = "char_emb_dim=4\nchar_filters=2:4\nword_emb_dim=8\nencoder_hidden=8\n\
encoder_layers=1\nmax_epochs=1\npatience=1\n";
const TAGGER: &str = "word_emb_dim=8\nhidden=8\nepochs=1\npatience=1\n";
const PROBE: &str = "epochs=2\n";

struct Data {
    dir: tempfile::TempDir,
}

impl Data {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let sents = generate(40, 17);
        let chunks: Vec<TaggedSentence> = sents.iter().map(|s| s.chunk_sentence().unwrap()).collect();
        let ner: Vec<TaggedSentence> = sents.iter().map(|s| s.ner_sentence().unwrap()).collect();
        let trees: Vec<_> = sents.iter().map(|s| s.tree.clone()).collect();
        let tokens: Vec<Vec<String>> = chunks.iter().map(|s| s.tokens.clone()).collect();
        let p = dir.path();
        fs::write(p.join("trees.mrg"), write_ptb(&trees)).unwrap();
        fs::write(p.join("chunks.train"), write_conll2000(&chunks[..30]).unwrap()).unwrap();
        fs::write(p.join("chunks.dev"), write_conll2000(&chunks[30..]).unwrap()).unwrap();
        fs::write(p.join("raw.txt"), write_raw(&tokens)).unwrap();
        fs::write(p.join("raw.chunks"), write_conll2000(&chunks).unwrap()).unwrap();
        fs::write(p.join("ner.train"), write_conll2000(&ner[..30]).unwrap()).unwrap();
        fs::write(p.join("ner.dev"), write_conll2000(&ner[30..]).unwrap()).unwrap();
        for (name, text) in [("lm.cfg", LM), ("chunker.cfg", CHUNKER), ("tagger.cfg", TAGGER), ("probe.cfg", PROBE)] {
            fs::write(p.join(name), text).unwrap();
        }
        Data { dir }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    /// Runs `msync` with the arguments, resolving bare file names in the data
    /// directory.
    fn run(&self, args: &[&str]) -> Output {
        let args: Vec<String> = args
            .iter()
            .map(|a| if a.starts_with('-') || !a.contains('.') && !a.contains('/') { a.to_string() } else { self.path(a).display().to_string() })
            .collect();
        Command::new(env!("CARGO_BIN_EXE_msync")).args(&args).output().unwrap()
    }

    fn ok(&self, args: &[&str]) -> Output {
        let out = self.run(args);
        assert_eq!(out.status.code(), Some(0), "{args:?}\n{}", String::from_utf8_lossy(&out.stderr));
        out
    }

    fn code(&self, args: &[&str]) -> i32 {
        self.run(args).status.code().unwrap()
    }
}

fn bytes(p: &Path) -> Vec<u8> {
    fs::read(p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

#[test]
fn derive_chunks_writes_output_and_snapshot() {
    let d = Data::new();
    d.ok(&["derive-chunks", "--trees", "trees.mrg", "--out", "derived.txt", "--seed", "4"]);
    assert_eq!(bytes(&d.path("derived.txt")), bytes(&d.path("raw.chunks")));
    let snap = fs::read_to_string(d.path("derived.txt.run.config")).unwrap();
    assert!(snap.contains("command=derive-chunks\n"), "{snap}");
    assert!(snap.contains("seed=4\n"), "{snap}");
}

#[test]
fn usage_errors_exit_one() {
    let d = Data::new();
    assert_eq!(d.code(&["derive-chunks", "--trees", "trees.mrg"]), 1);
    assert_eq!(d.code(&["no-such-command"]), 1);
    assert_eq!(d.code(&["gradcheck", "--scope", "everything"]), 1);
    assert_eq!(d.code(&["pretrain", "--train", "raw.txt", "--scheme", "frozen", "--chunks", "raw.chunks", "--out", "lm.x"]), 1);
    assert_eq!(d.code(&["pretrain", "--train", "raw.txt", "--scheme", "end_to_end", "--out", "lm.x"]), 1);
    assert_eq!(d.code(&["pretrain", "--train", "raw.txt", "--scheme", "sideways", "--out", "lm.x"]), 1);
    assert_eq!(d.code(&["chunker-train", "--train", "chunks.train", "--dev", "chunks.dev", "--out", "c.x", "--set", "no_such_key=1"]), 1);
    assert_eq!(d.code(&["chunker-train", "--train", "chunks.train", "--dev", "chunks.dev", "--out", "c.x", "--set", "patience=9", "--set", "max_epochs=2"]), 1);
    assert!(!d.path("lm.x").exists());
}

#[test]
fn data_errors_exit_two() {
    let d = Data::new();
    assert_eq!(d.code(&["derive-chunks", "--trees", "missing.mrg", "--out", "o.txt"]), 2);
    fs::write(d.path("bad.mrg"), "(S (NP (DT the) (NN cat)").unwrap();
    assert_eq!(d.code(&["derive-chunks", "--trees", "bad.mrg", "--out", "o.txt"]), 2);
    fs::write(d.path("bad.chunks"), "the DT B-NP\ncat NN I-XX\n").unwrap();
    assert_eq!(d.code(&["chunker-train", "--train", "bad.chunks", "--dev", "chunks.dev", "--out", "c.x"]), 2);
    assert_eq!(d.code(&["chunker-eval", "--model", "nothing.here", "--test", "chunks.dev"]), 2);
}

#[test]
fn diverging_pretraining_exits_three() {
    let d = Data::new();
    let code = d.code(&["--config", "lm.cfg", "--set", "lr_factor=1e30", "pretrain", "--train", "raw.txt", "--out", "lm.nan"]);
    assert_eq!(code, 3);
}

#[test]
fn primitive_gradcheck_passes() {
    let d = Data::new();
    let out = d.ok(&["gradcheck", "--scope", "primitives"]);
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.lines().count() > 10);
    assert!(text.lines().all(|l| l.ends_with("\tok")), "{text}");
}

#[test]
fn pipeline_runs_and_repeats_bitwise() {
    let d = Data::new();
    let chunker = ["--config", "chunker.cfg", "chunker-train", "--train", "chunks.train", "--dev", "chunks.dev"];
    d.ok(&[&chunker[..], &["--out", "chunker.a"]].concat());
    d.ok(&[&chunker[..], &["--out", "chunker.b"]].concat());
    for f in ["weights.bin", "manifest.json", "train_log.tsv"] {
        assert_eq!(bytes(&d.path("chunker.a").join(f)), bytes(&d.path("chunker.b").join(f)), "{f}");
    }
    assert!(d.path("chunker.a/run.config").exists());

    d.ok(&["--workers", "1", "chunker-predict", "--model", "chunker.a", "--input", "raw.txt", "--out", "pred.1"]);
    d.ok(&["--workers", "4", "chunker-predict", "--model", "chunker.a", "--input", "raw.txt", "--out", "pred.4"]);
    assert_eq!(bytes(&d.path("pred.1")), bytes(&d.path("pred.4")));
    let scores = d.ok(&["chunker-eval", "--model", "chunker.a", "--test", "chunks.dev", "--out", "scores.txt"]);
    assert!(String::from_utf8(scores.stdout).unwrap().starts_with("precision\t"));

    d.ok(&["--config", "lm.cfg", "pretrain", "--train", "raw.txt", "--out", "base.lm"]);
    let e2e = ["--config", "lm.cfg", "pretrain", "--train", "raw.txt", "--chunks", "raw.chunks", "--scheme", "end_to_end"];
    d.ok(&[&e2e[..], &["--out", "e2e.a"]].concat());
    d.ok(&[&e2e[..], &["--out", "e2e.b"]].concat());
    for f in ["weights.bin", "manifest.json", "loss_curve.tsv", "run.config", "epoch-1/weights.bin"] {
        assert_eq!(bytes(&d.path("e2e.a").join(f)), bytes(&d.path("e2e.b").join(f)), "{f}");
    }
    d.ok(&["--config", "lm.cfg", "pretrain", "--train", "raw.txt", "--chunker", "chunker.a", "--scheme", "frozen", "--init", "base.lm", "--out", "frozen.lm"]);
    let snap = fs::read_to_string(d.path("frozen.lm/run.config")).unwrap();
    assert!(snap.contains("scheme=frozen\n") && snap.contains("init="), "{snap}");

    d.ok(&["extract-reps", "--model", "e2e.a", "--input", "raw.txt", "--chunks", "raw.chunks", "--out", "reps.jsonl"]);
    let first: serde_json::Value =
        serde_json::from_str(fs::read_to_string(d.path("reps.jsonl")).unwrap().lines().next().unwrap()).unwrap();
    assert_eq!(first["layers"].as_array().unwrap().len(), first["reps"].as_array().unwrap().len());

    let probe = ["--config", "probe.cfg", "probe", "--model", "e2e.a", "--train", "chunks.train", "--test", "chunks.dev", "--task", "chunk_tags"];
    d.ok(&[&probe[..], &["--out", "probe.a"]].concat());
    d.ok(&[&probe[..], &["--out", "probe.b"]].concat());
    assert_eq!(bytes(&d.path("probe.a")), bytes(&d.path("probe.b")));

    let tagger = ["--config", "tagger.cfg", "tagger-train", "--train", "ner.train", "--dev", "ner.dev", "--reps", "e2e.a", "--mode", "msync", "--chunker", "chunker.a", "--chunk-features"];
    d.ok(&[&tagger[..], &["--out", "tagger.a"]].concat());
    d.ok(&[&tagger[..], &["--out", "tagger.b"]].concat());
    assert_eq!(bytes(&d.path("tagger.a/weights.bin")), bytes(&d.path("tagger.b/weights.bin")));
    d.ok(&["tagger-eval", "--model", "tagger.a", "--test", "ner.dev", "--out", "tagger.scores"]);
    assert!(d.path("tagger.scores.run.config").exists());
}
