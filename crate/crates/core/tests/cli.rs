use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use entroscope::corpus::{synthetic_corpus, write_corpus};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_entroscope"));
    c.env_remove("ENTROSCOPE_SEED");
    c
}

fn run(dir: &Path, args: &[&str]) -> Output {
    let out = bin().current_dir(dir).args(args).output().expect("binary runs");
    if !out.status.success() {
        eprintln!("{args:?}\nstdout: {}\nstderr: {}", String::from_utf8_lossy(&out.stdout), String::from_utf8_lossy(&out.stderr));
    }
    out
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = run(dir, args);
    assert!(out.status.success(), "{args:?} failed");
    String::from_utf8(out.stdout).unwrap()
}

fn code(dir: &Path, args: &[&str]) -> i32 {
    run(dir, args).status.code().unwrap()
}

fn field(stdout: &str, key: &str) -> f64 {
    stdout.lines().find_map(|l| l.strip_prefix(key)?.split_whitespace().next()?.parse().ok()).unwrap_or_else(|| panic!("{key} missing in {stdout}"))
}

struct Fixture {
    _tmp: tempfile::TempDir,
    dir: PathBuf,
}

fn fixture() -> Fixture {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().to_path_buf();
    write_corpus(&dir.join("corpus.txt"), &synthetic_corpus(60, 1)).unwrap();
    write_corpus(&dir.join("text.txt"), &synthetic_corpus(4, 2)).unwrap();
    Fixture { _tmp: tmp, dir }
}

const TINY: &[&str] = &["--model.d_model", "16", "--model.n_layers", "1", "--model.n_heads", "2", "--model.n_ctx", "16", "--train.batch_size", "4", "--train.eval_every", "10", "--train.warmup_steps", "2"];

fn train(dir: &Path, out: &str, family: &str, steps: &str, extra: &[&str]) -> String {
    let mut args = vec!["train", "--corpus", "corpus.txt", "--tokenizer", "tok.txt", "--out", out, "--family", family, "--steps", steps];
    args.extend_from_slice(TINY);
    args.extend_from_slice(extra);
    ok(dir, &args)
}

#[test]
fn full_pipeline_round_trips_and_writes_manifests() {
    let f = fixture();
    let d = &f.dir;
    let s = ok(d, &["tokenize", "--corpus", "corpus.txt", "--vocab-size", "300", "--out", "tok.txt"]);
    assert!(field(&s, "bytes_per_token") > 1.0);
    train(d, "causal", "causal", "20", &[]);
    for name in ["model.bin", "state.bin", "ledger.csv", "config.conf", "manifest.json"] {
        assert!(d.join("causal").join(name).exists(), "{name}");
    }
    train(d, "eem", "eem", "20", &["--model.d_e", "4"]);

    ok(d, &["entropy", "--model", "causal/model.bin", "--tokenizer", "tok.txt", "--corpus", "text.txt", "--method", "causal", "--out", "h.tsv", "--annotate", "h.html"]);
    let tsv = std::fs::read_to_string(d.join("h.tsv")).unwrap();
    assert!(tsv.starts_with("document_id\ttoken_index\ttoken_text\tmethod\tentropy_nats\tconfidence_flag"));
    assert!(std::fs::read_to_string(d.join("h.html")).unwrap().contains("<span"));
    ok(d, &["--threads", "2", "entropy", "--model", "eem/model.bin", "--tokenizer", "tok.txt", "--corpus", "text.txt", "--method", "occlusion_l1", "--out", "occ.tsv"]);

    for model in ["causal", "eem"] {
        let m = format!("{model}/model.bin");
        let s = ok(d, &["compress", "--model", &m, "--tokenizer", "tok.txt", "--input", "text.txt", "--out", "t.esc"]);
        assert!(field(&s, "relative_gap") < 0.01, "{s}");
        ok(d, &["decompress", "--model", &m, "--tokenizer", "tok.txt", "--input", "t.esc", "--out", "back.txt"]);
        assert_eq!(std::fs::read(d.join("back.txt")).unwrap(), std::fs::read(d.join("text.txt")).unwrap());
    }
    let manifest: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(d.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "decompress");
    assert!(manifest["inputs"].as_object().unwrap().keys().any(|k| k.ends_with("t.esc")));

    // Targets for only some documents: training keeps just those.
    ok(d, &["entropy", "--model", "causal/model.bin", "--tokenizer", "tok.txt", "--corpus", "corpus.txt", "--method", "causal", "--out", "part.tsv", "--limit", "10"]);
    train(d, "scaled", "causal", "5", &["--entropy-targets", "part.tsv"]);

    ok(d, &["report", "--ledger", "causal/ledger.csv", "--ledger", "e=eem/ledger.csv", "--out", "rep"]);
    let csv = std::fs::read_to_string(d.join("rep/loss.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 20 + 20);
    assert!(std::fs::read_to_string(d.join("rep/loss.svg")).unwrap().starts_with("<svg"));
}

#[test]
fn report_values_match_the_ledger_exactly() {
    let f = fixture();
    let d = &f.dir;
    ok(d, &["tokenize", "--corpus", "corpus.txt", "--vocab-size", "256", "--out", "tok.txt"]);
    train(d, "run", "causal", "12", &[]);
    ok(d, &["report", "--ledger", "run/ledger.csv", "--out", "rep"]);
    let ledger = entroscope::train::RunLedger::load(&d.join("run/ledger.csv")).unwrap();
    let csv = std::fs::read_to_string(d.join("rep/loss.csv")).unwrap();
    for (row, line) in ledger.rows().iter().zip(csv.lines().skip(1)) {
        let cells: Vec<&str> = line.split(',').collect();
        assert_eq!(cells[1].parse::<usize>().unwrap(), row.step);
        assert_eq!(cells[3].parse::<f64>().unwrap(), row.train_loss);
        assert_eq!(cells[5].parse::<f64>().ok(), row.eval_loss);
    }
}

#[test]
fn seeds_make_runs_reproducible() {
    let f = fixture();
    let d = &f.dir;
    ok(d, &["tokenize", "--corpus", "corpus.txt", "--vocab-size", "256", "--out", "tok.txt"]);
    let ledger = |out: &str| std::fs::read(d.join(out).join("ledger.csv")).unwrap();
    train(d, "a", "causal", "12", &["--seed", "9"]);
    let mut args = vec!["train", "--corpus", "corpus.txt", "--tokenizer", "tok.txt", "--out", "b", "--family", "causal", "--steps", "12"];
    args.extend_from_slice(TINY);
    let out = bin().current_dir(d).env("ENTROSCOPE_SEED", "9").args(&args).output().unwrap();
    assert!(out.status.success());
    train(d, "c", "causal", "12", &["--seed", "10"]);
    assert_eq!(ledger("a"), ledger("b"));
    assert_ne!(ledger("a"), ledger("c"));
    let model = |out: &str| std::fs::read(d.join(out).join("model.bin")).unwrap();
    assert_eq!(model("a"), model("b"));
}

#[test]
fn interrupted_training_resumes_bit_identically() {
    let f = fixture();
    let d = &f.dir;
    ok(d, &["tokenize", "--corpus", "corpus.txt", "--vocab-size", "256", "--out", "tok.txt"]);
    train(d, "whole", "causal", "30", &[]);
    train(d, "split", "causal", "30", &["--stop-after", "13"]);
    assert_eq!(entroscope::train::RunLedger::load(&d.join("split/ledger.csv")).unwrap().rows().len(), 13);
    assert_eq!(code(d, &["train", "--corpus", "corpus.txt", "--tokenizer", "tok.txt", "--out", "split", "--steps", "31", "--resume"]), 1);
    train(d, "split", "causal", "30", &["--resume"]);
    for name in ["ledger.csv", "model.bin"] {
        assert_eq!(std::fs::read(d.join("whole").join(name)).unwrap(), std::fs::read(d.join("split").join(name)).unwrap(), "{name}");
    }
}

#[test]
fn audit_from_markov_spec_and_from_ledger() {
    let f = fixture();
    let d = &f.dir;
    std::fs::write(d.join("m.txt"), "0.9 0.1\n0.5 0.5\n").unwrap();
    let s = ok(
        d,
        &[
            "audit", "--markov", "m.txt", "--out", "aud", "--model.d_model", "16", "--model.n_layers", "1", "--model.n_heads", "2", "--model.n_ctx", "32", "--train.total_steps", "20",
            "--train.eval_every", "10", "--train.warmup_steps", "2", "--train.batch_size", "8", "--audit.train_tokens", "1000", "--audit.test_tokens", "1000",
        ],
    );
    assert!(s.contains("verdict: pass"), "{s}");
    let csv = std::fs::read_to_string(d.join("aud/audit.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(d.join("aud/audit.json")).unwrap()).unwrap();
    assert!((report["entropy_rate"].as_f64().unwrap() - 0.38643).abs() < 1e-4);

    // A ledger whose train loss sits far below its test loss and the entropy.
    std::fs::write(d.join("l.csv"), "step,lr,train_loss,scaled_loss,eval_loss,tokens\n1,0.001,0.1,,0.2,64\n").unwrap();
    let s = ok(d, &["audit", "--ledger", "l.csv", "--entropy", "0.5", "--out", "aud2"]);
    assert!(s.contains("verdict: violation"), "{s}");
}

#[test]
fn exit_codes_separate_input_runtime_and_integrity_errors() {
    let f = fixture();
    let d = &f.dir;
    assert_eq!(code(d, &["--help"]), 0);
    assert_eq!(code(d, &["frobnicate"]), 1);
    assert_eq!(code(d, &["tokenize", "--corpus", "missing.txt", "--out", "t.txt"]), 2);
    assert_eq!(code(d, &["train", "--out", "x", "--corpus", "corpus.txt", "--set", "model.d_model=zero"]), 1);
    assert_eq!(code(d, &["train", "--out", "x", "--corpus", "corpus.txt", "--family", "second_order"]), 1);
    let bad_seed = bin().current_dir(d).env("ENTROSCOPE_SEED", "x").args(["tokenize", "--corpus", "corpus.txt", "--out", "t.txt"]).output().unwrap();
    assert_eq!(bad_seed.status.code(), Some(1));

    ok(d, &["tokenize", "--corpus", "corpus.txt", "--vocab-size", "256", "--out", "tok.txt"]);
    train(d, "m", "causal", "5", &[]);
    ok(d, &["compress", "--model", "m/model.bin", "--tokenizer", "tok.txt", "--input", "text.txt", "--out", "t.esc"]);
    let mut bytes = std::fs::read(d.join("t.esc")).unwrap();
    let n = bytes.len();
    bytes[n - 3] ^= 0x10;
    std::fs::write(d.join("bad.esc"), &bytes).unwrap();
    assert_eq!(code(d, &["decompress", "--model", "m/model.bin", "--tokenizer", "tok.txt", "--input", "bad.esc", "--out", "o.txt"]), 3);
    train(d, "other", "causal", "5", &["--seed", "3"]);
    assert_eq!(code(d, &["decompress", "--model", "other/model.bin", "--tokenizer", "tok.txt", "--input", "t.esc", "--out", "o.txt"]), 3);
    assert_eq!(code(d, &["entropy", "--model", "m/model.bin", "--tokenizer", "tok.txt", "--corpus", "text.txt", "--method", "occlusion_l1", "--out", "o.tsv"]), 1);
}
