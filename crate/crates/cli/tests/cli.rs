//! End-to-end tests of the `dbvae` binary.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use dbvae::checkpoint::Checkpoint;
use dbvae::data::{read_corpus, Vocabulary};
use dbvae::model::{corpus_code_usage, Mode};
use serde_json::Value;

const SMALL: &[&str] = &[
    "--K", "16", "--D", "4", "--S", "2", "--hidden-dim", "8", "--embed-dim", "8", "--max-epochs", "2", "--m",
    "16", "--dropout", "0", "--sigma", "2",
];

fn dbvae(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dbvae"))
        .args(args)
        .env_remove("DBVAE_SEED")
        .output()
        .unwrap()
}

fn ok(out: Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn synth(dir: &Path) -> (PathBuf, PathBuf) {
    let data = dir.join("data");
    ok(dbvae(&["synth", "--out", p(&data), "--n-train", "200", "--n-test", "40", "--seed", "3"]));
    (data.join("train.txt"), data.join("test.txt"))
}

fn train_small(dir: &Path, extra: &[&str]) -> PathBuf {
    let (train, test) = synth(dir);
    let run = dir.join("run");
    let mut args = vec!["train", "--corpus", p(&train), "--valid", p(&test), "--out", p(&run), "--seed", "7"];
    args.extend_from_slice(SMALL);
    args.extend_from_slice(extra);
    ok(dbvae(&args));
    run
}

fn json_lines(s: &str) -> Vec<Value> {
    s.lines().map(|l| serde_json::from_str(l).unwrap()).collect()
}

#[test]
fn synth_is_byte_deterministic() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let (ta, _) = synth(a.path());
    let (tb, _) = synth(b.path());
    assert_eq!(fs::read(ta).unwrap(), fs::read(tb).unwrap());
}

#[test]
fn train_writes_metrics_and_eval_reproduces_them() {
    let dir = tempfile::tempdir().unwrap();
    let run = train_small(dir.path(), &[]);
    let metrics = json_lines(&fs::read_to_string(run.join("metrics.jsonl")).unwrap());
    assert_eq!(metrics.len(), 2);
    let keys: Vec<&str> = metrics[0].as_object().unwrap().keys().map(String::as_str).collect();
    let mut want = vec![
        "epoch", "phase", "loss_rec", "loss_kl", "loss_code", "ppl_code", "valid_ppl", "lr", "wall_seconds",
    ];
    want.sort();
    let mut keys = keys;
    keys.sort();
    assert_eq!(keys, want);
    assert_eq!(metrics[0]["wall_seconds"], 0.0);

    let test = dir.path().join("data/test.txt");
    let out = ok(dbvae(&["eval", "--checkpoint", p(&run.join("final.ckpt")), "--corpus", p(&test)]));
    let eval: Value = serde_json::from_str(out.trim()).unwrap();
    assert_eq!(eval["ppl"].as_f64(), metrics[1]["valid_ppl"].as_f64());

    let usage = fs::read_to_string(run.join("usage.csv")).unwrap();
    assert_eq!(usage.lines().count(), 3);
    assert!(usage.starts_with("epoch,atom_0,"));
}

#[test]
fn identical_seeds_give_identical_outputs() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let ra = train_small(a.path(), &["--dropout", "0.2"]);
    let rb = train_small(b.path(), &["--dropout", "0.2"]);
    for f in ["metrics.jsonl", "final.ckpt", "best.ckpt", "usage.csv", "vocab.txt"] {
        assert_eq!(fs::read(ra.join(f)).unwrap(), fs::read(rb.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn seed_comes_from_environment_when_unspecified() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d");
    let run = |seed: &str| {
        let out = Command::new(env!("CARGO_BIN_EXE_dbvae"))
            .args(["synth", "--out", p(&data), "--n-train", "5", "--n-test", "2"])
            .env("DBVAE_SEED", seed)
            .output()
            .unwrap();
        let v: Value = serde_json::from_str(ok(out).trim()).unwrap();
        v["seed"].as_u64().unwrap()
    };
    assert_eq!(run("11"), 11);
}

#[test]
fn mode_r_is_recorded_in_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let run = train_small(dir.path(), &["--mode", "r", "--beta", "1.0"]);
    let ck = Checkpoint::load(&run.join("final.ckpt")).unwrap();
    assert_eq!(ck.state.config.mode, Mode::R);
    assert_eq!(ck.state.config.beta, 1.0);
}

#[test]
fn config_file_supplies_flags_and_cli_wins() {
    let dir = tempfile::tempdir().unwrap();
    let (train, test) = synth(dir.path());
    let cfg = dir.path().join("exp.cfg");
    fs::write(&cfg, "K=8\nD=4\nS=2\nhidden_dim=8\nembed_dim=8\nmax_epochs=3\nsigma=2\nm=16\n").unwrap();
    let run = dir.path().join("run");
    ok(dbvae(&[
        "train", "--config", p(&cfg), "--corpus", p(&train), "--valid", p(&test), "--out", p(&run),
        "--max-epochs", "1",
    ]));
    let ck = Checkpoint::load(&run.join("final.ckpt")).unwrap();
    assert_eq!(ck.state.config.codebook_size, 8);
    assert_eq!(fs::read_to_string(run.join("metrics.jsonl")).unwrap().lines().count(), 1);
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.txt");
    let out = dbvae(&["train", "--corpus", p(&missing), "--valid", p(&missing)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("nope.txt"));

    let (train, test) = synth(dir.path());
    let bad = dbvae(&["train", "--corpus", p(&train), "--valid", p(&test), "--K", "8", "--sigma", "9"]);
    assert_eq!(bad.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&bad.stderr).contains("sigma"));
    assert_eq!(dbvae(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(
        dbvae(&["train", "--corpus", "a", "--valid", "b", "--sigma", "2", "--sigma-frac", "0.1"]).status.code(),
        Some(1)
    );
    assert!(dbvae(&["--help"]).status.success());
}

#[test]
fn corrupted_or_mismatched_checkpoints_are_integrity_errors() {
    let dir = tempfile::tempdir().unwrap();
    let run = train_small(dir.path(), &[]);
    let test = dir.path().join("data/test.txt");
    let ck = run.join("final.ckpt");
    let mut bytes = fs::read(&ck).unwrap();
    let n = bytes.len();
    bytes[n / 2] ^= 0x40;
    let broken = dir.path().join("broken.ckpt");
    fs::write(&broken, bytes).unwrap();
    let vocab = run.join("vocab.txt");
    let out = dbvae(&["eval", "--checkpoint", p(&broken), "--vocab", p(&vocab), "--corpus", p(&test)]);
    assert_eq!(out.status.code(), Some(3));

    let other = dir.path().join("other_vocab.txt");
    Vocabulary::build(&["zz yy xx"], 100).unwrap().save(&other).unwrap();
    let out = dbvae(&["eval", "--checkpoint", p(&ck), "--vocab", p(&other), "--corpus", p(&test)]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn interpolation_and_topk_agree() {
    let dir = tempfile::tempdir().unwrap();
    let run = train_small(dir.path(), &[]);
    let ck = run.join("best.ckpt");
    let lines = read_corpus(&dir.path().join("data/test.txt")).unwrap();
    let (s1, s2) = (lines[0].as_str(), lines[1].as_str());

    let sweep = json_lines(&ok(dbvae(&[
        "interpolate", "--checkpoint", p(&ck), "--sentence1", s1, "--sentence2", s2, "--steps", "11",
    ])));
    let lambdas: Vec<f64> = sweep.iter().map(|v| v["lambda"].as_f64().unwrap()).collect();
    assert_eq!(lambdas, (0..=10).map(|i| i as f64 / 10.0).collect::<Vec<_>>());

    let top1 = |s: &str| {
        json_lines(&ok(dbvae(&["topk", "--checkpoint", p(&ck), "--sentence", s, "--k", "1"])))[0]["text"].clone()
    };
    assert_eq!(sweep[0]["text"], top1(s2));
    assert_eq!(sweep[10]["text"], top1(s1));

    let same = json_lines(&ok(dbvae(&[
        "interpolate", "--checkpoint", p(&ck), "--sentence1", s1, "--sentence2", s1, "--steps", "5",
    ])));
    assert!(same.windows(2).all(|w| w[0]["text"] == w[1]["text"]));

    let cands = json_lines(&ok(dbvae(&["topk", "--checkpoint", p(&ck), "--sentence", s1, "--k", "16"])));
    let d: Vec<f64> = cands.iter().map(|c| c["distance"].as_f64().unwrap()).collect();
    assert!(d.windows(2).all(|w| w[0] <= w[1]));
    let too_many = dbvae(&["topk", "--checkpoint", p(&ck), "--sentence", s1, "--k", "17"]);
    assert_eq!(too_many.status.code(), Some(1));

    let oov = dbvae(&["topk", "--checkpoint", p(&ck), "--sentence", "qqq rrr", "--k", "1"]);
    assert!(oov.status.success());
    assert!(String::from_utf8_lossy(&oov.stderr).contains("warning"));
}

#[test]
fn exports() {
    let dir = tempfile::tempdir().unwrap();
    let run = train_small(dir.path(), &[]);
    let ck = run.join("final.ckpt");
    let test = dir.path().join("data/test.txt");

    let latents = dir.path().join("latents.csv");
    ok(dbvae(&["export-latents", "--checkpoint", p(&ck), "--corpus", p(&test), "--out", p(&latents)]));
    let mut r = csv::Reader::from_path(&latents).unwrap();
    assert_eq!(r.headers().unwrap().len(), 4);
    assert_eq!(r.records().count(), 40);

    let usage = ok(dbvae(&["export-usage", "--checkpoint", p(&ck), "--corpus", p(&test)]));
    let mut r = csv::Reader::from_reader(usage.as_bytes());
    let v: Vec<f64> = r.records().map(|rec| rec.unwrap()[1].parse().unwrap()).collect();
    assert_eq!(v.len(), 16);
    assert!((v.iter().sum::<f64>() - 1.0).abs() < 1e-9);

    let loaded = Checkpoint::load(&ck).unwrap();
    let vocab = Vocabulary::load(&run.join("vocab.txt")).unwrap();
    let corpus = vocab.encode_corpus(&read_corpus(&test).unwrap());
    let (want, _) = corpus_code_usage(&loaded.state, &corpus, 32).unwrap();
    assert_eq!(v, want);
}
