//! End-to-end checks of the `veil` binary on a tiny configuration.

use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"
[synth]
n_utterances = 20
min_seconds = 1.0
max_seconds = 1.2

[cdm]
dim = 4
codebook_size = 8
base_channels = 2
teacher_dim = 4

[cdm_train]
epochs = 1
crop_samples = 3200
eval_clips = 1

[detector]
embed_dim = 8
heads = 2
ffn_hidden = 16
layers = 1
epochs = 1
batch_size = 4
crop_seconds = 1.0

[probe]
epochs = 2

[intelligibility]
utterances = 1
"#;

fn veil(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_veil"))
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .args(args)
        .output()
        .expect("veil binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let o = veil(dir, args);
    assert!(
        o.status.success(),
        "veil {args:?} failed:\n{}",
        String::from_utf8_lossy(&o.stderr)
    );
    String::from_utf8(o.stdout).unwrap()
}

fn tiny_dir() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("tiny.toml"), TINY).unwrap();
    dir
}

#[test]
fn permcount_prints_exact_count() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(dir.path(), &["permcount", "--frames", "200", "--window", "50"]);
    // (50!)^4 = 8.5566e257
    assert!(out.contains("8.5566e257"), "{out}");
    assert!(out.contains("log10 257.932"), "{out}");
}

#[test]
fn synth_is_deterministic_and_balanced() {
    let dir = tiny_dir();
    for sub in ["a", "b"] {
        ok(dir.path(), &["--config", "tiny.toml", "--out", sub, "synth", "--n", "10"]);
    }
    let read = |p: &str| std::fs::read(dir.path().join(p)).unwrap();
    assert_eq!(read("a/manifest.tsv"), read("b/manifest.tsv"));
    assert_eq!(read("a/wav/utt00003.wav"), read("b/wav/utt00003.wav"));
    let manifest = String::from_utf8(read("a/manifest.tsv")).unwrap();
    let rows: Vec<&str> = manifest.lines().skip(1).collect();
    assert_eq!(rows.len(), 10);
    assert_eq!(rows.iter().filter(|r| r.contains("\tbonafide\t")).count(), 5);
}

#[test]
fn report_of_perfect_scores_has_zero_eer_and_no_text_section() {
    let dir = tempfile::tempdir().unwrap();
    let csv = "utterance_id,label,probability\na,bonafide,0.9\nb,bonafide,0.8\nc,deepfake,0.2\nd,deepfake,0.1\n";
    std::fs::write(dir.path().join("scores.csv"), csv).unwrap();
    let out = ok(dir.path(), &["--out", "r", "report", "--scores", "scores.csv"]);
    let v: serde_json::Value = serde_json::from_str(&out).unwrap();
    assert_eq!(v["detection"]["eer"], 0.0);
    assert!(v.get("transcripts").is_none());
    assert!(dir.path().join("r/report.json").exists());
}

#[test]
fn bad_inputs_fail_with_messages() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.csv"), "id,label\n").unwrap();
    let o = veil(dir.path(), &["report", "--scores", "bad.csv"]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("header"));
    let o = veil(dir.path(), &["--codec", "opus", "permcount"]);
    assert!(!o.status.success());
    let o = veil(dir.path(), &["--shuffle", "sideways", "permcount"]);
    assert!(!o.status.success());
}

#[test]
fn staged_pipeline_runs_end_to_end() {
    let dir = tiny_dir();
    let d = dir.path();
    let c = ["--config", "tiny.toml"];
    let run = |extra: &[&str]| ok(d, &[&c[..], extra].concat());
    run(&["--out", "corpus", "synth"]);
    run(&["--out", "models", "train-cdm", "--manifest", "corpus/manifest.tsv"]);
    run(&[
        "--out",
        "models",
        "train-detector",
        "--manifest",
        "corpus/manifest.tsv",
        "--cdm",
        "models/cdm.ckpt",
    ]);
    assert!(d.join("models/detector_history.json").exists());

    let wav = "corpus/wav/utt00000.wav";
    run(&["--out", "tok", "tokenize", "--cdm", "models/cdm.ckpt", wav]);
    run(&["--out", "tok", "shuffle", "tok/utt00000.rvqt"]);
    assert!(d.join("tok/utt00000.shuffled.rvqt").exists());
    let perm: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(d.join("tok/utt00000.perm.json")).unwrap()).unwrap();
    assert!(perm.is_object());

    let scores = run(&[
        "detect",
        "--cdm",
        "models/cdm.ckpt",
        "--detector",
        "models/detector.ckpt",
        wav,
    ]);
    let line = scores.lines().nth(1).unwrap();
    let p: f64 = line.split(',').nth(1).unwrap().parse().unwrap();
    assert!((0.0..=1.0).contains(&p));

    let eval = |out: &str, shuffle: &str| {
        run(&[
            "--out",
            out,
            "--shuffle",
            shuffle,
            "eval",
            "--manifest",
            "corpus/manifest.tsv",
            "--cdm",
            "models/cdm.ckpt",
            "--detector",
            "models/detector.ckpt",
        ]);
        std::fs::read_to_string(d.join(out).join("scores.csv")).unwrap()
    };
    let on = eval("eval_on", "on");
    let again = eval("eval_again", "on");
    let off = eval("eval_off", "off");
    assert_eq!(on, again, "scores are reproducible");
    // the shuffle flag changes scores, never the schema
    let header = |s: &str| s.lines().next().unwrap().to_string();
    assert_eq!(header(&on), header(&off));
    assert_eq!(on.lines().count(), off.lines().count());

    run(&[
        "--out",
        "probe",
        "probe",
        "--manifest",
        "corpus/manifest.tsv",
        "--cdm",
        "models/cdm.ckpt",
        "--source",
        "semantic",
    ]);
    let report = run(&[
        "--out",
        "final",
        "report",
        "--scores",
        "eval_on/scores.csv",
        "--transcripts",
        "probe/transcripts.tsv",
        "--hypotheses",
        "semantic=probe/hypotheses_semantic.tsv",
        "--probes",
        "probe/probes.json",
    ]);
    let v: serde_json::Value = serde_json::from_str(&report).unwrap();
    assert!(v["transcripts"]["semantic"]["wer"].as_f64().unwrap() >= 0.0);
    assert!(v["probes"]["semantic"]["accuracy"].is_number());
}
