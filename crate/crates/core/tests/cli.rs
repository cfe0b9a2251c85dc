//! End-to-end smoke test of the `taclab` binary: generate a corpus, train a
//! few steps, synthesize, diagnose, and check exit-code conventions.

use std::path::Path;
use std::process::Command;

fn taclab() -> Command {
    Command::new(env!("CARGO_BIN_EXE_taclab"))
}

fn run_ok(cmd: &mut Command) -> String {
    let out = cmd.output().expect("spawn taclab");
    assert!(
        out.status.success(),
        "command failed ({:?}):\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

#[test]
fn pipeline_gen_train_synth_diagnose() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("corpus");
    let run = dir.path().join("run");
    let synth = dir.path().join("synth");

    run_ok(
        taclab()
            .args(["gen-corpus", "--out"])
            .arg(&corpus)
            .args([
                "--seed", "5",
                "--set", "vocab_size=6",
                "--set", "train_count=8",
                "--set", "val_count=2",
                "--set", "test_count=2",
                "--set", "len_min=3",
                "--set", "len_max=4",
            ]),
    );
    assert!(corpus.join("meta.txt").is_file());
    assert!(corpus.join("train").join("0000.sym").is_file());

    run_ok(
        taclab()
            .args(["train", "--corpus"])
            .arg(&corpus)
            .arg("--out")
            .arg(&run)
            .args([
                "--seed", "3",
                "--set", "train.max_steps=3",
                "--set", "train.batch_size=2",
                "--set", "train.checkpoint_every=2",
                "--set", "train.validate_every=2",
                // keep the smoke test quick: shrink the model
                "--set", "model.widths.encoder_units=16",
                "--set", "model.widths.embed_dim=16",
                "--set", "model.widths.accent_embed_dim=8",
                "--set", "model.widths.attention_rnn=16",
                "--set", "model.widths.attention_dim=8",
                "--set", "model.widths.decoder_rnn=16",
                "--set", "model.widths.decoder_rnn_layers=1",
                "--set", "model.widths.decoder_prenet.0=16",
                "--set", "model.widths.decoder_prenet.1=8",
                "--set", "model.widths.encoder_prenet.0=16",
                "--set", "model.widths.encoder_prenet.1=8",
                "--set", "model.widths.accent_prenet.0=8",
                "--set", "model.widths.accent_prenet.1=8",
                "--set", "model.widths.bank_k=2",
                "--set", "model.widths.bank_channels=8",
                "--set", "model.widths.highway_depth=1",
                "--set", "model.widths.postnet_channels=8",
            ]),
    );
    let metrics = std::fs::read_to_string(run.join("metrics.tsv")).unwrap();
    assert!(metrics.starts_with("step\t"), "metrics header: {metrics}");
    assert_eq!(metrics.lines().count(), 4, "3 steps + header");
    assert!(run.join("final.tclb").is_file());

    run_ok(
        taclab()
            .args(["synth", "--checkpoint"])
            .arg(run.join("final.tclb"))
            .arg("--input")
            .arg(corpus.join("test").join("0000.sym"))
            .arg("--out")
            .arg(&synth)
            .args(["--max-steps", "12", "--seed", "1"]),
    );
    assert!(synth.join("output.mel").is_file());
    assert!(synth.join("output.attn").is_file());
    assert!(synth.join("output.attn.csv").is_file());

    let out = run_ok(taclab().args(["diagnose", "--attn-dir"]).arg(&synth));
    assert!(
        out.contains("alignment_errors = "),
        "diagnose output: {out}"
    );
}

#[test]
fn rank_test_on_identical_samples_reports_p_one() {
    let dir = tempfile::tempdir().unwrap();
    let scores = dir.path().join("s.txt");
    std::fs::write(&scores, "1.0\n2.0\n3.0\n4.0\n").unwrap();
    let out = run_ok(
        taclab()
            .args(["rank-test", "--a"])
            .arg(&scores)
            .arg("--b")
            .arg(&scores),
    );
    let p_line = out
        .lines()
        .find(|l| l.starts_with("p = "))
        .unwrap_or_else(|| panic!("no p line in: {out}"));
    let p: f64 = p_line.trim_start_matches("p = ").trim().parse().unwrap();
    assert!(p > 0.9, "identical samples should give p near 1, got {p}");
}

#[test]
fn exit_codes_follow_the_convention() {
    // usage error: unknown flag
    let out = taclab().args(["diagnose", "--bogus"]).output().unwrap();
    assert_eq!(out.status.code(), Some(1), "unknown flag should exit 1");

    // data error: missing corpus directory
    let dir = tempfile::tempdir().unwrap();
    let out = taclab()
        .args(["train", "--corpus"])
        .arg(dir.path().join("nope"))
        .arg("--out")
        .arg(dir.path().join("run"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2), "missing corpus should exit 2");

    // success: --help
    let out = taclab().arg("--help").output().unwrap();
    assert_eq!(out.status.code(), Some(0), "--help should exit 0");
}

#[test]
fn gen_corpus_is_byte_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let args = [
        "--seed", "9",
        "--set", "vocab_size=5",
        "--set", "train_count=4",
        "--set", "val_count=2",
        "--set", "test_count=2",
    ];
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    run_ok(taclab().args(["gen-corpus", "--out"]).arg(&a).args(args));
    run_ok(taclab().args(["gen-corpus", "--out"]).arg(&b).args(args));

    fn walk(root: &Path, dir: &Path, out: &mut Vec<(String, Vec<u8>)>) {
        for e in std::fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                walk(root, &p, out);
            } else {
                out.push((
                    p.strip_prefix(root).unwrap().to_string_lossy().into_owned(),
                    std::fs::read(&p).unwrap(),
                ));
            }
        }
    }
    let (mut fa, mut fb) = (Vec::new(), Vec::new());
    walk(&a, &a, &mut fa);
    walk(&b, &b, &mut fb);
    fa.sort();
    fb.sort();
    assert_eq!(fa.len(), fb.len());
    for (x, y) in fa.iter().zip(&fb) {
        assert_eq!(x.0, y.0);
        assert_eq!(x.1, y.1, "file {} differs between identical runs", x.0);
    }
}
