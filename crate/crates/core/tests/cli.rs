//! End-to-end runs of the `pmal` binary.

use std::path::Path;
use std::process::{Command, Output};

use pmal::cli::parse_report;
use tempfile::TempDir;

fn pmal(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pmal"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) {
    let out = pmal(args);
    assert!(
        out.status.success(),
        "pmal {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn small_synth(dir: &Path, seed: &str) {
    ok(&[
        "gen-synth",
        "--out",
        p(dir),
        "--known-classes",
        "3",
        "--unknown-classes",
        "2",
        "--feature-dim",
        "6",
        "--samples-per-class",
        "30",
        "--seed",
        seed,
    ]);
}

fn train(data: &Path, out: &Path, seed: &str, epochs: &str) {
    ok(&[
        "train",
        "--data",
        p(data),
        "--out",
        p(out),
        "--seed",
        seed,
        "--epochs",
        epochs,
        "--hidden-dim",
        "16",
        "--embed-dim",
        "4",
        "--batch-size",
        "16",
    ]);
}

fn read_dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .collect();
    files.sort();
    let mut out = Vec::new();
    for f in files {
        if f.is_dir() {
            for (name, bytes) in read_dir_bytes(&f) {
                out.push((
                    format!("{}/{name}", f.file_name().unwrap().to_string_lossy()),
                    bytes,
                ));
            }
        } else {
            out.push((
                f.file_name().unwrap().to_string_lossy().into_owned(),
                std::fs::read(&f).unwrap(),
            ));
        }
    }
    out
}

#[test]
fn gen_synth_is_byte_identical_across_invocations() {
    let tmp = TempDir::new().unwrap();
    small_synth(&tmp.path().join("a"), "5");
    small_synth(&tmp.path().join("b"), "5");
    let a = read_dir_bytes(&tmp.path().join("a"));
    assert!(a.iter().any(|(n, _)| n == "truth.csv"));
    assert_eq!(a, read_dir_bytes(&tmp.path().join("b")));
}

#[test]
fn invalid_degraded_fraction_exits_with_validation_code() {
    let tmp = TempDir::new().unwrap();
    let out = pmal(&[
        "gen-synth",
        "--out",
        p(tmp.path()),
        "--degraded-fraction",
        "1.5",
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("degraded_fraction"));
}

#[test]
fn full_workflow_and_validation_errors() {
    let tmp = TempDir::new().unwrap();
    let root = tmp.path();
    small_synth(&root.join("synth"), "3");
    let known = root.join("synth/known");
    let unknown = root.join("synth/unknown");
    train(&known, &root.join("r1"), "1", "3");
    train(&known, &root.join("r2"), "2", "3");
    assert!(root.join("r1/train_log.txt").exists());

    ok(&[
        "mine",
        "--data",
        p(&known),
        "--archive",
        p(&root.join("r1/embedding")),
        "--archive",
        p(&root.join("r2/embedding")),
        "--out",
        p(&root.join("mined")),
        "--prototypes",
        "3",
    ]);
    let book = root.join("mined/book.csv");
    assert!(book.exists());
    assert!(root.join("mined/robustness.csv").exists());

    ok(&[
        "optimize",
        "--checkpoint",
        p(&root.join("r1/model")),
        "--data",
        p(&known),
        "--book",
        p(&book),
        "--out",
        p(&root.join("opt")),
        "--epochs",
        "2",
        "--batch-size",
        "16",
    ]);
    assert!(root.join("opt/loss.csv").exists());

    ok(&[
        "eval",
        "--checkpoint",
        p(&root.join("opt/model")),
        "--known",
        p(&known),
        "--unknown",
        p(&unknown),
        "--rule",
        "dr",
        "--book",
        p(&book),
        "--data",
        p(&known),
        "--out",
        p(&root.join("eval")),
    ]);
    let report_path = root.join("eval/report.txt");
    let report = std::fs::read_to_string(&report_path).unwrap();
    let fields = parse_report(&report, &report_path).unwrap();
    let auroc: f64 = fields
        .iter()
        .find(|(k, _)| k == "auroc")
        .unwrap()
        .1
        .parse()
        .unwrap();
    assert!((0.0..=1.0).contains(&auroc));
    assert!(root.join("eval/roc.svg").exists());
    ok(&["summarize", p(&report_path)]);

    // archives trained on a different dataset cannot be mined together
    small_synth(&root.join("other"), "4");
    train(&root.join("other/known"), &root.join("r3"), "3", "1");
    let out = pmal(&[
        "mine",
        "--data",
        p(&known),
        "--archive",
        p(&root.join("r1/embedding")),
        "--archive",
        p(&root.join("r3/embedding")),
        "--out",
        p(&root.join("bad")),
    ]);
    assert_eq!(out.status.code(), Some(2));

    let out = pmal(&[
        "optimize",
        "--checkpoint",
        p(&root.join("r1/model")),
        "--data",
        p(&known),
        "--book",
        p(&root.join("missing.csv")),
        "--out",
        p(&root.join("opt2")),
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn zero_epochs_still_writes_a_checkpoint() {
    let tmp = TempDir::new().unwrap();
    small_synth(&tmp.path().join("synth"), "2");
    train(
        &tmp.path().join("synth/known"),
        &tmp.path().join("r"),
        "1",
        "0",
    );
    assert!(tmp.path().join("r/model").exists());
    assert!(tmp.path().join("r/embedding").exists());
}

#[test]
fn identical_known_and_unknown_sets_score_one_half() {
    let tmp = TempDir::new().unwrap();
    let root = tmp.path();
    small_synth(&root.join("synth"), "6");
    let known = root.join("synth/known");
    train(&known, &root.join("r"), "1", "2");
    ok(&[
        "eval",
        "--checkpoint",
        p(&root.join("r/model")),
        "--known",
        p(&known),
        "--unknown",
        p(&known),
        "--rule",
        "pr",
        "--out",
        p(&root.join("eval")),
    ]);
    let report = std::fs::read_to_string(root.join("eval/report.txt")).unwrap();
    assert!(report.contains("auroc = 0.500000"), "{report}");
}
