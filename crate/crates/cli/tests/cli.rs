use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use shiftprobe::formats::{read_spb, round_f32};
use shiftprobe::metrics::{parse_report, read_report};
use shiftprobe::shifts::apply_quantization;
use shiftprobe::topology::IntegrityResult;

const CONFIG: &str = r#"
seed = 3
encoders = ["psde"]
tasks = ["grade"]
shifts = ["NONE", "BN(sigma=0.1,seed=7)"]
export_graphs = false

[data]
kind = "synthetic"
n_recordings = 12
epochs_per_recording = 3

[train]
max_epochs = 5

[mcd]
repeats = 5
"#;

const NOISE: &str = "BN(sigma=0.1,seed=7)";

fn shiftprobe(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_shiftprobe"))
        .args(args)
        .env("RUST_LOG", "warn")
        .env_remove("SHIFTPROBE_JOBS")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = shiftprobe(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).expect("utf-8 output")
}

struct Workspace {
    _tmp: tempfile::TempDir,
    root: PathBuf,
    config: String,
}

impl Workspace {
    fn new() -> Self {
        let tmp = tempfile::tempdir().unwrap();
        let root = tmp.path().to_path_buf();
        let config = root.join("experiment.toml");
        fs::write(&config, CONFIG).unwrap();
        Self {
            config: config.to_str().unwrap().to_string(),
            _tmp: tmp,
            root,
        }
    }

    fn path(&self, name: &str) -> String {
        self.root.join(name).to_str().unwrap().to_string()
    }

    fn run(&self, args: &[&str]) -> String {
        let mut all = vec!["--config", &self.config];
        all.extend_from_slice(args);
        ok(&all)
    }
}

fn first_spb(dir: &Path) -> PathBuf {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|x| x == "spb"))
        .collect();
    files.sort();
    files.remove(0)
}

#[test]
fn usage_errors_exit_with_two() {
    assert_eq!(shiftprobe(&["--no-such-flag", "run"]).status.code(), Some(2));
    assert_eq!(
        shiftprobe(&["shift", "--spec", "XX(1)", "a", "b"]).status.code(),
        Some(2)
    );

    let tmp = tempfile::tempdir().unwrap();
    let bad = tmp.path().join("bad.toml");
    fs::write(&bad, "unknown_key = 1\n").unwrap();
    let out = shiftprobe(&["--config", bad.to_str().unwrap(), "--out", "x", "run"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn data_errors_exit_with_one() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("missing");
    let out = shiftprobe(&[
        "preprocess",
        missing.to_str().unwrap(),
        tmp.path().join("o").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn shift_quantizes_an_epoch_file() {
    let ws = Workspace::new();
    ws.run(&["--out", &ws.path("raw"), "synth"]);
    ws.run(&["preprocess", &ws.path("raw"), &ws.path("clean")]);
    let input = first_spb(&ws.root.join("clean"));
    ws.run(&["shift", "--spec", "QP(8)", input.to_str().unwrap(), &ws.path("q.spb")]);

    let before = read_spb(&input).unwrap();
    let after = read_spb(&ws.root.join("q.spb")).unwrap();
    assert_eq!(before.channels, after.channels);
    assert_eq!(before.epochs.len(), after.epochs.len());
    for (b, a) in before.epochs.iter().zip(&after.epochs) {
        let mut expected = apply_quantization(b, 8);
        round_f32(&mut expected);
        assert_eq!(a, &expected);
    }
}

/// Individual stages reproduce the integrity score and report row of `run`.
#[test]
fn stages_compose_to_the_full_run() {
    let ws = Workspace::new();
    ws.run(&["--out", &ws.path("run"), "run"]);
    let run_rows = read_report(&ws.root.join("run/report.jsonl")).unwrap();
    let run_integrity: Vec<IntegrityResult> = fs::read_to_string(ws.root.join("run/integrity.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();

    ws.run(&["--out", &ws.path("raw"), "synth"]);
    ws.run(&["preprocess", &ws.path("raw"), &ws.path("clean")]);
    ws.run(&["shift", "--spec", NOISE, &ws.path("raw"), &ws.path("raw_bn")]);
    ws.run(&["preprocess", &ws.path("raw_bn"), &ws.path("clean_bn")]);
    ws.run(&["--out", &ws.path("z.csv"), "encode", "--data", &ws.path("clean")]);
    ws.run(&[
        "--out",
        &ws.path("zt.csv"),
        "encode",
        "--data",
        &ws.path("clean_bn"),
        "--origin",
        "zt",
    ]);

    let line = ws.run(&[
        "integrity",
        "--z",
        &ws.path("z.csv"),
        "--zt",
        &ws.path("zt.csv"),
        "--shift",
        NOISE,
        "--method",
        "gabriel",
        "--mode",
        "pooled",
    ]);
    assert_eq!(line.lines().count(), 1);
    let staged: IntegrityResult = serde_json::from_str(line.trim()).unwrap();
    let expected = run_integrity
        .iter()
        .find(|r| r.shift == staged.shift)
        .expect("run scored the shift");
    assert_eq!(&staged, expected);

    ws.run(&[
        "--out",
        &ws.path("model.spp"),
        "train",
        "--data",
        &ws.path("clean"),
        "--encoder",
        "psde",
        "--task",
        "grade",
    ]);
    assert!(ws.root.join("model_history.csv").exists());
    let text = ws.run(&[
        "evaluate",
        "--data",
        &ws.path("raw"),
        "--model",
        &ws.path("model.spp"),
        "--shift",
        NOISE,
    ]);
    let rows = parse_report(&text).unwrap();
    assert_eq!(rows.len(), 1);
    let expected = run_rows
        .iter()
        .find(|r| r.shift == rows[0].shift)
        .expect("run evaluated the shift");
    assert_eq!(&rows[0], expected);

    fs::write(ws.root.join("row.jsonl"), &text).unwrap();
    ws.run(&["--out", &ws.path("report"), "report", &ws.path("row.jsonl")]);
    assert_eq!(read_report(&ws.root.join("report/report.jsonl")).unwrap(), rows);
    assert!(ws.root.join("report/report_pivot.csv").exists());
}

#[test]
fn rerun_reuses_stages_and_matches() {
    let ws = Workspace::new();
    ws.run(&["--out", &ws.path("run"), "run"]);
    let first = fs::read(ws.root.join("run/report.jsonl")).unwrap();
    ws.run(&["--jobs", "2", "--out", &ws.path("run"), "run"]);
    assert_eq!(first, fs::read(ws.root.join("run/report.jsonl")).unwrap());
}
