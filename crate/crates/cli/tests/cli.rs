use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;
use std::time::Instant;

use serde_json::Value;

fn camo(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_camo"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("camo runs")
}

fn ok(args: &[&str]) -> String {
    let out = camo(args);
    assert!(
        out.status.success(),
        "camo {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Fixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
}

/// A 48-sample training set and an 8-sample evaluation set, built once.
fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        ok(&["dataset", "--out", s(&root.join("train")), "--variants", "1", "--seed", "1"]);
        ok(&[
            "dataset", "--out", s(&root.join("eval")), "--distances", "5", "--pitches", "45", "--variants", "1",
            "--seed", "2",
        ]);
        Fixture { _dir: dir, root }
    })
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn dataset_defaults_write_480_entries() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(&["dataset", "--out", s(&dir.path().join("d"))]);
    assert!(out.starts_with("480 entries"), "{out}");
    let prov = read_json(&dir.path().join("d/provenance.json"));
    assert!(prov["outputs"]["manifest.jsonl"].is_string());
    assert!(dir.path().join("d/config.toml").is_file());
}

#[test]
fn dataset_is_reproducible_under_a_seed() {
    let dir = tempfile::tempdir().unwrap();
    let digest = |name: &str| {
        let p = dir.path().join(name);
        ok(&["dataset", "--out", s(&p), "--distances", "10", "--pitches", "22.5", "--variants", "2", "--seed", "7"]);
        read_json(&p.join("provenance.json"))["outputs"]["manifest.jsonl"].clone()
    };
    assert_eq!(digest("a"), digest("b"));
}

#[test]
fn invalid_pitch_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    for bad in ["95", "0", "north"] {
        let out = camo(&["dataset", "--out", s(dir.path()), "--pitches", bad]);
        assert_eq!(out.status.code(), Some(2), "pitch {bad}");
        assert!(String::from_utf8_lossy(&out.stderr).contains("pitch"));
    }
}

#[test]
fn attack_without_manifest_names_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let out = camo(&["attack", "--out", s(&dir.path().join("r"))]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("paths.manifest"));
}

#[test]
fn attack_overrides_are_recorded() {
    let f = fixture();
    let run = f.root.join("run_overrides");
    ok(&[
        "attack", "--manifest", s(&f.root.join("train")), "--lr", "0.1", "--epochs", "5", "--max-iterations", "2",
        "--out", s(&run),
    ]);
    let prov = read_json(&run.join("provenance.json"));
    let overrides = prov["overrides"].as_array().unwrap();
    let has = |k: &str, v: &str| overrides.iter().any(|o| o["key"] == k && o["value"] == v);
    assert!(has("run.learning_rate", "0.1"), "{overrides:?}");
    assert!(has("run.max_epochs", "5"), "{overrides:?}");
    assert_eq!(prov["config"]["run"]["learning_rate"], 0.1);
    for f in ["final_texture.png", "final.state", "run_log.jsonl", "config.toml"] {
        assert!(prov["outputs"][f].is_string(), "{f} not digested");
    }
    let log = std::fs::read_to_string(run.join("run_log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 2);
}

#[test]
fn smoke_profile_is_quick_and_resumable() {
    let f = fixture();
    let run = f.root.join("run_smoke");
    let t = Instant::now();
    let out = ok(&["attack", "--manifest", s(&f.root.join("train")), "--smoke", "--out", s(&run)]);
    assert!(t.elapsed().as_secs() < 60, "smoke run took {:?}", t.elapsed());
    assert!(out.contains("10 iterations"), "{out}");
    let again = ok(&[
        "attack", "--manifest", s(&f.root.join("train")), "--smoke", "--out", s(&run), "--resume",
        s(&run.join("final.state")),
    ]);
    assert!(again.contains("10 iterations"), "{again}");
}

#[test]
fn mock_judged_eval_of_the_benign_paint_has_zero_success() {
    let f = fixture();
    let report = f.root.join("eval_benign");
    ok(&[
        "eval", "--texture", "benign", "--manifest", s(&f.root.join("eval")), "--judge", "mock", "--out", s(&report),
    ]);
    let summary = read_json(&report.join("summary.json"));
    assert_eq!(summary["judge"], "mock");
    assert_eq!(summary["overall_success_rate"], 0.0);
    for sc in ["planning", "prediction", "perception"] {
        assert_eq!(summary["per_scenario"][sc]["success_rate"], 0.0);
        assert_eq!(summary["per_scenario"][sc]["judge"]["general"], 10.0);
    }
    let out = ok(&["plot", "--report", s(&report)]);
    assert!(report.join("success_by_distance.svg").is_file(), "{out}");
    assert!(report.join("success_by_pitch.svg").is_file());
}

#[test]
fn open_text_mode_runs_offline_with_the_keyword_rule() {
    let f = fixture();
    let report = f.root.join("eval_random");
    ok(&[
        "eval", "--texture", "random", "--manifest", s(&f.root.join("eval")), "--mode", "open-text", "--out",
        s(&report),
    ]);
    let summary = read_json(&report.join("summary.json"));
    assert_eq!(summary["judge"], "none");
    assert_eq!(summary["records"], 8 * 9);
}

#[test]
fn empty_sweep_grid_is_a_usage_error() {
    let f = fixture();
    let out = camo(&[
        "sweep", "--manifest", s(&f.root.join("train")), "--eval-manifest", s(&f.root.join("eval")), "--out",
        s(&f.root.join("sweep_empty")),
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn two_cell_sweep_writes_two_reports_and_one_table() {
    let f = fixture();
    let out_dir = f.root.join("sweep_two");
    ok(&[
        "sweep", "--manifest", s(&f.root.join("train")), "--eval-manifest", s(&f.root.join("eval")), "--alpha",
        "0.4,0.6", "--ratio", "3:1:1", "--ratio", "1:1:1", "--max-iterations", "1", "--out", s(&out_dir),
    ]);
    let mut reports: Vec<PathBuf> = std::fs::read_dir(&out_dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.join("eval/summary.json").is_file())
        .collect();
    reports.sort();
    assert_eq!(reports.len(), 2);
    let table = std::fs::read_to_string(out_dir.join("comparison.csv")).unwrap();
    assert_eq!(table.lines().count(), 3);
    assert!(table.contains("a0.4-0.6_r3-1-1,0.4,0.6,"), "{table}");
    assert!(table.contains("22.5=3 45=1 67.5=1"), "{table}");
}

#[test]
fn exported_surrogate_is_written() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("surrogate.bin");
    ok(&["export-victim", "--out", s(&p)]);
    assert!(std::fs::metadata(&p).unwrap().len() > 1000);
}

#[test]
fn help_documents_every_subcommand() {
    let out = ok(&["--help"]);
    for c in ["dataset", "attack", "eval", "sweep", "plot"] {
        assert!(out.contains(c), "{c} missing from help");
    }
}
