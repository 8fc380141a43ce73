use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn eegcog(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_eegcog")).arg("--out").arg(out).args(args).output().expect("binary runs")
}

fn ok(out: &Path, args: &[&str]) {
    let o = eegcog(out, args);
    assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
}

const SMALL: [&str; 4] = ["--subjects", "4", "--round-seconds", "12"];
const FAST: [&str; 4] = ["--folds", "2", "--epochs", "2"];

fn full_run(dir: &Path, extra: &[&str]) {
    let with = |cmd: &str, more: &[&str]| -> Vec<String> {
        std::iter::once(cmd).chain(more.iter().copied()).chain(extra.iter().copied()).map(String::from).collect()
    };
    for args in [
        with("synth", &SMALL),
        with("preprocess", &[]),
        with("connect", &[]),
        with("select", &[]),
        with("label", &[]),
        with("train", &FAST),
        with("evaluate", &FAST),
        with("report", &[]),
    ] {
        let refs: Vec<&str> = args.iter().map(String::as_str).collect();
        ok(dir, &refs);
    }
}

fn files(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(d).unwrap().flatten() {
            if e.path().is_dir() {
                stack.push(e.path());
            } else {
                out.push(e.path().strip_prefix(dir).unwrap().to_path_buf());
            }
        }
    }
    out.sort();
    out
}

#[test]
fn reruns_are_byte_identical_without_stamps() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    full_run(a.path(), &["--no-stamp"]);
    full_run(b.path(), &["--no-stamp"]);
    let names = files(a.path());
    assert_eq!(names, files(b.path()));
    assert!(names.iter().all(|n| n.file_name().unwrap() != "stamp.json"));
    for n in &names {
        assert!(std::fs::read(a.path().join(n)).unwrap() == std::fs::read(b.path().join(n)).unwrap(), "{} differs", n.display());
    }
    for needed in ["connect/edges_top.json", "select/ranking.json", "train/curves.json", "evaluate/report.json", "report/index.json"] {
        assert!(names.contains(&PathBuf::from(needed)), "{needed} missing");
    }
}

#[test]
fn stamps_record_the_config_hash() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["synth", "--subjects", "2", "--round-seconds", "6", "--seed", "3"]);
    let stamp: serde_json::Value = serde_json::from_slice(&std::fs::read(dir.path().join("raw/stamp.json")).unwrap()).unwrap();
    assert_eq!(stamp["command"], "raw");
    assert_eq!(stamp["seed"], 3);
    assert_eq!(stamp["config_hash"].as_str().unwrap().len(), 64);
    assert_eq!(stamp["version"], env!("CARGO_PKG_VERSION"));
}

#[test]
fn missing_upstream_names_the_producer() {
    let dir = tempfile::tempdir().unwrap();
    let o = eegcog(dir.path(), &["preprocess"]);
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stderr).contains("eegcog synth"));

    ok(dir.path(), &["synth", "--subjects", "2", "--round-seconds", "6"]);
    let o = eegcog(dir.path(), &["train"]);
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stderr).contains("eegcog label"));

    let o = eegcog(dir.path(), &["select"]);
    assert!(String::from_utf8_lossy(&o.stderr).contains("eegcog connect"));
}

#[test]
fn config_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(eegcog(dir.path(), &["label", "--folds", "1"]).status.code(), Some(2));
    assert_eq!(eegcog(dir.path(), &["label", "--electrodes", "topk:30"]).status.code(), Some(2));
    let cfg = dir.path().join("bad.json");
    std::fs::write(&cfg, r#"{"sede": 1}"#).unwrap();
    let o = eegcog(dir.path(), &["label", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("sede"));
}

#[test]
fn config_file_and_flags_combine() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    std::fs::write(&cfg, r#"{"seed": 8, "select_k": 5}"#).unwrap();
    let c = cfg.to_str().unwrap();
    ok(dir.path(), &["synth", "--subjects", "2", "--round-seconds", "6", "--config", c, "--seed", "9"]);
    let stamp: serde_json::Value = serde_json::from_slice(&std::fs::read(dir.path().join("raw/stamp.json")).unwrap()).unwrap();
    assert_eq!(stamp["seed"], 9);
    assert_eq!(stamp["config"]["select_k"], 5);
}

#[test]
fn blinks_are_removed_by_ica() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["synth", "--subjects", "2", "--round-seconds", "20", "--blinks"]);
    ok(dir.path(), &["preprocess"]);
    let log: serde_json::Value = serde_json::from_slice(&std::fs::read(dir.path().join("preprocessed/corruption.json")).unwrap()).unwrap();
    for s in log["subjects"].as_array().unwrap() {
        assert!(!s["ica"]["rejected"].as_array().unwrap().is_empty(), "{s}");
    }
}
