use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

fn aggdet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_aggdet"))
        .args(args)
        .env_remove("AGGDET_EPOCHS")
        .output()
        .expect("spawn aggdet")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

/// Every file under `dir` with its bytes, sorted by relative path.
fn snapshot(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn eval_perfect_detector_prints_unit_froc() {
    let o = aggdet(&["eval", "--predictions", s(&fixture("perfect.csv")), "--annotations", s(&fixture("annotations.csv"))]);
    assert!(o.status.success(), "{o:?}");
    assert!(stdout(&o).lines().any(|l| l == "froc,1.000000"), "{}", stdout(&o));
}

#[test]
fn eval_empty_detector_prints_zero_froc() {
    let o = aggdet(&["eval", "--predictions", s(&fixture("empty.csv")), "--annotations", s(&fixture("annotations.csv"))]);
    assert!(o.status.success(), "{o:?}");
    assert!(stdout(&o).lines().any(|l| l == "froc,0.000000"));
}

#[test]
fn eval_writes_report_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let o = aggdet(&[
        "--out-dir",
        s(dir.path()),
        "eval",
        "--predictions",
        s(&fixture("perfect.csv")),
        "--annotations",
        s(&fixture("annotations.csv")),
    ]);
    assert!(o.status.success());
    let report = fs::read_to_string(dir.path().join("eval.csv")).unwrap();
    assert_eq!(report, stdout(&o));
    let manifest = fs::read_to_string(dir.path().join("run_manifest.txt")).unwrap();
    assert!(manifest.contains("# config_sha256 = "));
    assert!(manifest.contains("# seed = 0"));
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(aggdet(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(aggdet(&["eval", "--bogus"]).status.code(), Some(1));
    assert_eq!(aggdet(&[]).status.code(), Some(1));
    assert_eq!(aggdet(&["--help"]).status.code(), Some(0));
}

#[test]
fn bad_config_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.cfg");
    fs::write(&cfg, "epochs = 2\nnot_a_key = 1\n").unwrap();
    let o = aggdet(&["--config", s(&cfg), "gen-data", "--out-dir", s(&dir.path().join("d"))]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains(":2:"));
    let missing = aggdet(&["--config", "/definitely/not/here.cfg", "gen-data"]);
    assert_eq!(missing.status.code(), Some(1));
}

#[test]
fn malformed_predictions_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("p.csv");
    fs::write(&p, "scan_id,z,y,x,d,rpn_score,fpr_score,fused_score\nscan_a,1,2,x,4,0.5,,0.5\n").unwrap();
    let o = aggdet(&["eval", "--predictions", s(&p), "--annotations", s(&fixture("annotations.csv"))]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn template_is_a_valid_config() {
    let dir = tempfile::tempdir().unwrap();
    let o = aggdet(&["config-template"]);
    assert!(o.status.success());
    let cfg = dir.path().join("t.cfg");
    fs::write(&cfg, &o.stdout).unwrap();
    let o = aggdet(&["--config", s(&cfg), "eval", "--predictions", s(&fixture("perfect.csv")), "--annotations", s(&fixture("annotations.csv"))]);
    assert!(o.status.success(), "{o:?}");
}

#[test]
fn pipeline_reruns_are_byte_identical() {
    let cfg = fixture("tiny.cfg");
    let mut snaps = Vec::new();
    for _ in 0..2 {
        let dir = tempfile::tempdir().unwrap();
        let data = dir.path().join("data");
        let run = dir.path().join("run");
        let pred = dir.path().join("pred");
        let o = aggdet(&["--config", s(&cfg), "--seed", "11", "--out-dir", s(&data), "gen-data"]);
        assert!(o.status.success(), "{o:?}");
        let o = aggdet(&["--config", s(&cfg), "--seed", "11", "--out-dir", s(&run), "train", "--data", s(&data)]);
        assert!(o.status.success(), "{o:?}");
        let ckpt = run.join("model.ckpt");
        let o = aggdet(&["--config", s(&cfg), "--seed", "11", "--out-dir", s(&pred), "infer", "--data", s(&data), "--checkpoint", s(&ckpt)]);
        assert!(o.status.success(), "{o:?}");
        let o = aggdet(&[
            "eval",
            "--predictions",
            s(&pred.join("predictions.csv")),
            "--annotations",
            s(&data.join("annotations.csv")),
            "--manifest",
            s(&data),
            "--split",
            "test",
        ]);
        assert!(o.status.success(), "{o:?}");
        snaps.push(snapshot(dir.path()));
    }
    assert!(snaps[0].len() >= 10);
    assert_eq!(snaps[0], snaps[1]);
}

#[test]
fn train_manifest_reruns_as_config() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let cfg = fixture("tiny.cfg");
    assert!(aggdet(&["--config", s(&cfg), "--seed", "5", "--out-dir", s(&data), "gen-data"]).status.success());
    let manifest = data.join("run_manifest.txt");
    let again = dir.path().join("again");
    let o = aggdet(&["--config", s(&manifest), "--seed", "5", "--out-dir", s(&again), "gen-data"]);
    assert!(o.status.success(), "{o:?}");
    assert_eq!(snapshot(&data), snapshot(&again));
}

#[test]
fn gradcheck_passes() {
    let o = aggdet(&["gradcheck", "--cases", "2", "--seed", "3"]);
    assert!(o.status.success(), "{}", stdout(&o));
    assert!(stdout(&o).lines().count() >= 10);
    assert!(!stdout(&o).contains("FAIL"));
}

#[test]
fn selftest_exit_code_follows_reports() {
    let o = aggdet(&["selftest"]);
    let out = stdout(&o);
    assert!(out.lines().count() >= 6, "{out}");
    let any_fail = out.lines().any(|l| l.ends_with("FAIL"));
    assert_eq!(o.status.code(), Some(if any_fail { 1 } else { 0 }));
}
