use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

use lad_core::io::{read_cube, read_mask, write_cube, Dtype};
use lad_core::{Dims, ImageCube, ScoreMap};

fn lad(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lad")).args(args).output().unwrap()
}

fn ok(args: &[&str]) {
    let out = lad(args);
    assert!(out.status.success(), "lad {args:?}: {}", String::from_utf8_lossy(&out.stderr));
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn read_json(p: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap()
}

fn scene(dir: &Path, extra: &[&str]) -> (PathBuf, PathBuf) {
    let cube = dir.join("scene.bin");
    let truth = dir.join("truth.pgm");
    let mut args = vec![
        "gmrf", "--rows", "40", "--cols", "40", "--bands", "6", "--offset", "20", "--seed", "2", "--output", s(&cube),
        "--truth", s(&truth),
    ];
    args.extend_from_slice(extra);
    ok(&args);
    (cube, truth)
}

#[test]
fn cauchy_detection_reports_no_inversions() {
    let dir = tempfile::tempdir().unwrap();
    let (cube, _) = scene(dir.path(), &[]);
    let scores = dir.path().join("scores.bin");
    let report = dir.path().join("report.json");
    ok(&[
        "detect", "--input", s(&cube), "--detector", "lad", "--weights", "cauchy", "--output", s(&scores), "--report",
        s(&report),
    ]);
    let r = read_json(&report);
    assert_eq!(r["instrumentation"]["covariance_inversions"], 0);
    assert_eq!(r["instrumentation"]["eigendecompositions"], 0);
    let map = ScoreMap::from_cube(&read_cube(&scores).unwrap()).unwrap();
    assert_eq!(map.dims().extents(), &[40, 40]);
    assert!((map.max() - r["max_score"].as_f64().unwrap()).abs() < 1e-12);
}

#[test]
fn rxd_detection_inverts_once() {
    let dir = tempfile::tempdir().unwrap();
    let (cube, _) = scene(dir.path(), &[]);
    let report = dir.path().join("report.json");
    ok(&[
        "detect", "--input", s(&cube), "--detector", "rxd", "--output", s(&dir.path().join("o.bin")), "--report",
        s(&report),
    ]);
    assert_eq!(read_json(&report)["instrumentation"]["covariance_inversions"], 1);
}

#[test]
fn identical_masks_score_one() {
    let dir = tempfile::tempdir().unwrap();
    let (_, truth) = scene(dir.path(), &[]);
    let out = dir.path().join("eval.json");
    ok(&["eval", "--truth", s(&truth), "--pred", s(&truth), "--output", s(&out)]);
    assert_eq!(read_json(&out)["soi"], 1.0);
}

#[test]
fn score_sweep_finds_the_implant() {
    let dir = tempfile::tempdir().unwrap();
    let (cube, truth) = scene(dir.path(), &[]);
    let scores = dir.path().join("scores.bin");
    ok(&["detect", "--input", s(&cube), "--detector", "rxd", "--output", s(&scores)]);
    let out = dir.path().join("eval.json");
    let roc = dir.path().join("roc.csv");
    ok(&["eval", "--truth", s(&truth), "--scores", s(&scores), "--output", s(&out), "--roc", s(&roc)]);
    // The implant covers about 11% of this small scene and inflates the
    // global covariance, so the bar is lower than on larger scenes.
    let best = read_json(&out)["best"]["soi"].as_f64().unwrap();
    assert!(best > 0.5, "best soi {best}");
    let lines = std::fs::read_to_string(&roc).unwrap();
    assert_eq!(lines.lines().next(), Some("fpr,tpr,t"));
    assert_eq!(lines.lines().count(), 52);

    let pred = dir.path().join("pred.pgm");
    ok(&["threshold", "--scores", s(&scores), "--t", "0.5", "--output", s(&pred)]);
    assert!(read_mask(&pred).unwrap().count() > 0);
}

#[test]
fn energy_profile_is_monotone_and_complete() {
    let dir = tempfile::tempdir().unwrap();
    let (cube, _) = scene(dir.path(), &[]);
    for basis in ["klt", "gft"] {
        let out = dir.path().join(format!("{basis}.csv"));
        ok(&["energy", "--input", s(&cube), "--basis", basis, "--output", s(&out)]);
        let text = std::fs::read_to_string(&out).unwrap();
        let rows: Vec<Vec<f64>> = text
            .lines()
            .skip(1)
            .map(|l| l.split(',').map(|v| v.parse().unwrap()).collect())
            .collect();
        assert_eq!(rows.len(), 6);
        for pair in rows.windows(2) {
            assert!(pair[1][1] >= pair[0][1]);
        }
        assert!((rows[5][2] - 1.0).abs() < 1e-12);
    }
}

#[test]
fn prebuilt_model_matches_inline_build() {
    let dir = tempfile::tempdir().unwrap();
    let (cube, _) = scene(dir.path(), &[]);
    let bundle = dir.path().join("model.ladm");
    ok(&["model", "--input", s(&cube), "--weights", "cauchy", "--eigen", "--output", s(&bundle)]);
    let a = dir.path().join("a.bin");
    let b = dir.path().join("b.bin");
    ok(&["detect", "--input", s(&cube), "--detector", "lad-p", "--model", s(&bundle), "--p", "3", "--output", s(&a)]);
    ok(&["detect", "--input", s(&cube), "--detector", "lad-p", "--weights", "cauchy", "--p", "3", "--output", s(&b)]);
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
}

#[test]
fn spatial_detector_runs_on_volumes() {
    let dir = tempfile::tempdir().unwrap();
    let (cube, _) = scene(dir.path(), &["--depth", "3"]);
    let scores = dir.path().join("scores.bin");
    ok(&[
        "detect", "--input", s(&cube), "--detector", "lad-s", "--weights", "cauchy", "--spatial-weight", "0.5",
        "--output", s(&scores),
    ]);
    assert_eq!(read_cube(&scores).unwrap().dims().extents(), &[3, 40, 40]);
}

#[test]
fn implant_command_uses_the_requested_class() {
    let dir = tempfile::tempdir().unwrap();
    let target = dir.path().join("target.bin");
    let source = dir.path().join("source.bin");
    let labels = dir.path().join("labels.bin");
    let dims = Dims::d2(40, 40).unwrap();
    let t = ImageCube::new(dims.clone(), 2, vec![0.0; 3200]).unwrap();
    let src = ImageCube::new(Dims::d2(1, 4).unwrap(), 2, vec![1.0, 1.0, 9.0, 9.0, 2.0, 2.0, 9.0, 9.0]).unwrap();
    let lab = ImageCube::new(Dims::d2(1, 4).unwrap(), 1, vec![0.0, 14.0, 3.0, 14.0]).unwrap();
    write_cube(&t, &target, Dtype::F64, Value::Null).unwrap();
    write_cube(&src, &source, Dtype::F64, Value::Null).unwrap();
    write_cube(&lab, &labels, Dtype::U16, Value::Null).unwrap();
    let out = dir.path().join("out.bin");
    let truth = dir.path().join("truth.pgm");
    ok(&[
        "implant", "--target", s(&target), "--source", s(&source), "--labels", s(&labels), "--class", "14", "--output",
        s(&out), "--truth", s(&truth),
    ]);
    let cube = read_cube(&out).unwrap();
    let mask = read_mask(&truth).unwrap();
    assert!(mask.count() > 100);
    for i in 0..cube.num_pixels() {
        let want: &[f64] = if mask.get(i) { &[9.0, 9.0] } else { &[0.0, 0.0] };
        assert_eq!(cube.pixel(i), want);
    }
}

#[test]
fn invalid_config_lists_every_issue() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    std::fs::write(&cfg, "detector = \"lad\"\npsi = 2.0\nt = -1.0\n").unwrap();
    let out = lad(&["detect", "--config", s(&cfg)]);
    assert_eq!(out.status.code(), Some(2));
    let err: Value = serde_json::from_slice(&out.stderr).unwrap();
    let issues = err["error"]["context"]["issues"].as_array().unwrap();
    assert_eq!(issues.len(), 4, "{issues:?}");
}

#[test]
fn missing_input_is_a_structured_error() {
    let out = lad(&["detect", "--input", "/nonexistent/cube.bin", "--detector", "lad", "--output", "/tmp/x.bin"]);
    assert_eq!(out.status.code(), Some(1));
    let err: Value = serde_json::from_slice(&out.stderr).unwrap();
    assert!(err["error"]["code"].is_string());
    assert!(!err["error"]["message"].as_str().unwrap().is_empty());
}

#[test]
fn usage_errors_exit_two() {
    let out = lad(&["detect", "--detector", "nope"]);
    assert_eq!(out.status.code(), Some(2));
}
