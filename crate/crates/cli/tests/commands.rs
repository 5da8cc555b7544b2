use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;
use thermoviab::phantom::{generate_case, PhantomSpec};
use thermoviab::pipeline;
use thermoviab::registration::WarpLogLine;

fn thermoviab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_thermoviab")).args(args).env_remove("THERMOVIAB_SEED").output().unwrap()
}

fn stdout_json(out: &Output) -> Value {
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).unwrap()
}

/// The machine-readable error is the last line on stderr.
fn stderr_json(out: &Output) -> Value {
    let text = String::from_utf8_lossy(&out.stderr);
    serde_json::from_str(text.lines().last().unwrap()).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Aligns a generated case through the binary and returns the worst
/// translation and worst linear-part deviation from identity.
fn align_deviation(spec: &PhantomSpec) -> (f64, f64) {
    let tmp = tempfile::tempdir().unwrap();
    generate_case(spec, "c1", "p1").unwrap().write(tmp.path()).unwrap();
    let out = thermoviab(&["align", "--case", p(tmp.path())]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(stdout_json(&out)["review_required"], false);

    let text = fs::read_to_string(tmp.path().join(pipeline::WARPS_FILE)).unwrap();
    let lines: Vec<WarpLogLine> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 122);
    let mut worst = (0.0f64, 0.0f64);
    for l in &lines {
        let m = [l.params[0], l.params[1], l.params[3], l.params[4]];
        let lin = (m[0] - 1.0).abs().max(m[1].abs()).max(m[2].abs()).max((m[3] - 1.0).abs());
        worst = (worst.0.max(l.params[2].hypot(l.params[5])), worst.1.max(lin));
    }
    worst
}

#[test]
fn align_on_jitter_free_case_gives_identity() {
    let (shift, linear) = align_deviation(&PhantomSpec::small(96, 80, 2).without_jitter().noise_free());
    assert!(shift < 0.01 && linear < 1e-4, "{shift} {linear}");
    // sensor noise leaves a small random walk along the keyframe chain
    let (shift, linear) = align_deviation(&PhantomSpec::small(96, 80, 2).without_jitter());
    assert!(shift < 0.5 && linear < 1e-3, "{shift} {linear}");
}

#[test]
fn align_flags_unregistrable_sequences() {
    let tmp = tempfile::tempdir().unwrap();
    let mut spec = PhantomSpec::small(64, 48, 3);
    spec.noise_sigma = 3.0;
    generate_case(&spec, "c1", "p1").unwrap().write(tmp.path()).unwrap();
    let out = thermoviab(&["align", "--case", p(tmp.path()), "--warp", "translation", "--precool-warp", "translation"]);
    assert_eq!(out.status.code(), Some(2));
    let err = stderr_json(&out);
    assert_eq!(err["error"], "review_required");
    // the warps are still written so a reviewer can inspect them
    assert!(tmp.path().join(pipeline::WARPS_FILE).is_file());
    assert_eq!(pipeline::case_status(tmp.path()).label(), "review_required");
}

#[test]
fn usage_and_data_errors() {
    let out = thermoviab(&["train", "--data", "x", "--out", "y", "--split", "70:20"]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(stderr_json(&out)["error"], "usage");
    let out = thermoviab(&["frobnicate"]);
    assert_eq!(out.status.code(), Some(1));
    let out = thermoviab(&["segment", "--case", ".", "--segmenter", "net"]);
    assert_eq!(out.status.code(), Some(1));

    let tmp = tempfile::tempdir().unwrap();
    let out = thermoviab(&["align", "--case", p(tmp.path())]);
    assert_eq!(out.status.code(), Some(3));
    let err = stderr_json(&out);
    assert_eq!(err["error"], "data");
    assert_eq!(err["exit_code"], 3);
    assert!(err["message"].as_str().unwrap().contains("case.json"));

    let out = thermoviab(&["predict", "--case", p(tmp.path()), "--model", p(&tmp.path().join("none"))]);
    assert_eq!(out.status.code(), Some(4));
    assert_eq!(stderr_json(&out)["error"], "model");
    assert!(thermoviab(&["--help"]).status.success());
}

#[test]
fn seed_falls_back_to_environment() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    let args = |out: &Path| vec!["phantom".to_string(), "--out".into(), p(out).into(), "--cases".into(), "4".into(), "--size".into(), "64x48".into()];
    let mut flagged = args(&a);
    flagged.extend(["--seed".to_string(), "17".into()]);
    let out = Command::new(env!("CARGO_BIN_EXE_thermoviab")).args(&flagged).env_remove("THERMOVIAB_SEED").output().unwrap();
    assert_eq!(stdout_json(&out)["seed"], 17);
    let out = Command::new(env!("CARGO_BIN_EXE_thermoviab")).args(args(&b)).env("THERMOVIAB_SEED", "17").output().unwrap();
    assert_eq!(stdout_json(&out)["seed"], 17);
    for f in ["dataset.json", "case001/frames.bin", "case004/case.json"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn stage_by_stage_workflow() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("study");
    let model = tmp.path().join("model.bundle");
    let fast = ["--warp", "translation", "--precool-warp", "translation"];

    let out = thermoviab(&["phantom", "--out", p(&data), "--cases", "14", "--viable-frac", "0.5", "--seed", "4", "--size", "96x80"]);
    assert_eq!(stdout_json(&out)["cases"], 14);

    // one case by hand, the rest prepared by train
    let c1 = data.join("case001");
    stdout_json(&thermoviab(&[&["align", "--case", p(&c1)][..], &fast[..]].concat()));
    stdout_json(&thermoviab(&["segment", "--case", p(&c1)]));
    let csv = tmp.path().join("out/case_features.csv");
    let feats = stdout_json(&thermoviab(&["features", "--case", p(&c1), "--out", p(&csv)]));
    assert_eq!(feats["columns"], 2436);
    let header = fs::read_to_string(&csv).unwrap().lines().next().unwrap().to_string();
    assert_eq!(header.split(',').count(), 2 + 2436);
    assert!(header.starts_with("case_id,nodule_id,"));

    let train = [
        &["train", "--data", p(&data), "--split", "75:25", "--seed", "1", "--out", p(&model), "--holdout", "4", "--trees", "10"][..],
        &fast[..],
    ]
    .concat();
    let trained = stdout_json(&thermoviab(&train));
    assert_eq!(trained["split"]["test"].as_array().unwrap().len(), 4);
    assert!(model.join("manifest.json").is_file());
    assert!(model.join(pipeline::VALIDATION_REPORT).is_file());

    let pred = stdout_json(&thermoviab(&["predict", "--case", p(&c1), "--model", p(&model)]));
    let n1 = &pred["nodules"][0];
    assert_eq!(n1["p"].as_array().unwrap().len(), 5);
    assert_eq!(n1["votes"].as_array().unwrap().len(), 5);
    let f = n1["F"].as_u64().unwrap();
    assert_eq!(f, n1["votes"].as_array().unwrap().iter().map(|v| v.as_u64().unwrap()).sum::<u64>());
    assert_eq!(n1["label"], if f >= 2 { "viable" } else { "nonviable" });

    // aligned but never segmented: predict stops at the missing mask
    let held = trained["split"]["test"][0].as_str().unwrap();
    let c = data.join(held);
    stdout_json(&thermoviab(&[&["align", "--case", p(&c)][..], &fast[..]].concat()));
    let out = thermoviab(&["predict", "--case", p(&c), "--model", p(&model)]);
    assert_eq!(out.status.code(), Some(3));
    let err = stderr_json(&out);
    assert!(err["message"].as_str().unwrap().starts_with("segmentation missing"), "{err}");

    let report = tmp.path().join("reports/eval.json");
    let eval = stdout_json(&thermoviab(&[&["eval", "--data", p(&data), "--model", p(&model), "--report", p(&report)][..], &fast[..]].concat()));
    assert_eq!(eval["n_nodules"], 4);
    assert_eq!(serde_json::from_slice::<Value>(&fs::read(&report).unwrap()).unwrap(), eval);
    let md = fs::read_to_string(report.with_extension("md")).unwrap();
    assert!(md.contains("ensemble"));
}
