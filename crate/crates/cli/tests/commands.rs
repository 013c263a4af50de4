use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use lw_core::synth::SceneSpec;
use serde_json::Value;

fn lw(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lw"))
        .args(args)
        .env_remove("LW_SEED")
        .env_remove("LW_THREADS")
        .output()
        .expect("run lw")
}

fn ok(args: &[&str]) -> String {
    let out = lw(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

/// Exit code plus the parsed `lw-error:` record; exactly one such line.
fn fails(args: &[&str]) -> (i32, Value) {
    let out = lw(args);
    let code = out.status.code().unwrap();
    let stderr = String::from_utf8(out.stderr).unwrap();
    let lines: Vec<&str> = stderr.lines().filter(|l| l.starts_with("lw-error:")).collect();
    assert_eq!(lines.len(), 1, "{stderr}");
    let record: Value = serde_json::from_str(lines[0].trim_start_matches("lw-error:").trim()).unwrap();
    assert_eq!(record["code"], code);
    (code, record)
}

fn session(preset: &str) -> (tempfile::TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("s");
    ok(&["synth", "--preset", preset, "--out", root.to_str().unwrap()]);
    (dir, root)
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn read_json(p: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(p).unwrap()).unwrap()
}

fn write_spec(dir: &Path, spec: &SceneSpec) -> PathBuf {
    let path = dir.join("spec.json");
    fs::write(&path, serde_json::to_string(spec).unwrap()).unwrap();
    path
}

#[test]
fn synth_writes_a_complete_session() {
    let (_d, root) = session("s1");
    for sub in ["frames", "alpha", "uv_a2f", "uv_f2a"] {
        assert_eq!(fs::read_dir(root.join(sub)).unwrap().count(), 8, "{sub}");
    }
    for f in ["config.json", "atlas_fg.png", "atlas_bg.png", "edit/edited.png", "edit/correspondence.json"] {
        assert!(root.join(f).is_file(), "{f}");
    }
}

#[test]
fn synth_is_deterministic_and_reads_json_specs() {
    let dir = tempfile::tempdir().unwrap();
    let spec = write_spec(dir.path(), &SceneSpec::s2());
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    ok(&["synth", "--spec", s(&spec), "--out", s(&a)]);
    ok(&["synth", "--spec", s(&spec), "--out", s(&b)]);
    for f in lw_core::session::input_files(&a).unwrap() {
        assert_eq!(fs::read(a.join(&f)).unwrap(), fs::read(b.join(&f)).unwrap(), "{}", f.display());
    }
}

#[test]
fn singular_motion_is_a_spec_error_naming_the_frame() {
    let dir = tempfile::tempdir().unwrap();
    let mut spec = SceneSpec::s1();
    spec.motion[2] = lw_core::Affine2([[0.0, 0.0, 1.0], [0.0, 0.0, 1.0]]);
    let path = write_spec(dir.path(), &spec);
    let (code, record) = fails(&["synth", "--spec", s(&path), "--out", s(&dir.path().join("o"))]);
    assert_eq!(code, 2);
    assert!(record["message"].as_str().unwrap().contains("frame 3"), "{record}");
    let (code, _) = fails(&["synth", "--spec", s(&dir.path().join("missing.json")), "--out", "x"]);
    assert_eq!(code, 2);
}

#[test]
fn resolution_is_capped_unless_opted_in() {
    let dir = tempfile::tempdir().unwrap();
    let big = write_spec(dir.path(), &SceneSpec::s1_at(384, 216));
    let out = dir.path().join("big");
    let (code, record) = fails(&["synth", "--spec", s(&big), "--out", s(&out)]);
    assert_eq!(code, 2);
    assert!(record["message"].as_str().unwrap().contains("--full-res"));
    assert!(!out.exists());
    ok(&["synth", "--spec", s(&big), "--out", s(&out), "--full-res"]);
    let (code, _) = fails(&["propagate", s(&out)]);
    assert_eq!(code, 2);

    let huge = dir.path().join("huge.json");
    fs::write(&huge, serde_json::to_string(&SceneSpec::s1_at(1024, 576)).unwrap()).unwrap();
    let (code, _) = fails(&["synth", "--spec", s(&huge), "--out", s(&dir.path().join("h")), "--full-res"]);
    assert_eq!(code, 2);
}

#[test]
fn propagate_reports_oracle_agreement() {
    let (_d, root) = session("s1");
    ok(&["propagate", s(&root)]);
    assert_eq!(fs::read_dir(root.join("out/frames")).unwrap().count(), 8);
    let report = read_json(&root.join("out/report.json"));
    assert!(report["oracle"]["max_mae"].as_f64().unwrap() < 4.0 / 255.0);
    assert_eq!(report["oracle"]["within_tolerance"], true);
    assert_eq!(report["input_hash"].as_str().unwrap().len(), 64);
    assert_eq!(report["flags"].as_array().unwrap().len(), 0);
}

#[test]
fn identity_edit_is_flagged() {
    let dir = tempfile::tempdir().unwrap();
    let spec = write_spec(dir.path(), &SceneSpec::s1().with_identity_edit());
    let root = dir.path().join("s");
    ok(&["synth", "--spec", s(&spec), "--out", s(&root)]);
    ok(&["propagate", s(&root)]);
    let report = read_json(&root.join("out/report.json"));
    assert!(report["flags"].as_array().unwrap().iter().any(|f| f == "no-edit fixed point satisfied"));
}

#[test]
fn pipeline_failures_name_their_stage() {
    let (_d, root) = session("miniature");
    fs::remove_file(root.join("edit/correspondence.json")).unwrap();
    let (code, record) = fails(&["propagate", s(&root)]);
    assert_eq!(code, 3);
    assert_eq!(record["stage"], "load");
    assert!(record["message"].as_str().unwrap().contains("edit/correspondence.json not found"));
}

#[test]
fn outputs_stay_inside_the_session() {
    let (_d, root) = session("miniature");
    for out in ["../elsewhere", "/tmp/elsewhere"] {
        assert_eq!(fails(&["propagate", s(&root), "--out", out]).0, 2);
    }
    assert_eq!(fails(&["propagate", s(&root), "--keyframe", "9"]).0, 2);
}

#[test]
fn optimize_needs_a_propagation_first() {
    let (_d, root) = session("miniature");
    let (code, record) = fails(&["optimize", s(&root), "--iters", "1"]);
    assert_eq!(code, 3);
    assert!(record["message"].as_str().unwrap().contains("lw propagate"));
}

#[test]
fn zero_iterations_reproduce_the_propagation() {
    let (_d, root) = session("s2");
    ok(&["propagate", s(&root)]);
    ok(&["optimize", s(&root), "--iters", "0"]);
    for j in 1..=8 {
        let name = format!("{j:04}.png");
        assert_eq!(
            fs::read(root.join("out/frames").join(&name)).unwrap(),
            fs::read(root.join("out/opt/frames").join(&name)).unwrap()
        );
    }
    let csv = fs::read_to_string(root.join("out/opt/loss.csv")).unwrap();
    assert_eq!(csv.lines().count(), 2);
}

#[test]
fn target_guidance_run_cuts_the_objective() {
    let (_d, root) = session("s1");
    ok(&["propagate", s(&root)]);
    ok(&["optimize", s(&root), "--iters", "300", "--guidance", "target:oracle_frames", "--seed", "3"]);
    let csv = fs::read_to_string(root.join("out/opt/loss.csv")).unwrap();
    let totals: Vec<f64> = csv.lines().skip(1).map(|l| l.rsplit(',').next().unwrap().parse().unwrap()).collect();
    assert_eq!(totals.len(), 301);
    assert!(totals[300] < 0.25 * totals[0], "{} -> {}", totals[0], totals[300]);
    let report = read_json(&root.join("out/opt/report.json"));
    assert_eq!(report["frames"], serde_json::json!([1, 4, 8]));
    assert_eq!(report["seed"], 3);
}

#[test]
fn optimize_runs_are_reproducible() {
    let (_d, root) = session("miniature");
    ok(&["propagate", s(&root)]);
    let run = || {
        ok(&["optimize", s(&root), "--iters", "5", "--guidance", "target:oracle", "--frames", "1,2,4"]);
        fs::read(root.join("out/opt/loss.csv")).unwrap()
    };
    assert_eq!(run(), run());
}

#[test]
fn unreachable_guidance_is_a_contract_violation() {
    let (_d, root) = session("miniature");
    ok(&["propagate", s(&root)]);
    let (code, record) = fails(&["optimize", s(&root), "--iters", "2", "--guidance", "http://127.0.0.1:1"]);
    assert_eq!(code, 4);
    assert_eq!(record["kind"], "contract");
    for bad in [vec!["--guidance", "magic"], vec!["--frames", "0,2"], vec!["--step", "-1"]] {
        let mut args = vec!["optimize", s(&root), "--iters", "1"];
        args.extend(bad);
        assert_eq!(fails(&args).0, 2);
    }
}

#[test]
fn interpolation_writes_frames_and_centroids() {
    let (_d, root) = session("s2");
    ok(&["propagate", s(&root)]);
    for t in ["0", "0.5", "1"] {
        ok(&["interpolate", s(&root), "--t", t]);
    }
    for j in 1..=8 {
        let name = format!("{j:04}.png");
        assert_eq!(
            fs::read(root.join("out/interp_t1.00/frames").join(&name)).unwrap(),
            fs::read(root.join("out/frames").join(&name)).unwrap()
        );
    }
    let report = read_json(&root.join("out/interp_t0.50/report.json"));
    assert_eq!(report["centroids"].as_array().unwrap().len(), 8);
    assert!(report["max_linearity_error"].as_f64().unwrap() < 0.5);
    for t in ["1.5", "-0.2", "nan"] {
        assert_eq!(fails(&["interpolate", s(&root), "--t", t]).0, 2, "{t}");
    }
}

#[test]
fn bad_invocations_exit_with_usage_errors() {
    assert_eq!(fails(&["frobnicate"]).0, 2);
    assert_eq!(fails(&["propagate"]).0, 2);
    let out = Command::new(env!("CARGO_BIN_EXE_lw"))
        .args(["synth", "--preset", "s1", "--out", "x"])
        .env("LW_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(ok(&["--help"]).contains("propagate"));
}

#[test]
fn thread_cap_does_not_change_results() {
    let (_d, root) = session("miniature");
    let run = |threads: &str| {
        let out = Command::new(env!("CARGO_BIN_EXE_lw"))
            .args(["propagate", s(&root)])
            .env("LW_THREADS", threads)
            .output()
            .unwrap();
        assert!(out.status.success());
        fs::read(root.join("out/frames/0002.png")).unwrap()
    };
    assert_eq!(run("1"), run("3"));
}

#[test]
fn busy_port_exits_with_code_five() {
    let (_d, root) = session("miniature");
    let taken = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    let port = taken.local_addr().unwrap().port().to_string();
    let (code, record) = fails(&["serve", s(&root), "--port", &port]);
    assert_eq!(code, 5);
    assert_eq!(record["kind"], "port-busy");
}
