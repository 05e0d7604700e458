use std::fs;
use std::path::Path;
use std::process::Command;

use subgoal_ds::cli::{run_from, sha256_file, Manifest};
use subgoal_ds::data::{save_demonstration, Demonstration, Gripper, PartialSample};
use subgoal_ds::segment::SegmentsFile;
use subgoal_ds::sim::{make_synthetic_task, EvalReport, SyntheticKind};
use subgoal_ds::waypoint::WaypointsFile;

const BIN: &str = env!("CARGO_BIN_EXE_subgoal-ds");

fn s(p: &Path) -> String {
    p.to_str().unwrap().to_string()
}

fn cli(args: &[&str]) {
    let mut all = vec!["subgoal-ds"];
    all.extend_from_slice(args);
    run_from(all).unwrap_or_else(|e| panic!("{args:?}: {e:#}"));
}

fn write_pick_place(dir: &Path) -> String {
    let p = dir.join("demo.json");
    save_demonstration(&make_synthetic_task(SyntheticKind::PickPlace, 0), &p).unwrap();
    s(&p)
}

/// Quick settings so the whole pipeline runs in well under a second.
const FAST: &[&str] = &["--epochs", "30", "--hidden", "8", "--rollouts", "2", "--horizon", "200"];

#[test]
fn segment_without_events_gives_one_segment() {
    let dir = tempfile::tempdir().unwrap();
    let samples = (0..20)
        .map(|i| PartialSample {
            t: i as f64 * 0.1,
            x: vec![i as f64 * 0.01, 0.0, 0.0],
            xdot: None,
            gripper: Gripper::Open,
            q: None,
        })
        .collect();
    let demo = Demonstration::from_partial(samples).unwrap();
    let input = dir.path().join("flat.json");
    save_demonstration(&demo, &input).unwrap();
    let out = dir.path().join("segments.json");
    cli(&["segment", "--in", &s(&input), "--out", &s(&out)]);
    let file = SegmentsFile::load(&out).unwrap();
    assert_eq!(file.segments.len(), 1);
    assert_eq!(file.segments[0].event_index, 19);
    assert!(dir.path().join("segments.manifest.json").exists());
}

#[test]
fn stepwise_commands_chain() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let demo = write_pick_place(d);
    let seg = s(&d.join("segments.json"));
    let wp = s(&d.join("waypoints.json"));
    let models = s(&d.join("models"));
    cli(&["segment", "--in", &demo, "--out", &seg]);
    cli(&["waypoints", "--in", &seg, "--eta", "0.01", "--out", &wp]);
    let file = WaypointsFile::load(&wp).unwrap();
    assert_eq!(file.segments.len(), 3);
    for e in &file.segments {
        assert!(e.waypoints.achieved_error <= 0.01);
    }

    cli(&["train", "--segments", &wp, "--seed", "0,1", "--epochs", "20", "--hidden", "8", "--out", &models]);
    for seed in 0..2 {
        for k in 0..3 {
            assert!(d.join(format!("models/seed_{seed}/segment_{k}.json")).exists());
        }
    }

    let traj = d.join("traj.csv");
    cli(&["rollout", "--models", &models, "--segments", &wp, "--start", "0,0,0.3", "--noise", "0.0",
          "--horizon", "100", "--out", &s(&traj)]);
    let text = fs::read_to_string(&traj).unwrap();
    let header = text.lines().next().unwrap();
    assert_eq!(header, "t,x0,x1,x2,xdot0,xdot1,xdot2,gripper,qw,qx,qy,qz,active_segment");
    assert!(text.lines().count() > 1);

    let field = d.join("field.csv");
    cli(&["export-field", "--model", &format!("{models}/seed_0/segment_0.json"), "--plane", "xz",
          "--grid", "5", "--out", &s(&field)]);
    let text = fs::read_to_string(&field).unwrap();
    assert_eq!(text.lines().count(), 26);
    assert!(text.lines().skip(1).all(|l| l.split(',').count() == 7));

    cli(&["train", "--segments", &wp, "--seed", "0,1", "--epochs", "20", "--hidden", "8", "--kind", "bc",
          "--out", &s(&d.join("bc"))]);
    let report = d.join("report.json");
    let table = d.join("table.csv");
    cli(&["eval", "--models-dir", &models, "--models-dir", &s(&d.join("bc")), "--task", &wp,
          "--condition", "deterministic,noisy", "--seeds", "0,1", "--rollouts", "2", "--horizon", "50",
          "--out", &s(&report), "--csv", &s(&table)]);
    let table = fs::read_to_string(&table).unwrap();
    let rows: Vec<&str> = table.lines().collect();
    assert_eq!(rows.len(), 5);
    assert_eq!(rows[0].split(',').count(), 1 + 4 * 2);
    assert!(rows[4].starts_with("total,"));
    let reports: serde_json::Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(reports.as_array().unwrap().len(), 4);
}

#[test]
fn pipeline_is_byte_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let demo = write_pick_place(dir.path());
    let mut reports = vec![];
    for run in ["a", "b"] {
        let out = s(&dir.path().join(run));
        let mut args = vec!["pipeline", "--demo", &demo, "--eta", "0.01", "--seeds", "0,1",
                            "--condition", "noisy", "--out-dir", &out];
        args.extend_from_slice(FAST);
        cli(&args);
        reports.push(fs::read(dir.path().join(run).join("report.json")).unwrap());
    }
    assert_eq!(reports[0], reports[1]);
    let report: EvalReport = serde_json::from_slice(&reports[0]).unwrap();
    assert_eq!(report.seeds, vec![0, 1]);
    assert_eq!(report.runs.len(), 4);

    // thread count does not change results
    let out = s(&dir.path().join("c"));
    let mut args = vec!["--jobs", "1", "pipeline", "--demo", &demo, "--seeds", "0,1", "--condition",
                        "noisy", "--out-dir", &out];
    args.extend_from_slice(FAST);
    cli(&args);
    assert_eq!(fs::read(dir.path().join("c/report.json")).unwrap(), reports[0]);
}

#[test]
fn manifest_reruns_reproduce_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let demo = write_pick_place(dir.path());
    let out = dir.path().join("run");
    let mut args = vec!["pipeline", "--demo", &demo, "--condition", "perturbed+noisy", "--out-dir"];
    let out_s = s(&out);
    args.push(&out_s);
    args.extend_from_slice(FAST);
    cli(&args);

    let manifest_path = out.join("manifest.json");
    let manifest: Manifest = serde_json::from_str(&fs::read_to_string(&manifest_path).unwrap()).unwrap();
    assert_eq!(manifest.command, "pipeline");
    assert_eq!(manifest.config.training.epochs, 30);
    assert_eq!(manifest.inputs[&demo], sha256_file(Path::new(&demo)).unwrap());
    let report = s(&out.join("report.json"));
    assert_eq!(manifest.outputs[&report], sha256_file(Path::new(&report)).unwrap());
    assert!(manifest.outputs.keys().any(|k| k.ends_with("seed_0/segment_2.json")));

    let saved = dir.path().join("manifest.json");
    fs::copy(&manifest_path, &saved).unwrap();
    let before = fs::read(&report).unwrap();
    fs::remove_dir_all(&out).unwrap();
    cli(&["--config", &s(&saved), "pipeline"]);
    assert_eq!(fs::read(&report).unwrap(), before);
}

#[test]
fn config_file_sits_below_flags() {
    let dir = tempfile::tempdir().unwrap();
    let demo = write_pick_place(dir.path());
    let cfg = dir.path().join("cfg.toml");
    fs::write(
        &cfg,
        "eta = 0.02\nmin_len = 3\n\n[training]\nepochs = 10\nhidden = 4\n",
    )
    .unwrap();
    let seg = s(&dir.path().join("segments.json"));
    let wp = s(&dir.path().join("waypoints.json"));
    cli(&["segment", "--in", &demo, "--out", &seg]);
    cli(&["--config", &s(&cfg), "waypoints", "--in", &seg, "--out", &wp]);
    assert_eq!(WaypointsFile::load(&wp).unwrap().eta, 0.02);
    cli(&["--config", &s(&cfg), "waypoints", "--in", &seg, "--eta", "0.005", "--out", &wp]);
    assert_eq!(WaypointsFile::load(&wp).unwrap().eta, 0.005);

    let models = dir.path().join("models");
    cli(&["--config", &s(&cfg), "train", "--segments", &wp, "--epochs", "3", "--out", &s(&models)]);
    let m: Manifest =
        serde_json::from_str(&fs::read_to_string(models.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(m.config.training.epochs, 3);
    assert_eq!(m.config.training.hidden, 4);
}

#[test]
fn binary_exit_codes_and_prefixes() {
    let dir = tempfile::tempdir().unwrap();
    let out = Command::new(BIN).args(["segment", "--bogus"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));

    let bad = dir.path().join("bad.json");
    fs::write(&bad, "{\"dim\": 3, \"samples\": [").unwrap();
    let out = Command::new(BIN)
        .args(["segment", "--in", &s(&bad), "--out", &s(&dir.path().join("o.json"))])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("core-data: parse error"), "{err}");

    let out = Command::new(BIN)
        .args(["waypoints", "--in", &s(&bad), "--out", &s(&dir.path().join("w.json"))])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("segmentation:"));

    let out = Command::new(BIN)
        .args(["waypoints", "--in", &s(&dir.path().join("nope.json")), "--out", "w.json"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("does not exist"));

    let out = Command::new(BIN).arg("--help").output().unwrap();
    assert!(out.status.success());
    let help = String::from_utf8_lossy(&out.stdout);
    for sub in ["segment", "waypoints", "train", "rollout", "eval", "export-field", "pipeline"] {
        assert!(help.contains(sub), "help lacks {sub}");
    }
}

#[test]
fn synth_writes_a_loadable_demo() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("nut.json");
    cli(&["synth", "--task", "square-nut-like", "--seed", "3", "--out", &s(&out)]);
    let demo = subgoal_ds::data::load_demonstration(&out).unwrap();
    assert_eq!(demo, make_synthetic_task(SyntheticKind::SquareNut, 3));
}
