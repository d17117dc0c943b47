use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use sha2::{Digest, Sha256};

const TINY: &str = r#"{
  "train": {
    "trainer": {"batch_size": 4, "log_interval": 5, "checkpoint_interval": 0},
    "denoiser": {"dims": 3, "horizon": 16, "widths": [8, 16], "kernel": 3,
                 "step_embedding": 8, "condition_embedding": 8},
    "schedule": {"steps": 8, "cosine_offset": 0.008, "clip": 3.0}
  },
  "sweep": {"horizons": [16], "returns": [-0.01], "repeats": [1, 2], "paths": 3},
  "plan": {"planner": {"horizon": 16, "tracked_steps": 8, "batch": 2, "goal_repeats": 2, "max_replans": 2}}
}"#;

fn ddp(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ddp"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

/// The single JSON line on stdout.
fn summary(o: &Output) -> Value {
    let text = String::from_utf8(o.stdout.clone()).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 1, "stdout: {text}\nstderr: {}", String::from_utf8_lossy(&o.stderr));
    serde_json::from_str(lines[0]).unwrap()
}

fn sha(path: &Path) -> String {
    let bytes = std::fs::read(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    format!("{:x}", Sha256::digest(bytes))
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Fixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
    config: PathBuf,
}

impl Fixture {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        let config = root.join("run.json");
        std::fs::write(&config, TINY).unwrap();
        Self { _dir: dir, root, config }
    }

    fn out(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    fn ok(&self, args: &[&str]) -> Value {
        let o = ddp(args);
        assert_eq!(code(&o), 0, "{args:?}\n{}", String::from_utf8_lossy(&o.stderr));
        summary(&o)
    }

    /// Dataset plus a 20-step model in `out`.
    fn trained(&self, out: &Path) {
        self.ok(&["gen-data", "--out", s(out), "--count", "64", "--waypoints", "16", "--seed", "3"]);
        self.ok(&["train", "--config", s(&self.config), "--out", s(out), "--steps", "20", "--seed", "1"]);
    }
}

#[test]
fn gen_data_is_deterministic_and_summarized() {
    let f = Fixture::new();
    let (a, b) = (f.out("a"), f.out("b"));
    for out in [&a, &b] {
        let v = f.ok(&["gen-data", "--out", s(out), "--count", "100", "--waypoints", "16", "--seed", "5"]);
        assert_eq!(v["num_paths"], 100);
        assert_eq!(v["waypoints_per_path"], 16);
    }
    assert_eq!(sha(&a.join("dataset.ddpt")), sha(&b.join("dataset.ddpt")));
    assert_eq!(sha(&a.join("dataset_summary.json")), sha(&b.join("dataset_summary.json")));
    let summary: Value = serde_json::from_slice(&std::fs::read(a.join("dataset_summary.json")).unwrap()).unwrap();
    let hist: u64 = summary["return_histogram"].as_array().unwrap().iter().map(|v| v.as_u64().unwrap()).sum();
    assert_eq!(hist, 100);
    let frac = summary["collision_fraction"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&frac));

    let c = f.out("c");
    f.ok(&["gen-data", "--out", s(&c), "--count", "100", "--waypoints", "16", "--seed", "6"]);
    assert_ne!(sha(&a.join("dataset.ddpt")), sha(&c.join("dataset.ddpt")));
}

#[test]
fn config_errors_exit_2() {
    let f = Fixture::new();
    let bad = f.out("bad.json");
    std::fs::write(&bad, r#"{"gen_data": {"count": 5, "colour": "red"}}"#).unwrap();
    let o = ddp(&["gen-data", "--config", s(&bad), "--out", s(&f.out("x"))]);
    assert_eq!(code(&o), 2);
    assert!(summary(&o)["error"].as_str().unwrap().contains("colour"));

    let o = ddp(&["gen-data", "--config", s(&f.out("missing.json")), "--out", s(&f.out("x"))]);
    assert_eq!(code(&o), 2);
    let o = ddp(&["gen-data", "--world", "nowhere", "--count", "4", "--out", s(&f.out("x"))]);
    assert_eq!(code(&o), 2);
    let o = ddp(&["gen-data", "--count", "1", "--out", s(&f.out("x"))]);
    assert_eq!(code(&o), 2, "a single path cannot be normalized");
    let o = ddp(&["train", "--out", s(&f.out("empty"))]);
    assert_eq!(code(&o), 2, "dataset missing");
}

#[test]
fn unwritable_output_exits_3() {
    let f = Fixture::new();
    let blocker = f.out("file");
    std::fs::write(&blocker, "not a directory").unwrap();
    let o = ddp(&["gen-data", "--count", "8", "--waypoints", "8", "--out", s(&blocker.join("sub"))]);
    assert_eq!(code(&o), 3);
}

#[test]
fn train_logs_resumes_and_is_deterministic() {
    let f = Fixture::new();
    let a = f.out("a");
    f.trained(&a);
    let log = std::fs::read_to_string(a.join("loss.csv")).unwrap();
    assert_eq!(log.lines().count(), 1 + 20 / 5);
    assert_eq!(log.lines().next(), Some("step,loss"));

    let b = f.out("b");
    f.trained(&b);
    assert_eq!(sha(&a.join("model.ddpc")), sha(&b.join("model.ddpc")));
    assert_eq!(sha(&a.join("loss.csv")), sha(&b.join("loss.csv")));

    let v = f.ok(&["train", "--config", s(&f.config), "--out", s(&a), "--steps", "30", "--seed", "1", "--resume"]);
    assert_eq!(v["resumed_from"], 20);
    assert_eq!(v["step"], 30);
    let log = std::fs::read_to_string(a.join("loss.csv")).unwrap();
    let steps: Vec<&str> = log.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(steps, ["5", "10", "15", "20", "25", "30"]);
}

#[test]
fn train_failures_map_to_exit_codes() {
    let f = Fixture::new();
    let out = f.out("m");
    f.ok(&["gen-data", "--out", s(&out), "--count", "32", "--waypoints", "8", "--seed", "1"]);
    // the fixture denoiser expects 16 waypoints
    let o = ddp(&["train", "--config", s(&f.config), "--out", s(&out), "--steps", "2"]);
    assert_eq!(code(&o), 2);

    let o = ddp(&["train", "--out", s(&out), "--steps", "30", "--batch-size", "2", "--lr", "1e300"]);
    assert_eq!(code(&o), 4);

    let data = out.join("dataset.ddpt");
    let mut bytes = std::fs::read(&data).unwrap();
    bytes[0] = b'X';
    std::fs::write(&data, &bytes).unwrap();
    let o = ddp(&["train", "--out", s(&out), "--steps", "2"]);
    assert_eq!(code(&o), 3);
}

#[test]
fn sweep_writes_cells_and_survives_bad_cells() {
    let f = Fixture::new();
    let out = f.out("m");
    f.trained(&out);
    let args = |jobs: &'static str| {
        vec![
            "sweep".to_string(),
            "--config".into(),
            s(&f.config).into(),
            "--out".into(),
            s(&out).into(),
            "--seed".into(),
            "9".into(),
            "--horizons".into(),
            "16,15".into(),
            "--jobs".into(),
            jobs.into(),
        ]
    };
    let v = f.ok(&args("1").iter().map(String::as_str).collect::<Vec<_>>());
    assert_eq!(v["cells"], 4);
    assert_eq!(v["failed_cells"], 2, "odd horizon is rejected by the U-Net");
    let csv = std::fs::read_to_string(out.join("sweep.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 4);
    let cell = |ext: &str| out.join("sweep").join(format!("h16_c-0.01_i2.{ext}"));
    for ext in ["csv", "svg", "json"] {
        assert!(cell(ext).exists(), "{ext}");
    }
    let first = sha(&cell("json"));
    let agg = sha(&out.join("sweep.csv"));
    f.ok(&args("3").iter().map(String::as_str).collect::<Vec<_>>());
    assert_eq!(sha(&cell("json")), first);
    assert_eq!(sha(&out.join("sweep.csv")), agg);

    let m = f.ok(&["eval", "--out", s(&out), s(&cell("json"))]);
    assert_eq!(m["overall"]["paths"], 3);
    assert!(out.join("metrics.json").exists());
}

#[test]
fn plan_runs_trials_and_rejects_bad_endpoints() {
    let f = Fixture::new();
    let out = f.out("m");
    f.trained(&out);
    let base = ["plan", "--config", s(&f.config), "--out", s(&out), "--seed", "2"];
    let v = f.ok(&base);
    assert_eq!(v["seeds"], 1);
    for file in ["trace.json", "executed.csv", "plan.svg"] {
        assert!(out.join(file).exists(), "{file}");
    }
    let trace = sha(&out.join("trace.json"));
    f.ok(&base);
    assert_eq!(sha(&out.join("trace.json")), trace);

    let m = f.ok(&["eval", "--out", s(&out), s(&out.join("trace.json"))]);
    assert_eq!(m["overall"]["paths"], 1);

    let v = f.ok(&[&base[..], &["--seeds", "2", "--jobs", "2"]].concat());
    assert_eq!(v["seeds"], 2);
    assert_eq!(v["trials"].as_array().unwrap().len(), 2);
    assert!(out.join("plan_summary.json").exists());
    assert!(out.join("trial_01").join("trace.json").exists());

    let o = ddp(&[&base[..], &["--start", "0.5,0,0.3"]].concat());
    assert_eq!(code(&o), 5);
    let o = ddp(&[&base[..], &["--goal", "2,0,0.3"]].concat());
    assert_eq!(code(&o), 2);
    let o = ddp(&[&base[..], &["--strategy", "cfg-sparse"]].concat());
    assert_eq!(code(&o), 2, "dense model cannot serve a sparse strategy");
    let o = ddp(&[&base[..], &["--strategy", "cost-only"]].concat());
    assert_eq!(code(&o), 0);
}

#[test]
fn eval_needs_inputs() {
    let f = Fixture::new();
    let out = f.out("e");
    let o = ddp(&["eval", "--out", s(&out)]);
    assert_eq!(code(&o), 2);
    let o = ddp(&["eval", "--out", s(&out), s(&f.out("nope.json"))]);
    assert_eq!(code(&o), 2);
    let o = ddp(&["eval", "--out", s(&out), s(&f.config)]);
    assert_eq!(code(&o), 2);
}
