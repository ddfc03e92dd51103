use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use aerosense::io::{read_samples, AttentionExport};
use tempfile::TempDir;

const SMALL: &str = r#"
[simulation]
duration_s = 14400.0
hourly_rate = [20.0, 20.0, 20.0, 20.0, 20.0, 20.0, 20.0, 20.0, 20.0, 20.0, 20.0, 20.0,
               20.0, 20.0, 20.0, 20.0, 20.0, 20.0, 20.0, 20.0, 20.0, 20.0, 20.0, 20.0]

[dataset]
cadence_s = 120.0

[model]
encoder_widths = [8, 8]
d_model = 8
heads = 2
d_hidden = 6

[train]
max_epochs = 2
batch_size = 16
"#;

fn aerosense(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_aerosense")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = aerosense(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Workspace {
    dir: TempDir,
}

impl Workspace {
    fn new(config: &str) -> Self {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("run.toml"), config).unwrap();
        Workspace { dir }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn config(&self) -> String {
        s(&self.path("run.toml")).to_string()
    }

    fn run(&self, args: &[&str]) -> Output {
        let cfg = self.config();
        let mut all = vec!["--config", cfg.as_str()];
        all.extend_from_slice(args);
        ok(&all)
    }
}

#[test]
fn full_pipeline() {
    let w = Workspace::new(SMALL);
    let (msgs, data, model, report) = (w.path("msgs.ndjson"), w.path("data"), w.path("model.json"), w.path("report"));
    w.run(&["simulate", "--out", s(&msgs)]);
    w.run(&["build-dataset", s(&msgs), "--out", s(&data)]);
    for f in ["train.ndjson", "val.ndjson", "test.ndjson", "norm.json"] {
        assert!(data.join(f).exists(), "{f} missing");
    }
    let test = read_samples(&data.join("test.ndjson")).unwrap();
    assert!(!test.is_empty());

    w.run(&[
        "train",
        s(&data.join("train.ndjson")),
        s(&data.join("val.ndjson")),
        "--norm",
        s(&data.join("norm.json")),
        "--out",
        s(&model),
    ]);
    let log = fs::read_to_string(w.path("model.log.ndjson")).unwrap();
    assert_eq!(log.lines().count(), 2);
    assert!(log.lines().all(|l| l.contains("\"val_loss\"")));

    w.run(&["evaluate", s(&model), s(&data.join("test.ndjson")), "--out", s(&report)]);
    let metrics = fs::read_to_string(report.join("metrics.csv")).unwrap();
    let lines: Vec<&str> = metrics.lines().collect();
    assert_eq!(lines[0], "model,region,mae,rmse,r2");
    assert_eq!(lines.len(), 5);
    assert!(lines[1].starts_with("aerosense,AP,") && lines[4].starts_with("persistence,AR,"));
    let daypart = fs::read_to_string(report.join("daypart.csv")).unwrap();
    assert_eq!(daypart.lines().count(), 13);
    assert!(daypart.lines().nth(1).unwrap().starts_with("00:00-02:00,"));

    // Use a busy test snapshot as a standalone document.
    let busiest = test.iter().max_by_key(|x| x.snapshot.len()).unwrap();
    let snap = w.path("snap.json");
    fs::write(&snap, serde_json::to_string(&busiest.snapshot).unwrap()).unwrap();
    let out = w.run(&["predict", s(&model), s(&snap)]);
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(v["y_ap_hat"].as_f64().unwrap().is_finite());
    assert!(v["y_ar_hat"].as_f64().unwrap().is_finite());

    let export = w.path("attention.ndjson");
    w.run(&["export-attention", s(&model), s(&snap), "--out", s(&export)]);
    let e: AttentionExport = serde_json::from_str(fs::read_to_string(&export).unwrap().trim()).unwrap();
    let n = busiest.snapshot.len();
    assert_eq!(e.aircraft.len(), n);
    assert_eq!(e.heads.len(), 2);
    for h in &e.heads {
        assert_eq!(h.matrix.len(), n);
        for row in &h.matrix {
            assert_eq!(row.len(), n);
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
        assert!((h.influence.iter().sum::<f64>() - n as f64).abs() < 1e-9);
    }
}

#[test]
fn commands_are_deterministic() {
    let w = Workspace::new(SMALL);
    let read = |name: &str| fs::read(w.path(name)).unwrap();
    w.run(&["--seed", "5", "simulate", "--out", s(&w.path("a.ndjson"))]);
    w.run(&["--seed", "5", "simulate", "--out", s(&w.path("b.ndjson"))]);
    w.run(&["--seed", "6", "simulate", "--out", s(&w.path("c.ndjson"))]);
    assert_eq!(read("a.ndjson"), read("b.ndjson"));
    assert_ne!(read("a.ndjson"), read("c.ndjson"));

    w.run(&["build-dataset", s(&w.path("a.ndjson")), "--out", s(&w.path("d1"))]);
    w.run(&["build-dataset", s(&w.path("a.ndjson")), "--out", s(&w.path("d2"))]);
    for f in ["train.ndjson", "val.ndjson", "test.ndjson", "norm.json"] {
        assert_eq!(read(&format!("d1/{f}")), read(&format!("d2/{f}")), "{f}");
    }
    let train = s(&w.path("d1/train.ndjson")).to_string();
    let val = s(&w.path("d1/val.ndjson")).to_string();
    w.run(&["train", &train, &val, "--out", s(&w.path("m1.json"))]);
    w.run(&["train", &train, &val, "--out", s(&w.path("m2.json"))]);
    assert_eq!(read("m1.json"), read("m2.json"));
}

#[test]
fn exit_codes_follow_error_class() {
    let w = Workspace::new("[model]\nd_model = 30\n");
    let out = aerosense(&["--config", &w.config(), "simulate", "--out", s(&w.path("x"))]);
    assert_eq!(out.status.code(), Some(2));

    let unknown = Workspace::new("[simulation]\nspeed = 1\n");
    let out = aerosense(&["--config", &unknown.config(), "simulate", "--out", s(&w.path("x"))]);
    assert_eq!(out.status.code(), Some(2));

    let garbage = w.path("garbage.ndjson");
    fs::write(&garbage, "{\"aircraft_id\": 3}\n").unwrap();
    let out = aerosense(&["build-dataset", s(&garbage), "--out", s(&w.path("d"))]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 1"));

    let out = aerosense(&["predict", s(&w.path("missing.json")), s(&garbage)]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn diverging_training_exits_with_numerical_failure() {
    let blowup = format!("{SMALL}lr = 1e300\n");
    let w = Workspace::new(&blowup);
    let (msgs, data) = (w.path("msgs.ndjson"), w.path("data"));
    w.run(&["simulate", "--out", s(&msgs)]);
    w.run(&["build-dataset", s(&msgs), "--out", s(&data)]);
    let cfg = w.config();
    let out = aerosense(&[
        "--config",
        &cfg,
        "train",
        s(&data.join("train.ndjson")),
        s(&data.join("val.ndjson")),
        "--out",
        s(&w.path("model.json")),
    ]);
    assert_eq!(out.status.code(), Some(4), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(!w.path("model.json").exists());
}
