use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};
use std::time::{Duration, Instant};

use relnet::eval::EvalReport;
use relnet::model::checkpoint::Checkpoint;
use relnet::train::TrainHistory;
use serde_json::{json, Value};

fn relnet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_relnet")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = relnet(args);
    assert!(
        out.status.success(),
        "relnet {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn write_config(dir: &Path, out: &Path, epochs: usize) -> PathBuf {
    let cfg = json!({
        "task": 1,
        "seed": 5,
        "out": out,
        "train_sims": 10,
        "test_sims": 4,
        "train": { "epochs": epochs, "batch_size": 3 },
        "model": { "hidden": 8, "pred_steps": 4 }
    });
    let path = dir.join(format!("config-{epochs}.json"));
    std::fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    path
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn history(dir: &Path) -> TrainHistory {
    TrainHistory::from_csv(&std::fs::read_to_string(dir.join("history.csv")).unwrap()).unwrap()
}

#[test]
fn simulate_is_byte_reproducible_and_refuses_to_overwrite() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for out in [&a, &b] {
        let cfg = write_config(tmp.path(), out, 1);
        ok(&["simulate", "--config", s(&cfg)]);
    }
    for file in ["train.cds", "test.cds"] {
        assert_eq!(std::fs::read(a.join(file)).unwrap(), std::fs::read(b.join(file)).unwrap());
    }
    let cfg = write_config(tmp.path(), &a, 1);
    let again = relnet(&["simulate", "--config", s(&cfg)]);
    assert_eq!(again.status.code(), Some(1), "{}", String::from_utf8_lossy(&again.stderr));
    ok(&["simulate", "--config", s(&cfg), "--force"]);

    let manifest: Value = serde_json::from_str(&std::fs::read_to_string(a.join("manifest-simulate.json")).unwrap()).unwrap();
    assert_eq!(manifest["config"]["seed"], 5);
    let c = tmp.path().join("c");
    ok(&["simulate", "--config", s(&a.join("manifest-simulate.json")), "--out", s(&c)]);
    assert_eq!(std::fs::read(a.join("train.cds")).unwrap(), std::fs::read(c.join("train.cds")).unwrap());
}

#[test]
fn smoke_train_resume_and_eval() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("run");
    let one = write_config(tmp.path(), &out, 1);
    ok(&["simulate", "--config", s(&one)]);
    ok(&["train", "--config", s(&one)]);
    assert_eq!(history(&out).records.len(), 1);

    let three = write_config(tmp.path(), &out, 3);
    ok(&["train", "--config", s(&three)]);
    let epochs: Vec<usize> = history(&out).records.iter().map(|r| r.epoch).collect();
    assert_eq!(epochs, vec![1, 2, 3]);

    let stdout = ok(&[
        "eval",
        "--config",
        s(&three),
        "--horizon",
        "10,20",
        "--export-adjacency",
        "--export-trajectories",
    ]);
    assert!(stdout.contains("MSE@10") && stdout.contains("MSE@20"), "{stdout}");
    let report = EvalReport::load(&out.join("report.json")).unwrap();
    assert_eq!(report.mse.iter().map(|m| m.horizon).collect::<Vec<_>>(), vec![10, 20]);
    let ck = Checkpoint::load(&out.join("best.nrim")).unwrap();
    assert_eq!(report.config_fingerprint, ck.model_config().unwrap().fingerprint());
    for sim in 0..4 {
        assert!(out.join(format!("adjacency/sim_{sim:04}_pred.csv")).exists());
        assert!(out.join(format!("adjacency/sim_{sim:04}_true.csv")).exists());
        assert!(out.join(format!("trajectories/sim_{sim:04}.csv")).exists());
    }

    let again = tmp.path().join("again");
    ok(&["eval", "--config", s(&out.join("report.json")), "--out", s(&again), "--checkpoint", s(&out.join("best.nrim")), "--dataset", s(&out.join("test.cds"))]);
    let replay = EvalReport::load(&again.join("report.json")).unwrap();
    assert_eq!(replay.accuracy, report.accuracy);
    assert_eq!(replay.mse, report.mse);
    assert_eq!(replay.predicted_adjacency, report.predicted_adjacency);

    ok(&["train", "--config", s(&one), "--force"]);
    assert_eq!(history(&out).records.len(), 1);
}

#[test]
fn interrupted_training_leaves_a_loadable_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("run");
    let cfg = write_config(tmp.path(), &out, 400);
    ok(&["simulate", "--config", s(&cfg)]);
    let mut child = Command::new(env!("CARGO_BIN_EXE_relnet"))
        .args(["train", "--config", s(&cfg)])
        .stdout(Stdio::null())
        .stderr(Stdio::null())
        .spawn()
        .unwrap();
    let started = Instant::now();
    while !out.join("last.nrim").exists() {
        assert!(started.elapsed() < Duration::from_secs(120), "no checkpoint after two minutes");
        std::thread::sleep(Duration::from_millis(20));
    }
    std::thread::sleep(Duration::from_millis(150));
    child.kill().unwrap();
    child.wait().unwrap();

    let ck = Checkpoint::load(&out.join("last.nrim")).unwrap();
    let done = ck.meta["state"]["epochs_done"].as_u64().unwrap() as usize;
    assert!((1..400).contains(&done), "{done} epochs recorded");
    let target = done + 2;
    let resume = write_config(tmp.path(), &out, target);
    ok(&["train", "--config", s(&resume)]);
    let epochs: Vec<usize> = history(&out).records.iter().map(|r| r.epoch).collect();
    assert_eq!(epochs, (1..=target).collect::<Vec<_>>());
}

#[test]
fn report_round_trips_through_csv() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("run");
    let cfg = write_config(tmp.path(), &out, 1);
    ok(&["simulate", "--config", s(&cfg)]);
    ok(&["train", "--config", s(&cfg)]);
    ok(&["eval", "--config", s(&cfg)]);
    let table = ok(&["report", s(&out), "--out", s(tmp.path())]);
    assert_eq!(table.lines().filter(|l| l.trim_start().starts_with('1')).count(), 1, "{table}");
    let first = std::fs::read_to_string(tmp.path().join("report.csv")).unwrap();
    let second_dir = tmp.path().join("second");
    std::fs::create_dir_all(&second_dir).unwrap();
    ok(&["report", s(&tmp.path().join("report.csv")), "--out", s(&second_dir)]);
    assert_eq!(std::fs::read_to_string(second_dir.join("report.csv")).unwrap(), first);
}

#[test]
fn exit_codes() {
    assert_eq!(relnet(&["--help"]).status.code(), Some(0));
    assert_eq!(relnet(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(relnet(&["simulate", "--seed", "1"]).status.code(), Some(1));
    assert_eq!(relnet(&["simulate", "--task", "99", "--seed", "1"]).status.code(), Some(1));
    let tmp = tempfile::tempdir().unwrap();
    let bad = tmp.path().join("bad.json");
    std::fs::write(&bad, "{ \"task\": 1, \"sede\": 3 }").unwrap();
    assert_eq!(relnet(&["simulate", "--config", s(&bad)]).status.code(), Some(1));
    let missing = relnet(&["eval", "--task", "12", "--seed", "0", "--out", s(&tmp.path().join("t12"))]);
    assert_eq!(missing.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&missing.stderr).contains("task 1"));
    let broken = tmp.path().join("report.json");
    std::fs::write(&broken, "{ not json").unwrap();
    let r = relnet(&["report", s(&broken)]);
    assert_eq!(r.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&r.stderr).contains("report.json"));
}
