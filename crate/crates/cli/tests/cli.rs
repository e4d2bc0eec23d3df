use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn logvm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_logvm"))
        .args(args)
        .env("LOGVM_THREADS", "1")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

/// A run config small enough to train in about a second.
fn tiny_config(dir: &Path) -> String {
    let path = dir.join("tiny.json");
    let json = format!(
        r#"{{"train": {{"epochs": 1, "train_size": 8, "val_size": 4, "batch_size": 4}}, "seeds": 2, "out_dir": {:?}}}"#,
        dir.join("out")
    );
    fs::write(&path, json).unwrap();
    path.to_str().unwrap().to_string()
}

fn read_csv(path: &Path) -> (Vec<String>, Vec<Vec<String>>) {
    let mut r = csv::Reader::from_path(path).unwrap();
    let header = r.headers().unwrap().iter().map(String::from).collect();
    let rows = r.records().map(|rec| rec.unwrap().iter().map(String::from).collect()).collect();
    (header, rows)
}

#[test]
fn gradcheck_ops_passes_with_one_line_per_op() {
    let o = logvm(&["gradcheck", "--scope", "ops"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let out = stdout(&o);
    let lines: Vec<&str> = out.lines().collect();
    assert!(lines.len() >= 20);
    assert!(lines.iter().all(|l| l.starts_with("ok")), "{out}");
    assert!(lines.iter().any(|l| l.contains("silu")));
}

#[test]
fn gradcheck_names_a_corrupted_op() {
    let o = logvm(&["gradcheck", "--scope", "ops", "--inject-fault", "silu"]);
    assert_eq!(code(&o), 1);
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("silu"), "{err}");
    assert!(stdout(&o).lines().any(|l| l.starts_with("FAIL") && l.contains("silu")));
}

#[test]
fn bad_arguments_exit_with_two() {
    assert_eq!(code(&logvm(&["gradcheck", "--scope", "everything"])), 2);
    assert_eq!(code(&logvm(&["scanbench", "--len", "16", "--chunk", "0"])), 2);
    assert_eq!(code(&logvm(&["erf", "--checkpoint", "x", "--probe", "3", "--out", "y"])), 2);
    let o = Command::new(env!("CARGO_BIN_EXE_logvm"))
        .args(["scanbench", "--len", "16"])
        .env("LOGVM_THREADS", "0")
        .output()
        .unwrap();
    assert_eq!(code(&o), 2);
}

#[test]
fn scanbench_emits_parseable_csv() {
    let dir = tempfile::tempdir().unwrap();
    let o = logvm(&["scanbench", "--len", "512", "--channels", "4", "--state", "8", "--chunk", "16", "--threads", "2"]);
    assert_eq!(code(&o), 0);
    let path = dir.path().join("bench.csv");
    fs::write(&path, o.stdout).unwrap();
    let (header, rows) = read_csv(&path);
    assert_eq!(header, ["impl", "threads", "len", "channels", "secs", "gflops"]);
    assert_eq!(rows.len(), 2);
    assert_eq!((rows[0][0].as_str(), rows[1][0].as_str()), ("sequential", "parallel"));
    assert_eq!(rows[1][1], "2");
    assert!(rows.iter().all(|r| r[4].parse::<f64>().unwrap() > 0.0));
}

#[test]
fn print_config_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let first = stdout(&logvm(&["train", "--print-config", "--variant", "global", "--seed", "4"]));
    assert!(first.contains("\"global\""));
    let path = dir.path().join("c.json");
    fs::write(&path, &first).unwrap();
    let second = stdout(&logvm(&["train", "--config", path.to_str().unwrap(), "--print-config"]));
    assert_eq!(first, second);
}

#[test]
fn unknown_or_invalid_config_exits_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.json");
    fs::write(&path, r#"{"model": {"depth": 3}}"#).unwrap();
    let o = logvm(&["train", "--config", path.to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("depth"));
    fs::write(&path, r#"{"model": {"classes": 1}}"#).unwrap();
    assert_eq!(code(&logvm(&["train", "--config", path.to_str().unwrap()])), 2);
}

#[test]
fn train_writes_artifacts_deterministically() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let metrics = |out: &str| {
        let o = logvm(&["train", "--config", &cfg, "--variant", "log", "--out-dir", out]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        let (header, rows) = read_csv(&Path::new(out).join("metrics.csv"));
        assert_eq!(header, ["epoch", "split", "loss", "dice", "iou", "seconds"]);
        assert!(Path::new(out).join("config.json").is_file());
        assert!(Path::new(out).join("checkpoint/config.json").is_file());
        // drop the wall-clock column
        rows.into_iter().map(|r| r[..5].to_vec()).collect::<Vec<_>>()
    };
    let a = metrics(dir.path().join("a").to_str().unwrap());
    let b = metrics(dir.path().join("b").to_str().unwrap());
    assert_eq!(a.len(), 3);
    assert_eq!(a, b);

    let pgm = dir.path().join("erf.pgm");
    let ckpt = dir.path().join("a/checkpoint");
    let o = logvm(&["erf", "--checkpoint", ckpt.to_str().unwrap(), "--probe", "16,10", "--out", pgm.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let bytes = fs::read(&pgm).unwrap();
    assert!(bytes.starts_with(b"P5\n32 32\n255\n"));
    assert_eq!(bytes.len(), b"P5\n32 32\n255\n".len() + 32 * 32);
    let o = logvm(&["erf", "--checkpoint", ckpt.to_str().unwrap(), "--probe", "40,0", "--out", pgm.to_str().unwrap()]);
    assert_eq!(code(&o), 2);
}

fn ablate(dir: &Path, axis: &str, seeds: &str) -> Vec<Vec<String>> {
    let cfg = tiny_config(dir);
    let out = dir.join(axis);
    let o = logvm(&["ablate", "--config", &cfg, "--axis", axis, "--seeds", seeds, "--out-dir", out.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let summary = out.join("stdout.csv");
    fs::write(&summary, o.stdout).unwrap();
    let (header, rows) = read_csv(&summary);
    assert_eq!(header, ["cell", "runs", "dice_mean", "dice_se", "iou_mean", "iou_se"]);
    rows
}

#[test]
fn strategy_ablation_summary_matches_the_runs() {
    let dir = tempfile::tempdir().unwrap();
    let rows = ablate(dir.path(), "strategy", "2");
    let cells: Vec<&str> = rows.iter().map(|r| r[0].as_str()).collect();
    assert_eq!(cells, ["head", "split", "center", "interleaved"]);

    // recompute mean and standard error from the per-run CSV
    let (header, runs) = read_csv(&dir.path().join("strategy/runs.csv"));
    assert_eq!(header, ["cell", "seed", "loss", "dice", "iou"]);
    assert_eq!(runs.len(), 8);
    for row in &rows {
        let dice: Vec<f64> = runs.iter().filter(|r| r[0] == row[0]).map(|r| r[3].parse().unwrap()).collect();
        assert_eq!(dice.len(), 2);
        let mean = (dice[0] + dice[1]) / 2.0;
        let se = (dice[0] - dice[1]).abs() / 2.0;
        assert!((row[2].parse::<f64>().unwrap() - mean).abs() < 1e-12);
        assert!((row[3].parse::<f64>().unwrap() - se).abs() < 1e-12);
    }
}

#[test]
fn directions_and_variant_axes() {
    let dir = tempfile::tempdir().unwrap();
    let cells = |axis| ablate(dir.path(), axis, "1").into_iter().map(|r| r[0].clone()).collect::<Vec<_>>();
    assert_eq!(cells("directions"), ["1", "2", "4"]);
    assert_eq!(cells("variant"), ["vanilla", "local", "global", "log"]);
}
