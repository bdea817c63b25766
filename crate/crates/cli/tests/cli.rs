use std::path::Path;
use std::process::{Command, Output};

use lobdif_cli::fixture::{fixtures_dir, list_fixtures, run_fixture};

fn lobdif(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lobdif")).args(args).output().expect("spawn binary")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().expect("utf-8 path")
}

/// Tiny alternating stream plus a 2-epoch, K=10 checkpoint.
fn smoke_run(dir: &Path) -> (String, String) {
    let data = dir.join("data");
    let o = lobdif(&["synth", "--C", "3", "--events", "300", "--seed", "1", "--out", p(&data)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let run = dir.join("run");
    let events = data.join("events.csv");
    let o = lobdif(&[
        "train", "--data", p(&events), "--C", "3", "--window", "8", "--dim", "8", "--step-dim", "8", "--steps", "10",
        "--epochs", "2", "--out", p(&run),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    (p(&events).to_string(), p(&run.join("model.ckpt")).to_string())
}

#[test]
fn ingest_three_row_fixture() {
    let dir = tempfile::tempdir().unwrap();
    let input = fixtures_dir().join("lobster_3row/messages.csv");
    let o = lobdif(&["ingest", "--input", p(&input), "--out", p(dir.path())]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let events = std::fs::read_to_string(dir.path().join("events.csv")).unwrap();
    assert_eq!(events.lines().count(), 4);
    assert!(String::from_utf8_lossy(&o.stdout).contains("parsed=3 mapped=3 dropped=0"));
    let norm: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("norm.json")).unwrap()).unwrap();
    assert!(norm["mean_log_dt"].is_number());
    assert!(dir.path().join("config.json").is_file());
}

#[test]
fn missing_input_exits_one_with_path() {
    let dir = tempfile::tempdir().unwrap();
    let o = lobdif(&["ingest", "--input", "/no/such/messages.csv", "--out", p(dir.path())]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("/no/such/messages.csv"));
}

#[test]
fn unknown_flag_exits_two_with_usage() {
    let o = lobdif(&["ingest", "--bogus"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("Usage"));
    assert_eq!(code(&lobdif(&["frobnicate"])), 2);
}

#[test]
fn unknown_config_key_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.json");
    std::fs::write(&cfg, r#"{"epochz": 3}"#).unwrap();
    let o = lobdif(&["synth", "--config", p(&cfg), "--out", p(dir.path())]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
}

#[test]
fn config_file_values_apply_and_flags_win() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.json");
    std::fs::write(&cfg, r#"{"events": 7, "num_classes": 2, "seed": 4}"#).unwrap();
    let out = dir.path().join("o");
    let o = lobdif(&["synth", "--config", p(&cfg), "--events", "9", "--out", p(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let echo: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("config.json")).unwrap()).unwrap();
    assert_eq!(echo["events"], 9);
    assert_eq!(echo["num_classes"], 2);
    assert_eq!(echo["seed"], 4);
    assert_eq!(std::fs::read_to_string(out.join("events.csv")).unwrap().lines().count(), 10);
}

#[test]
fn synth_is_seeded() {
    let dir = tempfile::tempdir().unwrap();
    let run = |name: &str, seed: &str| {
        let out = dir.path().join(name);
        let o = lobdif(&["synth", "--kind", "alternating", "--C", "2", "--events", "50", "--seed", seed, "--out", p(&out)]);
        assert_eq!(code(&o), 0);
        std::fs::read(out.join("events.csv")).unwrap()
    };
    assert_eq!(run("a", "3"), run("b", "3"));
    assert_ne!(run("a", "3"), run("c", "4"));
    let deterministic = dir.path().join("d");
    let o = lobdif(&["synth", "--C", "2", "--gaps", "0.1,0.01", "--jitter", "0", "--events", "4", "--out", p(&deterministic)]);
    assert_eq!(code(&o), 0);
    let text = std::fs::read_to_string(deterministic.join("events.csv")).unwrap();
    let rows: Vec<(f64, u8)> = text
        .lines()
        .skip(1)
        .map(|l| {
            let (t, e) = l.split_once(',').unwrap();
            (t.parse().unwrap(), e.parse().unwrap())
        })
        .collect();
    let expect = [(0.0, 0), (0.01, 1), (0.11, 0), (0.12, 1)];
    assert_eq!(rows.len(), expect.len());
    for ((t, e), (et, ee)) in rows.iter().zip(expect) {
        assert!((t - et).abs() < 1e-12 && *e == ee, "{rows:?}");
    }
}

#[test]
fn synth_hawkes_validation() {
    let dir = tempfile::tempdir().unwrap();
    let o = lobdif(&["synth", "--kind", "hawkes", "--mu", "1,1", "--alpha", "0.6,0.5;0.5,0.6", "--out", p(dir.path())]);
    assert_eq!(code(&o), 2);
    let o = lobdif(&["synth", "--kind", "hawkes", "--mu", "0,0", "--out", p(dir.path())]);
    assert_eq!(code(&o), 2);
    let o = lobdif(&[
        "synth", "--kind", "hawkes", "--mu", "0.5,0.5", "--alpha", "0.2,0.1;0.1,0.2", "--decay", "2", "--events", "100",
        "--out", p(dir.path()),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
}

#[test]
fn train_eval_predict_trace_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let start = std::time::Instant::now();
    let (events, ckpt) = smoke_run(dir.path());
    assert!(start.elapsed().as_secs() < 60);
    let loss = std::fs::read_to_string(dir.path().join("run/loss.csv")).unwrap();
    assert_eq!(loss.lines().next(), Some("epoch,train_loss,valid_loss"));
    assert_eq!(loss.lines().count(), 3);

    let out = dir.path().join("eval");
    let o = lobdif(&["eval", "--data", &events, "--checkpoint", &ckpt, "--tau", "1,2,5,10", "--out", p(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let reports = std::fs::read_to_string(out.join("reports.csv")).unwrap();
    let evals: Vec<&str> = reports.lines().skip(1).map(|l| l.rsplit(',').next().unwrap()).collect();
    assert_eq!(evals, ["10", "5", "2", "1"]);
    let text = std::fs::read_to_string(out.join("report_tau5.txt")).unwrap();
    assert!(text.contains("denoiser_evals=2\n") && text.contains("wall_time_per_event="));

    let out = dir.path().join("predict");
    let o = lobdif(&["predict", "--data", &events, "--checkpoint", &ckpt, "--tau", "5", "--out", p(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let preds = std::fs::read_to_string(out.join("predictions.csv")).unwrap();
    assert_eq!(preds.lines().count(), 1 + 300 - 8 + 1);

    let out = dir.path().join("trace");
    let o = lobdif(&[
        "trace", "--data", &events, "--checkpoint", &ckpt, "--tau", "1", "--trace-steps", "10,8,6,4,2,0", "--windows",
        "5", "--out", p(&out),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let trace = std::fs::read_to_string(out.join("trace.csv")).unwrap();
    assert_eq!(trace.lines().next(), Some("window_id,k,raw_t,class"));
    assert_eq!(trace.lines().count(), 1 + 6 * 5);
    assert!(trace.lines().skip(1).all(|l| l.split(',').count() == 4));

    let o = lobdif(&["trace", "--data", &events, "--checkpoint", &ckpt, "--windows", "100000", "--tau", "5", "--out", p(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stderr(&o).contains("warning"));
}

#[test]
fn eval_argument_errors() {
    let dir = tempfile::tempdir().unwrap();
    let (events, ckpt) = smoke_run(dir.path());
    let out = p(dir.path()).to_string();
    let o = lobdif(&["eval", "--data", &events, "--checkpoint", &ckpt, "--tau", "0", "--out", &out]);
    assert_eq!(code(&o), 2);
    let o = lobdif(&["eval", "--data", &events, "--checkpoint", &ckpt, "--tau", "3", "--out", &out]);
    assert_eq!(code(&o), 2);
    let o = lobdif(&["eval", "--data", &events, "--checkpoint", "/no/such.ckpt", "--tau", "5", "--out", &out]);
    assert_eq!(code(&o), 1);
    let o = lobdif(&["eval", "--data", &events, "--checkpoint", &ckpt, "--tau", "5,10,20,50", "--out", &out]);
    assert_eq!(code(&o), 2, "K=10 cannot take tau=20");
}

#[test]
fn zero_epochs_writes_checkpoint_with_warning() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    assert_eq!(code(&lobdif(&["synth", "--C", "2", "--events", "100", "--out", p(&data)])), 0);
    let run = dir.path().join("run");
    let o = lobdif(&[
        "train", "--data", p(&data.join("events.csv")), "--C", "2", "--window", "5", "--dim", "4", "--step-dim", "4",
        "--epochs", "0", "--out", p(&run),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stderr(&o).contains("warning"));
    assert!(run.join("model.ckpt").is_file());
    assert_eq!(std::fs::read_to_string(run.join("loss.csv")).unwrap(), "epoch,train_loss,valid_loss\n");
}

#[test]
fn invalid_model_config_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    assert_eq!(code(&lobdif(&["synth", "--C", "2", "--events", "100", "--out", p(&data)])), 0);
    let o = lobdif(&["train", "--data", p(&data.join("events.csv")), "--lr", "-1", "--out", p(dir.path())]);
    assert_eq!(code(&o), 2);
}

#[test]
fn shipped_fixtures_pass() {
    let names = list_fixtures(&fixtures_dir()).unwrap();
    assert_eq!(names, ["lobster_3row", "oracle_recovery"]);
    for name in names {
        let r = run_fixture(&name).unwrap();
        assert!(r.passed, "{name}: {:?}", r.diffs);
    }
    assert!(run_fixture("no_such_fixture").is_err());
}
