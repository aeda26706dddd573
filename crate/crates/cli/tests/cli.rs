use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"
name = "tiny"
seed = 3

[data]
per_cell = 12

[pretrain]
steps = 20

[federation]
clients = 4
rounds = 2
epochs = 1
"#;

fn promptfed(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_promptfed"))
        .env("PROMPTFED_OUT", out)
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn write_tiny(dir: &Path) -> String {
    let path = dir.join("tiny.toml");
    fs::write(&path, TINY).unwrap();
    path.display().to_string()
}

#[test]
fn gradcheck_passes_and_corruption_exits_nonzero() {
    let tmp = tempfile::tempdir().unwrap();
    let ok = promptfed(tmp.path(), &["gradcheck"]);
    assert!(ok.status.success(), "{}", stdout(&ok));
    assert!(stdout(&ok).contains("gradcheck passed"));

    let longer = promptfed(tmp.path(), &["gradcheck", "--prompt-len", "2"]);
    assert!(longer.status.success());

    let bad = promptfed(tmp.path(), &["gradcheck", "--corrupt", "group.2=1.01"]);
    assert_eq!(bad.status.code(), Some(2));
    assert!(stdout(&bad).contains("FAIL"));
}

#[test]
fn validation_errors_exit_one() {
    let tmp = tempfile::tempdir().unwrap();
    let o = promptfed(tmp.path(), &["train", "--set", "partition.s=9"]);
    assert_eq!(o.status.code(), Some(1));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("9") && err.contains("C = 8"), "{err}");

    let cfg = tmp.path().join("typo.toml");
    fs::write(&cfg, "[federation]\nrondus = 3\n").unwrap();
    let o = promptfed(tmp.path(), &["train", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("rondus"));
}

#[test]
fn train_eval_report_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_tiny(tmp.path());
    let out = tmp.path().join("out");

    let train = promptfed(&out, &["train", "--config", &cfg, "--threads", "1"]);
    assert!(train.status.success(), "{}", String::from_utf8_lossy(&train.stderr));
    assert!(stdout(&train).contains("worst_local_acc="));
    let run = out.join("tiny");
    for f in ["config.toml", "rounds.jsonl", "summary.csv", "state.json", "state.bin"] {
        assert!(run.join(f).exists(), "missing {f}");
    }
    let summary = fs::read_to_string(run.join("summary.csv")).unwrap();
    assert!(summary.starts_with("# "), "summary carries the config echo");

    let eval = promptfed(&out, &["eval", "--config", &cfg]);
    assert!(eval.status.success(), "{}", String::from_utf8_lossy(&eval.stderr));
    let line = |text: &str| text.lines().find(|l| l.starts_with("global_acc=")).unwrap().to_string();
    assert_eq!(line(&stdout(&eval)), line(&stdout(&train)));

    let report = promptfed(&out, &["report", run.to_str().unwrap()]);
    assert!(report.status.success());
    assert!(stdout(&report).contains("rounds=2"));
}

#[test]
fn thread_count_does_not_change_results() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_tiny(tmp.path());
    let mut csvs = Vec::new();
    for threads in ["1", "4"] {
        let out = tmp.path().join(format!("t{threads}"));
        let o = promptfed(&out, &["train", "--config", &cfg, "--threads", threads]);
        assert!(o.status.success());
        csvs.push(fs::read_to_string(out.join("tiny").join("summary.csv")).unwrap());
    }
    assert_eq!(csvs[0], csvs[1]);
}

#[test]
fn partition_dumps_one_shard_per_client() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_tiny(tmp.path());
    let o = promptfed(tmp.path(), &["partition", "--config", &cfg]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let shards = fs::read_dir(tmp.path().join("tiny").join("shards")).unwrap().count();
    assert_eq!(shards, 4);
}

#[test]
fn pretrain_reuses_the_cache() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_tiny(tmp.path());
    let first = promptfed(tmp.path(), &["pretrain", "--config", &cfg]);
    let second = promptfed(tmp.path(), &["pretrain", "--config", &cfg]);
    assert!(first.status.success() && second.status.success());
    assert_eq!(stdout(&first), stdout(&second));
    assert_eq!(fs::read_dir(tmp.path().join("cache")).unwrap().count(), 2);
}
