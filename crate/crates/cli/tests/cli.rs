use std::path::Path;
use std::process::{Command, Output};

fn wseg(args: &[&str], paths: &[(&str, &Path)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_wseg"));
    cmd.args(args);
    for (flag, p) in paths {
        cmd.arg(flag).arg(p);
    }
    cmd.output().expect("spawn wseg")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn gen_small(dir: &Path) {
    let o = wseg(
        &["gen-data", "--classes", "3", "--simple", "9", "--complex", "4", "--val", "2", "--height", "32", "--width", "32", "--seed", "3"],
        &[("--out", dir)],
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
}

const FAST: &[&str] = &["--set", "init.epochs=2", "--set", "mstep.epochs=1", "--set", "filter.m_step_top_n=4"];

fn run_em(data: &Path, out: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["run-em"];
    args.extend_from_slice(FAST);
    args.extend_from_slice(extra);
    wseg(&args, &[("--data", data), ("--out", out)])
}

#[test]
fn gen_data_writes_every_record_and_is_reproducible() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    gen_small(a.path());
    gen_small(b.path());
    let manifest = std::fs::read_to_string(a.path().join("manifest.jsonl")).unwrap();
    assert_eq!(manifest.lines().count(), 15);
    assert_eq!(manifest, std::fs::read_to_string(b.path().join("manifest.jsonl")).unwrap());
    let labels = std::fs::read_to_string(a.path().join("labels.txt")).unwrap();
    assert_eq!(labels.lines().next(), Some("background"));
    assert_eq!(labels.lines().count(), 4);
    for line in manifest.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        let image = v["image"].as_str().unwrap();
        let bytes_a = std::fs::read(a.path().join(image)).unwrap();
        assert_eq!(&bytes_a[..4], b"WST1");
        assert_eq!(bytes_a, std::fs::read(b.path().join(image)).unwrap());
    }
}

#[test]
fn usage_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&wseg(&["gen-data", "--classes", "0"], &[("--out", dir.path())])), 2);
    assert_eq!(code(&wseg(&["no-such-command"], &[])), 2);
    let missing = dir.path().join("missing");
    assert_eq!(code(&run_em(&missing, dir.path(), &[])), 2);
    let o = run_em(dir.path(), dir.path(), &["--set", "bogus=1"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn grad_check_passes_and_fails_by_tolerance() {
    let o = wseg(&["grad-check", "--trials", "10"], &[]);
    assert_eq!(code(&o), 0);
    assert!(String::from_utf8_lossy(&o.stdout).contains("PASS"));
    let o = wseg(&["grad-check", "--trials", "3", "--tolerance", "0"], &[]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("worst relative error"));
}

#[test]
fn run_em_writes_checkpoints_and_resumes() {
    let data = tempfile::tempdir().unwrap();
    gen_small(data.path());
    let full = tempfile::tempdir().unwrap();
    let o = run_em(data.path(), full.path(), &["--k", "2"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let ck = full.path().join("checkpoints");
    for name in ["init", "iter1", "iter2"] {
        for ext in ["wst", "json", "report.json"] {
            assert!(ck.join(format!("{name}.{ext}")).exists(), "{name}.{ext}");
        }
    }
    let table = std::fs::read_to_string(full.path().join("reports/report.txt")).unwrap();
    assert_eq!(table.lines().count(), 4);
    assert!(table.starts_with("Stage"));
    assert!(table.contains("EM iter 2"));

    let part = tempfile::tempdir().unwrap();
    assert_eq!(code(&run_em(data.path(), part.path(), &["--k", "1"])), 0);
    let from = part.path().join("checkpoints/iter1.wst");
    let o = wseg(
        &["run-em", "--k", "2", "--set", "init.epochs=2", "--set", "mstep.epochs=1", "--set", "filter.m_step_top_n=4"],
        &[("--data", data.path()), ("--out", part.path()), ("--from-checkpoint", &from)],
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    for name in ["iter2.wst", "iter2.report.json"] {
        assert_eq!(std::fs::read(ck.join(name)).unwrap(), std::fs::read(part.path().join("checkpoints").join(name)).unwrap());
    }
    assert_eq!(
        std::fs::read(full.path().join("reports/report.json")).unwrap(),
        std::fs::read(part.path().join("reports/report.json")).unwrap()
    );

    let o = wseg(&["report"], &[("--out", full.path()), ("--data", data.path())]);
    assert_eq!(code(&o), 0);
    assert_eq!(String::from_utf8_lossy(&o.stdout), table);

    let o = wseg(&["eval", "--split", "complex"], &[("--data", data.path()), ("--checkpoint", &ck.join("iter2.wst")), ("--out", full.path())]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(full.path().join("reports/eval.json").exists());
}

#[test]
fn oracle_eval_scores_100() {
    let data = tempfile::tempdir().unwrap();
    gen_small(data.path());
    let o = wseg(&["eval", "--oracle"], &[("--data", data.path())]);
    assert_eq!(code(&o), 0);
    let out = String::from_utf8_lossy(&o.stdout);
    let row = out.lines().nth(1).unwrap();
    assert!(row.starts_with("oracle"));
    assert!(row.split_whitespace().skip(1).all(|v| v == "100.0"), "{row}");
}

#[test]
fn mismatched_checkpoint_is_rejected() {
    let data = tempfile::tempdir().unwrap();
    gen_small(data.path());
    let run = tempfile::tempdir().unwrap();
    assert_eq!(code(&run_em(data.path(), run.path(), &["--k", "1"])), 0);
    let wst = run.path().join("checkpoints/init.wst");
    let mut bytes = std::fs::read(&wst).unwrap();
    bytes.truncate(bytes.len() - 4);
    std::fs::write(&wst, bytes).unwrap();
    let o = wseg(&["eval"], &[("--data", data.path()), ("--checkpoint", &wst)]);
    assert_eq!(code(&o), 2);
}

#[test]
fn diverging_training_exits_3() {
    let data = tempfile::tempdir().unwrap();
    gen_small(data.path());
    let o = wseg(
        &["train-init", "--set", "init.learning_rate=1e300", "--set", "init.epochs=3"],
        &[("--data", data.path()), ("--out", data.path())],
    );
    assert_eq!(code(&o), 3);
    let err = String::from_utf8_lossy(&o.stderr);
    assert_eq!(err.matches("numerical abort").count(), 1, "{err}");
}
