use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn tcnn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tcnn")).args(args).arg("-q").output().expect("run tcnn")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn synth_is_deterministic_and_counts_records() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let oa = tcnn(&["synth", "--n", "12", "--modes", "2", "--seed", "3", "--out", p(&a)]);
    let ob = tcnn(&["synth", "--n", "12", "--modes", "2", "--seed", "3", "--out", p(&b)]);
    assert!(oa.status.success(), "{}", stderr(&oa));
    assert_eq!(stdout(&oa), stdout(&ob));
    assert!(stdout(&oa).starts_with("12\t"));
    let lines = fs::read_to_string(a.join("annotations.txt")).unwrap();
    assert_eq!(lines.lines().count(), 12);
    assert_eq!(fs::read_dir(a.join("images")).unwrap().count(), 12);
    let oc = tcnn(&["synth", "--n", "12", "--modes", "2", "--seed", "4", "--out", p(&dir.path().join("c"))]);
    assert_ne!(stdout(&oa), stdout(&oc));
}

#[test]
fn invalid_configuration_exits_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let o = tcnn(&["synth", "--n", "5", "--modes", "0", "--out", p(dir.path())]);
    assert_eq!(o.status.code(), Some(1));
    let o = tcnn(&["frobnicate"]);
    assert_eq!(o.status.code(), Some(1));
    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "seed = 1\nunknown_key = 2\n").unwrap();
    let o = tcnn(&["cluster", "--config", p(&cfg), "--out", p(dir.path())]);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
}

#[test]
fn missing_upstream_artifact_exits_with_two_and_names_command() {
    let dir = tempfile::tempdir().unwrap();
    for (cmd, upstream) in [("cluster", "tcnn train"), ("tweak", "tcnn train"), ("eval", "tcnn train")] {
        let o = tcnn(&[cmd, "--out", p(dir.path())]);
        assert_eq!(o.status.code(), Some(2), "{cmd}: {}", stderr(&o));
        assert!(stderr(&o).contains(upstream), "{cmd}: {}", stderr(&o));
    }
}

#[test]
fn scoring_annotations_against_themselves_gives_zero_error() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    assert!(tcnn(&["synth", "--n", "6", "--out", p(&data)]).status.success());
    let ann = fs::read_to_string(data.join("annotations.txt")).unwrap();
    let mut preds = String::new();
    for line in ann.lines() {
        let f: Vec<&str> = line.split_whitespace().collect();
        let b: Vec<f64> = f[1..5].iter().map(|v| v.parse().unwrap()).collect();
        preds.push_str(f[0]);
        for (j, v) in f[5..15].iter().enumerate() {
            let v: f64 = v.parse().unwrap();
            let n = if j % 2 == 0 { (v - b[0]) / b[2] } else { (v - b[1]) / b[3] };
            preds.push_str(&format!(" {n}"));
        }
        preds.push('\n');
    }
    let pf = dir.path().join("preds.txt");
    fs::write(&pf, preds).unwrap();
    let o = tcnn(&["eval", "--predictions", p(&pf), "--truth", p(&data.join("annotations.txt"))]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    assert!(out.contains("count\t6"), "{out}");
    assert!(out.contains("mean_error\t0.0000"), "{out}");
}

#[test]
fn train_then_predict_writes_one_line_per_record() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    let o = tcnn(&["train", "--n", "22", "--epochs", "1", "--seed", "2", "--out", p(&run)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(run.join("model/vanilla.tcnn").exists());
    assert!(run.join("run_config.toml").exists());
    let ann = run.join("data/annotations.txt");
    let out = dir.path().join("pred.txt");
    let o = tcnn(&["predict", "--input", p(&ann), "--out", p(&run), "--output", p(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = fs::read_to_string(&out).unwrap();
    assert_eq!(text.lines().count(), 22);
    for line in text.lines() {
        let fields: Vec<&str> = line.split_whitespace().collect();
        assert_eq!(fields.len(), 11, "{line}");
        for v in &fields[1..] {
            v.parse::<f64>().unwrap();
        }
    }
    let img = run.join("data").join(text.lines().next().unwrap().split_whitespace().next().unwrap());
    let o = tcnn(&["predict", "--input", p(&img), "--out", p(&run)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(stdout(&o).lines().count(), 1);
    let o = tcnn(&["report", "--out", p(&run)]);
    assert!(o.status.success());
    let report = fs::read_to_string(run.join("report.md")).unwrap();
    assert!(report.contains("## Vanilla network") && report.contains("run `tcnn cluster`"));
}
