use std::path::Path;
use std::process::{Command, Output};

fn aap(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_aap"))
        .args(args)
        .current_dir(cwd)
        .env("AAP_THREADS", "2")
        .output()
        .expect("failed to spawn aap")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn ma_line(text: &str) -> String {
    text.lines()
        .find(|l| l.starts_with("mA"))
        .unwrap_or_else(|| panic!("no mA line in {text}"))
        .to_string()
}

#[test]
fn build_priors_on_fixture() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("labels.csv"), "a,b\n1,1\n1,0\n0,1\n1,1\n").unwrap();
    let o = aap(
        &["build-priors", "--labels", "labels.csv", "--out", "pri"],
        dir.path(),
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("n=4 k=2"));
    assert!(!stdout(&o).contains("FAIL"));

    let json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("pri/priors.json")).unwrap()).unwrap();
    let text = json.to_string();
    assert!(text.contains("0.75"), "{text}");
    assert!(dir.path().join("pri/cooccurrence_heatmap.csv").exists());
}

#[test]
fn input_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let o = aap(
        &["build-priors", "--labels", "missing.csv", "--out", "x"],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).starts_with("error:"));

    std::fs::write(dir.path().join("bad.csv"), "a,b\n1,2\n").unwrap();
    let o = aap(&["build-priors", "--labels", "bad.csv", "--out", "x"], dir.path());
    assert_eq!(o.status.code(), Some(2));

    let o = aap(&["gradcheck", "--m", "1"], dir.path());
    assert_eq!(o.status.code(), Some(2));

    let o = aap(&["train", "--out", "x"], dir.path());
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn gradcheck_reports_pass() {
    let dir = tempfile::tempdir().unwrap();
    let o = aap(&["gradcheck", "--trials", "20", "--weights"], dir.path());
    assert!(o.status.success());
    let out = stdout(&o);
    assert!(out.contains("status=PASS"), "{out}");
    assert!(
        out.lines()
            .any(|l| l.starts_with("weights") && l.contains("status=PASS")),
        "{out}"
    );
}

#[test]
fn impossible_tolerance_exits_with_three() {
    let dir = tempfile::tempdir().unwrap();
    let o = aap(
        &["gradcheck", "--trials", "5", "--tolerance", "1e-14"],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn train_then_eval_reproduces_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let o = aap(&["synth", "--out", "data", "--seed", "3"], dir.path());
    assert!(o.status.success());
    let o = aap(
        &[
            "train", "--data", "data", "--arm", "cocnn", "--lambda", "0.2", "--seed", "3", "--epochs", "4",
            "--out", "run",
        ],
        dir.path(),
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let trained = ma_line(&stdout(&o));
    for f in [
        "checkpoint.json",
        "metrics.csv",
        "thresholds.json",
        "train_log.csv",
    ] {
        assert!(dir.path().join("run").join(f).exists(), "missing {f}");
    }
    let o = aap(
        &[
            "eval",
            "--checkpoint",
            "run/checkpoint.json",
            "--data",
            "data",
            "--thresholds",
            "run/thresholds.json",
            "--out",
            "eval.csv",
        ],
        dir.path(),
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(ma_line(&stdout(&o)), trained);
    assert_eq!(
        std::fs::read(dir.path().join("eval.csv")).unwrap(),
        std::fs::read(dir.path().join("run/metrics.csv")).unwrap()
    );
}

#[test]
fn zero_lambda_context_arm_matches_multibranch() {
    let dir = tempfile::tempdir().unwrap();
    assert!(aap(&["synth", "--out", "data", "--seed", "5"], dir.path())
        .status
        .success());
    let base = [
        "train", "--data", "data", "--seed", "5", "--epochs", "3", "--lambda", "0",
    ];
    let mb = [&base[..], &["--arm", "multibranch", "--out", "mb"]].concat();
    let co = [&base[..], &["--arm", "cocnn", "--out", "co"]].concat();
    assert!(aap(&mb, dir.path()).status.success());
    assert!(aap(&co, dir.path()).status.success());
    assert_eq!(
        std::fs::read(dir.path().join("mb/metrics.csv")).unwrap(),
        std::fs::read(dir.path().join("co/metrics.csv")).unwrap()
    );
}

#[test]
fn lambda_sweep_writes_table() {
    let dir = tempfile::tempdir().unwrap();
    assert!(aap(&["synth", "--out", "data", "--seed", "2"], dir.path())
        .status
        .success());
    let o = aap(
        &[
            "train",
            "--data",
            "data",
            "--seed",
            "2",
            "--epochs",
            "1",
            "--sweep-lambda",
            "--out",
            "sweep",
        ],
        dir.path(),
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let table = std::fs::read_to_string(dir.path().join("sweep/lambda_sweep.csv")).unwrap();
    let mut lines = table.lines();
    assert_eq!(lines.next(), Some("lambda,mA"));
    let lambdas: Vec<f64> = lines
        .map(|l| l.split(',').next().unwrap().parse().unwrap())
        .collect();
    assert_eq!(lambdas.len(), 11);
    assert_eq!(lambdas[0], 0.0);
    assert!((lambdas[10] - 0.5).abs() < 1e-12);
}

#[test]
fn feature_label_pair_is_accepted() {
    let dir = tempfile::tempdir().unwrap();
    assert!(aap(&["synth", "--out", "data", "--seed", "4"], dir.path())
        .status
        .success());
    let o = aap(
        &[
            "train",
            "--features",
            "data/train_features.aapt",
            "--labels",
            "data/train_labels.csv",
            "--arm",
            "baseline",
            "--seed",
            "4",
            "--epochs",
            "2",
            "--out",
            "run",
        ],
        dir.path(),
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(dir.path().join("run/checkpoint.json").exists());
}
