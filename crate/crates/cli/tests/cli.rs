use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_facecascade"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn gen_dataset(dir: &Path) -> PathBuf {
    let cfg = dir.join("gen.toml");
    fs::write(
        &cfg,
        "seed = 7\nn_samples = 40\n\n[occlusion]\nmode = \"random\"\nrate = 0.2\n",
    )
    .unwrap();
    let data = dir.join("data");
    let out = run(&["gen", "--config", s(&cfg), "--out", s(&data)]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    data
}

fn train(data: &Path, model: &Path) -> Output {
    run(&[
        "train",
        "--data",
        s(data),
        "--stages",
        "4",
        "--descriptor",
        "grad-hist",
        "--patch-radius",
        "8",
        "--cells",
        "2",
        "--bins",
        "4",
        "--energy",
        "0.9",
        "--seed",
        "7",
        "--out",
        s(model),
    ])
}

fn assert_finite(v: &serde_json::Value, path: &str) {
    match v {
        serde_json::Value::Number(n) => {
            assert!(n.as_f64().unwrap().is_finite(), "{path} not finite")
        }
        serde_json::Value::Array(a) => a
            .iter()
            .enumerate()
            .for_each(|(i, x)| assert_finite(x, &format!("{path}[{i}]"))),
        serde_json::Value::Object(o) => o
            .iter()
            .for_each(|(k, x)| assert_finite(x, &format!("{path}.{k}"))),
        other => panic!("{path} is {other}"),
    }
}

#[test]
fn gen_train_eval_predict_end_to_end() {
    let tmp = tempfile::tempdir().unwrap();
    let data = gen_dataset(tmp.path());
    assert!(data.join("annotations.csv").exists());
    assert!(data.join("images/0039.pgm").exists());

    let model = tmp.path().join("model.cjm");
    let out = train(&data, &model);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );

    let (report, curves) = (
        tmp.path().join("report.json"),
        tmp.path().join("curves.csv"),
    );
    let out = run(&[
        "eval",
        "--model",
        s(&model),
        "--data",
        s(&data),
        "--report",
        s(&report),
        "--curves",
        s(&curves),
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let json: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    assert_finite(&json, "report");
    assert_eq!(json["n_samples"], 40);
    let lines: Vec<String> = fs::read_to_string(&curves)
        .unwrap()
        .lines()
        .map(String::from)
        .collect();
    assert_eq!(lines[0], "stage,mean_landmark_error,yaw_mae,recall_at_p80");
    assert_eq!(lines.len(), 1 + 5);

    let pred = tmp.path().join("pred.csv");
    let out = run(&[
        "predict",
        "--model",
        s(&model),
        "--data",
        s(&data),
        "--out",
        s(&pred),
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let text = fs::read_to_string(&pred).unwrap();
    assert_eq!(text.lines().count(), 41);
    assert!(text.starts_with("id,u0,v0,c0,"));
}

#[test]
fn training_is_byte_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let data = gen_dataset(tmp.path());
    let (a, b) = (tmp.path().join("a.cjm"), tmp.path().join("b.cjm"));
    assert!(train(&data, &a).status.success());
    assert!(train(&data, &b).status.success());
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
}

#[test]
fn usage_errors_exit_with_1() {
    let out = run(&["train", "--data", "x", "--out", "y", "--stages", "0"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(!out.stderr.is_empty());
    assert_eq!(run(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(
        run(&["train", "--data", "x", "--out", "y", "--energy", "1.5"])
            .status
            .code(),
        Some(1)
    );
    assert_eq!(
        run(&["train", "--data", "x", "--out", "y", "--descriptor", "sift"])
            .status
            .code(),
        Some(1)
    );
    assert_eq!(run(&[]).status.code(), Some(1));
}

#[test]
fn help_exits_with_0() {
    let out = run(&["--help"]);
    assert_eq!(out.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&out.stdout).contains("train"));
}

#[test]
fn data_and_model_errors_exit_with_2() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("nope");
    let out = run(&[
        "train",
        "--data",
        s(&missing),
        "--out",
        s(&tmp.path().join("m.cjm")),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));

    let bad_model = tmp.path().join("bad.cjm");
    fs::write(&bad_model, "{\"version\": \"facecascade-model/1\", \"arr").unwrap();
    let out = run(&[
        "predict",
        "--model",
        s(&bad_model),
        "--data",
        s(&missing),
        "--out",
        s(&tmp.path().join("p.csv")),
    ]);
    assert_eq!(out.status.code(), Some(2));

    fs::write(&bad_model, "{\"version\": \"facecascade-model/0\"}").unwrap();
    let out = run(&[
        "eval",
        "--model",
        s(&bad_model),
        "--data",
        s(&missing),
        "--report",
        s(&tmp.path().join("r.json")),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("unsupported model version"));

    let cfg = tmp.path().join("bad.toml");
    fs::write(&cfg, "seed = \"seven\"\n").unwrap();
    let out = run(&[
        "gen",
        "--config",
        s(&cfg),
        "--out",
        s(&tmp.path().join("d")),
    ]);
    assert_eq!(out.status.code(), Some(2));
}
