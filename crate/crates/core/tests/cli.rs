use std::fs;
use std::path::{Path, PathBuf};

use clap::Parser;
use geoeff::cli::{self, Cli, EXIT_DATA, EXIT_OK, EXIT_USAGE, INCOMPLETE_MARKER};

const CONFIG: &str = r#"
seed = 4

[paths]
rc_list = "{root}/rc.tsv"
lasco_catalog = "{root}/lasco.txt"
catalog = "{root}/catalog.jsonl"
cache = "{root}/cache"
dataset = "{root}/dataset"
output = "{root}/runs"

[backbone]
kind = "stub"
seed = 1

[model]
stub_channels = 4

[model.head]
conv_filters = [4, 4, 4]
dense_units = 8

[train]
epochs = 2

[synth]
n_events = 10
"#;

fn setup() -> (tempfile::TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.toml");
    fs::write(&path, CONFIG.replace("{root}", &dir.path().display().to_string())).unwrap();
    (dir, path)
}

fn args(config: &Path, rest: &[&str]) -> Vec<String> {
    let mut v = vec!["geoeff".to_string(), "--config".into(), config.display().to_string()];
    v.extend(rest.iter().map(|s| s.to_string()));
    v
}

fn run(config: &Path, rest: &[&str]) -> PathBuf {
    cli::run(&Cli::parse_from(args(config, rest))).unwrap()
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_slice(&fs::read(path).unwrap()).unwrap()
}

#[test]
fn cv_writes_five_folds_and_an_average() {
    let (_dir, config) = setup();
    run(&config, &["build"]);
    let out = run(&config, &["cv"]);
    let folds: Vec<_> = (0..5).map(|k| json(&out.join(format!("fold_{k}.json")))).collect();
    assert!(!out.join("fold_5.json").exists());
    let avg = json(&out.join("average.json"));
    let mean = folds.iter().map(|f| f["mcc"].as_f64().unwrap()).sum::<f64>() / 5.0;
    assert!((avg["mcc"].as_f64().unwrap() - mean).abs() < 1e-12);
    assert_eq!(avg["folds"], 5);
    assert!(folds.iter().all(|f| f["seed"] == 4));
    assert!(!out.join(INCOMPLETE_MARKER).exists());
    assert_eq!(json(&out.join("run.json"))["status"], "ok");
}

#[test]
fn train_predict_and_eval() {
    let (dir, config) = setup();
    run(&config, &["build"]);
    let a = run(&config, &["train"]);
    let b = run(&config, &["train"]);
    for f in ["test_report.json", "split.json", "model/history.csv"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f} differs between reruns");
    }

    // the snapshot alone reproduces the resolved configuration
    let snap = fs::read_to_string(a.join("config.toml")).unwrap();
    let resolved = cli::load_config(&Cli::parse_from(args(&config, &["train"]))).unwrap();
    assert_eq!(cli::RunConfig::from_toml(&snap).unwrap(), resolved);

    let weights = a.join("model/final");
    let event = fs::read_dir(dir.path().join("dataset")).unwrap().map(|e| e.unwrap().path()).find(|p| p.is_dir()).unwrap();
    let w = weights.display().to_string();
    let e = event.display().to_string();
    let det = json(&run(&config, &["predict", "--weights", &w, "--event-dir", &e]).join("prediction.json"));
    assert!(det["prediction"]["decision"].is_string());
    let prob = json(&run(&config, &["--probabilistic", "predict", "--weights", &w, "--event-dir", &e]).join("prediction.json"));
    assert!(prob["prediction"].get("decision").is_none());
    assert_eq!(prob["prediction"]["event_probability"], det["prediction"]["event_probability"]);

    let report = json(&run(&config, &["eval", "--weights", &w]).join("report.json"));
    assert_eq!(report["n_events"], json(&a.join("test_report.json"))["n_events"]);
}

#[test]
fn eval_on_stored_predictions() {
    let (dir, config) = setup();
    let mut lines = String::new();
    let mut push = |n: usize, truth: &str, p: f64, tag: &str| {
        for i in 0..n {
            lines.push_str(&format!("{{\"event_id\":\"{tag}{i}\",\"truth\":\"{truth}\",\"probability\":{p}}}\n"));
        }
    };
    push(21, "geoeffective", 0.9, "tp");
    push(2, "non_geoeffective", 0.7, "fp");
    push(5, "non_geoeffective", 0.2, "tn");
    let path = dir.path().join("preds.jsonl");
    fs::write(&path, lines).unwrap();
    let out = run(&config, &["eval", "--predictions", &path.display().to_string()]);
    let r = json(&out.join("report.json"));
    assert!((r["mcc"].as_f64().unwrap() - 0.807).abs() <= 0.001);
    assert!((r["tss"].as_f64().unwrap() - 0.714).abs() <= 0.001);
    assert_eq!(r["matrix"]["tp"], 21);
}

#[test]
fn ingest_then_offline_fetch_fails_as_data_error() {
    let (dir, config) = setup();
    fs::write(
        dir.path().join("rc.tsv"),
        "Disturbance Y/M/D (UT)\tICME start\tLASCO CME Y/M/D (UT)\tDst (nT)\n\
         2002/09/19 1200\t2002/09/19 1500\t2002/09/17 0806\t-84\n",
    )
    .unwrap();
    fs::write(
        dir.path().join("lasco.txt"),
        "  Date      Time     Central  Width  Linear\n2002/09/17  08:06:05  Halo     360    1011\n",
    )
    .unwrap();
    let out = run(&config, &["ingest"]);
    assert_eq!(fs::read_to_string(dir.path().join("catalog.jsonl")).unwrap(), fs::read_to_string(out.join("catalog.jsonl")).unwrap());
    assert!(fs::read_to_string(out.join("catalog.jsonl")).unwrap().contains("CME_20020917T080605"));

    assert_eq!(cli::main_with_args(args(&config, &["--offline", "fetch"])), EXIT_DATA);
    let runs: Vec<PathBuf> = fs::read_dir(dir.path().join("runs")).unwrap().map(|e| e.unwrap().path()).collect();
    let fetch = runs.iter().find(|p| p.to_string_lossy().ends_with("-fetch")).unwrap();
    assert!(fetch.join(INCOMPLETE_MARKER).exists());
    assert_eq!(json(&fetch.join("run.json"))["status"], "failed");
    assert!(fetch.join("fetch.json").exists());
}

#[test]
fn exit_codes() {
    let (dir, config) = setup();
    assert_eq!(cli::main_with_args(args(&config, &["--threshold", "2", "cv"])), EXIT_USAGE);
    assert_eq!(cli::main_with_args(["geoeff", "--config", "/nonexistent.toml", "cv"]), EXIT_USAGE);
    let missing = dir.path().join("nope").display().to_string();
    assert_eq!(cli::main_with_args(args(&config, &["eval", "--weights", &missing])), EXIT_DATA);
    fs::write(dir.path().join("bad.toml"), "[train]\nepochs = 0\n").unwrap();
    assert_eq!(cli::main_with_args(["geoeff", "--config", &dir.path().join("bad.toml").display().to_string(), "train"]), EXIT_USAGE);
    assert_eq!(cli::main_with_args(args(&config, &["build"])), EXIT_OK);
}
