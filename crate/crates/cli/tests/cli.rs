use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use sha2::{Digest, Sha256};

fn adapart(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_adapart")).args(args).output().expect("binary runs")
}

fn arg(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn assert_ok(o: &Output) {
    assert!(o.status.success(), "exit {:?}: {}", o.status.code(), stderr(o));
}

/// Relative path -> sha256 of every file under `dir`.
fn tree_digest(dir: &Path) -> BTreeMap<PathBuf, String> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let digest = hex::encode(Sha256::digest(fs::read(&p).unwrap()));
                out.insert(p.strip_prefix(dir).unwrap().to_path_buf(), digest);
            }
        }
    }
    out
}

fn schema(stem: &str) -> serde_json::Value {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../schemas").join(format!("{stem}.schema.json"));
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn assert_valid(stem: &str, doc: &serde_json::Value) {
    let validator = jsonschema::validator_for(&schema(stem)).unwrap();
    let errors: Vec<String> = validator.iter_errors(doc).map(|e| e.to_string()).collect();
    assert!(errors.is_empty(), "{stem}: {errors:?}");
}

fn read_json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn single_error_line(o: &Output) -> String {
    let err = stderr(o);
    let lines: Vec<&str> = err.lines().collect();
    assert_eq!(lines.len(), 1, "{err}");
    assert!(lines[0].starts_with("error["), "{err}");
    lines[0].to_string()
}

#[test]
fn gen_data_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for d in [&a, &b] {
        assert_ok(&adapart(&["gen-data", "--seed", "7", "--count", "10", "--out", arg(d)]));
    }
    let da = tree_digest(&a);
    assert_eq!(da.len(), 12);
    assert_eq!(da, tree_digest(&b));
}

#[test]
fn missing_dataset_names_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("no_such_dataset");
    let o = adapart(&["train", "--data", arg(&missing), "--out", arg(&dir.path().join("run"))]);
    assert_eq!(o.status.code(), Some(1));
    assert!(single_error_line(&o).contains("no_such_dataset"));
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(adapart(&["bogus"]).status.code(), Some(2));
    assert_eq!(adapart(&["gen-data", "--count", "3", "--out", "x", "--colour", "red"]).status.code(), Some(2));
    assert_eq!(adapart(&["gen-data", "--count", "3", "--out", "x", "--mode", "cats"]).status.code(), Some(2));
}

#[test]
fn grad_check_prints_table() {
    let o = adapart(&["grad-check"]);
    assert_ok(&o);
    let table = String::from_utf8(o.stdout).unwrap();
    for name in ["fc", "conv2d", "maxpool2d", "sampler", "theta", "end_to_end"] {
        assert!(table.lines().any(|l| l.starts_with(name) && l.contains("pass")), "{name} missing:\n{table}");
    }
    let o = adapart(&["grad-check", "--op", "nope"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(single_error_line(&o).contains("conv2d"));
}

#[test]
fn bad_config_file_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d");
    assert_ok(&adapart(&["gen-data", "--count", "4", "--out", arg(&data)]));
    let cfg = dir.path().join("run.toml");
    fs::write(&cfg, "[optimizer]\nbase_lr = -1.0\n").unwrap();
    let o = adapart(&["train", "--config", arg(&cfg), "--data", arg(&data), "--out", arg(&dir.path().join("r"))]);
    assert_eq!(o.status.code(), Some(1));
    assert!(single_error_line(&o).starts_with("error[config]"));
}

#[test]
fn train_eval_predict_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    assert_ok(&adapart(&["gen-data", "--seed", "3", "--count", "24", "--out", arg(&data)]));
    assert_valid("dataset_manifest", &read_json(&data.join("manifest.json")));
    for line in fs::read_to_string(data.join("samples.jsonl")).unwrap().lines() {
        assert_valid("sample_record", &serde_json::from_str(line).unwrap());
    }

    let run = dir.path().join("run");
    let common = ["--iterations", "12", "--batch-size", "8", "--checkpoint-every", "6", "--lr", "0.01"];
    let mut args = vec!["train", "--variant", "separate", "--seed", "5", "--data", arg(&data), "--out", arg(&run)];
    args.extend(common);
    assert_ok(&adapart(&args));
    for f in ["config.toml", "model.aprt", "model.aprt.json", "log.csv", "checkpoints/iter_000006.aprt"] {
        assert!(run.join(f).exists(), "{f}");
    }
    assert_valid("model_sidecar", &read_json(&run.join("model.aprt.json")));

    // the effective config alone reproduces the run
    let rerun = dir.path().join("rerun");
    let o = adapart(&["train", "--config", arg(&run.join("config.toml")), "--out", arg(&rerun)]);
    assert_ok(&o);
    let (a, mut b) = (tree_digest(&run), tree_digest(&rerun));
    let cfg = PathBuf::from("config.toml");
    assert_ne!(a[&cfg], b[&cfg], "out directory differs");
    b.insert(cfg.clone(), a[&cfg].clone());
    assert_eq!(a, b);

    let eval = dir.path().join("eval");
    assert_ok(&adapart(&["eval", "--checkpoint", arg(&run.join("model.aprt")), "--data", arg(&data), "--out", arg(&eval)]));
    let metrics = read_json(&eval.join("metrics.json"));
    assert_valid("metrics_report", &metrics);
    assert!(eval.join("pdj.svg").exists());

    let pred = dir.path().join("pred");
    let image = data.join("img").join("000000.png");
    assert_ok(&adapart(&["predict", "--checkpoint", arg(&run.join("model.aprt")), "--image", arg(&image), "--out", arg(&pred)]));
    let p = read_json(&pred.join("prediction.json"));
    assert_valid("prediction", &p);
    assert_eq!(p["parts"].as_array().unwrap().len(), 3);
    assert_eq!(p["keypoints"].as_array().unwrap().len(), 14);
    let png = image::open(pred.join("annotated.png")).unwrap();
    assert_eq!((png.width(), png.height()), (256, 256));
}

#[test]
fn oracle_prediction_needs_keypoints() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    assert_ok(&adapart(&["gen-data", "--count", "8", "--out", arg(&data)]));
    let run = dir.path().join("run");
    assert_ok(&adapart(&["train", "--variant", "oracle", "--data", arg(&data), "--out", arg(&run), "--iterations", "2", "--batch-size", "4"]));
    let image = data.join("img").join("000001.png");
    let model = run.join("model.aprt");
    let o = adapart(&["predict", "--checkpoint", arg(&model), "--image", arg(&image), "--out", arg(&dir.path().join("p"))]);
    assert_eq!(o.status.code(), Some(1));
    assert!(single_error_line(&o).contains("ground-truth keypoints"));

    let kp: Vec<[f64; 2]> = (0..14).map(|i| [0.3 + 0.02 * i as f64, 0.2 + 0.04 * i as f64]).collect();
    let kp_path = dir.path().join("kp.json");
    fs::write(&kp_path, serde_json::to_string(&kp).unwrap()).unwrap();
    let out = dir.path().join("p2");
    assert_ok(&adapart(&["predict", "--checkpoint", arg(&model), "--image", arg(&image), "--out", arg(&out), "--keypoints", arg(&kp_path)]));
    let p = read_json(&out.join("prediction.json"));
    assert!(p["keypoints"].is_null());
    assert!(p["parts"][0]["bbox"].is_object());
}

#[test]
fn small_suite_report_is_complete() {
    let dir = tempfile::tempdir().unwrap();
    let suite = dir.path().join("suite.toml");
    fs::write(
        &suite,
        r#"
        train_count = 16
        test_count = 8
        seeds = [0, 1, 2]
        ablations = false
        extractor_channels = [4]
        eval_batch = 8
        [optimizer]
        base_lr = 0.01
        batch_size = 8
        iterations = 3
        decay_iteration = 2
        "#,
    )
    .unwrap();
    let out = dir.path().join("exp");
    assert_ok(&adapart(&["experiment", "--suite", arg(&suite), "--out", arg(&out), "--jobs", "2"]));
    let text = fs::read_to_string(out.join("report.json")).unwrap();
    let doc: serde_json::Value = serde_json::from_str(&text).unwrap();
    assert_valid("experiment_report", &doc);
    assert_eq!(doc["runs"].as_array().unwrap().len(), 15);
    assert_eq!(doc["summary"].as_array().unwrap().len(), 5);
    let report = adapart::experiment::ExperimentReport::load(&out.join("report.json")).unwrap();
    assert_eq!(serde_json::to_string_pretty(&report).unwrap(), text);
    for f in ["summary.csv", "pdj.svg", "loss.svg", "suite.toml"] {
        assert!(out.join(f).exists(), "{f}");
    }
    let csv = fs::read_to_string(out.join("summary.csv")).unwrap();
    assert_eq!(csv.lines().count(), 6);
}
