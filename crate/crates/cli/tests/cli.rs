use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn small_config(root: &Path, extra: &str) -> String {
    format!(
        r#"seed = 5

[paths]
data_dir = "{0}/data"
model_dir = "{0}/models"
report_dir = "{0}/reports"

[scene]
sites = 2
days = 5

[dataset]
folds = 5

[cnnlstm]
conv_blocks = 1
convs_per_block = 1
filters = 4
dense_dims = [8]
lstm_hidden = 4

[train]
epochs = 2
{1}
"#,
        root.display(),
        extra
    )
}

fn helios(cfg: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_helios"))
        .arg("--config")
        .arg(cfg)
        .args(args)
        .env("HELIOS_THREADS", "1")
        .output()
        .unwrap()
}

fn ok(out: Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn setup(root: &Path, extra: &str) -> std::path::PathBuf {
    let cfg = root.join("run.toml");
    fs::write(&cfg, small_config(root, extra)).unwrap();
    cfg
}

fn pipeline(root: &Path) -> std::path::PathBuf {
    let cfg = setup(root, "");
    ok(helios(&cfg, &["synth-gen"]));
    ok(helios(&cfg, &["dataset-build"]));
    ok(helios(&cfg, &["train-channel", "--model", "forest"]));
    ok(helios(&cfg, &["train-channel", "--model", "cnnlstm"]));
    ok(helios(&cfg, &["train-nowcast"]));
    ok(helios(&cfg, &["evaluate", "--four-way"]));
    cfg
}

#[test]
fn full_pipeline_writes_reports_and_manifests() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let cfg = pipeline(root);
    let data = root.join("data");
    assert!(data.join("site00/meta.json").is_file() && data.join("site01/frames.bin").is_file());
    assert!(data.join("scene.json").is_file());
    let models = root.join("models/fold0");
    for f in ["forest.hnmd", "cnnlstm.hnmd", "cnnlstm.curve.csv", "power/site00.hnmd", "run.json"] {
        assert!(models.join(f).is_file(), "{f}");
    }
    let curve = fs::read_to_string(models.join("cnnlstm.curve.csv")).unwrap();
    assert!(curve.starts_with("epoch,train_loss,validation_loss\n"));
    assert_eq!(curve.lines().count(), 3);
    let reports = root.join("reports/fold0");
    let csv = fs::read_to_string(reports.join("four_way.csv")).unwrap();
    assert!(csv.starts_with("scope,model,period,delta,n,kept_frac,mae,mape,skill\n"));
    for m in ["persistence", "svr_current", "svr_forecast", "svr_truth"] {
        assert!(csv.contains(&format!("ALL,{m},full,")), "{m}");
    }
    let svg = fs::read_to_string(reports.join("channel_mae.svg")).unwrap();
    assert_eq!(svg.matches("<polyline").count(), 3);
    assert!(svg.contains("MAE x 100"));
    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(reports.join("run.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "evaluate");
    assert_eq!(manifest["seed"], 5);
    assert_eq!(manifest["threads"], 1);
    assert_eq!(manifest["config_hash"].as_str().unwrap().len(), 64);
    assert_eq!(manifest["versions"]["model_format"], 1);
    assert!(manifest["wall_time_seconds"].as_f64().unwrap() >= 0.0);

    fs::remove_file(reports.join("channel_mae.svg")).unwrap();
    let before = fs::read(reports.join("four_way_mape.svg")).unwrap();
    ok(helios(&cfg, &["report"]));
    assert!(reports.join("channel_mae.svg").is_file());
    assert_eq!(fs::read(reports.join("four_way_mape.svg")).unwrap(), before);
}

#[test]
fn identical_runs_are_byte_identical() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    pipeline(a.path());
    pipeline(b.path());
    for f in ["channel_report.csv", "four_way.csv", "channel_mae.svg", "four_way_mae.svg", "four_way_mape.svg"] {
        let x = fs::read(a.path().join("reports/fold0").join(f)).unwrap();
        let y = fs::read(b.path().join("reports/fold0").join(f)).unwrap();
        assert_eq!(x, y, "{f}");
    }
    for f in ["cnnlstm.hnmd", "forest.hnmd"] {
        assert_eq!(
            fs::read(a.path().join("models/fold0").join(f)).unwrap(),
            fs::read(b.path().join("models/fold0").join(f)).unwrap()
        );
    }
}

#[test]
fn config_errors_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = setup(dir.path(), "unknown_knob = 3");
    let out = helios(&cfg, &["synth-gen"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown_knob"));

    let cfg = setup(dir.path(), "");
    assert_eq!(helios(&cfg, &["bogus-command"]).status.code(), Some(1));
    assert_eq!(helios(&cfg, &["train-channel"]).status.code(), Some(1));
    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "[dataset]\nfolds = 1\n").unwrap();
    assert_eq!(helios(&bad, &["synth-gen"]).status.code(), Some(1));
    let out = Command::new(env!("CARGO_BIN_EXE_helios"))
        .args(["--config"])
        .arg(&cfg)
        .arg("synth-gen")
        .env("HELIOS_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(
        Command::new(env!("CARGO_BIN_EXE_helios")).arg("--help").output().unwrap().status.code(),
        Some(0)
    );
}

#[test]
fn data_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = setup(dir.path(), "");
    // no data yet
    assert_eq!(helios(&cfg, &["dataset-build"]).status.code(), Some(2));
    ok(helios(&cfg, &["synth-gen"]));
    ok(helios(&cfg, &["dataset-build"]));
    ok(helios(&cfg, &["train-channel", "--model", "tree"]));
    ok(helios(&cfg, &["evaluate"]));
    let model = dir.path().join("models/fold0/tree.hnmd");
    let mut bytes = fs::read(&model).unwrap();
    // format version byte
    bytes[4] = 2;
    fs::write(&model, &bytes).unwrap();
    let out = helios(&cfg, &["evaluate"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("format version"));
    fs::remove_file(&model).unwrap();
    let frames = dir.path().join("data/site00/frames.bin");
    let f = fs::read(&frames).unwrap();
    fs::write(&frames, &f[..f.len() - 2]).unwrap();
    assert_eq!(helios(&cfg, &["dataset-build"]).status.code(), Some(2));
}

#[test]
fn divergent_training_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = setup(dir.path(), "learning_rate = 1e300\nclip_norm = 1e300");
    ok(helios(&cfg, &["synth-gen"]));
    ok(helios(&cfg, &["dataset-build"]));
    let out = helios(&cfg, &["train-channel", "--model", "cnnlstm"]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("non-finite"));
}
