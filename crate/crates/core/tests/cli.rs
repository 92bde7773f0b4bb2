//! End-to-end runs of the `hyperds` binary on a tiny scenario.

mod common;

use std::path::Path;
use std::process::{Command, Output};

use hyperds::config::RunConfig;
use hyperds::model::DecoderVariant;

fn hyperds(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hyperds"))
        .args(args)
        .env_remove("HYPERDS_DATA_ROOT")
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = hyperds(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn fails(args: &[&str]) -> String {
    let out = hyperds(args);
    assert!(!out.status.success(), "{args:?} unexpectedly succeeded");
    String::from_utf8(out.stderr).unwrap()
}

fn tiny_config(dir: &Path) -> String {
    let cfg = RunConfig {
        scenario: common::tiny_scenario(3),
        model: common::tiny_model(DecoderVariant::MultiBlock),
        train: common::tiny_train(3),
        ..Default::default()
    };
    let path = dir.join("tiny.toml");
    std::fs::write(&path, cfg.to_toml().unwrap()).unwrap();
    path.to_str().unwrap().to_string()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn full_pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let cfg = tiny_config(root);
    let data = root.join("data");
    let out = ok(&["gen-data", "--config", &cfg, "--out", s(&data)]);
    assert!(out.contains("LR 4x4, HR 8x8"), "{out}");
    assert!(data.join("config.toml").exists());

    // a second generation into the same directory needs --force
    let err = fails(&["gen-data", "--config", &cfg, "--out", s(&data)]);
    assert!(err.starts_with("error:"), "{err}");
    ok(&["gen-data", "--config", &cfg, "--out", s(&data), "--force"]);

    let run = root.join("run");
    let out = ok(&["train", "--config", &cfg, "--data", s(&data), "--out", s(&run)]);
    assert!(out.contains("best epoch"), "{out}");
    let curves = std::fs::read_to_string(run.join("curves.csv")).unwrap();
    assert_eq!(curves.lines().count(), 3);
    let echoed = RunConfig::load(&run.join("config.toml")).unwrap();
    assert_eq!(echoed, RunConfig::load(Path::new(&cfg)).unwrap());

    let ev = root.join("eval_hyperds");
    let ck = run.join("checkpoint");
    ok(&["eval", "--config", &cfg, "--data", s(&data), "--checkpoint", s(&ck), "--out", s(&ev)]);
    let metrics = std::fs::read_to_string(ev.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 5);
    assert!(metrics.contains("hyperds,wind_speed"), "{metrics}");

    let mut dirs = vec![ev.clone()];
    for b in ["interp-lr", "interp-hr"] {
        let d = root.join(b);
        ok(&["eval", "--config", &cfg, "--data", s(&data), "--baseline", b, "--out", s(&d)]);
        dirs.push(d);
    }
    let cmp = root.join("compare");
    let mut args = vec!["compare", "--out", s(&cmp)];
    args.extend(dirs.iter().map(|d| s(d)));
    let ranking = ok(&args);
    assert!(ranking.contains("wind_speed"), "{ranking}");
    let rows = std::fs::read_to_string(cmp.join("comparison.csv")).unwrap();
    assert_eq!(rows.lines().count(), 1 + 3 * 4);

    let plots = root.join("plots");
    let out = ok(&["plot", "--report", s(&ev.join("report.json")), "--out", s(&plots)]);
    assert_eq!(out.lines().count(), 4);
    assert!(plots.join("hyperds_wind_speed.png").exists());
    assert!(plots.join("config.toml").exists());
    fails(&["plot", "--report", s(&ev.join("report.json")), "--out", s(&plots)]);

    // a checkpoint from this domain does not fit another one
    let mut other = RunConfig::load(Path::new(&cfg)).unwrap();
    other.scenario.domain.lon_max = 106.0;
    let other_cfg = root.join("other.toml");
    std::fs::write(&other_cfg, other.to_toml().unwrap()).unwrap();
    let other_data = root.join("other_data");
    ok(&["gen-data", "--config", s(&other_cfg), "--out", s(&other_data)]);
    let err = fails(&[
        "eval",
        "--data",
        s(&other_data),
        "--checkpoint",
        s(&ck),
        "--out",
        s(&root.join("mismatch")),
    ]);
    assert!(err.contains("mismatch"), "{err}");
}

#[test]
fn unknown_config_keys_are_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("bad.toml");
    std::fs::write(&cfg, "[train]\nlearning_rat = 0.1\n").unwrap();
    let err = fails(&["gen-data", "--config", s(&cfg), "--out", s(&tmp.path().join("d"))]);
    assert!(err.contains("learning_rat"), "{err}");
}

#[test]
fn missing_output_directory_is_reported() {
    let err = fails(&["gen-data"]);
    assert!(err.contains("--out"), "{err}");
}
