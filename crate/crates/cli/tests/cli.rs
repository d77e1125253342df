use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use born_cli::cli::{parse_target, Failure};
use born_core::config::TrainConfig;
use born_core::networks::BinModel;
use born_core::trainer::{save_classifier, TanReport, TrainingState};
use born_core::Error;

fn born(args: &[&str], runs: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_born"))
        .args(args)
        .env("BIN_RUNS_DIR", runs)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn tiny_config() -> TrainConfig {
    let mut cfg = TrainConfig::shapes3d("unused");
    cfg.dataset.procedural = true;
    cfg.dataset.subset = Some(80);
    cfg.name = "cli-test".into();
    cfg.tan.max_epochs = 1;
    cfg.tan.max_steps_per_epoch = Some(1);
    cfg.tan.batch_size = 8;
    cfg.tan.lr = 1e-9;
    cfg
}

fn write_config(dir: &Path, cfg: &TrainConfig) -> PathBuf {
    let p = dir.join("config.json");
    cfg.save(&p).unwrap();
    p
}

fn random_checkpoint(dir: &Path, cfg: &TrainConfig) -> PathBuf {
    let model = BinModel::new(cfg.architecture.resolve().unwrap(), cfg.flags, 5, tch::Kind::Float).unwrap();
    TrainingState::new(cfg, model).save(&dir.join("ckpt"), cfg).unwrap()
}

#[test]
fn help_lists_every_command_and_flag() {
    let dir = tempfile::tempdir().unwrap();
    let o = born(&["--help"], dir.path());
    assert!(o.status.success());
    let text = String::from_utf8_lossy(&o.stdout);
    for c in ["train-classifier", "train", "generate", "evaluate", "serve"] {
        assert!(text.contains(c), "missing {c}");
    }
    let o = born(&["generate", "--help"], dir.path());
    assert!(o.status.success());
    let text = String::from_utf8_lossy(&o.stdout);
    for flag in [
        "--checkpoint",
        "--input",
        "--target",
        "--interpolate",
        "--steps",
        "--out",
    ] {
        assert!(text.contains(flag), "missing {flag}");
    }
    let o = born(&["train", "--help"], dir.path());
    assert!(String::from_utf8_lossy(&o.stdout).contains("--ablate"));
}

#[test]
fn missing_config_exits_1_and_names_file() {
    let dir = tempfile::tempdir().unwrap();
    let o = born(&["train-classifier", "--config", "no/such/config.json"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("no/such/config.json"), "{}", stderr(&o));
}

#[test]
fn unknown_ablation_token_lists_valid_tokens() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &tiny_config());
    let o = born(
        &["train", "--config", cfg.to_str().unwrap(), "--ablate", "cls,bogus"],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(1));
    let err = stderr(&o);
    assert!(err.contains("bogus") && err.contains("y, cls, cyc, map"), "{err}");
}

#[test]
fn train_without_classifier_exits_1() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &tiny_config());
    let o = born(&["train", "--config", cfg.to_str().unwrap()], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("classifier"), "{}", stderr(&o));
}

#[test]
fn gate_failure_exits_2_with_best_accuracy() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &tiny_config());
    let o = born(&["train-classifier", "--config", cfg.to_str().unwrap()], dir.path());
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(stderr(&o).contains("best"), "{}", stderr(&o));
    assert!(dir.path().join("cli-test/tan_log.jsonl").exists());
}

#[test]
fn error_kinds_map_to_exit_codes() {
    assert_eq!(
        Failure::from(Error::Gate {
            best: 0.5,
            required: 0.99
        })
        .code,
        2
    );
    assert_eq!(Failure::from(Error::Diverged { step: 4, term: "cls" }).code, 3);
    assert_eq!(Failure::from(Error::Config("x".into())).code, 1);
}

#[test]
fn target_parsing() {
    assert_eq!(parse_target("2", 4).unwrap().probs(), &[0.0, 0.0, 1.0, 0.0]);
    assert_eq!(parse_target("0.5, 0.5,0,0", 4).unwrap().probs(), &[0.5, 0.5, 0.0, 0.0]);
    assert!(parse_target("4", 4).is_err());
    assert!(parse_target("0.3,0.3,0.3,0", 4).is_err());
    assert!(parse_target("0.5,0.5", 4).is_err());
    assert!(parse_target("a,b", 4).is_err());
}

#[test]
fn generate_writes_artifacts_and_interpolation_matches_generate() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config();
    let ckpt = random_checkpoint(dir.path(), &cfg);
    let splits = born_core::data::load_dataset(&cfg.dataset, cfg.seed).unwrap();
    let id = splits.test.source_id(0).to_string();
    let out = dir.path().join("out");
    let ck = ckpt.to_str().unwrap();
    let o = born(
        &[
            "generate",
            "--checkpoint",
            ck,
            "--input",
            &id,
            "--target",
            "1",
            "--out",
            out.to_str().unwrap(),
        ],
        dir.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let stem = format!("{id}-to-1");
    for ext in ["map.f32", "map.json", "map.png", "png", "logits.json"] {
        assert!(out.join(format!("{stem}.{ext}")).exists(), "missing {stem}.{ext}");
    }
    let logits: serde_json::Value =
        serde_json::from_slice(&std::fs::read(out.join(format!("{stem}.logits.json"))).unwrap()).unwrap();
    assert_eq!(logits["condition"], serde_json::json!([0.0, 1.0, 0.0, 0.0]));

    let o = born(
        &[
            "generate",
            "--checkpoint",
            ck,
            "--input",
            &id,
            "--target",
            "3",
            "--out",
            out.to_str().unwrap(),
        ],
        dir.path(),
    );
    assert!(o.status.success());
    let o = born(
        &[
            "generate",
            "--checkpoint",
            ck,
            "--input",
            &id,
            "--target",
            "1",
            "--interpolate",
            "3",
            "--steps",
            "2",
            "--out",
            out.to_str().unwrap(),
        ],
        dir.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let read = |s: &str| std::fs::read(out.join(format!("{s}.map.f32"))).unwrap();
    assert_eq!(read(&format!("{id}-interp-000")), read(&format!("{id}-to-1")));
    assert_eq!(read(&format!("{id}-interp-001")), read(&format!("{id}-to-3")));

    let o = born(
        &[
            "generate",
            "--checkpoint",
            ck,
            "--input",
            &id,
            "--target",
            "0.2,0.2,0.2,0.2",
            "--out",
            out.to_str().unwrap(),
        ],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("distribution"), "{}", stderr(&o));
}

#[test]
fn evaluate_classifier_only_checkpoint_skips_ncc() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config();
    let cfg_path = write_config(dir.path(), &cfg);
    let model = BinModel::new(cfg.architecture.resolve().unwrap(), cfg.flags, 5, tch::Kind::Float).unwrap();
    let report = TanReport {
        epochs: vec![],
        best_accuracy: 0.0,
        gate: cfg.tan.gate,
        gate_set: "val".into(),
        gate_size: 0,
    };
    let ckpt = save_classifier(&dir.path().join("classifier"), &model, &report, &cfg).unwrap();
    let out = dir.path().join("eval");
    let o = born(
        &[
            "evaluate",
            "--checkpoint",
            ckpt.to_str().unwrap(),
            "--config",
            cfg_path.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
            "--flip-pairs",
            "20",
        ],
        dir.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let v: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("report.json")).unwrap()).unwrap();
    let variant = &v["variants"][0];
    assert!(variant["flip_rate"].is_number());
    assert!(variant["ncc_plus"].is_null() && variant["fid"].is_null());
    assert_eq!(variant["ncc"], serde_json::json!({}));
    assert!(variant["notes"].to_string().contains("ncc"));
    assert!(out.join("report.csv").exists());
}

#[test]
fn shipped_configs_match_presets() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mnist = TrainConfig::load(&root.join("mnist.json")).unwrap();
    assert_eq!(mnist, TrainConfig::mnist("data/mnist"));
    let shapes = TrainConfig::load(&root.join("3dshapes.json")).unwrap();
    let mut want = TrainConfig::shapes3d("data/3dshapes");
    want.dataset.procedural = true;
    assert_eq!(shapes, want);
}
