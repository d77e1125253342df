use std::collections::BTreeSet;

use born_core::config::{Ablation, TrainConfig};
use born_core::data::DatasetSplits;
use born_core::diagnostics::{tiny_config, tiny_splits};
use born_core::networks::BinModel;
use born_core::trainer::{pretrain_tan, RunDir, StepLog, Trainer};

fn setup() -> (TrainConfig, DatasetSplits, BinModel) {
    let cfg = tiny_config();
    let splits = tiny_splits(120, 3).unwrap();
    let (model, _) = pretrain_tan(&cfg, &splits, None).unwrap();
    (cfg, splits, model)
}

fn clone_model(m: &BinModel, dir: &std::path::Path) -> BinModel {
    let p = dir.join("pretrained");
    born_core::checkpoint::save(
        &p,
        m,
        born_core::checkpoint::SaveRequest {
            stage: born_core::checkpoint::Stage::Classifier,
            step: 0,
            epoch: 0,
            optimizers: vec![],
            rng: None,
            meta: serde_json::Value::Null,
        },
    )
    .unwrap();
    born_core::checkpoint::load_model(&p).unwrap().0
}

fn log_lines(run: &RunDir) -> Vec<String> {
    std::fs::read_to_string(run.train_log())
        .unwrap()
        .lines()
        .map(String::from)
        .collect()
}

#[test]
fn fixed_seed_reproduces_first_100_log_lines() {
    let (mut cfg, splits, model) = setup();
    cfg.epochs = 100;
    cfg.max_steps_per_epoch = Some(5);
    let dir = tempfile::tempdir().unwrap();
    let mut logs = Vec::new();
    for r in 0..2 {
        let m = clone_model(&model, &dir.path().join(format!("m{r}")));
        let mut t = Trainer::new(cfg.clone(), m, &splits.train).unwrap();
        let root = dir.path().join(format!("run{r}"));
        t.attach_run_dir(&root).unwrap();
        for _ in 0..100 {
            t.step().unwrap();
        }
        t.checkpoint().unwrap();
        logs.push(log_lines(&RunDir::new(root)));
    }
    assert_eq!(logs[0].len(), 100);
    assert_eq!(logs[0], logs[1]);
    let last: StepLog = serde_json::from_str(&logs[0][99]).unwrap();
    assert_eq!((last.step, last.epoch), (100, 19));
}

#[test]
fn resume_reproduces_next_step_exactly() {
    let (mut cfg, splits, model) = setup();
    cfg.epochs = 10;
    cfg.max_steps_per_epoch = Some(4);
    let dir = tempfile::tempdir().unwrap();
    let mut t = Trainer::new(cfg.clone(), model, &splits.train).unwrap();
    t.attach_run_dir(dir.path().join("run")).unwrap();
    // Stop mid-epoch so the in-epoch position is exercised too.
    for _ in 0..6 {
        t.step().unwrap();
    }
    let ckpt = t.checkpoint().unwrap().unwrap();
    let expected: Vec<StepLog> = (0..3).map(|_| t.step().unwrap()).collect();

    let mut r = Trainer::resume(cfg, &ckpt, &splits.train).unwrap();
    r.attach_run_dir(dir.path().join("run")).unwrap();
    assert_eq!((r.state.step, r.state.epoch, r.state.epoch_step), (6, 1, 2));
    let got: Vec<StepLog> = (0..3).map(|_| r.step().unwrap()).collect();
    assert_eq!(got, expected);
    // The log was truncated to the checkpoint and continued.
    let lines = log_lines(&RunDir::new(dir.path().join("run")));
    assert_eq!(lines.len(), 9);
}

#[test]
fn frozen_encoder_and_classifier_do_not_move() {
    let (cfg, splits, model) = setup();
    let before = model.tan.snapshot();
    let mut t = Trainer::new(cfg, model, &splits.train).unwrap();
    for _ in 0..5 {
        t.step().unwrap();
    }
    assert_eq!(t.state.model.tan.distance_sq(&before), 0.0);
}

#[test]
fn dropped_map_term_contributes_no_gradient() {
    // Training with the map term removed and a large map weight must match
    // training with the map weights at zero, parameter for parameter.
    let (cfg, splits, model) = setup();
    let dir = tempfile::tempdir().unwrap();
    let mut a = cfg.clone();
    a.ablation = BTreeSet::from([Ablation::DropMap]);
    a.weights.l1 = 50.0;
    a.weights.l2 = 50.0;
    let mut b = cfg.clone();
    b.weights.l1 = 0.0;
    b.weights.l2 = 0.0;
    let mut ta = Trainer::new(a, clone_model(&model, &dir.path().join("a")), &splits.train).unwrap();
    let mut tb = Trainer::new(b, clone_model(&model, &dir.path().join("b")), &splits.train).unwrap();
    for _ in 0..3 {
        let ra = ta.step().unwrap();
        let rb = tb.step().unwrap();
        assert_eq!(ra.losses.map, 0.0);
        assert_eq!(ra.losses.total_g, rb.losses.total_g);
    }
    assert_eq!(ta.state.model.gen.distance_sq(&tb.state.model.gen), 0.0);
    assert_eq!(ta.state.model.disc.distance_sq(&tb.state.model.disc), 0.0);
}

#[test]
fn training_moves_generator_and_logs_every_step() {
    let (mut cfg, splits, model) = setup();
    cfg.epochs = 2;
    cfg.max_steps_per_epoch = Some(3);
    let before = model.gen.snapshot();
    let dir = tempfile::tempdir().unwrap();
    let mut t = Trainer::new(cfg, model, &splits.train).unwrap();
    t.attach_run_dir(dir.path()).unwrap();
    let mut seen = 0;
    t.run(|_| seen += 1).unwrap();
    assert_eq!(seen, 6);
    assert!(t.state.model.gen.distance_sq(&before) > 0.0);
    let run = RunDir::new(dir.path());
    assert_eq!(log_lines(&run).len(), 6);
    let latest = run.latest_checkpoint().unwrap();
    assert!(latest.ends_with("step-6"), "{}", latest.display());
}
