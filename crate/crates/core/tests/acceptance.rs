//! Acceptance runner: prints one PASS/FAIL line per criterion.
//!
//! Trained models are cached under `$BIN_ACCEPTANCE_DIR` (default
//! `target/acceptance`) keyed by their full configuration, so a second run
//! re-evaluates without retraining. `BIN_ACCEPTANCE_NO_TRAIN=1` fails the
//! training-backed criteria instead of training; `BIN_ACCEPTANCE_STRICT=1`
//! makes any FAIL a non-zero exit.

mod common;

use std::cell::RefCell;
use std::collections::{BTreeSet, HashMap};
use std::error::Error as StdError;
use std::path::{Path, PathBuf};
use std::time::Instant;

use proptest::prelude::*;
use proptest::test_runner::{Config as PropConfig, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};
use tch::{Kind, Tensor};

use born_core::checkpoint;
use born_core::config::{Ablation, TrainConfig};
use born_core::data::shapes::Renderer;
use born_core::data::{default_data_root, load_dataset, DatasetSplits, Image, ImageShape};
use born_core::diagnostics::{
    calibrate, jitter, loss_gradcheck, model_gradcheck, tiny_batch, tiny_config, tiny_model, tiny_splits,
};
use born_core::engine;
use born_core::eval::{fid, fid_per_class, flip_rate, mean_ncc, model_ncc, ncc, random_target_pairs};
use born_core::losses::{self, LossWeights, TermMask, Terms};
use born_core::networks::{BinModel, TargetCondition};
use born_core::trainer::{accuracy, pretrain_tan, save_classifier, RunDir, StepLog, Trainer};

type R<T> = std::result::Result<T, Box<dyn StdError>>;

// Desk-scale training budgets (steps of map training per run).
const MNIST_BIN_BATCH: usize = 64;
const MNIST_BIN_STEPS: usize = 600;
const SHAPES_BIN_BATCH: usize = 32;
const SHAPES_BIN_STEPS: usize = 600;
const TAN_MAX_EPOCHS: usize = 100;
const CPU_BUDGET_S: f64 = 4.0 * 3600.0;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> R<Outcome> {
    Ok(Outcome {
        pass,
        detail: detail.into(),
    })
}

struct Ctx {
    root: PathBuf,
    data: PathBuf,
    train: bool,
    ncc: RefCell<HashMap<String, (Option<f64>, Option<f64>)>>,
}

impl Ctx {
    fn from_env() -> Self {
        let root = std::env::var_os("BIN_ACCEPTANCE_DIR")
            .map(PathBuf::from)
            .unwrap_or_else(|| Path::new(env!("CARGO_MANIFEST_DIR")).join("../../target/acceptance"));
        Self {
            root,
            data: default_data_root(),
            train: std::env::var("BIN_ACCEPTANCE_NO_TRAIN").map_or(true, |v| v != "1"),
            ncc: RefCell::new(HashMap::new()),
        }
    }
}

// ---------------------------------------------------------------------------
// Cached training runs

fn read_done(dir: &Path, cfg: &TrainConfig) -> Option<Value> {
    let v: Value = serde_json::from_slice(&std::fs::read(dir.join("done.json")).ok()?).ok()?;
    let stored: TrainConfig = serde_json::from_value(v.get("config")?.clone()).ok()?;
    (stored == *cfg).then_some(v)
}

fn write_done(dir: &Path, v: &Value) -> R<()> {
    std::fs::write(dir.join("done.json"), serde_json::to_vec_pretty(v)?)?;
    Ok(())
}

fn mnist_tan_config(ctx: &Ctx) -> TrainConfig {
    let mut cfg = TrainConfig::mnist(ctx.data.join("mnist"));
    cfg.name = "mnist".into();
    cfg.tan.max_epochs = TAN_MAX_EPOCHS;
    cfg
}

fn shapes_tan_config() -> TrainConfig {
    let mut cfg = TrainConfig::shapes3d("unused");
    cfg.name = "3dshapes".into();
    cfg.dataset.procedural = true;
    cfg.tan.max_epochs = TAN_MAX_EPOCHS;
    cfg
}

fn bin_config(tan: &TrainConfig, classifier: &Path, batch: usize, steps: usize, removed: &[Ablation]) -> TrainConfig {
    let mut cfg = tan.clone();
    cfg.batch_size = batch;
    cfg.epochs = 1;
    cfg.max_steps_per_epoch = Some(steps);
    cfg.classifier_checkpoint = Some(classifier.to_path_buf());
    cfg.ablation = removed.iter().copied().collect::<BTreeSet<_>>();
    cfg
}

/// Classifier run: trains to the gate once, then reuses the checkpoint.
fn classifier(ctx: &Ctx, name: &str, cfg: &TrainConfig, splits: &DatasetSplits) -> R<(BinModel, Value, PathBuf)> {
    let dir = ctx.root.join(name);
    let ckpt = dir.join("classifier");
    if let Some(done) = read_done(&dir, cfg) {
        return Ok((checkpoint::load_model(&ckpt)?.0, done, ckpt));
    }
    if !ctx.train {
        return Err(format!("no cached run in {} (training disabled)", dir.display()).into());
    }
    eprintln!("[acceptance] training classifier `{name}`");
    std::fs::create_dir_all(&dir)?;
    let t0 = Instant::now();
    let (model, report) = pretrain_tan(cfg, splits, Some(&dir))?;
    let elapsed = t0.elapsed().as_secs_f64();
    save_classifier(&ckpt, &model, &report, cfg)?;
    let done = json!({
        "config": cfg,
        "elapsed_s": elapsed,
        "test_accuracy": accuracy(&model, &splits.test)?,
        "report": report,
    });
    write_done(&dir, &done)?;
    Ok((model, done, ckpt))
}

/// Map-generator run from a classifier checkpoint; resumes an interrupted
/// run from its latest checkpoint.
fn bin_run(ctx: &Ctx, name: &str, cfg: &TrainConfig, splits: &DatasetSplits) -> R<BinModel> {
    let dir = ctx.root.join(name);
    let run = RunDir::new(&dir);
    if read_done(&dir, cfg).is_some() {
        let ckpt = run.latest_checkpoint().ok_or("cached run has no checkpoint")?;
        return Ok(checkpoint::load_model(&ckpt)?.0);
    }
    if !ctx.train {
        return Err(format!("no cached run in {} (training disabled)", dir.display()).into());
    }
    let same_config = TrainConfig::load(&run.config()).map(|c| c == *cfg).unwrap_or(false);
    let mut t = match run.latest_checkpoint().filter(|_| same_config) {
        Some(ckpt) => Trainer::resume(cfg.clone(), &ckpt, &splits.train)?,
        None => {
            if dir.exists() {
                std::fs::remove_dir_all(&dir)?;
            }
            let (model, _) = checkpoint::load_model(cfg.classifier_checkpoint.as_ref().ok_or("no classifier")?)?;
            Trainer::new(cfg.clone(), model, &splits.train)?
        }
    };
    t.cfg.checkpoint_every = 100;
    t.attach_run_dir(&dir)?;
    eprintln!("[acceptance] training `{name}` from step {}", t.state.step);
    let t0 = Instant::now();
    let total = t.steps_per_epoch() * cfg.epochs;
    t.run(|r: &StepLog| {
        if r.step % 50 == 0 {
            eprintln!(
                "[acceptance] {name} step {}/{total} cls {:.3} map {:.3} cyc {:.3} adv_g {:.3} ({:.0}s)",
                r.step,
                r.losses.cls,
                r.losses.map,
                r.losses.cyc,
                r.losses.adv_g,
                t0.elapsed().as_secs_f64()
            );
        }
    })?;
    // The cache key is the requested config; checkpoint cadence is not part of it.
    write_done(&dir, &json!({ "config": cfg, "elapsed_s": t0.elapsed().as_secs_f64() }))?;
    let ckpt = run.latest_checkpoint().ok_or("run wrote no checkpoint")?;
    Ok(checkpoint::load_model(&ckpt)?.0)
}

fn mnist_splits(ctx: &Ctx) -> R<DatasetSplits> {
    let cfg = mnist_tan_config(ctx);
    load_dataset(&cfg.dataset, cfg.seed).map_err(|e| format!("{e} (fetch with scripts/fetch_mnist.sh)").into())
}

fn mnist_bin(ctx: &Ctx, splits: &DatasetSplits, removed: &[Ablation], name: &str) -> R<BinModel> {
    let tan = mnist_tan_config(ctx);
    let (_, _, ckpt) = classifier(ctx, "mnist-classifier", &tan, splits)?;
    bin_run(
        ctx,
        name,
        &bin_config(&tan, &ckpt, MNIST_BIN_BATCH, MNIST_BIN_STEPS, removed),
        splits,
    )
}

fn shapes_ncc(ctx: &Ctx, name: &str, removed: &[Ablation]) -> R<(Option<f64>, Option<f64>)> {
    if let Some(v) = ctx.ncc.borrow().get(name) {
        return Ok(*v);
    }
    let tan = shapes_tan_config();
    let splits = load_dataset(&tan.dataset, tan.seed)?;
    let (_, _, ckpt) = classifier(ctx, "shapes-classifier", &tan, &splits)?;
    let cfg = bin_config(&tan, &ckpt, SHAPES_BIN_BATCH, SHAPES_BIN_STEPS, removed);
    let model = bin_run(ctx, name, &cfg, &splits)?;
    let lookup = Renderer {
        normalization: tan.dataset.normalization,
    };
    let scores = model_ncc(&model, &splits.test, &lookup, &tan.dataset.class_names(), 100)?;
    std::fs::write(
        ctx.root.join(name).join("ncc.json"),
        serde_json::to_vec_pretty(&scores)?,
    )?;
    let v = mean_ncc(&scores);
    ctx.ncc.borrow_mut().insert(name.to_string(), v);
    Ok(v)
}

fn fmt(v: Option<f64>) -> String {
    v.map_or("undefined".into(), |v| format!("{v:.4}"))
}

// ---------------------------------------------------------------------------
// Criteria

fn tan_accuracy(ctx: &Ctx) -> R<Outcome> {
    let splits = mnist_splits(ctx)?;
    let cfg = mnist_tan_config(ctx);
    let (model, done, _) = classifier(ctx, "mnist-classifier", &cfg, &splits)?;
    let acc = accuracy(&model, &splits.test)?;
    let elapsed = done["elapsed_s"].as_f64().unwrap_or(f64::INFINITY);
    let epochs = done["report"]["epochs"].as_array().map_or(0, |e| e.len());
    outcome(
        acc >= 0.99 && epochs <= TAN_MAX_EPOCHS && elapsed <= CPU_BUDGET_S,
        format!(
            "MNIST test accuracy {acc:.4} (>= 0.99) after {epochs} epochs in {:.1} min CPU (<= 240)",
            elapsed / 60.0
        ),
    )
}

fn mnist_flip_rate(ctx: &Ctx) -> R<Outcome> {
    let splits = mnist_splits(ctx)?;
    let model = mnist_bin(ctx, &splits, &[], "mnist-bin-full")?;
    let pairs = random_target_pairs(&splits.test, 1000, 10, 0)?;
    let refs: Vec<(&Image, &TargetCondition)> = pairs.iter().map(|(x, y)| (x, y)).collect();
    let f = flip_rate(&model, &refs, 100)?;
    outcome(
        f >= 0.95,
        format!("MNIST flip-rate {f:.4} over {} held-out pairs (>= 0.95)", refs.len()),
    )
}

fn shapes_ncc_gate(ctx: &Ctx) -> R<Outcome> {
    let (plus, minus) = shapes_ncc(ctx, "shapes-bin-full", &[])?;
    outcome(
        plus.is_some_and(|p| p >= 0.40) && minus.is_some_and(|m| m >= 0.30),
        format!(
            "3D Shapes NCC(+) {} (>= 0.40), NCC(-) {} (>= 0.30)",
            fmt(plus),
            fmt(minus)
        ),
    )
}

fn ablation_ordering(ctx: &Ctx) -> R<Outcome> {
    use Ablation::*;
    let (full, _) = shapes_ncc(ctx, "shapes-bin-full", &[])?;
    let (no_cls, _) = shapes_ncc(ctx, "shapes-bin-no_cls", &[DropCls])?;
    let (no_all, _) = shapes_ncc(ctx, "shapes-bin-no_all", &[DropConditionY, DropCls, DropCyc, DropMap])?;
    // A variant whose maps are constant has undefined NCC; it explains nothing,
    // so it ranks below any defined score.
    let beats = |other: Option<f64>| match (full, other) {
        (Some(f), Some(o)) => f > o,
        (Some(_), None) => true,
        _ => false,
    };
    outcome(
        beats(no_cls) && beats(no_all),
        format!(
            "NCC(+) full {} > no_cls {} and > no_all {}",
            fmt(full),
            fmt(no_cls),
            fmt(no_all)
        ),
    )
}

fn fid_ordering(ctx: &Ctx) -> R<Outcome> {
    use Ablation::*;
    let splits = mnist_splits(ctx)?;
    let names = mnist_tan_config(ctx).dataset.class_names();
    let mut avg = Vec::new();
    for (name, removed) in [
        ("mnist-bin-full", vec![]),
        ("mnist-bin-no_all", vec![DropConditionY, DropCls, DropCyc, DropMap]),
    ] {
        let model = mnist_bin(ctx, &splits, &removed, name)?;
        let rep = fid_per_class(&model, &splits.test, &names, 1000, 100)?;
        std::fs::write(ctx.root.join(name).join("fid.json"), serde_json::to_vec_pretty(&rep)?)?;
        avg.push(rep.avg.ok_or("no class could be scored")?);
    }
    outcome(
        avg[0] < avg[1],
        format!(
            "MNIST average per-class FID full {:.3} < all-removed {:.3}",
            avg[0], avg[1]
        ),
    )
}

fn loss_exactness(_: &Ctx) -> R<Outcome> {
    let t = |v: &[f64]| Tensor::from_slice(v).to_kind(Kind::Double);
    let s = |x: tch::Tensor| x.double_value(&[]);
    let img = |v: f64| Tensor::full([1, 1, 2, 2], v, (Kind::Double, tch::Device::Cpu));
    let w = LossWeights {
        l3: 5.0,
        ..LossWeights::MNIST
    };
    let report = |terms: Terms| losses::total_loss(terms, &w, TermMask::default());
    // (name, got, expected, tolerance): exact arithmetic unless the expected
    // value is itself rounded.
    let cases: Vec<(&str, f64, f64, f64)> = vec![
        (
            "adv_d perfect",
            s(losses::adv_d_loss(&t(&[1.0]), &t(&[0.0]), 0.0)?),
            0.0,
            1e-12,
        ),
        (
            "adv_d chance",
            s(losses::adv_d_loss(&t(&[0.5]), &t(&[0.5]), 0.0)?),
            0.25,
            1e-12,
        ),
        (
            "adv_d smoothed",
            s(losses::adv_d_loss(&t(&[1.0]), &t(&[0.0]), 0.1)?),
            0.005,
            1e-12,
        ),
        ("adv_g real", s(losses::adv_g_loss(&t(&[1.0]))?), 0.0, 1e-12),
        ("adv_g fake", s(losses::adv_g_loss(&t(&[0.0]))?), 0.5, 1e-12),
        ("adv_g mixed", s(losses::adv_g_loss(&t(&[0.5, 1.5]))?), 0.125, 1e-12),
        (
            "cycle identity",
            s(losses::cycle_loss(&img(0.3), &img(0.3))?),
            0.0,
            1e-12,
        ),
        ("cycle offset", s(losses::cycle_loss(&img(0.3), &img(0.5))?), 0.2, 1e-12),
        (
            "cls one-hot",
            s(losses::cls_loss(
                &t(&[0.0, 0.0, 1.0]).view([1, 3]),
                &t(&[0.1, 0.1, 0.8]).view([1, 3]),
            )?),
            0.2231,
            5e-5,
        ),
        (
            "cls exact",
            s(losses::cls_loss(
                &t(&[0.0, 1.0]).view([1, 2]),
                &t(&[0.0, 1.0]).view([1, 2]),
            )?),
            0.0,
            1e-7,
        ),
        (
            "cls uniform",
            s(losses::cls_loss(
                &t(&[0.5, 0.5]).view([1, 2]),
                &t(&[0.5, 0.5]).view([1, 2]),
            )?),
            0.6931,
            5e-5,
        ),
        ("map zero", s(losses::map_loss(&img(0.0), 1.0, 10.0)?), 0.0, 1e-12),
        (
            "map analytic",
            s(losses::map_loss(&t(&[0.3, -0.4]).view([1, 1, 1, 2]), 1.0, 10.0)?),
            5.7,
            1e-12,
        ),
        (
            "map unweighted",
            s(losses::map_loss(&t(&[0.3, -0.4]).view([1, 1, 1, 2]), 0.0, 0.0)?),
            0.0,
            1e-12,
        ),
        ("total zero", report(Terms::default())?.total, 0.0, 0.0),
        (
            "total adv_d",
            report(Terms {
                adv_d: 1.0,
                ..Default::default()
            })?
            .total_d,
            5.0,
            0.0,
        ),
    ];
    let bad: Vec<String> = cases
        .iter()
        .filter(|(_, got, want, tol)| (got - want).abs() > *tol)
        .map(|(n, got, want, _)| format!("{n}: {got} != {want}"))
        .collect();
    let nan = report(Terms {
        cls: f64::NAN,
        ..Default::default()
    });
    let nan_ok = matches!(nan, Err(born_core::Error::NonFinite { term: "cls" }));

    let mut worst = 0.0f64;
    for seed in 0..3 {
        for (_, g) in loss_gradcheck(seed)? {
            worst = worst.max(g.max_rel_err);
        }
    }
    let mut model_worst = 0.0f64;
    let mut checked = 0;
    for seed in [1, 2] {
        let (g, d) = model_gradcheck(seed)?;
        model_worst = model_worst.max(g.max_rel_err).max(d.max_rel_err);
        checked += g.checked + d.checked;
    }
    outcome(
        bad.is_empty() && nan_ok && worst <= 1e-4 && model_worst <= 1e-4,
        format!(
            "{}/{} analytic examples exact{}; NaN surfaced with term name: {nan_ok}; gradient rel. error ops {worst:.1e}, tiny models {model_worst:.1e} over {checked} coordinates (<= 1e-4)",
            cases.len() - bad.len(),
            cases.len(),
            if bad.is_empty() { String::new() } else { format!(" ({})", bad.join("; ")) }
        ),
    )
}

fn metric_oracles(_: &Ctx) -> R<Outcome> {
    let mut runner = TestRunner::new(PropConfig {
        cases: 1000,
        failure_persistence: None,
        ..PropConfig::default()
    });
    let strategy = (any::<u64>(), 2usize..64, 0.01f32..100.0, -10.0f32..10.0);
    let prop = runner.run(&strategy, |(seed, n, c, d)| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a: Vec<f32> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let b: Vec<f32> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let v = ncc(&a, &b).map_err(|e| TestCaseError::fail(e.to_string()))?;
        prop_assert!((-1.0 - 1e-9..=1.0 + 1e-9).contains(&v));
        prop_assert!((ncc(&b, &a).unwrap() - v).abs() < 1e-9);
        let bt: Vec<f32> = b.iter().map(|x| c * x + d).collect();
        prop_assert!((ncc(&a, &bt).unwrap() - v).abs() < 1e-4);
        let neg: Vec<f32> = b.iter().map(|x| -x).collect();
        prop_assert!((ncc(&a, &neg).unwrap() + v).abs() < 1e-6);
        prop_assert!((ncc(&a, &a).unwrap() - 1.0).abs() < 1e-6);
        Ok(())
    });

    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst = 0.0f64;
    for case in 0..20 {
        let d = 2 + case % 6;
        let n = 3 * d + rng.random_range(0..20);
        let real = common::random_set(&mut rng, n, d, 0.0, 1.0);
        let (shift, scale) = (rng.random_range(-1.0..1.0), rng.random_range(0.5..2.0));
        let fake = common::random_set(&mut rng, n + 5, d, shift, scale);
        let got = fid(&common::to_dmatrix(&real), &common::to_dmatrix(&fake))?.value;
        worst = worst.max((got - common::oracle_fid(&real, &fake)).abs());
    }
    let mut self_fid = 0.0f64;
    for d in [2, 8, 32] {
        let x = common::to_dmatrix(&common::random_set(&mut rng, 4 * d, d, 0.3, 1.0));
        self_fid = self_fid.max(fid(&x, &x)?.value);
    }
    outcome(
        prop.is_ok() && worst <= 1e-8 && self_fid <= 1e-6,
        format!(
            "NCC property suite over 1000 cases: {}; FID vs Jacobi oracle max |diff| {worst:.1e} on 20 instances (<= 1e-8); FID(X,X) {self_fid:.1e} (<= 1e-6)",
            match &prop {
                Ok(()) => "ok".to_string(),
                Err(e) => format!("failed ({e})"),
            }
        ),
    )
}

fn determinism(_: &Ctx) -> R<Outcome> {
    let mut cfg = tiny_config();
    cfg.epochs = 100;
    cfg.max_steps_per_epoch = Some(5);
    let splits = tiny_splits(120, 3)?;
    let (tan, _) = pretrain_tan(&cfg, &splits, None)?;
    let dir = tempfile::tempdir()?;
    let pre = dir.path().join("pretrained");
    save_classifier(
        &pre,
        &tan,
        &born_core::trainer::TanReport {
            epochs: vec![],
            best_accuracy: 1.0,
            gate: 0.0,
            gate_set: "val".into(),
            gate_size: 0,
        },
        &cfg,
    )?;

    let mut logs = Vec::new();
    for r in 0..2 {
        let (model, _) = checkpoint::load_model(&pre)?;
        let mut t = Trainer::new(cfg.clone(), model, &splits.train)?;
        let root = dir.path().join(format!("run{r}"));
        t.attach_run_dir(&root)?;
        for _ in 0..100 {
            t.step()?;
        }
        t.checkpoint()?;
        logs.push(std::fs::read_to_string(RunDir::new(root).train_log())?);
    }
    let lines = logs[0].lines().count();
    let same_log = lines == 100 && logs[0] == logs[1];

    let (model, _) = checkpoint::load_model(&pre)?;
    let mut t = Trainer::new(cfg.clone(), model, &splits.train)?;
    t.attach_run_dir(dir.path().join("resume"))?;
    for _ in 0..7 {
        t.step()?;
    }
    let ckpt = t.checkpoint()?.ok_or("no checkpoint")?;
    let expected = t.step()?;
    let mut r = Trainer::resume(cfg, &ckpt, &splits.train)?;
    let got = r.step()?;
    let same_step = got == expected;
    outcome(
        same_log && same_step,
        format!("first {lines} log lines identical across runs: {same_log}; next-step LossReport after restore identical: {same_step}"),
    )
}

fn engine_identities(_: &Ctx) -> R<Outcome> {
    let model = tiny_model(11, Kind::Float)?;
    jitter(&model, 0.05, 11);
    let (xb, yb) = tiny_batch(&model, 8, 11);
    calibrate(&model, &xb, &yb)?;
    let shape = ImageShape::new(8, 8, 1);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut exact = 0;
    let mut interp_ok = 0;
    for i in 0..100 {
        let x = Image::new(shape, (0..64).map(|_| rng.random::<f32>()).collect())?;
        let mut p: Vec<f64> = (0..3).map(|_| rng.random::<f64>()).collect();
        let s: f64 = p.iter().sum();
        p.iter_mut().for_each(|v| *v /= s);
        let p_sum: f64 = p.iter().sum();
        p[2] += 1.0 - p_sum;
        let y = TargetCondition::new(p)?;
        let r = engine::generate(&model, &x, &format!("r{i}"), &y)?;
        let diff: Vec<f32> = r
            .synthesized
            .pixels()
            .iter()
            .zip(x.pixels())
            .map(|(s, x)| s - x)
            .collect();
        if diff == r.map.values.pixels() {
            exact += 1;
        }
        let yb = TargetCondition::one_hot(i % 3, 3)?;
        let seq = engine::interpolate(&model, &x, "r", &y, &yb, 2 + i % 4)?;
        let a = engine::generate(&model, &x, "r", &y)?;
        let b = engine::generate(&model, &x, "r", &yb)?;
        let last = seq.last().ok_or("empty interpolation")?;
        if seq[0] == a && *last == b {
            interp_ok += 1;
        }
    }
    outcome(
        exact == 100 && interp_ok == 100,
        format!(
            "x~ - x == M bit-exact in {exact}/100 cases; interpolation endpoints equal generate in {interp_ok}/100"
        ),
    )
}

fn main() {
    let ctx = Ctx::from_env();
    let criteria: Vec<(&str, fn(&Ctx) -> R<Outcome>)> = vec![
        ("loss-exactness", loss_exactness),
        ("metric-oracles", metric_oracles),
        ("determinism-persistence", determinism),
        ("engine-identities", engine_identities),
        ("tan-accuracy", tan_accuracy),
        ("flip-rate", mnist_flip_rate),
        ("fid-ordering", fid_ordering),
        ("ncc-3dshapes", shapes_ncc_gate),
        ("ablation-ordering", ablation_ordering),
    ];
    let mut failed = 0;
    for (name, f) in &criteria {
        let t0 = Instant::now();
        let res = std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| f(&ctx)));
        let (pass, detail) = match res {
            Ok(Ok(o)) => (o.pass, o.detail),
            Ok(Err(e)) => (false, format!("error: {e}")),
            Err(p) => (
                false,
                format!(
                    "panic: {}",
                    p.downcast_ref::<String>()
                        .cloned()
                        .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                        .unwrap_or_default()
                ),
            ),
        };
        if !pass {
            failed += 1;
        }
        println!(
            "{} {name}: {detail} [{:.1}s]",
            if pass { "PASS" } else { "FAIL" },
            t0.elapsed().as_secs_f64()
        );
    }
    println!(
        "acceptance: {}/{} criteria passed",
        criteria.len() - failed,
        criteria.len()
    );
    if failed > 0 && std::env::var("BIN_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1") {
        std::process::exit(1);
    }
}
