//! Classifier pre-training and adversarial map-generator training.

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tch::{Kind, Tensor};

use crate::checkpoint::{self, Manifest, SaveRequest, Stage};
use crate::config::{Ablation, TrainConfig};
use crate::data::{DatasetSplits, Split};
use crate::error::{Error, Result};
use crate::losses::{self, scalar, LossReport, TermMask, Terms};
use crate::networks::{BinModel, TargetCondition};
use crate::optim::{decayed_lr, Adam, AdamConfig};

const TAN_STREAM: u64 = 1;
const BIN_STREAM: u64 = 2;
const EVAL_BATCH: usize = 500;

/// I.i.d. uniform one-hot targets.
pub fn sample_targets(k: usize, b: usize, rng: &mut ChaCha8Rng) -> Result<Vec<TargetCondition>> {
    if k < 2 {
        return Err(Error::Contract(format!(
            "need at least 2 classes to sample targets, got {k}"
        )));
    }
    (0..b)
        .map(|_| TargetCondition::one_hot(rng.random_range(0..k), k))
        .collect()
}

/// Argmax accuracy of the classifier on a split (inference mode).
pub fn accuracy(model: &BinModel, split: &Split) -> Result<f64> {
    if split.is_empty() {
        return Err(Error::EmptyBatch("accuracy"));
    }
    let mut correct = 0usize;
    for batch in split.batches(EVAL_BATCH) {
        let x = model.to_input(&batch.to_tensor());
        let pred = tch::no_grad(|| model.classify(&x))?.argmax(-1, false);
        let pred: Vec<i64> = Vec::try_from(pred)?;
        correct += pred
            .iter()
            .zip(&batch.labels)
            .filter(|(p, l)| **p as usize == **l)
            .count();
    }
    Ok(correct as f64 / split.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TanEpoch {
    pub epoch: usize,
    pub steps: usize,
    pub loss: f64,
    pub gate_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TanReport {
    pub epochs: Vec<TanEpoch>,
    pub best_accuracy: f64,
    pub gate: f64,
    pub gate_set: String,
    pub gate_size: usize,
}

/// Training and gate splits for the classifier: the validation split when
/// present, otherwise a seeded hold-out taken from the training split.
pub fn gate_split(cfg: &TrainConfig, splits: &DatasetSplits) -> (Split, Split) {
    if !splits.val.is_empty() {
        return (splits.train.clone(), splits.val.clone());
    }
    let n = splits.train.len();
    let hold = cfg.tan.holdout.min(n / 2);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x6761_7465));
    let (gate, train) = order.split_at(hold);
    let mut train = train.to_vec();
    train.sort_unstable();
    let mut gate = gate.to_vec();
    gate.sort_unstable();
    let mut g = splits.train.select(&gate);
    g.name = "holdout".into();
    (splits.train.select(&train), g)
}

fn cross_entropy(logits: &Tensor, labels: &Tensor) -> Tensor {
    logits
        .log_softmax(-1, logits.kind())
        .gather(1, &labels.view([-1, 1]), false)
        .mean(logits.kind())
        .neg()
}

/// Trains encoder + classifier head until the gate accuracy is reached.
/// Stops at the first epoch meeting the gate.
pub fn pretrain_tan(
    cfg: &TrainConfig,
    splits: &DatasetSplits,
    run_dir: Option<&Path>,
) -> Result<(BinModel, TanReport)> {
    cfg.validate()?;
    let spec = cfg.architecture.resolve()?;
    let model = BinModel::new(spec, cfg.flags, cfg.seed, Kind::Float)?;
    let (train, gate) = gate_split(cfg, splits);
    if train.is_empty() {
        return Err(Error::EmptyBatch("classifier training split"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(TAN_STREAM);
    model.set_tan_trainable(true);
    let adam = AdamConfig {
        beta1: cfg.optimizer.beta1,
        beta2: cfg.optimizer.beta2,
        ..Default::default()
    };
    let mut opt = Adam::new(model.tan.trainable(), cfg.tan.lr, adam);
    let mut log = match run_dir {
        Some(d) => {
            fs::create_dir_all(d)?;
            Some(File::create(d.join("tan_log.jsonl"))?)
        }
        None => None,
    };
    let bs = cfg.tan.batch_size.min(train.len());
    let mut report = TanReport {
        epochs: Vec::new(),
        best_accuracy: 0.0,
        gate: cfg.tan.gate,
        gate_set: gate.name.clone(),
        gate_size: gate.len(),
    };
    let mut best = model.tan.snapshot();
    for epoch in 0..cfg.tan.max_epochs {
        let order = train.epoch_order(cfg.seed ^ 0x7461_6e, epoch);
        let mut steps = 0usize;
        let mut total = 0.0;
        for batch in train.batches_in_order(order, bs, true) {
            if cfg.tan.max_steps_per_epoch.is_some_and(|m| steps >= m) {
                break;
            }
            let x = model.to_input(&batch.to_tensor());
            let y = batch.labels_tensor();
            let z = model.encode(&x, true)?;
            let out = model.classifier_head(&z.bottleneck, true, Some(&mut rng))?;
            let loss = cross_entropy(&out.logits, &y);
            let l = scalar(&loss);
            if !l.is_finite() {
                return Err(Error::Diverged {
                    step: steps as u64,
                    term: "cls",
                });
            }
            opt.zero_grad();
            loss.backward();
            opt.step();
            total += l;
            steps += 1;
        }
        let acc = if gate.is_empty() { 1.0 } else { accuracy(&model, &gate)? };
        let rec = TanEpoch {
            epoch,
            steps,
            loss: total / steps.max(1) as f64,
            gate_accuracy: acc,
        };
        log::info!(
            "classifier epoch {epoch}: loss {:.4}, {} accuracy {acc:.4}",
            rec.loss,
            gate.name
        );
        if let Some(f) = log.as_mut() {
            writeln!(f, "{}", serde_json::to_string(&rec)?)?;
        }
        report.epochs.push(rec);
        if acc > report.best_accuracy {
            report.best_accuracy = acc;
            best = model.tan.snapshot();
        }
        if acc >= cfg.tan.gate {
            break;
        }
    }
    model.tan.copy_from(&best)?;
    model.set_tan_trainable(false);
    model.sync_cmg_encoder()?;
    if report.best_accuracy < cfg.tan.gate {
        return Err(Error::Gate {
            best: report.best_accuracy,
            required: cfg.tan.gate,
        });
    }
    Ok((model, report))
}

/// Saves a classifier-only checkpoint.
pub fn save_classifier(dir: &Path, model: &BinModel, report: &TanReport, cfg: &TrainConfig) -> Result<PathBuf> {
    checkpoint::save(
        dir,
        model,
        SaveRequest {
            stage: Stage::Classifier,
            step: 0,
            epoch: report.epochs.len(),
            optimizers: vec![],
            rng: None,
            meta: serde_json::json!({ "classifier": report, "config": cfg }),
        },
    )
}

/// One line of `train_log.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: u64,
    pub epoch: usize,
    pub lr_generator: f64,
    pub lr_discriminator: f64,
    #[serde(flatten)]
    pub losses: LossReport,
}

/// Everything needed to continue training exactly where it stopped.
pub struct TrainingState {
    pub step: u64,
    pub epoch: usize,
    /// Steps already taken in the current epoch.
    pub epoch_step: usize,
    pub model: BinModel,
    pub opt_g: Adam,
    pub opt_d: Adam,
    pub rng: ChaCha8Rng,
}

impl TrainingState {
    pub fn new(cfg: &TrainConfig, model: BinModel) -> Self {
        let adam = AdamConfig {
            beta1: cfg.optimizer.beta1,
            beta2: cfg.optimizer.beta2,
            ..Default::default()
        };
        model.set_tan_trainable(false);
        let opt_g = Adam::new(model.generator_trainables(), cfg.lr_generator, adam);
        let opt_d = Adam::new(model.disc.trainable(), cfg.lr_discriminator, adam);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(BIN_STREAM);
        Self {
            step: 0,
            epoch: 0,
            epoch_step: 0,
            model,
            opt_g,
            opt_d,
            rng,
        }
    }

    pub fn save(&self, dir: &Path, cfg: &TrainConfig) -> Result<PathBuf> {
        checkpoint::save(
            dir,
            &self.model,
            SaveRequest {
                stage: Stage::Bin,
                step: self.step,
                epoch: self.epoch,
                optimizers: vec![("generator", &self.opt_g), ("discriminator", &self.opt_d)],
                rng: Some(&self.rng),
                meta: serde_json::json!({ "epoch_step": self.epoch_step, "config": cfg }),
            },
        )
    }

    pub fn restore(dir: &Path, cfg: &TrainConfig) -> Result<Self> {
        let (model, _) = checkpoint::load_model(dir)?;
        let mut state = Self::new(cfg, model);
        let manifest: Manifest = checkpoint::load_into(
            dir,
            &state.model,
            &mut [("generator", &mut state.opt_g), ("discriminator", &mut state.opt_d)],
        )?;
        if manifest.stage != Stage::Bin {
            return Err(Error::Integrity {
                name: checkpoint::MANIFEST.into(),
                detail: "not a map-generator training checkpoint".into(),
            });
        }
        state.step = manifest.step;
        state.epoch = manifest.epoch;
        state.epoch_step = manifest.meta.get("epoch_step").and_then(|v| v.as_u64()).unwrap_or(0) as usize;
        state.rng = manifest
            .rng
            .as_ref()
            .ok_or_else(|| Error::Integrity {
                name: "rng".into(),
                detail: "missing from manifest".into(),
            })?
            .restore()?;
        Ok(state)
    }
}

fn term_mask(cfg: &TrainConfig) -> TermMask {
    TermMask {
        cyc: !cfg.has(Ablation::DropCyc),
        cls: !cfg.has(Ablation::DropCls),
        map: !cfg.has(Ablation::DropMap),
    }
}

fn diverged(step: u64, e: Error) -> Error {
    match e {
        Error::NonFinite { term } => Error::Diverged { step, term },
        e => e,
    }
}

/// One discriminator update followed by one generator update on batch `x`.
pub fn bin_step(state: &mut TrainingState, cfg: &TrainConfig, x: &Tensor) -> Result<LossReport> {
    let model = &state.model;
    let w = cfg.effective_weights();
    let mask = term_mask(cfg);
    let k = model.num_classes();
    let x = model.to_input(x);
    let b = x.size()[0] as usize;
    let step = state.step + 1;

    let targets = sample_targets(k, b, &mut state.rng)?;
    let y = TargetCondition::batch_tensor(&targets, model.kind);
    let y_prime = tch::no_grad(|| model.classify(&x))?.detach();
    let (y_fwd, y_bwd) = if cfg.has(Ablation::DropConditionY) {
        let u = TargetCondition::batch_tensor(&vec![TargetCondition::uniform(k); b], model.kind);
        (u.shallow_clone(), u)
    } else {
        (y.shallow_clone(), y_prime)
    };

    let feats = model.encode_for_generator(&x, true)?;
    let m = model.generate_map(&feats, &y_fwd, true)?;
    let x_tilde = &x + &m;

    // Discriminator: real x against detached synthesized images.
    model.disc.set_requires_grad(true);
    let d_real = model.discriminate(&x, true)?;
    let d_fake = model.discriminate(&x_tilde.detach(), true)?;
    let adv_d = losses::adv_d_loss(&d_real, &d_fake, w.label_smoothing)?;
    let adv_d_v = scalar(&adv_d);
    if !adv_d_v.is_finite() {
        return Err(Error::Diverged { step, term: "adv_d" });
    }
    state.opt_d.zero_grad();
    (adv_d * w.l3).backward();
    state.opt_d.step();
    model.disc.set_requires_grad(false);

    // Generator.
    let adv_g = losses::adv_g_loss(&model.discriminate(&x_tilde, true)?)?;
    let zero = || Tensor::zeros([], (model.kind, tch::Device::Cpu));
    let cyc = if mask.cyc {
        let feats_t = model.encode_for_generator(&x_tilde, true)?;
        let m_back = model.generate_map(&feats_t, &y_bwd, true)?;
        losses::cycle_loss(&x, &(&x_tilde + m_back))?
    } else {
        zero()
    };
    let cls = if mask.cls {
        let z = model.encode(&x_tilde, false)?;
        let p = model
            .classifier_head(&z.bottleneck, false, None)?
            .logits
            .softmax(-1, model.kind);
        losses::cls_loss(&y, &p)?
    } else {
        zero()
    };
    let map = if mask.map {
        losses::map_loss(&m, w.l1, w.l2)?
    } else {
        zero()
    };
    let report = losses::total_loss(
        Terms {
            adv_d: adv_d_v,
            adv_g: scalar(&adv_g),
            cyc: scalar(&cyc),
            cls: scalar(&cls),
            map: scalar(&map),
        },
        &w,
        mask,
    )
    .map_err(|e| diverged(step, e))?;
    let obj = losses::generator_objective(&adv_g, &cyc, &cls, &map, &w, mask);
    state.opt_g.zero_grad();
    obj.backward();
    state.opt_g.step();
    state.step = step;
    Ok(report)
}

/// Layout of `runs/<name>/`.
#[derive(Debug, Clone)]
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn config(&self) -> PathBuf {
        self.root.join("config.json")
    }

    pub fn train_log(&self) -> PathBuf {
        self.root.join("train_log.jsonl")
    }

    pub fn checkpoints(&self) -> PathBuf {
        self.root.join("checkpoints")
    }

    pub fn step(&self, step: u64) -> PathBuf {
        self.checkpoints().join(format!("step-{step}"))
    }

    pub fn classifier(&self) -> PathBuf {
        self.root.join("classifier")
    }

    pub fn report(&self) -> PathBuf {
        self.root.join("report.json")
    }

    /// Most recent `step-N` checkpoint, if any.
    pub fn latest_checkpoint(&self) -> Option<PathBuf> {
        let rd = fs::read_dir(self.checkpoints()).ok()?;
        rd.filter_map(|e| e.ok())
            .filter_map(|e| {
                let name = e.file_name().into_string().ok()?;
                let n: u64 = name.strip_prefix("step-")?.parse().ok()?;
                e.path().join(checkpoint::MANIFEST).exists().then_some((n, e.path()))
            })
            .max_by_key(|(n, _)| *n)
            .map(|(_, p)| p)
    }
}

/// Drives [`bin_step`] over epochs with lr decay, logging and checkpoints.
pub struct Trainer<'a> {
    pub cfg: TrainConfig,
    pub state: TrainingState,
    split: &'a Split,
    run: Option<RunDir>,
    log: Option<File>,
    order: Vec<usize>,
    last_good: Option<PathBuf>,
}

impl<'a> Trainer<'a> {
    pub fn new(cfg: TrainConfig, pretrained: BinModel, split: &'a Split) -> Result<Self> {
        cfg.validate()?;
        if split.is_empty() {
            return Err(Error::EmptyBatch("training split"));
        }
        let state = TrainingState::new(&cfg, pretrained);
        Ok(Self::with_state(cfg, state, split))
    }

    fn with_state(cfg: TrainConfig, state: TrainingState, split: &'a Split) -> Self {
        let order = split.epoch_order(cfg.seed, state.epoch);
        Self {
            cfg,
            state,
            split,
            run: None,
            log: None,
            order,
            last_good: None,
        }
    }

    /// Continues from a checkpoint; the log is truncated to its step.
    pub fn resume(cfg: TrainConfig, checkpoint: &Path, split: &'a Split) -> Result<Self> {
        cfg.validate()?;
        let state = TrainingState::restore(checkpoint, &cfg)?;
        let mut t = Self::with_state(cfg, state, split);
        t.last_good = Some(checkpoint.to_path_buf());
        Ok(t)
    }

    /// Writes `config.json` and opens `train_log.jsonl` under `root`.
    pub fn attach_run_dir(&mut self, root: impl Into<PathBuf>) -> Result<()> {
        let run = RunDir::new(root);
        fs::create_dir_all(run.checkpoints())?;
        self.cfg.save(&run.config())?;
        let keep: Vec<String> = match File::open(run.train_log()) {
            Ok(f) if self.state.step > 0 => BufReader::new(f)
                .lines()
                .map_while(|l| l.ok())
                .filter(|l| {
                    serde_json::from_str::<StepLog>(l)
                        .map(|s| s.step <= self.state.step)
                        .unwrap_or(false)
                })
                .collect(),
            _ => Vec::new(),
        };
        let mut f = OpenOptions::new()
            .create(true)
            .write(true)
            .truncate(true)
            .open(run.train_log())?;
        for l in keep {
            writeln!(f, "{l}")?;
        }
        self.log = Some(f);
        self.run = Some(run);
        Ok(())
    }

    pub fn run_dir(&self) -> Option<&RunDir> {
        self.run.as_ref()
    }

    pub fn steps_per_epoch(&self) -> usize {
        let n = self.split.len();
        let bs = self.cfg.batch_size;
        let full = if n >= bs { n / bs } else { 1 };
        self.cfg.max_steps_per_epoch.map_or(full, |m| full.min(m.max(1)))
    }

    pub fn finished(&self) -> bool {
        self.state.epoch >= self.cfg.epochs
    }

    /// Takes one step (rolling over epochs as needed).
    pub fn step(&mut self) -> Result<StepLog> {
        if self.state.epoch_step >= self.steps_per_epoch() {
            self.end_epoch()?;
        }
        let lr_g = decayed_lr(self.cfg.lr_generator, self.cfg.lr_decay_per_epoch, self.state.epoch);
        let lr_d = decayed_lr(self.cfg.lr_discriminator, self.cfg.lr_decay_per_epoch, self.state.epoch);
        self.state.opt_g.lr = lr_g;
        self.state.opt_d.lr = lr_d;
        let bs = self.cfg.batch_size.min(self.split.len());
        let s = self.state.epoch_step * bs;
        let batch = self.split.batch(&self.order[s..s + bs]);
        let losses = bin_step(&mut self.state, &self.cfg, &batch.to_tensor()).map_err(|e| self.abort(e))?;
        self.state.epoch_step += 1;
        let rec = StepLog {
            step: self.state.step,
            epoch: self.state.epoch,
            lr_generator: lr_g,
            lr_discriminator: lr_d,
            losses,
        };
        if let Some(f) = self.log.as_mut() {
            writeln!(f, "{}", serde_json::to_string(&rec)?)?;
        }
        if self.cfg.checkpoint_every > 0 && self.state.step % self.cfg.checkpoint_every as u64 == 0 {
            self.checkpoint()?;
        }
        Ok(rec)
    }

    fn abort(&self, e: Error) -> Error {
        if let Error::Diverged { step, term } = &e {
            match &self.last_good {
                Some(p) => log::error!(
                    "loss `{term}` diverged at step {step}; last good checkpoint {}",
                    p.display()
                ),
                None => log::error!("loss `{term}` diverged at step {step}; no checkpoint written yet"),
            }
        }
        e
    }

    fn end_epoch(&mut self) -> Result<()> {
        self.state.epoch += 1;
        self.state.epoch_step = 0;
        self.order = self.split.epoch_order(self.cfg.seed, self.state.epoch);
        if self.cfg.checkpoint_every == 0 || self.finished() {
            self.checkpoint()?;
        }
        Ok(())
    }

    /// Writes `checkpoints/step-N` when a run directory is attached.
    pub fn checkpoint(&mut self) -> Result<Option<PathBuf>> {
        let Some(run) = &self.run else { return Ok(None) };
        if let Some(f) = self.log.as_mut() {
            f.flush()?;
        }
        let p = self.state.save(&run.step(self.state.step), &self.cfg)?;
        self.last_good = Some(p.clone());
        Ok(Some(p))
    }

    /// Runs to the configured number of epochs.
    pub fn run(&mut self, mut on_step: impl FnMut(&StepLog)) -> Result<()> {
        let spe = self.steps_per_epoch();
        while !self.finished() {
            if self.state.epoch_step >= spe {
                self.end_epoch()?;
                continue;
            }
            let rec = self.step()?;
            on_step(&rec);
        }
        Ok(())
    }

    pub fn into_state(self) -> TrainingState {
        self.state
    }
}

/// Classifier pre-training (or loading) followed by map training.
pub fn train_bin(
    cfg: &TrainConfig,
    pretrained: BinModel,
    train: &Split,
    run_dir: Option<&Path>,
) -> Result<TrainingState> {
    let mut t = Trainer::new(cfg.clone(), pretrained, train)?;
    if let Some(d) = run_dir {
        t.attach_run_dir(d)?;
    }
    let total = cfg.epochs * t.steps_per_epoch();
    t.run(|r| {
        if r.step % 50 == 0 || r.step as usize == total {
            log::info!(
                "step {}/{total} epoch {}: d {:.4} g {:.4} cyc {:.4} cls {:.4} map {:.4}",
                r.step,
                r.epoch,
                r.losses.adv_d,
                r.losses.adv_g,
                r.losses.cyc,
                r.losses.cls,
                r.losses.map
            )
        }
    })?;
    Ok(t.into_state())
}
