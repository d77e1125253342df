//! Command-line interface: argument definitions and command runners.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use born_core::checkpoint::{self, Stage};
use born_core::config::{runs_root, Ablation, TrainConfig};
use born_core::data::shapes::{read_archive, ArchiveLookup, GtProvenance, LatentLookup, Renderer};
use born_core::data::{load_dataset, DatasetKind, DatasetSplits, Image, Normalization};
use born_core::engine::{self, CounterfactualResult};
use born_core::eval::{evaluate_variant, EvalOptions, EvaluationReport};
use born_core::networks::{BinModel, TargetCondition};
use born_core::trainer::{self, RunDir, Trainer};
use born_core::Error;

use crate::service::{self, ServiceConfig};

#[derive(Debug, Parser)]
#[command(
    name = "born",
    version,
    about = "Train, query and serve conditional counterfactual map generators"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Pre-train the classifier until it meets the accuracy gate.
    TrainClassifier(TrainClassifierArgs),
    /// Train the map generator against a pre-trained classifier.
    Train(TrainArgs),
    /// Produce counterfactual maps for one input.
    Generate(GenerateArgs),
    /// Compute flip-rate, FID and NCC and write report.json / report.csv.
    Evaluate(EvaluateArgs),
    /// Serve the HTTP inference API.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
pub struct TrainClassifierArgs {
    /// Run configuration (JSON).
    #[arg(long)]
    pub config: PathBuf,
    /// Run directory (default: $BIN_RUNS_DIR/<name>).
    #[arg(long)]
    pub run_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Run configuration (JSON).
    #[arg(long)]
    pub config: PathBuf,
    /// Comma-separated components to remove: y, cls, cyc, map.
    #[arg(long)]
    pub ablate: Option<String>,
    /// Continue from the latest checkpoint in the run directory.
    #[arg(long)]
    pub resume: bool,
    /// Run directory (default: $BIN_RUNS_DIR/<name>[-no_<ablations>]).
    #[arg(long)]
    pub run_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    /// Checkpoint directory.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// PNG file or dataset sample id.
    #[arg(long)]
    pub input: String,
    /// Class index or comma-separated probability vector.
    #[arg(long)]
    pub target: String,
    /// Second endpoint (class index or vector) for interpolation.
    #[arg(long)]
    pub interpolate: Option<String>,
    /// Number of interpolation steps, endpoints included.
    #[arg(long, default_value_t = 5)]
    pub steps: usize,
    /// Output directory.
    #[arg(long, default_value = "generated")]
    pub out: PathBuf,
    /// Dataset root override (for sample ids).
    #[arg(long)]
    pub data_root: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Checkpoint directory.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Run configuration (JSON).
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory (default: $BIN_RUNS_DIR/<name>).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Held-out (sample, random target) pairs for the flip-rate.
    #[arg(long, default_value_t = 1000)]
    pub flip_pairs: usize,
    /// Real and fake samples per class for FID (0 skips FID).
    #[arg(long, default_value_t = 1000)]
    pub fid_per_class: usize,
    /// Source samples per class for NCC (0 skips NCC).
    #[arg(long, default_value_t = 100)]
    pub ncc_per_class: usize,
    /// Seed for random targets.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    /// Checkpoint directory.
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, default_value = "127.0.0.1")]
    pub host: String,
    #[arg(long, default_value_t = 8080)]
    pub port: u16,
    /// Dataset root override.
    #[arg(long)]
    pub data_root: Option<PathBuf>,
    /// Largest accepted sample page or interpolation length.
    #[arg(long, default_value_t = 64)]
    pub max_batch: usize,
    /// Allowed CORS origin (repeatable; default any).
    #[arg(long = "cors-origin")]
    pub cors_origins: Vec<String>,
}

/// A failed command: message plus process exit code.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub message: String,
}

impl Failure {
    pub fn usage(message: impl Into<String>) -> Self {
        Self {
            code: 1,
            message: message.into(),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Gate { .. } => 2,
            Error::Diverged { .. } => 3,
            _ => 1,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Self::usage(format!("{e:#}"))
    }
}

pub type CmdResult = Result<(), Failure>;

pub fn run(cli: Cli) -> CmdResult {
    match cli.command {
        Command::TrainClassifier(a) => train_classifier(a),
        Command::Train(a) => train(a),
        Command::Generate(a) => generate(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Serve(a) => serve(a),
    }
}

fn load_config(path: &Path) -> Result<TrainConfig, Failure> {
    if !path.exists() {
        return Err(Failure::usage(format!("config file not found: {}", path.display())));
    }
    Ok(TrainConfig::load(path)?)
}

fn load_splits(cfg: &TrainConfig) -> Result<DatasetSplits, Failure> {
    Ok(load_dataset(&cfg.dataset, cfg.seed)?)
}

fn train_classifier(a: TrainClassifierArgs) -> CmdResult {
    let cfg = load_config(&a.config)?;
    let run = RunDir::new(a.run_dir.unwrap_or_else(|| runs_root().join(&cfg.name)));
    std::fs::create_dir_all(&run.root).map_err(Error::from)?;
    cfg.save(&run.config())?;
    let splits = load_splits(&cfg)?;
    match trainer::pretrain_tan(&cfg, &splits, Some(&run.root)) {
        Ok((model, report)) => {
            let path = trainer::save_classifier(&run.classifier(), &model, &report, &cfg)?;
            let test = if splits.test.is_empty() {
                None
            } else {
                Some(trainer::accuracy(&model, &splits.test)?)
            };
            println!(
                "classifier gate accuracy {:.4} ({} set); test accuracy {}",
                report.best_accuracy,
                report.gate_set,
                test.map_or("n/a".into(), |t| format!("{t:.4}"))
            );
            println!("checkpoint: {}", path.display());
            Ok(())
        }
        Err(Error::Gate { best, required }) => Err(Failure {
            code: 2,
            message: format!("accuracy gate not met: best {best:.4} < required {required:.4}"),
        }),
        Err(e) => Err(e.into()),
    }
}

fn resolve_classifier(cfg: &TrainConfig, config_path: &Path) -> Result<PathBuf, Failure> {
    if let Some(p) = &cfg.classifier_checkpoint {
        if p.is_relative() && !p.exists() {
            if let Some(dir) = config_path.parent() {
                let alt = dir.join(p);
                if alt.exists() {
                    return Ok(alt);
                }
            }
        }
        return Ok(p.clone());
    }
    let default = RunDir::new(runs_root().join(&cfg.name)).classifier();
    if default.join(checkpoint::MANIFEST).exists() {
        return Ok(default);
    }
    Err(Failure::usage(format!(
        "no classifier checkpoint: set `classifier_checkpoint` or run `train-classifier` first (looked in {})",
        default.display()
    )))
}

/// Run name suffix for an ablation set, e.g. `-no_cls_map`.
pub fn ablation_suffix(set: &std::collections::BTreeSet<Ablation>) -> String {
    if set.is_empty() {
        String::new()
    } else {
        format!("-no_{}", set.iter().map(|a| a.token()).collect::<Vec<_>>().join("_"))
    }
}

fn train(a: TrainArgs) -> CmdResult {
    let mut cfg = load_config(&a.config)?;
    if let Some(list) = &a.ablate {
        cfg.ablation = Ablation::parse_list(list)?;
    }
    let classifier = resolve_classifier(&cfg, &a.config)?;
    let name = format!("{}{}", cfg.name, ablation_suffix(&cfg.ablation));
    let run = RunDir::new(a.run_dir.unwrap_or_else(|| runs_root().join(&name)));
    cfg.name = name;
    cfg.classifier_checkpoint = Some(classifier.clone());
    let splits = load_splits(&cfg)?;
    let latest = a.resume.then(|| run.latest_checkpoint()).flatten();
    let mut t = match &latest {
        Some(ckpt) => {
            println!("resuming from {}", ckpt.display());
            Trainer::resume(cfg.clone(), ckpt, &splits.train)?
        }
        None => {
            let (model, manifest) = checkpoint::load_model(&classifier)?;
            if manifest.architecture != cfg.architecture.resolve()? {
                return Err(Failure::usage(format!(
                    "classifier checkpoint {} was trained with a different architecture",
                    classifier.display()
                )));
            }
            model.sync_cmg_encoder()?;
            Trainer::new(cfg.clone(), model, &splits.train)?
        }
    };
    t.attach_run_dir(&run.root)?;
    let total = cfg.epochs * t.steps_per_epoch();
    t.run(|r| {
        if r.step % 50 == 0 || r.step as usize == total {
            log::info!(
                "step {}/{total}: adv_d {:.4} adv_g {:.4} cyc {:.4} cls {:.4} map {:.4}",
                r.step,
                r.losses.adv_d,
                r.losses.adv_g,
                r.losses.cyc,
                r.losses.cls,
                r.losses.map
            );
        }
    })
    .map_err(|e| {
        let mut f = Failure::from(e);
        if f.code == 3 {
            if let Some(p) = run.latest_checkpoint() {
                f.message += &format!("; last good checkpoint: {}", p.display());
            }
        }
        f
    })?;
    println!("run directory: {}", run.root.display());
    if let Some(p) = run.latest_checkpoint() {
        println!("checkpoint: {}", p.display());
    }
    Ok(())
}

/// Parses `3` as a one-hot target and `0.2,0.8` as a probability vector.
pub fn parse_target(s: &str, k: usize) -> Result<TargetCondition, Failure> {
    let s = s.trim();
    if let Ok(c) = s.parse::<usize>() {
        return TargetCondition::one_hot(c, k).map_err(|e| Failure::usage(format!("--target: {e}")));
    }
    let v: Vec<f64> = s
        .split(',')
        .map(|t| t.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|e| Failure::usage(format!("target `{s}` is neither a class index nor a vector: {e}")))?;
    if v.len() != k {
        return Err(Failure::usage(format!(
            "target vector has {} entries, expected {k}",
            v.len()
        )));
    }
    TargetCondition::new(v).map_err(|e| Failure::usage(format!("target `{s}` is not a distribution: {e}")))
}

fn find_sample(splits: &DatasetSplits, id: &str) -> Option<Image> {
    [&splits.test, &splits.val, &splits.train]
        .into_iter()
        .find_map(|s| s.position_of(id).map(|p| s.image(p)))
}

fn load_input(
    model: &BinModel,
    manifest: &checkpoint::Manifest,
    input: &str,
    data_root: Option<&Path>,
) -> Result<(Image, String), Failure> {
    let stored = checkpoint::stored_config(manifest);
    let path = Path::new(input);
    if path.is_file() {
        let spec = model.input_shape();
        let shape = born_core::data::ImageShape::new(spec[1] as usize, spec[2] as usize, spec[0] as usize);
        let norm = stored
            .as_ref()
            .map_or(Normalization::MinMax, |c| c.dataset.normalization);
        let bytes = std::fs::read(path).map_err(Error::from)?;
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("input").to_string();
        return Ok((engine::image_from_png(&bytes, shape, norm)?, stem));
    }
    let mut cfg = stored.ok_or_else(|| {
        Failure::usage(format!(
            "`{input}` is not a file and the checkpoint has no dataset to look ids up in"
        ))
    })?;
    if let Some(r) = data_root {
        cfg.dataset.root = r.to_path_buf();
    }
    let splits = load_splits(&cfg)?;
    let img = find_sample(&splits, input).ok_or_else(|| Failure::usage(format!("unknown sample id `{input}`")))?;
    Ok((img, input.to_string()))
}

fn write_result(out: &Path, stem: &str, r: &CounterfactualResult) -> CmdResult {
    engine::export(out, stem, r)?;
    let logits = serde_json::json!({
        "source_id": r.map.source_id,
        "condition": r.map.condition,
        "logits_before": r.logits_before,
        "logits_after": r.logits_after,
        "argmax_before": r.logits_before.argmax(),
        "argmax_after": r.logits_after.argmax(),
        "map_stats": r.map_stats(),
    });
    std::fs::write(
        out.join(format!("{stem}.logits.json")),
        serde_json::to_vec_pretty(&logits).map_err(Error::from)?,
    )
    .map_err(Error::from)?;
    println!(
        "{stem}: prediction {} -> {} (target {}), map L1 {:.4}, L2 {:.4}",
        r.logits_before.argmax(),
        r.logits_after.argmax(),
        r.map.condition.argmax(),
        r.map_stats().l1,
        r.map_stats().l2
    );
    Ok(())
}

fn generate(a: GenerateArgs) -> CmdResult {
    let (model, manifest) = checkpoint::load_model(&a.checkpoint)?;
    let k = model.num_classes();
    let y = parse_target(&a.target, k)?;
    let y_b = a.interpolate.as_deref().map(|t| parse_target(t, k)).transpose()?;
    let (x, id) = load_input(&model, &manifest, &a.input, a.data_root.as_deref())?;
    let safe: String = id
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '-' || c == '_' {
                c
            } else {
                '_'
            }
        })
        .collect();
    match y_b {
        None => {
            let r = engine::generate(&model, &x, &id, &y)?;
            write_result(&a.out, &format!("{safe}-to-{}", y.argmax()), &r)
        }
        Some(y_b) => {
            if a.steps < 2 {
                return Err(Failure::usage("--steps must be at least 2"));
            }
            for (i, r) in engine::interpolate(&model, &x, &id, &y, &y_b, a.steps)?
                .iter()
                .enumerate()
            {
                write_result(&a.out, &format!("{safe}-interp-{i:03}"), r)?;
            }
            Ok(())
        }
    }
}

fn evaluate(a: EvaluateArgs) -> CmdResult {
    let cfg = load_config(&a.config)?;
    let (model, manifest) = checkpoint::load_model(&a.checkpoint)?;
    let splits = load_splits(&cfg)?;
    let names = cfg.dataset.class_names();
    let trained = manifest.stage == Stage::Bin;
    let mut opts = EvalOptions {
        flip_pairs: a.flip_pairs,
        fid_per_class: (a.fid_per_class > 0 && trained).then_some(a.fid_per_class),
        ncc_per_class: (a.ncc_per_class > 0 && trained).then_some(a.ncc_per_class),
        seed: a.seed,
        chunk: 100,
    };
    let is_shapes = cfg.dataset.kind == DatasetKind::Shapes3d;
    let archive = if is_shapes && !cfg.dataset.procedural && opts.ncc_per_class.is_some() {
        Some(read_archive(&cfg.dataset.root, cfg.dataset.image_shape)?)
    } else {
        None
    };
    let archive_lookup = archive
        .as_ref()
        .map(|ar| ArchiveLookup::new(ar, cfg.dataset.normalization));
    let renderer = Renderer {
        normalization: cfg.dataset.normalization,
    };
    let lookup: Option<&dyn LatentLookup> = match (&archive_lookup, is_shapes) {
        (Some(l), _) => Some(l),
        (None, true) => Some(&renderer),
        _ => None,
    };
    if splits.test.is_empty() {
        return Err(Failure::usage("the test split is empty"));
    }
    if !is_shapes {
        opts.ncc_per_class = opts.ncc_per_class.and(None);
    }
    let mut variant = evaluate_variant(
        &cfg.name,
        &cfg.ablation.iter().copied().collect::<Vec<_>>(),
        &model,
        &splits.test,
        &names,
        lookup,
        &opts,
    )?;
    if !trained {
        variant
            .notes
            .push("classifier-only checkpoint: ncc and fid skipped".into());
    } else if !is_shapes {
        variant
            .notes
            .push("ncc skipped: no ground-truth maps for this dataset".into());
    }
    let report = EvaluationReport {
        dataset: cfg.dataset.name.clone(),
        model_ref: a.checkpoint.display().to_string(),
        gt_provenance: (is_shapes && trained).then_some(GtProvenance::LatentSwap),
        variants: vec![variant],
    };
    let out = a.out.unwrap_or_else(|| runs_root().join(&cfg.name));
    let (json, csv) = report.write(&out)?;
    let v = &report.variants[0];
    println!("flip_rate {:.4} over {} pairs", v.flip_rate.unwrap_or(f64::NAN), v.n);
    if let (Some(p), Some(m)) = (v.ncc_plus, v.ncc_minus) {
        println!("ncc(+) {p:.4} ncc(-) {m:.4}");
    }
    if let Some(avg) = v.fid.as_ref().and_then(|f| f.avg) {
        println!("fid avg {avg:.4}");
    }
    for n in &v.notes {
        println!("note: {n}");
    }
    println!("wrote {} and {}", json.display(), csv.display());
    Ok(())
}

fn serve(a: ServeArgs) -> CmdResult {
    let cfg = ServiceConfig {
        host: a.host,
        port: a.port,
        checkpoint_path: a.checkpoint,
        dataset_path: a.data_root,
        max_batch: a.max_batch,
        cors_allowed_origins: a.cors_origins,
    };
    let rt = tokio::runtime::Runtime::new().map_err(Error::from)?;
    rt.block_on(service::serve(cfg))?;
    Ok(())
}
