//! Small models and finite-difference gradient checks, used by the test
//! suites and the acceptance runner.

use tch::{Kind, Tensor};

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{ArchitectureRef, Hyperparameters, TrainConfig};
use crate::data::{split_dataset, Dataset, DatasetDescriptor, DatasetKind, DatasetSplits, ImageShape, Normalization};
use crate::error::Result;
use crate::losses::{self, LossWeights, TermMask};
use crate::networks::{ArchitectureSpec, BinModel, ModelFlags, TargetCondition};

/// An 8×8 single-channel, 3-class architecture with every layer kind the
/// real presets use (batch norm, spectral norm, skips, upsampling, deconv).
pub fn tiny_spec() -> ArchitectureSpec {
    let spec = serde_json::json!({
        "name": "tiny",
        "input": [1, 8, 8],
        "num_classes": 3,
        "encoder": [
            {"op": "conv", "filters": 4, "kernel": [3, 3], "stride": [1, 1], "padding": "same", "norm": "batch", "activation": "relu"},
            {"op": "conv", "filters": 4, "kernel": [4, 4], "stride": [2, 2], "padding": "same", "norm": "batch", "activation": "relu", "tag": "enc1"},
            {"op": "conv", "filters": 6, "kernel": [4, 4], "stride": [2, 2], "padding": "same", "norm": "batch", "activation": "relu", "tag": "enc2"}
        ],
        "classifier": [
            {"op": "flatten"},
            {"op": "dense", "units": 8, "dropout": 0.5, "activation": "relu"},
            {"op": "dense", "units": 3, "activation": "softmax"}
        ],
        "generator": [
            {"op": "conv", "filters": 6, "kernel": [3, 3], "stride": [1, 1], "padding": "same", "norm": "batch", "activation": "relu"},
            {"op": "skip", "tag": "enc2"},
            {"op": "upsample", "scale": [2, 2]},
            {"op": "conv", "filters": 4, "kernel": [3, 3], "stride": [1, 1], "padding": "same", "norm": "batch", "activation": "relu"},
            {"op": "skip", "tag": "enc1"},
            {"op": "deconv", "filters": 1, "kernel": [4, 4], "stride": [2, 2], "padding": "same", "norm": "none", "activation": "tanh"}
        ],
        "discriminator": [
            {"op": "conv", "filters": 4, "kernel": [3, 3], "stride": [1, 1], "padding": "same", "norm": "spectral", "activation": "leaky_relu"},
            {"op": "conv", "filters": 4, "kernel": [4, 4], "stride": [2, 2], "padding": "same", "norm": "batch", "activation": "leaky_relu"},
            {"op": "flatten"},
            {"op": "dense", "units": 1, "activation": "linear"}
        ]
    });
    serde_json::from_value(spec).expect("tiny spec is well formed")
}

pub fn tiny_model(seed: u64, kind: Kind) -> Result<BinModel> {
    BinModel::new(tiny_spec(), ModelFlags::default(), seed, kind)
}

/// Descriptor of the synthetic data matching [`tiny_spec`].
pub fn tiny_descriptor() -> DatasetDescriptor {
    DatasetDescriptor {
        name: "tiny".into(),
        kind: DatasetKind::Mnist,
        root: "".into(),
        image_shape: ImageShape::new(8, 8, 1),
        num_classes: 3,
        normalization: Normalization::MinMax,
        split_ratios: Some([0.6, 0.2, 0.2]),
        subset: None,
        procedural: false,
    }
}

/// `n` noisy 8×8 images; class `c` brightens rows `2c..2c+2`.
pub fn tiny_splits(n: usize, seed: u64) -> Result<DatasetSplits> {
    let desc = tiny_descriptor();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pixels = Vec::with_capacity(n * 64);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % 3;
        for r in 0..8 {
            for _ in 0..8 {
                let base: u8 = if r / 2 == c { 180 } else { 20 };
                pixels.push(base.saturating_add(rng.random_range(0..60)));
            }
        }
        labels.push(c);
    }
    let ids = (0..n).map(|i| format!("tiny-{i:05}")).collect();
    split_dataset(Arc::new(Dataset::from_u8(desc, pixels, labels, ids, None)?), seed)
}

/// A run configuration for [`tiny_spec`] on [`tiny_splits`].
pub fn tiny_config() -> TrainConfig {
    let hp = Hyperparameters {
        epochs: 2,
        batch_size: 8,
        ..Hyperparameters::MNIST
    };
    let mut cfg = TrainConfig::from_hyperparameters("tiny", tiny_descriptor(), "mnist", hp);
    cfg.architecture = ArchitectureRef::Inline(Box::new(tiny_spec()));
    cfg.tan.batch_size = 8;
    cfg.tan.max_epochs = 2;
    cfg.tan.gate = 0.0;
    cfg.seed = 5;
    cfg
}

/// Adds N(0, scale²) noise to every trainable tensor. Fresh models have
/// zero biases, which puts ReLU inputs exactly on the kink where the
/// subgradient and a central difference legitimately disagree.
pub fn jitter(model: &BinModel, scale: f64, seed: i64) {
    tch::manual_seed(seed);
    tch::no_grad(|| {
        for store in [&model.tan, &model.gen, &model.disc] {
            for p in store.iter().filter(|p| p.trainable) {
                let noise = p.tensor.randn_like() * scale;
                let _ = p.tensor.shallow_clone().g_add_(&noise);
            }
        }
    });
}

/// Runs train-mode passes so batch-norm running statistics match `x`;
/// with the initial (0, 1) statistics most inference-mode activations of a
/// fresh model are dead.
pub fn calibrate(model: &BinModel, x: &Tensor, y: &Tensor) -> Result<()> {
    tch::no_grad(|| {
        for _ in 0..60 {
            let _ = model.encode(x, true)?;
            let m = model.generate_map(&model.encode_for_generator(x, true)?, y, true)?;
            let _ = model.discriminate(&(x + m), true)?;
            let _ = model.discriminate(x, true)?;
        }
        Ok(())
    })
}

/// Deterministic inputs for a tiny model: images in [0, 1) and random
/// one-hot targets.
pub fn tiny_batch(model: &BinModel, b: i64, seed: i64) -> (Tensor, Tensor) {
    tch::manual_seed(seed);
    let mut shape = vec![b];
    shape.extend_from_slice(model.input_shape());
    let x = Tensor::rand(shape.as_slice(), (model.kind, tch::Device::Cpu));
    let k = model.num_classes();
    let targets: Vec<TargetCondition> = (0..b as usize)
        .map(|i| TargetCondition::one_hot((i * 7 + seed as usize) % k, k).expect("in range"))
        .collect();
    (x, TargetCondition::batch_tensor(&targets, model.kind))
}

/// Generator objective with every network in inference mode, so repeated
/// evaluation is a pure function of the parameters.
pub fn generator_objective(model: &BinModel, x: &Tensor, y: &Tensor, w: &LossWeights) -> Result<Tensor> {
    let y_back = tch::no_grad(|| model.classify(x))?.detach();
    let feats = model.encode_for_generator(x, false)?;
    let m = model.generate_map(&feats, y, false)?;
    let x_tilde = x + &m;
    let adv_g = losses::adv_g_loss(&model.discriminate(&x_tilde, false)?)?;
    let back = model.generate_map(&model.encode_for_generator(&x_tilde, false)?, &y_back, false)?;
    let cyc = losses::cycle_loss(x, &(&x_tilde + back))?;
    let z = model.encode(&x_tilde, false)?;
    let p = model
        .classifier_head(&z.bottleneck, false, None)?
        .logits
        .softmax(-1, model.kind);
    let cls = losses::cls_loss(y, &p)?;
    let map = losses::map_loss(&m, w.l1, w.l2)?;
    Ok(losses::generator_objective(
        &adv_g,
        &cyc,
        &cls,
        &map,
        w,
        TermMask::default(),
    ))
}

/// Discriminator loss in inference mode.
pub fn discriminator_objective(model: &BinModel, x: &Tensor, y: &Tensor, w: &LossWeights) -> Result<Tensor> {
    let m = tch::no_grad(|| -> Result<Tensor> {
        let feats = model.encode_for_generator(x, false)?;
        model.generate_map(&feats, y, false)
    })?;
    let fake = (x + m).detach();
    Ok(losses::adv_d_loss(
        &model.discriminate(x, false)?,
        &model.discriminate(&fake, false)?,
        w.label_smoothing,
    )? * w.l3)
}

/// Outcome of a gradient check.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    pub checked: usize,
    pub max_rel_err: f64,
}

/// Relative error with an absolute floor so near-zero gradients compare on
/// an absolute scale.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

fn flat_get(t: &Tensor, i: i64) -> f64 {
    t.view([-1]).get(i).double_value(&[])
}

fn flat_set(t: &Tensor, i: i64, v: f64) {
    tch::no_grad(|| {
        let _ = t.view([-1]).get(i).fill_(v);
    });
}

/// Central differences on `per_tensor` evenly spaced coordinates of each
/// tensor, against the autograd gradient of `f`.
pub fn check_params(params: &[Tensor], per_tensor: i64, eps: f64, f: impl Fn() -> Result<Tensor>) -> Result<GradCheck> {
    for p in params {
        p.shallow_clone().zero_grad();
    }
    f()?.backward();
    let grads: Vec<Tensor> = params.iter().map(|p| p.grad().copy()).collect();
    let mut out = GradCheck {
        checked: 0,
        max_rel_err: 0.0,
    };
    for (p, g) in params.iter().zip(&grads) {
        let n = p.numel() as i64;
        let count = per_tensor.min(n);
        for j in 0..count {
            let i = j * n / count;
            let orig = flat_get(p, i);
            flat_set(p, i, orig + eps);
            let up = f()?.double_value(&[]);
            flat_set(p, i, orig - eps);
            let down = f()?.double_value(&[]);
            flat_set(p, i, orig);
            let numeric = (up - down) / (2.0 * eps);
            out.max_rel_err = out.max_rel_err.max(rel_err(flat_get(g, i), numeric));
            out.checked += 1;
        }
    }
    Ok(out)
}

/// Gradient check of a scalar function of one input tensor.
pub fn check_input(x: &Tensor, eps: f64, f: impl Fn(&Tensor) -> Result<Tensor>) -> Result<GradCheck> {
    let x = x.detach().set_requires_grad(true);
    check_params(std::slice::from_ref(&x), i64::MAX, eps, || f(&x))
}

/// Gradient checks of the whole generator and discriminator objectives on a
/// double-precision tiny model.
pub fn model_gradcheck(seed: u64) -> Result<(GradCheck, GradCheck)> {
    let model = tiny_model(seed, Kind::Double)?;
    jitter(&model, 0.1, seed as i64);
    let (x, y) = tiny_batch(&model, 3, seed as i64);
    calibrate(&model, &x, &y)?;
    let w = LossWeights {
        l1: 0.01,
        l2: 0.05,
        l3: 1.0,
        l4: 1.0,
        l5: 1.0,
        l6: 1.0,
        label_smoothing: 0.1,
    };
    let gen = model.generator_trainables();
    model.disc.set_requires_grad(false);
    let g = check_params(&gen, 6, 1e-6, || generator_objective(&model, &x, &y, &w))?;
    model.disc.set_requires_grad(true);
    let disc = model.disc.trainable();
    let d = check_params(&disc, 6, 1e-6, || discriminator_objective(&model, &x, &y, &w))?;
    Ok((g, d))
}

/// Gradient checks of each loss op with respect to its inputs.
pub fn loss_gradcheck(seed: i64) -> Result<Vec<(&'static str, GradCheck)>> {
    tch::manual_seed(seed);
    let opts = (Kind::Double, tch::Device::Cpu);
    let a = Tensor::randn([4], opts);
    let b = Tensor::randn([4], opts);
    let x = Tensor::rand([2, 1, 3, 3], opts);
    let xc = Tensor::rand([2, 1, 3, 3], opts);
    let m = Tensor::randn([2, 1, 3, 3], opts);
    let y = Tensor::from_slice(&[0.0, 1.0, 0.0, 0.2, 0.3, 0.5])
        .view([2, 3])
        .to_kind(Kind::Double);
    let logits = Tensor::randn([2, 3], opts);
    Ok(vec![
        ("adv_d", check_input(&a, 1e-6, |t| losses::adv_d_loss(t, &b, 0.1))?),
        ("adv_d_fake", check_input(&b, 1e-6, |t| losses::adv_d_loss(&a, t, 0.0))?),
        ("adv_g", check_input(&b, 1e-6, losses::adv_g_loss)?),
        ("cyc", check_input(&xc, 1e-6, |t| losses::cycle_loss(&x, t))?),
        (
            "cls",
            check_input(&logits, 1e-6, |t| losses::cls_loss(&y, &t.softmax(-1, Kind::Double)))?,
        ),
        ("map", check_input(&m, 1e-6, |t| losses::map_loss(t, 1.0, 0.5))?),
    ])
}
