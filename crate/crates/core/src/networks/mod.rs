//! Encoder, conditioned map generator, discriminator and classifier head.

pub mod arch;
pub mod layers;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tch::{Device, Kind, Tensor};

pub use self::arch::{ArchitectureSpec, Layer};
use self::layers::{Ctx, Net, ParamStore};
use crate::error::{Error, Result};

/// A probability vector over classes used to condition the generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TargetCondition {
    probs: Vec<f64>,
}

impl TargetCondition {
    pub const SUM_TOL: f64 = 1e-6;

    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::Condition("empty condition".into()));
        }
        if let Some(v) = probs.iter().find(|v| !v.is_finite() || **v < 0.0) {
            return Err(Error::Condition(format!("entry {v} is negative or not finite")));
        }
        let s: f64 = probs.iter().sum();
        if (s - 1.0).abs() > Self::SUM_TOL {
            return Err(Error::Condition(format!("entries sum to {s}, expected 1")));
        }
        Ok(Self { probs })
    }

    pub fn one_hot(class: usize, k: usize) -> Result<Self> {
        if class >= k {
            return Err(Error::Condition(format!("class {class} out of range for K={k}")));
        }
        let mut p = vec![0.0; k];
        p[class] = 1.0;
        Ok(Self { probs: p })
    }

    pub fn uniform(k: usize) -> Self {
        Self {
            probs: vec![1.0 / k as f64; k],
        }
    }

    /// `(1 − α)·a + α·b`.
    pub fn lerp(a: &Self, b: &Self, alpha: f64) -> Result<Self> {
        if a.len() != b.len() {
            return Err(Error::Condition(format!("length {} vs {}", a.len(), b.len())));
        }
        if alpha == 0.0 {
            return Ok(a.clone());
        }
        if alpha == 1.0 {
            return Ok(b.clone());
        }
        Self::new(
            a.probs
                .iter()
                .zip(&b.probs)
                .map(|(x, y)| (1.0 - alpha) * x + alpha * y)
                .collect(),
        )
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn argmax(&self) -> usize {
        argmax(&self.probs)
    }

    /// Stacks conditions into a `(B, K)` tensor.
    pub fn batch_tensor(conds: &[TargetCondition], kind: Kind) -> Tensor {
        let k = conds.first().map_or(0, |c| c.len()) as i64;
        let flat: Vec<f64> = conds.iter().flat_map(|c| c.probs.iter().copied()).collect();
        Tensor::from_slice(&flat).view([conds.len() as i64, k]).to_kind(kind)
    }

    /// Rows of a `(B, K)` posterior tensor.
    pub fn from_rows(t: &Tensor) -> Vec<TargetCondition> {
        let t = t.to_kind(Kind::Double).contiguous();
        let k = t.size()[1] as usize;
        let v: Vec<f64> = Vec::<f64>::try_from(t.flatten(0, -1)).expect("double tensor");
        v.chunks(k).map(|r| TargetCondition { probs: r.to_vec() }).collect()
    }
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .fold(
            (0, f64::NEG_INFINITY),
            |(bi, bv), (i, &x)| if x > bv { (i, x) } else { (bi, bv) },
        )
        .0
}

/// Condition vector repeated at every spatial site, laid out `h × w × K`.
pub fn tile_condition(y: &TargetCondition, h: usize, w: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(h * w * y.len());
    for _ in 0..h * w {
        out.extend_from_slice(y.probs());
    }
    out
}

/// Encoder output: bottleneck `z` and the tagged skip activations.
#[derive(Debug)]
pub struct FeatureStack {
    pub bottleneck: Tensor,
    pub skips: Vec<(String, Tensor)>,
}

impl FeatureStack {
    pub fn skip_shapes(&self) -> Vec<(String, Vec<i64>)> {
        self.skips
            .iter()
            .map(|(n, t)| (n.clone(), t.size()[1..].to_vec()))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelFlags {
    pub encoder_frozen: bool,
    pub encoder_shared: bool,
}

impl Default for ModelFlags {
    fn default() -> Self {
        Self {
            encoder_frozen: true,
            encoder_shared: true,
        }
    }
}

/// All networks of one model. The classifier (encoder + head) lives in
/// `tan`, the generator (with its skip fusions) in `gen`, the discriminator
/// in `disc`. With `encoder_shared` the map generator reads features from the
/// classifier's encoder storage; otherwise it owns a copy in `gen`.
pub struct BinModel {
    pub spec: ArchitectureSpec,
    pub flags: ModelFlags,
    pub kind: Kind,
    pub tan: ParamStore,
    pub gen: ParamStore,
    pub disc: ParamStore,
    encoder: Net,
    classifier: Net,
    generator: Net,
    discriminator: Net,
    cmg_encoder: Option<Net>,
}

impl std::fmt::Debug for BinModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("BinModel")
            .field("spec", &self.spec.name)
            .field("flags", &self.flags)
            .field("tan", &self.tan.len())
            .field("gen", &self.gen.len())
            .field("disc", &self.disc.len())
            .finish()
    }
}

/// Classifier forward output.
pub struct ClassifierOutput {
    pub logits: Tensor,
    /// Input to the final dense layer.
    pub features: Tensor,
}

impl BinModel {
    pub fn new(spec: ArchitectureSpec, flags: ModelFlags, seed: u64, kind: Kind) -> Result<Self> {
        let report = spec.check()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = spec.num_classes;
        let mut tan = ParamStore::new();
        let mut gen = ParamStore::new();
        let mut disc = ParamStore::new();
        let encoder = Net::build(&spec.encoder, &spec.input, &[], k, "encoder", &mut tan, &mut rng, kind)?;
        let classifier = Net::build(
            &spec.classifier,
            &report.bottleneck,
            &[],
            k,
            "classifier",
            &mut tan,
            &mut rng,
            kind,
        )?;
        let generator = Net::build(
            &spec.generator,
            &report.bottleneck,
            &report.skips,
            k,
            "generator",
            &mut gen,
            &mut rng,
            kind,
        )?;
        let discriminator = Net::build(
            &spec.discriminator,
            &spec.input,
            &[],
            k,
            "discriminator",
            &mut disc,
            &mut rng,
            kind,
        )?;
        let cmg_encoder = if flags.encoder_shared {
            None
        } else {
            Some(Net::build(
                &spec.encoder,
                &spec.input,
                &[],
                k,
                "cmg_encoder",
                &mut gen,
                &mut rng,
                kind,
            )?)
        };
        Ok(Self {
            spec,
            flags,
            kind,
            tan,
            gen,
            disc,
            encoder,
            classifier,
            generator,
            discriminator,
            cmg_encoder,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.spec.num_classes as usize
    }

    pub fn input_shape(&self) -> &[i64] {
        &self.spec.input
    }

    /// Copies the classifier encoder into the generator-owned encoder (no-op
    /// when the encoder is shared).
    pub fn sync_cmg_encoder(&self) -> Result<()> {
        if self.cmg_encoder.is_none() {
            return Ok(());
        }
        for p in self.gen.iter().filter(|p| p.name.starts_with("cmg_encoder.")) {
            let src_name = p.name.replacen("cmg_encoder.", "encoder.", 1);
            let src = self.tan.get(&src_name).ok_or_else(|| Error::Lookup(src_name.clone()))?;
            tch::no_grad(|| p.tensor.shallow_clone().copy_(src));
        }
        Ok(())
    }

    /// Parameters the generator optimizer updates.
    pub fn generator_trainables(&self) -> Vec<Tensor> {
        let own: Vec<Tensor> = self
            .gen
            .iter()
            .filter(|p| p.trainable && (!p.name.starts_with("cmg_encoder.") || !self.flags.encoder_frozen))
            .map(|p| p.tensor.shallow_clone())
            .collect();
        if self.flags.encoder_shared && !self.flags.encoder_frozen {
            let mut all = own;
            all.extend(
                self.tan
                    .iter()
                    .filter(|p| p.trainable && p.name.starts_with("encoder."))
                    .map(|p| p.tensor.shallow_clone()),
            );
            all
        } else {
            own
        }
    }

    pub fn to_input(&self, x: &Tensor) -> Tensor {
        x.to_kind(self.kind)
    }

    /// Classifier-encoder features. `train` selects batch statistics.
    pub fn encode(&self, x: &Tensor, train: bool) -> Result<FeatureStack> {
        run_encoder(&self.encoder, x, train)
    }

    /// Features as seen by the map generator.
    pub fn encode_for_generator(&self, x: &Tensor, train: bool) -> Result<FeatureStack> {
        match &self.cmg_encoder {
            Some(e) => run_encoder(e, x, train),
            None => run_encoder(&self.encoder, x, train && !self.flags.encoder_frozen),
        }
    }

    fn check_condition(&self, y: &Tensor, batch: i64) -> Result<()> {
        let s = y.size();
        if s.len() != 2 || s[1] != self.spec.num_classes || s[0] != batch {
            return Err(Error::Condition(format!(
                "condition tensor {s:?} does not match batch {batch} × K={}",
                self.spec.num_classes
            )));
        }
        Ok(())
    }

    /// `M = G(E(x), y)` for a `(B, K)` condition.
    pub fn generate_map(&self, features: &FeatureStack, y: &Tensor, train: bool) -> Result<Tensor> {
        let b = features.bottleneck.size()[0];
        self.check_condition(y, b)?;
        let y = y.to_kind(self.kind);
        let mut ctx = Ctx {
            train,
            rng: None,
            condition: Some(&y),
            skips: &features.skips,
        };
        Ok(self.generator.forward(&features.bottleneck, &mut ctx, false)?.out)
    }

    /// Raw discriminator scores, shape `(B,)`.
    pub fn discriminate(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let mut ctx = Ctx {
            train,
            rng: None,
            condition: None,
            skips: &[],
        };
        Ok(self.discriminator.forward(x, &mut ctx, false)?.out.view([-1]))
    }

    /// Classifier head on a bottleneck; dropout draws from `rng` when training.
    pub fn classifier_head(&self, z: &Tensor, train: bool, rng: Option<&mut ChaCha8Rng>) -> Result<ClassifierOutput> {
        let mut ctx = Ctx {
            train,
            rng,
            condition: None,
            skips: &[],
        };
        let out = self.classifier.forward(z, &mut ctx, true)?;
        Ok(ClassifierOutput {
            logits: out.out,
            features: out.penultimate.expect("classifier has layers"),
        })
    }

    /// Softmax posterior `F(x)` in inference mode, shape `(B, K)`.
    pub fn classify(&self, x: &Tensor) -> Result<Tensor> {
        let f = self.encode(x, false)?;
        Ok(self
            .classifier_head(&f.bottleneck, false, None)?
            .logits
            .softmax(-1, self.kind))
    }

    /// Penultimate classifier features in inference mode.
    pub fn embed(&self, x: &Tensor) -> Result<Tensor> {
        let f = self.encode(x, false)?;
        Ok(self.classifier_head(&f.bottleneck, false, None)?.features)
    }

    /// Makes the generator emit an all-zero map (used by tests and baselines).
    pub fn zero_generator_output(&self) {
        self.generator.zero_final_layer();
    }

    /// Freezes or unfreezes gradient tracking on the classifier parameters.
    pub fn set_tan_trainable(&self, on: bool) {
        self.tan.set_requires_grad(on);
    }

    pub fn device(&self) -> Device {
        Device::Cpu
    }
}

fn run_encoder(net: &Net, x: &Tensor, train: bool) -> Result<FeatureStack> {
    let out = net.forward(
        x,
        &mut Ctx {
            train,
            rng: None,
            condition: None,
            skips: &[],
        },
        false,
    )?;
    Ok(FeatureStack {
        bottleneck: out.out,
        skips: out.tagged,
    })
}
