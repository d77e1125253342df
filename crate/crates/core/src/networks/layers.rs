//! Builds tch parameters from an [`ArchitectureSpec`] layer list and runs them.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use tch::{Kind, Tensor};

use super::arch::{same_pads, Activation, Layer, Norm, Padding, Shape};
use crate::error::{Error, Result};

const BN_MOMENTUM: f64 = 0.1;
const BN_EPS: f64 = 1e-5;
const LEAKY_SLOPE: f64 = 0.2;
const INIT_STD: f64 = 0.02;

/// A named tensor owned by a model. Buffers (batch-norm statistics, power
/// iteration vectors) are stored with `trainable = false`.
#[derive(Debug)]
pub struct Param {
    pub name: String,
    pub tensor: Tensor,
    pub trainable: bool,
}

/// Ordered parameter registry. Order is creation order and is stable.
#[derive(Debug, Default)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    fn add(&mut self, name: String, tensor: Tensor, trainable: bool) -> Tensor {
        let t = if trainable {
            tensor.set_requires_grad(true)
        } else {
            tensor
        };
        self.params.push(Param {
            name,
            tensor: t.shallow_clone(),
            trainable,
        });
        t
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn trainable(&self) -> Vec<Tensor> {
        self.params
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.tensor.shallow_clone())
            .collect()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.iter().find(|p| p.name == name).map(|p| &p.tensor)
    }

    pub fn set_requires_grad(&self, on: bool) {
        for p in self.params.iter().filter(|p| p.trainable) {
            let _ = p.tensor.shallow_clone().set_requires_grad(on);
        }
    }

    pub fn zero_grad(&self) {
        for p in self.params.iter().filter(|p| p.trainable) {
            let mut g = p.tensor.grad();
            if g.defined() {
                let _ = g.detach_().zero_();
            }
        }
    }

    /// Copies values from `other` (same names and shapes) without sharing storage.
    pub fn copy_from(&self, other: &ParamStore) -> Result<()> {
        for (dst, src) in self.params.iter().zip(&other.params) {
            if dst.name != src.name || dst.tensor.size() != src.tensor.size() {
                return Err(Error::Shape {
                    expected: dst.tensor.size(),
                    actual: src.tensor.size(),
                });
            }
            tch::no_grad(|| dst.tensor.shallow_clone().copy_(&src.tensor));
        }
        Ok(())
    }

    /// Sum of squared differences to another store, over trainable tensors.
    pub fn distance_sq(&self, other: &ParamStore) -> f64 {
        self.params
            .iter()
            .zip(&other.params)
            .filter(|(a, _)| a.trainable)
            .map(|(a, b)| (&a.tensor - &b.tensor).square().sum(Kind::Double).double_value(&[]))
            .sum()
    }

    /// Deep copy with fresh storage.
    pub fn snapshot(&self) -> ParamStore {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    tensor: p.tensor.detach().copy(),
                    trainable: p.trainable,
                })
                .collect(),
        }
    }
}

fn trunc_normal(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let mut v = Vec::with_capacity(n);
    while v.len() < n {
        let z: f64 = rng.sample(StandardNormal);
        if z.abs() <= 2.0 {
            v.push(z * INIT_STD);
        }
    }
    v
}

fn init_tensor(values: Vec<f64>, dims: &[i64], kind: Kind) -> Tensor {
    Tensor::from_slice(&values).view(dims).to_kind(kind)
}

#[derive(Debug)]
enum NormOp {
    None,
    Batch {
        gamma: Tensor,
        beta: Tensor,
        mean: Tensor,
        var: Tensor,
    },
    Spectral {
        u: Tensor,
    },
}

#[derive(Debug)]
struct ConvOp {
    weight: Tensor,
    bias: Option<Tensor>,
    stride: Vec<i64>,
    /// (before, after) padding per spatial axis; for deconvolutions this is
    /// the crop applied to the raw transposed-convolution output.
    pads: Vec<(i64, i64)>,
    transposed: bool,
    norm: NormOp,
    act: Activation,
    tag: Option<String>,
}

#[derive(Debug)]
enum Op {
    Conv(ConvOp),
    Upsample(Vec<i64>),
    MaxPool(Vec<i64>, Vec<i64>),
    Skip {
        tag: String,
        fuse: ConvOp,
    },
    Flatten,
    Dense {
        weight: Tensor,
        bias: Tensor,
        dropout: f64,
        act: Activation,
    },
    GlobalAvgPool,
}

/// Per-call options and side inputs.
pub struct Ctx<'a> {
    pub train: bool,
    /// Dropout mask source; dropout is skipped when absent.
    pub rng: Option<&'a mut ChaCha8Rng>,
    /// `(B, K)` condition for skip fusion.
    pub condition: Option<&'a Tensor>,
    pub skips: &'a [(String, Tensor)],
}

impl<'a> Ctx<'a> {
    pub fn eval() -> Ctx<'static> {
        Ctx {
            train: false,
            rng: None,
            condition: None,
            skips: &[],
        }
    }

    pub fn train() -> Ctx<'static> {
        Ctx {
            train: true,
            rng: None,
            condition: None,
            skips: &[],
        }
    }
}

pub struct Output {
    pub out: Tensor,
    /// Tagged activations in layer order.
    pub tagged: Vec<(String, Tensor)>,
    /// Input to the last layer (for feature extraction).
    pub penultimate: Option<Tensor>,
}

#[derive(Debug)]
pub struct Net {
    ops: Vec<Op>,
    input: Shape,
}

struct Builder<'s> {
    store: &'s mut ParamStore,
    rng: &'s mut ChaCha8Rng,
    kind: Kind,
}

impl Builder<'_> {
    fn norm(&mut self, prefix: &str, norm: Norm, channels: i64, weight: &Tensor) -> NormOp {
        match norm {
            Norm::None => NormOp::None,
            Norm::Batch => NormOp::Batch {
                gamma: self.store.add(
                    format!("{prefix}.bn.gamma"),
                    Tensor::ones([channels], (self.kind, tch::Device::Cpu)),
                    true,
                ),
                beta: self.store.add(
                    format!("{prefix}.bn.beta"),
                    Tensor::zeros([channels], (self.kind, tch::Device::Cpu)),
                    true,
                ),
                mean: self.store.add(
                    format!("{prefix}.bn.running_mean"),
                    Tensor::zeros([channels], (self.kind, tch::Device::Cpu)),
                    false,
                ),
                var: self.store.add(
                    format!("{prefix}.bn.running_var"),
                    Tensor::ones([channels], (self.kind, tch::Device::Cpu)),
                    false,
                ),
            },
            Norm::Spectral => {
                let rows = weight.size()[0];
                let u: Vec<f64> = (0..rows).map(|_| self.rng.sample(StandardNormal)).collect();
                let u = init_tensor(u, &[rows], self.kind);
                let u = &u / u.norm();
                NormOp::Spectral {
                    u: self.store.add(format!("{prefix}.sn.u"), u, false),
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn conv(
        &mut self,
        prefix: &str,
        in_ch: i64,
        shape: &Shape,
        filters: i64,
        kernel: &[i64],
        stride: &[i64],
        padding: Padding,
        transposed: bool,
        norm: Norm,
        act: Activation,
        tag: Option<String>,
    ) -> Result<ConvOp> {
        let mut dims = if transposed {
            vec![in_ch, filters]
        } else {
            vec![filters, in_ch]
        };
        dims.extend_from_slice(kernel);
        let n: i64 = dims.iter().product();
        let weight = init_tensor(trunc_normal(self.rng, n as usize), &dims, self.kind);
        let weight = self.store.add(format!("{prefix}.weight"), weight, true);
        let bias = (norm != Norm::Batch).then(|| {
            self.store.add(
                format!("{prefix}.bias"),
                Tensor::zeros([filters], (self.kind, tch::Device::Cpu)),
                true,
            )
        });
        let mut pads = Vec::with_capacity(kernel.len());
        for (i, (&k, &s)) in kernel.iter().zip(stride).enumerate() {
            pads.push(match (padding, transposed) {
                (Padding::Valid, _) => (0, 0),
                (Padding::Same, false) => {
                    let (_, a, b) = same_pads(shape[i + 1], k, s);
                    (a, b)
                }
                (Padding::Same, true) => {
                    if k < s {
                        return Err(Error::Config(format!("same deconv needs kernel >= stride ({k} < {s})")));
                    }
                    let total = k - s;
                    (total / 2, total - total / 2)
                }
            });
        }
        let norm = self.norm(prefix, norm, filters, &weight);
        Ok(ConvOp {
            weight,
            bias,
            stride: stride.to_vec(),
            pads,
            transposed,
            norm,
            act,
            tag,
        })
    }
}

impl Net {
    /// Creates the parameters for `layers` in `store` under `prefix`.
    pub fn build(
        layers: &[Layer],
        input: &Shape,
        skip_shapes: &[(String, Shape)],
        num_classes: i64,
        prefix: &str,
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        kind: Kind,
    ) -> Result<Net> {
        let lookup = |t: &str| skip_shapes.iter().find(|(n, _)| n == t).map(|(_, s)| s.clone());
        let mut b = Builder { store, rng, kind };
        let mut shape = input.clone();
        let mut ops = Vec::with_capacity(layers.len());
        for (i, layer) in layers.iter().enumerate() {
            let name = format!("{prefix}.{i}");
            let next = super::arch::layer_output(layer, &shape, &lookup)?;
            let op = match layer {
                Layer::Conv {
                    filters,
                    kernel,
                    stride,
                    padding,
                    norm,
                    activation,
                    tag,
                } => Op::Conv(b.conv(
                    &name,
                    shape[0],
                    &shape,
                    *filters,
                    kernel,
                    stride,
                    *padding,
                    false,
                    *norm,
                    *activation,
                    tag.clone(),
                )?),
                Layer::Deconv {
                    filters,
                    kernel,
                    stride,
                    padding,
                    norm,
                    activation,
                } => Op::Conv(b.conv(
                    &name,
                    shape[0],
                    &shape,
                    *filters,
                    kernel,
                    stride,
                    *padding,
                    true,
                    *norm,
                    *activation,
                    None,
                )?),
                Layer::Upsample { scale } => Op::Upsample(scale.clone()),
                Layer::MaxPool { kernel, stride } => Op::MaxPool(kernel.clone(), stride.clone()),
                Layer::Skip { tag } => {
                    let s = lookup(tag).expect("checked by layer_output");
                    let rank = s.len() - 1;
                    let fuse = b.conv(
                        &format!("{name}.fuse"),
                        s[0] + num_classes,
                        &s,
                        shape[0],
                        &vec![3; rank],
                        &vec![1; rank],
                        Padding::Same,
                        false,
                        Norm::None,
                        Activation::Relu,
                        None,
                    )?;
                    Op::Skip { tag: tag.clone(), fuse }
                }
                Layer::Flatten => Op::Flatten,
                Layer::Dense {
                    units,
                    dropout,
                    activation,
                } => {
                    let w = init_tensor(
                        trunc_normal(b.rng, (units * shape[0]) as usize),
                        &[*units, shape[0]],
                        kind,
                    );
                    Op::Dense {
                        weight: b.store.add(format!("{name}.weight"), w, true),
                        bias: b.store.add(
                            format!("{name}.bias"),
                            Tensor::zeros([*units], (kind, tch::Device::Cpu)),
                            true,
                        ),
                        dropout: *dropout,
                        act: *activation,
                    }
                }
                Layer::GlobalAvgPool => Op::GlobalAvgPool,
            };
            ops.push(op);
            shape = next;
        }
        Ok(Net {
            ops,
            input: input.clone(),
        })
    }

    pub fn input_shape(&self) -> &Shape {
        &self.input
    }

    /// Runs the stack. Softmax on the final layer is skipped when
    /// `final_logits` is set.
    pub fn forward(&self, x: &Tensor, ctx: &mut Ctx, final_logits: bool) -> Result<Output> {
        let size = x.size();
        if size.len() != self.input.len() + 1 || size[1..] != self.input[..] {
            return Err(Error::Shape {
                expected: self.input.clone(),
                actual: size.get(1..).map(|s| s.to_vec()).unwrap_or_default(),
            });
        }
        let mut h = x.shallow_clone();
        let mut tagged = Vec::new();
        let mut penultimate = None;
        let last = self.ops.len().saturating_sub(1);
        for (i, op) in self.ops.iter().enumerate() {
            if i == last {
                penultimate = Some(h.shallow_clone());
            }
            let skip_act = final_logits && i == last;
            h = match op {
                Op::Conv(c) => {
                    let y = conv_forward(c, &h, ctx.train, skip_act);
                    if let Some(t) = &c.tag {
                        tagged.push((t.clone(), y.shallow_clone()));
                    }
                    y
                }
                Op::Upsample(scale) => {
                    let mut y = h;
                    for (d, &s) in scale.iter().enumerate() {
                        if s != 1 {
                            y = y.repeat_interleave_self_int(s, (d + 2) as i64, None);
                        }
                    }
                    y
                }
                Op::MaxPool(k, s) => match k.len() {
                    2 => h.max_pool2d(k.as_slice(), s.as_slice(), [0, 0], [1, 1], false),
                    3 => h.max_pool3d(k.as_slice(), s.as_slice(), [0, 0, 0], [1, 1, 1], false),
                    r => return Err(Error::Config(format!("unsupported pool rank {r}"))),
                },
                Op::Skip { tag, fuse } => {
                    let s = ctx
                        .skips
                        .iter()
                        .find(|(n, _)| n == tag)
                        .map(|(_, t)| t)
                        .ok_or_else(|| Error::Contract(format!("missing skip activation `{tag}`")))?;
                    let y = ctx
                        .condition
                        .ok_or_else(|| Error::Condition("generator called without a condition".into()))?;
                    let tiled = tile(y, &s.size()[2..]);
                    let fused = conv_forward(fuse, &Tensor::cat(&[s, &tiled], 1), ctx.train, false);
                    Tensor::cat(&[&h, &fused], 1)
                }
                Op::Flatten => h.flatten(1, -1),
                Op::Dense {
                    weight,
                    bias,
                    dropout,
                    act,
                } => {
                    let mut inp = h;
                    if ctx.train && *dropout > 0.0 {
                        if let Some(rng) = ctx.rng.as_deref_mut() {
                            inp = &inp * dropout_mask(rng, &inp.size(), *dropout, inp.kind());
                        }
                    }
                    let y = inp.linear(weight, Some(bias));
                    if skip_act {
                        y
                    } else {
                        activate(y, *act)
                    }
                }
                Op::GlobalAvgPool => {
                    let dims: Vec<i64> = (2..h.dim() as i64).collect();
                    h.mean_dim(dims.as_slice(), false, h.kind())
                }
            };
        }
        Ok(Output {
            out: h,
            tagged,
            penultimate,
        })
    }

    /// Zeroes the last convolution or dense layer's weights, bias and
    /// batch-norm affine parameters so the stack emits `act(0)`.
    pub fn zero_final_layer(&self) {
        let zero = |t: &Tensor| {
            tch::no_grad(|| {
                let _ = t.shallow_clone().zero_();
            })
        };
        match self
            .ops
            .iter()
            .rev()
            .find(|o| matches!(o, Op::Conv(_) | Op::Dense { .. }))
        {
            Some(Op::Conv(c)) => {
                zero(&c.weight);
                if let Some(b) = &c.bias {
                    zero(b);
                }
                if let NormOp::Batch { gamma, beta, .. } = &c.norm {
                    zero(gamma);
                    zero(beta);
                }
            }
            Some(Op::Dense { weight, bias, .. }) => {
                zero(weight);
                zero(bias);
            }
            _ => {}
        }
    }
}

/// `(B, K)` condition broadcast to `(B, K, *spatial)`.
pub fn tile(y: &Tensor, spatial: &[i64]) -> Tensor {
    let (b, k) = (y.size()[0], y.size()[1]);
    let mut view = vec![b, k];
    view.extend(std::iter::repeat_n(1, spatial.len()));
    let mut full = vec![b, k];
    full.extend_from_slice(spatial);
    y.view(view.as_slice()).expand(full.as_slice(), false)
}

fn dropout_mask(rng: &mut ChaCha8Rng, dims: &[i64], rate: f64, kind: Kind) -> Tensor {
    let n: i64 = dims.iter().product();
    let keep = 1.0 - rate;
    let m: Vec<f32> = (0..n)
        .map(|_| {
            if rng.random::<f64>() < keep {
                (1.0 / keep) as f32
            } else {
                0.0
            }
        })
        .collect();
    Tensor::from_slice(&m).view(dims).to_kind(kind)
}

fn activate(x: Tensor, act: Activation) -> Tensor {
    match act {
        Activation::Linear => x,
        Activation::Relu => x.relu(),
        // max(x, a·x) for 0 < a < 1.
        Activation::LeakyRelu => x.maximum(&(&x * LEAKY_SLOPE)),
        Activation::Tanh => x.tanh(),
        Activation::Softmax => x.softmax(-1, x.kind()),
    }
}

fn spectral_weight(weight: &Tensor, u: &Tensor, train: bool) -> Tensor {
    let rows = weight.size()[0];
    let w = weight.view([rows, -1]);
    if train {
        tch::no_grad(|| {
            let wd = w.detach();
            let v = wd.tr().mv(u);
            let v = &v / (v.norm() + 1e-12);
            let nu = wd.mv(&v);
            let nu = &nu / (nu.norm() + 1e-12);
            let _ = u.shallow_clone().copy_(&nu);
        });
    }
    // A private copy of u keeps later in-place updates out of this graph.
    let u = u.detach().copy();
    let v = tch::no_grad(|| {
        let v = w.detach().tr().mv(&u);
        &v / (v.norm() + 1e-12)
    });
    let sigma = u.dot(&w.mv(&v));
    weight / sigma
}

fn conv_forward(c: &ConvOp, x: &Tensor, train: bool, skip_act: bool) -> Tensor {
    let rank = c.stride.len();
    let weight = match &c.norm {
        NormOp::Spectral { u } => spectral_weight(&c.weight, u, train),
        _ => c.weight.shallow_clone(),
    };
    let dil = vec![1i64; rank];
    let zeros = vec![0i64; rank];
    let mut y = if c.transposed {
        let raw = x.convolution(&weight, c.bias.as_ref(), &c.stride, &zeros, &dil, true, &zeros, 1);
        let mut y = raw;
        for (d, &(a, b)) in c.pads.iter().enumerate() {
            if a + b > 0 {
                let len = y.size()[d + 2] - a - b;
                y = y.narrow((d + 2) as i64, a, len);
            }
        }
        y
    } else if c.pads.iter().all(|(a, b)| a == b) {
        let p: Vec<i64> = c.pads.iter().map(|p| p.0).collect();
        x.convolution(&weight, c.bias.as_ref(), &c.stride, &p, &dil, false, &zeros, 1)
    } else {
        // constant_pad_nd lists pads from the last axis backwards.
        let pad: Vec<i64> = c.pads.iter().rev().flat_map(|&(a, b)| [a, b]).collect();
        x.constant_pad_nd(pad.as_slice()).convolution(
            &weight,
            c.bias.as_ref(),
            &c.stride,
            &zeros,
            &dil,
            false,
            &zeros,
            1,
        )
    };
    if let NormOp::Batch { gamma, beta, mean, var } = &c.norm {
        y = y.batch_norm(
            Some(gamma),
            Some(beta),
            Some(mean),
            Some(var),
            train,
            BN_MOMENTUM,
            BN_EPS,
            false,
        );
    }
    if skip_act {
        y
    } else {
        activate(y, c.act)
    }
}
