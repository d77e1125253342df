//! Declarative architecture descriptions and static shape inference.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Padding {
    /// Output size `ceil(in / stride)` (for deconvolutions, `in * stride`).
    Same,
    Valid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Norm {
    None,
    Batch,
    Spectral,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Linear,
    Relu,
    LeakyRelu,
    Tanh,
    Softmax,
}

/// One row of an architecture table. Kernel and stride lengths give the
/// spatial rank (2 for images, 3 for volumes).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum Layer {
    Conv {
        filters: i64,
        kernel: Vec<i64>,
        stride: Vec<i64>,
        padding: Padding,
        norm: Norm,
        activation: Activation,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        tag: Option<String>,
    },
    Deconv {
        filters: i64,
        kernel: Vec<i64>,
        stride: Vec<i64>,
        padding: Padding,
        norm: Norm,
        activation: Activation,
    },
    /// Nearest-neighbour upsampling by an integer factor per axis.
    Upsample {
        scale: Vec<i64>,
    },
    MaxPool {
        kernel: Vec<i64>,
        stride: Vec<i64>,
    },
    /// Concatenates the tagged encoder activation, after it has been joined
    /// with the tiled condition and passed through a 3×3 stride-1 fusion
    /// convolution whose width equals the current decoder width.
    Skip {
        tag: String,
    },
    Flatten,
    Dense {
        units: i64,
        #[serde(default)]
        dropout: f64,
        activation: Activation,
    },
    GlobalAvgPool,
}

/// Encoder, classifier head, generator and discriminator for one dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchitectureSpec {
    pub name: String,
    /// Input shape without batch axis, channels first: `[C, H, W]` or `[C, D, H, W]`.
    pub input: Vec<i64>,
    pub num_classes: i64,
    pub encoder: Vec<Layer>,
    pub classifier: Vec<Layer>,
    pub generator: Vec<Layer>,
    pub discriminator: Vec<Layer>,
}

pub(crate) fn same_pads(input: i64, kernel: i64, stride: i64) -> (i64, i64, i64) {
    let out = (input + stride - 1) / stride;
    let total = ((out - 1) * stride + kernel - input).max(0);
    (out, total / 2, total - total / 2)
}

/// Channel-first shape of an activation (no batch axis).
pub type Shape = Vec<i64>;

fn spatial_check(shape: &Shape, v: &[i64], what: &str) -> Result<()> {
    if v.len() + 1 != shape.len() {
        return Err(Error::Config(format!(
            "{what} has rank {} but activation {shape:?} has spatial rank {}",
            v.len(),
            shape.len() - 1
        )));
    }
    Ok(())
}

/// Shape after one layer; `skip` supplies tagged encoder shapes.
pub(crate) fn layer_output(layer: &Layer, shape: &Shape, skip: &dyn Fn(&str) -> Option<Shape>) -> Result<Shape> {
    match layer {
        Layer::Conv {
            filters,
            kernel,
            stride,
            padding,
            ..
        } => {
            spatial_check(shape, kernel, "conv kernel")?;
            spatial_check(shape, stride, "conv stride")?;
            let mut out = vec![*filters];
            for (i, (&k, &s)) in kernel.iter().zip(stride).enumerate() {
                let n = shape[i + 1];
                out.push(match padding {
                    Padding::Same => same_pads(n, k, s).0,
                    Padding::Valid => {
                        if n < k {
                            return Err(Error::Config(format!("valid conv kernel {k} exceeds input {n}")));
                        }
                        (n - k) / s + 1
                    }
                });
            }
            Ok(out)
        }
        Layer::Deconv {
            filters,
            kernel,
            stride,
            padding,
            ..
        } => {
            spatial_check(shape, kernel, "deconv kernel")?;
            let mut out = vec![*filters];
            for (i, (&k, &s)) in kernel.iter().zip(stride).enumerate() {
                let n = shape[i + 1];
                out.push(match padding {
                    Padding::Same => n * s,
                    Padding::Valid => (n - 1) * s + k,
                });
            }
            Ok(out)
        }
        Layer::Upsample { scale } => {
            spatial_check(shape, scale, "upsample scale")?;
            let mut out = vec![shape[0]];
            out.extend(shape[1..].iter().zip(scale).map(|(n, s)| n * s));
            Ok(out)
        }
        Layer::MaxPool { kernel, stride } => {
            spatial_check(shape, kernel, "pool kernel")?;
            let mut out = vec![shape[0]];
            out.extend(
                shape[1..]
                    .iter()
                    .zip(kernel.iter().zip(stride))
                    .map(|(n, (k, s))| (n - k) / s + 1),
            );
            Ok(out)
        }
        Layer::Skip { tag } => {
            let s = skip(tag).ok_or_else(|| Error::Config(format!("no encoder layer tagged `{tag}`")))?;
            if s[1..] != shape[1..] {
                return Err(Error::Shape {
                    expected: shape[1..].to_vec(),
                    actual: s[1..].to_vec(),
                });
            }
            let mut out = shape.clone();
            out[0] *= 2;
            Ok(out)
        }
        Layer::Flatten => Ok(vec![shape.iter().product()]),
        Layer::Dense { units, .. } => {
            if shape.len() != 1 {
                return Err(Error::Config(format!("dense layer needs a flat input, got {shape:?}")));
            }
            Ok(vec![*units])
        }
        Layer::GlobalAvgPool => Ok(vec![shape[0]]),
    }
}

/// Per-layer output shapes of a stack.
pub fn infer_shapes(layers: &[Layer], input: &Shape, skip: &dyn Fn(&str) -> Option<Shape>) -> Result<Vec<Shape>> {
    let mut cur = input.clone();
    let mut out = Vec::with_capacity(layers.len());
    for l in layers {
        cur = layer_output(l, &cur, skip)?;
        out.push(cur.clone());
    }
    Ok(out)
}

/// Static shapes of all four networks.
#[derive(Debug, Clone, PartialEq)]
pub struct ShapeReport {
    pub bottleneck: Shape,
    pub skips: Vec<(String, Shape)>,
    pub classifier_out: Shape,
    pub generator_out: Shape,
    pub discriminator_out: Shape,
    pub injection_sites: usize,
}

impl ArchitectureSpec {
    pub fn spatial_rank(&self) -> usize {
        self.input.len() - 1
    }

    pub fn check(&self) -> Result<ShapeReport> {
        if self.num_classes < 2 {
            return Err(Error::Config("num_classes must be >= 2".into()));
        }
        let none = |_: &str| None;
        let enc = infer_shapes(&self.encoder, &self.input, &none)?;
        let skips: Vec<(String, Shape)> = self
            .encoder
            .iter()
            .zip(&enc)
            .filter_map(|(l, s)| match l {
                Layer::Conv { tag: Some(t), .. } => Some((t.clone(), s.clone())),
                _ => None,
            })
            .collect();
        let bottleneck = enc.last().cloned().unwrap_or_else(|| self.input.clone());
        let lookup = |t: &str| skips.iter().find(|(n, _)| n == t).map(|(_, s)| s.clone());
        let cls = infer_shapes(&self.classifier, &bottleneck, &none)?;
        let gen = infer_shapes(&self.generator, &bottleneck, &lookup)?;
        let disc = infer_shapes(&self.discriminator, &self.input, &none)?;
        let report = ShapeReport {
            classifier_out: cls.last().cloned().unwrap_or_default(),
            generator_out: gen.last().cloned().unwrap_or_default(),
            discriminator_out: disc.last().cloned().unwrap_or_default(),
            injection_sites: self
                .generator
                .iter()
                .filter(|l| matches!(l, Layer::Skip { .. }))
                .count(),
            bottleneck,
            skips,
        };
        if report.generator_out != self.input {
            return Err(Error::Shape {
                expected: self.input.clone(),
                actual: report.generator_out,
            });
        }
        if report.classifier_out != vec![self.num_classes] {
            return Err(Error::Config(format!(
                "classifier emits {:?}, expected [{}]",
                report.classifier_out, self.num_classes
            )));
        }
        if report.discriminator_out != vec![1] {
            return Err(Error::Config(format!(
                "discriminator emits {:?}, expected [1]",
                report.discriminator_out
            )));
        }
        Ok(report)
    }

    pub fn generator_output_activation(&self) -> Option<Activation> {
        self.generator.iter().rev().find_map(|l| match l {
            Layer::Conv { activation, .. } | Layer::Deconv { activation, .. } => Some(*activation),
            _ => None,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let spec: Self = serde_json::from_str(s)?;
        spec.check()?;
        Ok(spec)
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "mnist" => Ok(mnist()),
            "3dshapes" => Ok(shapes3d()),
            "adni" => Ok(adni()),
            other => Err(Error::Config(format!(
                "unknown architecture `{other}` (mnist, 3dshapes, adni)"
            ))),
        }
    }
}

fn conv(filters: i64, k: i64, s: i64, norm: Norm, act: Activation) -> Layer {
    conv_nd(2, filters, k, s, Padding::Same, norm, act)
}

fn conv_nd(dims: usize, filters: i64, k: i64, s: i64, padding: Padding, norm: Norm, act: Activation) -> Layer {
    Layer::Conv {
        filters,
        kernel: vec![k; dims],
        stride: vec![s; dims],
        padding,
        norm,
        activation: act,
        tag: None,
    }
}

fn tagged(mut layer: Layer, name: &str) -> Layer {
    if let Layer::Conv { tag, .. } = &mut layer {
        *tag = Some(name.to_string());
    }
    layer
}

fn up(dims: usize) -> Layer {
    Layer::Upsample { scale: vec![2; dims] }
}

fn skip(tag: &str) -> Layer {
    Layer::Skip { tag: tag.into() }
}

use Activation::{LeakyRelu, Linear, Relu, Softmax, Tanh};
use Norm::{Batch, Spectral};

pub fn shapes3d() -> ArchitectureSpec {
    let enc = |f| conv(f, 4, 2, Batch, Relu);
    let disc = |f, n| conv(f, 4, 2, n, LeakyRelu);
    ArchitectureSpec {
        name: "3dshapes".into(),
        input: vec![3, 64, 64],
        num_classes: 4,
        encoder: vec![
            tagged(enc(32), "enc1"),
            tagged(enc(32), "enc2"),
            tagged(enc(64), "enc3"),
            tagged(enc(64), "enc4"),
        ],
        classifier: vec![
            Layer::Flatten,
            Layer::Dense {
                units: 4,
                dropout: 0.0,
                activation: Softmax,
            },
        ],
        generator: vec![
            up(2),
            skip("enc3"),
            conv(64, 3, 1, Batch, Relu),
            up(2),
            skip("enc2"),
            conv(32, 3, 1, Batch, Relu),
            up(2),
            skip("enc1"),
            conv(32, 3, 1, Batch, Relu),
            up(2),
            conv(3, 1, 1, Batch, Tanh),
        ],
        discriminator: vec![
            disc(32, Norm::None),
            disc(32, Spectral),
            disc(64, Spectral),
            disc(64, Spectral),
            Layer::Flatten,
            Layer::Dense {
                units: 1,
                dropout: 0.0,
                activation: Linear,
            },
        ],
    }
}

pub fn mnist() -> ArchitectureSpec {
    let c3 = |f| conv(f, 3, 1, Batch, Relu);
    let c4 = |f| conv(f, 4, 2, Batch, Relu);
    let d3 = |f, n| conv(f, 3, 1, n, LeakyRelu);
    let d4 = |f| conv(f, 4, 2, Batch, LeakyRelu);
    ArchitectureSpec {
        name: "mnist".into(),
        input: vec![1, 28, 28],
        num_classes: 10,
        encoder: vec![
            c3(32),
            tagged(c4(32), "enc1"),
            c3(64),
            tagged(c4(64), "enc2"),
            c3(128),
            tagged(c4(128), "enc3"),
            c3(256),
            tagged(c4(256), "enc4"),
        ],
        classifier: vec![
            Layer::Flatten,
            Layer::Dense {
                units: 128,
                dropout: 0.5,
                activation: Relu,
            },
            Layer::Dense {
                units: 10,
                dropout: 0.25,
                activation: Softmax,
            },
        ],
        generator: vec![
            up(2),
            c3(128),
            skip("enc3"),
            c3(128),
            up(2),
            conv_nd(2, 64, 2, 1, Padding::Valid, Batch, Relu),
            skip("enc2"),
            c3(64),
            up(2),
            c3(32),
            skip("enc1"),
            c3(32),
            Layer::Deconv {
                filters: 1,
                kernel: vec![4, 4],
                stride: vec![2, 2],
                padding: Padding::Same,
                norm: Batch,
                activation: Tanh,
            },
        ],
        discriminator: vec![
            d3(32, Norm::None),
            d4(32),
            d3(64, Batch),
            d4(64),
            d3(128, Batch),
            d4(128),
            d3(256, Batch),
            d4(256),
            Layer::Flatten,
            Layer::Dense {
                units: 1,
                dropout: 0.0,
                activation: Linear,
            },
        ],
    }
}

/// Volumetric variant. Only shape-level use is expected.
pub fn adni() -> ArchitectureSpec {
    let c = |f| conv_nd(3, f, 3, 1, Padding::Same, Batch, Relu);
    let pool = || Layer::MaxPool {
        kernel: vec![2; 3],
        stride: vec![2; 3],
    };
    let d = |f, k, s: Vec<i64>, n| Layer::Conv {
        filters: f,
        kernel: vec![k; 3],
        stride: s,
        padding: Padding::Same,
        norm: n,
        activation: LeakyRelu,
        tag: None,
    };
    let s1 = || vec![1, 1, 1];
    let s2 = || vec![2, 2, 2];
    let sh = || vec![1, 2, 2];
    ArchitectureSpec {
        name: "adni".into(),
        input: vec![1, 96, 114, 96],
        num_classes: 3,
        encoder: vec![
            c(16),
            tagged(c(16), "enc1"),
            pool(),
            c(32),
            tagged(c(32), "enc2"),
            pool(),
            c(64),
            c(64),
            tagged(c(64), "enc3"),
            pool(),
            c(128),
            c(128),
            tagged(c(128), "enc4"),
            pool(),
            c(128),
            c(128),
            c(128),
        ],
        classifier: vec![
            Layer::Flatten,
            Layer::Dense {
                units: 256,
                dropout: 0.0,
                activation: Relu,
            },
            Layer::Dense {
                units: 3,
                dropout: 0.0,
                activation: Softmax,
            },
        ],
        generator: vec![
            up(3),
            skip("enc4"),
            c(128),
            c(128),
            c(128),
            up(3),
            skip("enc3"),
            c(64),
            c(64),
            c(64),
            up(3),
            // 56 -> 57 along the second axis so the ENC2 skip lines up.
            Layer::Deconv {
                filters: 32,
                kernel: vec![1, 2, 1],
                stride: s1(),
                padding: Padding::Valid,
                norm: Batch,
                activation: Relu,
            },
            skip("enc2"),
            c(32),
            c(32),
            up(3),
            skip("enc1"),
            c(16),
            c(16),
            conv_nd(3, 1, 1, 1, Padding::Same, Batch, Linear),
        ],
        discriminator: vec![
            d(16, 3, s1(), Norm::None),
            d(16, 4, sh(), Batch),
            d(32, 3, s1(), Batch),
            d(32, 4, sh(), Batch),
            d(64, 3, s1(), Batch),
            d(64, 3, s1(), Batch),
            d(64, 4, s2(), Batch),
            d(128, 3, s1(), Batch),
            d(128, 3, s1(), Batch),
            d(128, 4, s2(), Batch),
            d(256, 3, s1(), Batch),
            d(256, 3, s1(), Batch),
            d(256, 4, s2(), Batch),
            d(64, 1, s1(), Batch),
            Layer::Conv {
                filters: 1,
                kernel: vec![1; 3],
                stride: s1(),
                padding: Padding::Same,
                norm: Batch,
                activation: Linear,
                tag: None,
            },
            Layer::GlobalAvgPool,
        ],
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_padding_matches_reference_sizes() {
        // 28 -> 14 -> 7 -> 4 -> 2 with 4x4 stride-2 kernels.
        assert_eq!(same_pads(28, 4, 2), (14, 1, 1));
        assert_eq!(same_pads(7, 4, 2), (4, 1, 2));
        assert_eq!(same_pads(4, 4, 2), (2, 1, 1));
        assert_eq!(same_pads(5, 3, 1), (5, 1, 1));
    }

    #[test]
    fn mnist_shapes() {
        let r = mnist().check().unwrap();
        assert_eq!(r.bottleneck, vec![256, 2, 2]);
        assert_eq!(r.generator_out, vec![1, 28, 28]);
        assert_eq!(r.injection_sites, 3);
        let skips: Vec<_> = r.skips.iter().map(|(t, s)| (t.as_str(), s.clone())).collect();
        assert_eq!(
            skips,
            vec![
                ("enc1", vec![32, 14, 14]),
                ("enc2", vec![64, 7, 7]),
                ("enc3", vec![128, 4, 4]),
                ("enc4", vec![256, 2, 2]),
            ]
        );
    }

    #[test]
    fn shapes3d_shapes() {
        let r = shapes3d().check().unwrap();
        assert_eq!(r.bottleneck, vec![64, 4, 4]);
        assert_eq!(r.generator_out, vec![3, 64, 64]);
        assert_eq!(r.injection_sites, 3);
        assert_eq!(shapes3d().generator_output_activation(), Some(Tanh));
    }

    #[test]
    fn adni_shapes() {
        let spec = adni();
        let r = spec.check().unwrap();
        assert_eq!(r.bottleneck, vec![128, 6, 7, 6]);
        assert_eq!(r.generator_out, vec![1, 96, 114, 96]);
        assert_eq!(r.injection_sites, 4);
        assert_eq!(r.discriminator_out, vec![1]);
        assert_eq!(spec.generator_output_activation(), Some(Linear));
    }

    #[test]
    fn json_round_trip() {
        for spec in [mnist(), shapes3d(), adni()] {
            let back = ArchitectureSpec::from_json(&spec.to_json().unwrap()).unwrap();
            assert_eq!(back, spec);
        }
    }

    #[test]
    fn generator_must_restore_input_shape() {
        let mut spec = shapes3d();
        spec.generator.pop();
        spec.generator.pop();
        assert!(matches!(spec.check(), Err(Error::Shape { .. })));
        let mut spec = mnist();
        spec.generator.insert(1, skip("nope"));
        assert!(spec.check().is_err());
    }
}
