//! Objective terms. All functions take and return tch tensors so they can be
//! differentiated; the dtype follows the inputs.

use serde::{Deserialize, Serialize};
use tch::{Kind, Tensor};

use crate::error::{Error, Result};

pub const CLS_EPS: f64 = 1e-8;

/// Weights of the objective. `l1`/`l2` weight the map norms, `l3` the
/// discriminator loss, `l4` the generator adversarial loss, `l5` the cycle
/// loss and `l6` the classification loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub l1: f64,
    pub l2: f64,
    pub l3: f64,
    pub l4: f64,
    pub l5: f64,
    pub l6: f64,
    #[serde(default)]
    pub label_smoothing: f64,
}

impl LossWeights {
    pub const SHAPES3D: LossWeights = LossWeights {
        l1: 1.0,
        l2: 0.0,
        l3: 5.0,
        l4: 10.0,
        l5: 1.0,
        l6: 1.0,
        label_smoothing: 0.1,
    };
    pub const MNIST: LossWeights = LossWeights {
        l1: 1.0,
        l2: 0.0,
        l3: 0.5,
        l4: 1.0,
        l5: 1.0,
        l6: 1.0,
        label_smoothing: 0.0,
    };
    pub const ADNI: LossWeights = LossWeights {
        l1: 1.0,
        l2: 10.0,
        l3: 5.0,
        l4: 10.0,
        l5: 1.0,
        l6: 1.0,
        label_smoothing: 0.0,
    };

    pub fn validate(&self) -> Result<()> {
        let all = [self.l1, self.l2, self.l3, self.l4, self.l5, self.l6];
        if all.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Config(format!("loss weights must be finite and >= 0: {all:?}")));
        }
        if !(0.0..0.5).contains(&self.label_smoothing) {
            return Err(Error::Config(format!(
                "label_smoothing {} outside [0, 0.5)",
                self.label_smoothing
            )));
        }
        Ok(())
    }
}

fn nonempty(t: &Tensor, what: &'static str) -> Result<()> {
    if t.numel() == 0 {
        return Err(Error::EmptyBatch(what));
    }
    Ok(())
}

fn same_shape(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.size() != b.size() {
        return Err(Error::Shape {
            expected: a.size(),
            actual: b.size(),
        });
    }
    Ok(())
}

/// ½·mean[(d_real − (1 − s))²] + ½·mean[d_fake²].
pub fn adv_d_loss(d_real: &Tensor, d_fake: &Tensor, smoothing: f64) -> Result<Tensor> {
    nonempty(d_real, "adv_d_loss")?;
    nonempty(d_fake, "adv_d_loss")?;
    if d_real.numel() != d_fake.numel() {
        return Err(Error::Shape {
            expected: d_real.size(),
            actual: d_fake.size(),
        });
    }
    let real = (d_real - (1.0 - smoothing)).square().mean(d_real.kind());
    let fake = d_fake.square().mean(d_fake.kind());
    Ok((real + fake) * 0.5)
}

/// ½·mean[(d_fake − 1)²].
pub fn adv_g_loss(d_fake: &Tensor) -> Result<Tensor> {
    nonempty(d_fake, "adv_g_loss")?;
    Ok((d_fake - 1.0).square().mean(d_fake.kind()) * 0.5)
}

/// Mean absolute difference per element, averaged over the batch.
pub fn cycle_loss(x: &Tensor, x_cycled: &Tensor) -> Result<Tensor> {
    nonempty(x, "cycle_loss")?;
    same_shape(x, x_cycled)?;
    Ok((x - x_cycled).abs().mean(x.kind()))
}

/// Mean over the batch of −Σ y·log(p + ε).
pub fn cls_loss(y_target: &Tensor, y_pred: &Tensor) -> Result<Tensor> {
    nonempty(y_target, "cls_loss")?;
    if y_target.dim() != 2 || y_target.size() != y_pred.size() {
        return Err(Error::Condition(format!(
            "target {:?} and prediction {:?} disagree",
            y_target.size(),
            y_pred.size()
        )));
    }
    let ll = (y_pred + CLS_EPS).log() * y_target;
    Ok(-ll.sum_dim_intlist([1i64].as_slice(), false, ll.kind()).mean(ll.kind()))
}

/// Mean over the batch of λ1·Σ|M| + λ2·‖M‖₂.
pub fn map_loss(maps: &Tensor, l1: f64, l2: f64) -> Result<Tensor> {
    nonempty(maps, "map_loss")?;
    let flat = maps.flatten(1, -1);
    let kind = maps.kind();
    let mut per = flat.zeros_like().sum_dim_intlist([1i64].as_slice(), false, kind);
    if l1 != 0.0 {
        per = per + flat.abs().sum_dim_intlist([1i64].as_slice(), false, kind) * l1;
    }
    if l2 != 0.0 {
        // torch norm has a zero subgradient at the origin.
        per = per + flat.norm_scalaropt_dim(2.0, [1i64].as_slice(), false) * l2;
    }
    Ok(per.mean(kind))
}

/// Scalar values of every term for one step.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub adv_d: f64,
    pub adv_g: f64,
    pub cyc: f64,
    pub cls: f64,
    pub map: f64,
    /// λ3·adv_d.
    pub total_d: f64,
    /// λ4·adv_g + λ5·cyc + λ6·cls + map.
    pub total_g: f64,
    pub total: f64,
}

/// Which generator-side terms are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TermMask {
    pub cyc: bool,
    pub cls: bool,
    pub map: bool,
}

impl Default for TermMask {
    fn default() -> Self {
        Self {
            cyc: true,
            cls: true,
            map: true,
        }
    }
}

/// Raw term values (before weighting); `map` already includes λ1/λ2.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Terms {
    pub adv_d: f64,
    pub adv_g: f64,
    pub cyc: f64,
    pub cls: f64,
    pub map: f64,
}

/// Weighted totals. Fails on the first non-finite term.
pub fn total_loss(t: Terms, w: &LossWeights, mask: TermMask) -> Result<LossReport> {
    for (name, v) in [
        ("adv_d", t.adv_d),
        ("adv_g", t.adv_g),
        ("cyc", t.cyc),
        ("cls", t.cls),
        ("map", t.map),
    ] {
        if !v.is_finite() {
            return Err(Error::NonFinite { term: name });
        }
    }
    let on = |b: bool| if b { 1.0 } else { 0.0 };
    let total_d = w.l3 * t.adv_d;
    let total_g = w.l4 * t.adv_g + on(mask.cyc) * w.l5 * t.cyc + on(mask.cls) * w.l6 * t.cls + on(mask.map) * t.map;
    Ok(LossReport {
        adv_d: t.adv_d,
        adv_g: t.adv_g,
        cyc: t.cyc,
        cls: t.cls,
        map: t.map,
        total_d,
        total_g,
        total: total_d + total_g,
    })
}

/// Generator-side objective as a differentiable tensor.
pub fn generator_objective(
    adv_g: &Tensor,
    cyc: &Tensor,
    cls: &Tensor,
    map: &Tensor,
    w: &LossWeights,
    mask: TermMask,
) -> Tensor {
    let mut total = adv_g * w.l4;
    if mask.cyc {
        total = total + cyc * w.l5;
    }
    if mask.cls {
        total = total + cls * w.l6;
    }
    if mask.map {
        total = total + map;
    }
    total
}

pub(crate) fn scalar(t: &Tensor) -> f64 {
    t.to_kind(Kind::Double).double_value(&[])
}
