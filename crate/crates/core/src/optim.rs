//! Adam with explicit, serializable moment buffers.

use tch::Tensor;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
}

fn default_eps() -> f64 {
    1e-8
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug)]
pub struct Adam {
    pub cfg: AdamConfig,
    pub lr: f64,
    pub step: u64,
    params: Vec<Tensor>,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl Adam {
    pub fn new(params: Vec<Tensor>, lr: f64, cfg: AdamConfig) -> Self {
        let m = params.iter().map(|p| p.detach().zeros_like()).collect();
        let v = params.iter().map(|p| p.detach().zeros_like()).collect();
        Self {
            cfg,
            lr,
            step: 0,
            params,
            m,
            v,
        }
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn zero_grad(&self) {
        for p in &self.params {
            let mut g = p.grad();
            if g.defined() {
                let _ = g.detach_().zero_();
            }
        }
    }

    /// One update from the accumulated gradients. Parameters without a
    /// gradient are left unchanged (their moments still decay).
    pub fn step(&mut self) {
        self.step += 1;
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let t = self.step as i32;
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        tch::no_grad(|| {
            for ((p, m), v) in self.params.iter().zip(&mut self.m).zip(&mut self.v) {
                let g = p.grad();
                if !g.defined() {
                    continue;
                }
                let _ = m.g_mul_scalar_(b1).g_add_(&(&g * (1.0 - b1)));
                let _ = v.g_mul_scalar_(b2).g_add_(&(g.square() * (1.0 - b2)));
                let denom = (&*v / c2).sqrt() + self.cfg.eps;
                let upd = (&*m / c1) / denom * self.lr;
                let _ = p.shallow_clone().g_sub_(&upd);
            }
        });
    }

    /// Replaces moments and step counter, checking shapes.
    pub fn load_state(&mut self, step: u64, m: Vec<Tensor>, v: Vec<Tensor>) -> Result<()> {
        if m.len() != self.params.len() || v.len() != self.params.len() {
            return Err(Error::Integrity {
                name: "optimizer".into(),
                detail: format!("{} moment tensors for {} parameters", m.len(), self.params.len()),
            });
        }
        for ((p, a), b) in self.params.iter().zip(&m).zip(&v) {
            if p.size() != a.size() || p.size() != b.size() {
                return Err(Error::Shape {
                    expected: p.size(),
                    actual: a.size(),
                });
            }
        }
        self.step = step;
        self.m = m;
        self.v = v;
        Ok(())
    }
}

/// Learning rate after `epoch` whole epochs of exponential decay.
pub fn decayed_lr(lr0: f64, decay: f64, epoch: usize) -> f64 {
    lr0 * decay.powi(epoch as i32)
}

#[cfg(test)]
mod tests {
    use super::*;
    use tch::{Device, Kind};

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        let p = Tensor::from_slice(&[1.0f64, -2.0]).set_requires_grad(true);
        let mut opt = Adam::new(vec![p.shallow_clone()], 0.1, AdamConfig::default());
        let loss = (&p * Tensor::from_slice(&[3.0f64, -0.5])).sum(Kind::Double);
        loss.backward();
        opt.step();
        let got: Vec<f64> = Vec::try_from(p.detach()).unwrap();
        // With bias correction the first step is lr · g/|g| (up to eps).
        assert!((got[0] - 0.9).abs() < 1e-7 && (got[1] + 1.9).abs() < 1e-7, "{got:?}");
    }

    #[test]
    fn minimizes_quadratic() {
        let p = Tensor::zeros([3], (Kind::Double, Device::Cpu)).set_requires_grad(true);
        let target = Tensor::from_slice(&[1.0f64, -1.0, 0.5]);
        let mut opt = Adam::new(vec![p.shallow_clone()], 0.05, AdamConfig::default());
        for _ in 0..2000 {
            opt.zero_grad();
            (&p - &target).square().sum(Kind::Double).backward();
            opt.step();
        }
        assert!((&p - &target).abs().max().double_value(&[]) < 1e-3);
    }

    #[test]
    fn decay_schedule() {
        for e in 0..50 {
            let lr = decayed_lr(1e-3, 0.98, e);
            assert!((lr - 1e-3 * 0.98f64.powf(e as f64)).abs() < 1e-12);
        }
        assert_eq!(decayed_lr(0.01, 1.0, 99), 0.01);
    }
}
