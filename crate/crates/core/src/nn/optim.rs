use crate::error::{ensure, Result};

use super::params::ParamSet;

/// SGD with classical momentum: `v ← μ v + g`, `p ← p − lr v`, applied to
/// parameters in registration order.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    velocity: Option<ParamSet>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64) -> Result<Self> {
        ensure!(lr.is_finite() && lr >= 0.0, Config, "learning rate must be >= 0, got {lr}");
        ensure!((0.0..1.0).contains(&momentum), Config, "momentum must be in [0, 1), got {momentum}");
        Ok(Self { lr, momentum, velocity: None })
    }

    pub fn step(&mut self, params: &mut ParamSet, grads: &ParamSet) -> Result<()> {
        params.check_compatible(grads)?;
        let vel = self.velocity.get_or_insert_with(|| params.zeros_like());
        vel.check_compatible(params)?;
        for ((p, g), v) in params
            .tensors_mut()
            .iter_mut()
            .zip(grads.tensors())
            .zip(vel.tensors_mut())
        {
            for ((pv, &gv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
                *vv = self.momentum * *vv + gv;
                *pv -= self.lr * *vv;
            }
        }
        Ok(())
    }
}

/// One stateless step: `params - lr * (momentum * velocity + grads)`, with the
/// velocity updated in place.
pub fn sgd_step(
    params: &mut ParamSet,
    grads: &ParamSet,
    velocity: &mut ParamSet,
    lr: f64,
    momentum: f64,
) -> Result<()> {
    let mut opt = Sgd::new(lr, momentum)?;
    opt.velocity = Some(std::mem::take(velocity));
    let r = opt.step(params, grads);
    *velocity = opt.velocity.take().unwrap_or_default();
    r
}

/// Adam with bias correction, applied in registration order.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: i32,
    m: Option<ParamSet>,
    v: Option<ParamSet>,
}

impl Adam {
    pub fn new(lr: f64) -> Result<Self> {
        ensure!(lr.is_finite() && lr >= 0.0, Config, "learning rate must be >= 0, got {lr}");
        Ok(Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: None,
            v: None,
        })
    }

    pub fn step(&mut self, params: &mut ParamSet, grads: &ParamSet) -> Result<()> {
        params.check_compatible(grads)?;
        let m = self.m.get_or_insert_with(|| params.zeros_like());
        let v = self.v.get_or_insert_with(|| params.zeros_like());
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        let (b1, b2) = (self.beta1, self.beta2);
        for (((p, g), m), v) in params
            .tensors_mut()
            .iter_mut()
            .zip(grads.tensors())
            .zip(m.tensors_mut())
            .zip(v.tensors_mut())
        {
            for (((pv, &gv), mv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut()) {
                *mv = b1 * *mv + (1.0 - b1) * gv;
                *vv = b2 * *vv + (1.0 - b2) * gv * gv;
                *pv -= self.lr * (*mv / c1) / ((*vv / c2).sqrt() + self.eps);
            }
        }
        Ok(())
    }
}
