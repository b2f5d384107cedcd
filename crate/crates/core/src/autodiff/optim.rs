use std::f64::consts::PI;

use super::{ParamGrads, ParamStore, Tensor};
use crate::error::{NsaError, Result};

pub trait Optimizer {
    fn step(&mut self, params: &mut ParamStore, grads: &ParamGrads, lr: f64) -> Result<()>;
}

#[derive(Clone, Debug)]
pub struct Sgd {
    pub momentum: f64,
    velocity: Vec<Option<Vec<f32>>>,
}

impl Sgd {
    pub fn new(momentum: f64) -> Self {
        Sgd {
            momentum,
            velocity: Vec::new(),
        }
    }
}

impl Optimizer for Sgd {
    fn step(&mut self, params: &mut ParamStore, grads: &ParamGrads, lr: f64) -> Result<()> {
        self.velocity.resize(params.len(), None);
        for (id, g) in grads.iter() {
            let p = params.get_mut(id);
            check_shape(p, g)?;
            let vel = self.velocity[id.0].get_or_insert_with(|| vec![0.0; g.numel()]);
            for ((w, &gv), v) in p.data_mut().iter_mut().zip(g.data()).zip(vel.iter_mut()) {
                *v = (self.momentum * *v as f64 + gv as f64) as f32;
                *w -= (lr * *v as f64) as f32;
            }
        }
        Ok(())
    }
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    state: Vec<Option<(Vec<f32>, Vec<f32>, u64)>>,
}

impl Default for Adam {
    fn default() -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            state: Vec::new(),
        }
    }
}

impl Optimizer for Adam {
    fn step(&mut self, params: &mut ParamStore, grads: &ParamGrads, lr: f64) -> Result<()> {
        self.state.resize(params.len(), None);
        for (id, g) in grads.iter() {
            let p = params.get_mut(id);
            check_shape(p, g)?;
            let (m, v, t) = self.state[id.0]
                .get_or_insert_with(|| (vec![0.0; g.numel()], vec![0.0; g.numel()], 0));
            *t += 1;
            let bc1 = 1.0 - self.beta1.powi(*t as i32);
            let bc2 = 1.0 - self.beta2.powi(*t as i32);
            for (((w, &gv), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                let gv = gv as f64;
                let mn = self.beta1 * *mi as f64 + (1.0 - self.beta1) * gv;
                let vn = self.beta2 * *vi as f64 + (1.0 - self.beta2) * gv * gv;
                *mi = mn as f32;
                *vi = vn as f32;
                let update = lr * (mn / bc1) / ((vn / bc2).sqrt() + self.eps);
                *w = (*w as f64 - update) as f32;
            }
        }
        Ok(())
    }
}

fn check_shape(p: &Tensor, g: &Tensor) -> Result<()> {
    if p.shape() != g.shape() {
        return Err(NsaError::dim(format!(
            "gradient shape {:?} for parameter {:?}",
            g.shape(),
            p.shape()
        )));
    }
    Ok(())
}

/// Half-cosine decay from `base_lr` at step 0 to 0 at `total_steps`.
#[derive(Clone, Copy, Debug)]
pub struct CosineSchedule {
    pub base_lr: f64,
    pub total_steps: usize,
}

impl CosineSchedule {
    pub fn lr(&self, step: usize) -> f64 {
        if self.total_steps == 0 {
            return self.base_lr;
        }
        let t = (step.min(self.total_steps)) as f64 / self.total_steps as f64;
        0.5 * self.base_lr * (1.0 + (PI * t).cos())
    }
}
