//! First-order optimizers over [`ParamSet`]s.

use super::tape::Grads;
use super::tensor::{ParamSet, Tensor};

/// Standard Adam with bias correction.
pub struct Adam {
    set_id: u32,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(set_id: u32, params: &ParamSet, lr: f64) -> Self {
        let (m, v) = moment_buffers(params);
        Adam {
            set_id,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m,
            v,
        }
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.lr = lr;
    }

    pub fn step(&mut self, params: &mut ParamSet, grads: &Grads) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for idx in 0..params.len() {
            let Some(g) = grads.get(self.set_id, idx) else {
                continue;
            };
            let m = &mut self.m[idx];
            let v = &mut self.v[idx];
            let p = params.value_mut(idx);
            for e in 0..p.data.len() {
                let ge = g.data[e];
                m.data[e] = self.beta1 * m.data[e] + (1.0 - self.beta1) * ge;
                v.data[e] = self.beta2 * v.data[e] + (1.0 - self.beta2) * ge * ge;
                let mh = m.data[e] / bc1;
                let vh = v.data[e] / bc2;
                p.data[e] -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
    }
}

/// Schedule-Free AdamW (Defazio et al., 2024).
///
/// Keeps two iterate sequences: `z` (raw SGD-style iterate) and `x`
/// (a weighted average of past `z`). Gradients are evaluated at the
/// interpolation `y = (1 − β₁)·z + β₁·x`; no learning-rate schedule or
/// separate EMA evaluation weights are needed — `x` is what you evaluate
/// and checkpoint. Weight decay is decoupled and applied at `y`.
///
/// Call [`ScheduleFreeAdamW::write_training_params`] before building each
/// training tape (it loads `y` into the `ParamSet`), run backward, then
/// [`ScheduleFreeAdamW::step`]. Call
/// [`ScheduleFreeAdamW::write_eval_params`] before evaluation/saving.
pub struct ScheduleFreeAdamW {
    set_id: u32,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    warmup_steps: u64,
    step: u64,
    /// Σ of squared effective learning rates, for the x-averaging weight.
    lr_sq_sum: f64,
    z: Vec<Tensor>,
    x: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl ScheduleFreeAdamW {
    pub fn new(set_id: u32, params: &ParamSet, lr: f64, weight_decay: f64) -> Self {
        let z: Vec<Tensor> = (0..params.len())
            .map(|i| params.value(i).clone())
            .collect();
        let x = z.clone();
        let (_, v) = moment_buffers(params);
        ScheduleFreeAdamW {
            set_id,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            warmup_steps: 0,
            step: 0,
            lr_sq_sum: 0.0,
            z,
            x,
            v,
        }
    }

    pub fn with_warmup(mut self, steps: u64) -> Self {
        self.warmup_steps = steps;
        self
    }

    /// Loads the gradient-evaluation point `y = (1 − β₁)z + β₁x` into
    /// `params`.
    pub fn write_training_params(&self, params: &mut ParamSet) {
        for idx in 0..params.len() {
            let p = params.value_mut(idx);
            for e in 0..p.data.len() {
                p.data[e] =
                    (1.0 - self.beta1) * self.z[idx].data[e] + self.beta1 * self.x[idx].data[e];
            }
        }
    }

    /// Loads the averaged iterate `x` into `params` (for eval / saving).
    pub fn write_eval_params(&self, params: &mut ParamSet) {
        for idx in 0..params.len() {
            params.value_mut(idx).data.copy_from_slice(&self.x[idx].data);
        }
    }

    /// One update from gradients taken at `y` (i.e. after
    /// `write_training_params`). `params` is left holding the next `y`.
    pub fn step(&mut self, params: &mut ParamSet, grads: &Grads) {
        self.step += 1;
        let sched = if self.warmup_steps > 0 && self.step <= self.warmup_steps {
            self.step as f64 / self.warmup_steps as f64
        } else {
            1.0
        };
        let gamma = self.lr * sched;
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        self.lr_sq_sum += gamma * gamma;
        let c = if self.lr_sq_sum > 0.0 {
            gamma * gamma / self.lr_sq_sum
        } else {
            1.0
        };
        for idx in 0..self.z.len() {
            let z = &mut self.z[idx];
            let x = &mut self.x[idx];
            let v = &mut self.v[idx];
            let g = grads.get(self.set_id, idx);
            for e in 0..z.data.len() {
                // y is what params currently hold (set by write_training_params)
                let y = (1.0 - self.beta1) * z.data[e] + self.beta1 * x.data[e];
                let ge = g.map_or(0.0, |t| t.data[e]);
                v.data[e] = self.beta2 * v.data[e] + (1.0 - self.beta2) * ge * ge;
                let denom = (v.data[e] / bc2).sqrt() + self.eps;
                z.data[e] -= gamma * (ge / denom + self.weight_decay * y);
                x.data[e] = (1.0 - c) * x.data[e] + c * z.data[e];
            }
        }
        self.write_training_params(params);
    }
}

fn moment_buffers(params: &ParamSet) -> (Vec<Tensor>, Vec<Tensor>) {
    let zeros: Vec<Tensor> = (0..params.len())
        .map(|i| {
            let (r, c) = params.value(i).shape();
            Tensor::zeros(r, c)
        })
        .collect();
    (zeros.clone(), zeros)
}
