//! Adaptive-moment optimizer and the piecewise learning-rate schedule
//! (linear warmup, then step decay).

use serde::{Deserialize, Serialize};

use crate::nn::{Params, Registry};
use crate::tensor::{Precision, Tape, Tensor};
use crate::Result;

pub struct Adam {
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(weight_decay: f64) -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    /// One update over every trainable parameter. `registry` must come from
    /// the same bind that produced the gradients on `tape`; parameters are
    /// walked in the identical canonical order. Parameters whose gradient is
    /// absent (unused branches) are left untouched.
    pub fn step<P: Params>(
        &mut self,
        params: &mut P,
        registry: &Registry,
        tape: &Tape,
        lr: f64,
    ) -> Result<()> {
        let grads: Vec<Option<Tensor>> = registry
            .entries()
            .iter()
            .map(|(_, var)| tape.grad(*var))
            .collect();
        if self.m.len() < registry.len() {
            self.m.resize(registry.len(), Vec::new());
            self.v.resize(registry.len(), Vec::new());
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let quantize = tape.precision() == Precision::F32;

        let mut idx = 0;
        params.visit_mut("", &mut |_, tensor| {
            debug_assert!(idx < registry.len(), "visit order longer than registry");
            if let Some(grad) = &grads[idx] {
                let m = &mut self.m[idx];
                let v = &mut self.v[idx];
                if m.is_empty() {
                    m.resize(tensor.numel(), 0.0);
                    v.resize(tensor.numel(), 0.0);
                }
                let data = tensor.data_mut();
                for i in 0..data.len() {
                    let g = grad.data()[i];
                    m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                    v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                    let mhat = m[i] / bc1;
                    let vhat = v[i] / bc2;
                    let mut p = data[i] - lr * mhat / (vhat.sqrt() + self.eps);
                    if self.weight_decay > 0.0 {
                        p -= lr * self.weight_decay * data[i];
                    }
                    if quantize {
                        p = p as f32 as f64;
                    }
                    data[i] = p;
                }
            }
            idx += 1;
        });
        debug_assert_eq!(idx, registry.len(), "visit order shorter than registry");
        Ok(())
    }
}

/// Linear warmup over the first `warmup_frac` of steps, then multiplicative
/// decay at the listed milestones (fractions of total steps).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LrSchedule {
    pub base: f64,
    pub warmup_frac: f64,
    pub milestones: Vec<f64>,
    pub decay: f64,
}

impl LrSchedule {
    pub fn at(&self, step: usize, total_steps: usize) -> f64 {
        let total = total_steps.max(1) as f64;
        let warmup = (self.warmup_frac * total).floor();
        let mut lr = if warmup >= 1.0 && (step as f64) < warmup {
            // Ramp from a tenth of base up to base.
            let frac = (step as f64 + 1.0) / warmup;
            self.base * (0.1 + 0.9 * frac)
        } else {
            self.base
        };
        for &ms in &self.milestones {
            if step as f64 >= ms * total {
                lr *= self.decay;
            }
        }
        lr
    }
}
