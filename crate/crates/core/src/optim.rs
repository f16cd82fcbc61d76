//! First-order optimizers over the flat parameter vector plus the margin.

use serde::{Deserialize, Serialize};

use crate::encoders::{GradAccumulator, ModelParams};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum OptimizerKind {
    Sgd,
    Adam {
        #[serde(default = "beta1")]
        beta1: f64,
        #[serde(default = "beta2")]
        beta2: f64,
        #[serde(default = "eps")]
        eps: f64,
    },
}

fn beta1() -> f64 {
    0.9
}
fn beta2() -> f64 {
    0.999
}
fn eps() -> f64 {
    1e-8
}

impl Default for OptimizerKind {
    fn default() -> Self {
        OptimizerKind::Adam {
            beta1: beta1(),
            beta2: beta2(),
            eps: eps(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    alpha_lr: f64,
    step: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Optimizer {
    /// `alpha_lr` is the step size of the margin, kept separate because the
    /// margin's gradient is a count of active hinges and would otherwise
    /// dominate the update scale.
    pub fn new(kind: OptimizerKind, lr: f64, alpha_lr: f64, params: &ModelParams) -> Result<Optimizer> {
        for v in [lr, alpha_lr] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::invalid(format!("learning rate must be finite and >= 0, got {v}")));
            }
        }
        let n = if matches!(kind, OptimizerKind::Adam { .. }) {
            params.values.len() + 1
        } else {
            0
        };
        Ok(Optimizer {
            kind,
            lr,
            alpha_lr,
            step: 0,
            m: vec![0.0; n],
            v: vec![0.0; n],
        })
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update and clamps the margin into its allowed range.
    pub fn step(&mut self, params: &mut ModelParams, grad: &GradAccumulator) -> Result<()> {
        if grad.values.len() != params.values.len() {
            return Err(Error::Shape {
                expected: format!("{} gradient values", params.values.len()),
                actual: grad.values.len().to_string(),
            });
        }
        self.step += 1;
        let (lr, alpha_lr) = (self.lr, self.alpha_lr);
        match self.kind {
            OptimizerKind::Sgd => {
                for (p, g) in params.values.iter_mut().zip(&grad.values) {
                    *p -= lr * g;
                }
                params.alpha -= alpha_lr * grad.alpha;
            }
            OptimizerKind::Adam { beta1, beta2, eps } => {
                let t = self.step as i32;
                let c1 = 1.0 - beta1.powi(t);
                let c2 = 1.0 - beta2.powi(t);
                let n = params.values.len();
                let mut update = |i: usize, p: &mut f64, g: f64, lr: f64| {
                    let m = &mut self.m[i];
                    let v = &mut self.v[i];
                    *m = beta1 * *m + (1.0 - beta1) * g;
                    *v = beta2 * *v + (1.0 - beta2) * g * g;
                    *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
                };
                for i in 0..n {
                    update(i, &mut params.values[i], grad.values[i], lr);
                }
                update(n, &mut params.alpha, grad.alpha, alpha_lr);
            }
        }
        params.clamp_alpha();
        Ok(())
    }
}
