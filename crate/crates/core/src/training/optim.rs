use crate::error::{HseError, Result};
use crate::model::ParamSet;
use crate::tensor::Tensor;

/// SGD with momentum and L2 weight decay:
/// `g' = g + λp`, `v ← μv + g'`, `p ← p − lr·v`.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<(String, Tensor)>,
}

/// One update of a flat parameter buffer.
pub fn sgd_update(p: &mut [f64], g: &[f64], v: &mut [f64], lr: f64, momentum: f64, weight_decay: f64) {
    for ((p, &g), v) in p.iter_mut().zip(g).zip(v.iter_mut()) {
        let g = g + weight_decay * *p;
        *v = momentum * *v + g;
        *p -= lr * *v;
    }
}

impl OptimizerState {
    pub fn new(lr: f64, momentum: f64, weight_decay: f64) -> Result<Self> {
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(HseError::Config(format!("learning rate must be positive, got {lr}")));
        }
        Ok(OptimizerState {
            lr,
            momentum,
            weight_decay,
            velocity: Vec::new(),
        })
    }

    pub fn velocity(&self, name: &str) -> Option<&Tensor> {
        self.velocity.iter().find(|(n, _)| n == name).map(|(_, v)| v)
    }

    /// Applies named gradients; parameters without a gradient are untouched.
    pub fn step(&mut self, params: &mut ParamSet, grads: &[(String, Tensor)]) -> Result<()> {
        for (name, grad) in grads {
            let p = params
                .get_mut(name)
                .ok_or_else(|| HseError::Config(format!("gradient for unknown parameter {name}")))?;
            if p.shape() != grad.shape() {
                return Err(HseError::shape(
                    "sgd_step",
                    format!("{name}: parameter {:?}, gradient {:?}", p.shape(), grad.shape()),
                ));
            }
            let v = match self.velocity.iter().position(|(n, _)| n == name) {
                Some(i) => &mut self.velocity[i].1,
                None => {
                    self.velocity.push((name.clone(), Tensor::zeros(p.shape())));
                    &mut self.velocity.last_mut().unwrap().1
                }
            };
            sgd_update(p.data_mut(), grad.data(), v.data_mut(), self.lr, self.momentum, self.weight_decay);
        }
        Ok(())
    }
}
