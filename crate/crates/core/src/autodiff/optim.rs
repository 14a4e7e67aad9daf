use std::f64::consts::PI;

use crate::tensor::Tensor;

use super::AutodiffError;

/// SGD with heavy-ball momentum and coupled weight decay.
#[derive(Clone, Debug)]
pub struct OptimState {
    pub lr0: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    buffers: Vec<Tensor>,
}

impl OptimState {
    pub fn new(lr0: f64, momentum: f64, weight_decay: f64) -> Result<Self, AutodiffError> {
        if weight_decay < 0.0 || !weight_decay.is_finite() {
            return Err(AutodiffError::Config(format!("weight_decay must be >= 0, got {weight_decay}")));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(AutodiffError::Config(format!("momentum must lie in [0, 1), got {momentum}")));
        }
        Ok(Self { lr0, momentum, weight_decay, buffers: Vec::new() })
    }

    /// Number of momentum buffers; fixed after the first step.
    pub fn buffer_count(&self) -> usize {
        self.buffers.len()
    }

    /// `v ← μ·v + g + λ·θ`, `θ ← θ − lr·v` for every parameter.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Tensor], lr: f64) -> Result<(), AutodiffError> {
        if params.len() != grads.len() {
            return Err(AutodiffError::Shape(format!(
                "{} parameters but {} gradients",
                params.len(),
                grads.len()
            )));
        }
        if lr < 0.0 {
            return Err(AutodiffError::Config(format!("learning rate must be >= 0, got {lr}")));
        }
        if self.buffers.is_empty() {
            self.buffers = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        }
        if self.buffers.len() != params.len() {
            return Err(AutodiffError::Shape(format!(
                "optimizer tracks {} parameters, step got {}",
                self.buffers.len(),
                params.len()
            )));
        }
        for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut self.buffers) {
            if p.shape() != g.shape() || p.shape() != v.shape() {
                return Err(AutodiffError::Shape(format!(
                    "parameter {:?} / gradient {:?} / buffer {:?} disagree",
                    p.shape(),
                    g.shape(),
                    v.shape()
                )));
            }
            let vd = v.data_mut();
            let pd = p.data_mut();
            for ((vi, gi), pi) in vd.iter_mut().zip(g.data()).zip(pd.iter_mut()) {
                *vi = self.momentum * *vi + gi + self.weight_decay * *pi;
                *pi -= lr * *vi;
            }
        }
        Ok(())
    }
}

/// Cosine decay from `lr0` at `t = 0` to zero at `t = total`.
pub fn cosine_lr(t: usize, total: usize, lr0: f64) -> f64 {
    if total == 0 {
        return lr0;
    }
    let t = t.min(total) as f64;
    lr0 * 0.5 * (1.0 + (PI * t / total as f64).cos())
}
