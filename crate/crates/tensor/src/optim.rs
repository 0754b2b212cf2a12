//! Adam with bias correction, and a step-decay learning-rate schedule.

use crate::error::{Result, TensorError};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f32,
    pub betas: (f32, f32),
    pub eps: f32,
}

impl AdamConfig {
    pub fn with_lr(lr: f32) -> Self {
        AdamConfig { lr, ..Self::default() }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            betas: (0.9, 0.999),
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates, one pair per parameter, plus the step
/// counter used for bias correction.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub first: Vec<Vec<f32>>,
    pub second: Vec<Vec<f32>>,
}

impl AdamState {
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Tensor>) -> Self {
        let (first, second) = params
            .into_iter()
            .map(|p| (vec![0.0; p.numel()], vec![0.0; p.numel()]))
            .unzip();
        AdamState { step: 0, first, second }
    }
}

/// One Adam update over `params`, which must all carry gradients. Gradients
/// are zeroed afterwards.
pub fn adam_step(params: &mut [&mut Tensor], state: &mut AdamState, cfg: AdamConfig) -> Result<()> {
    if params.len() != state.first.len() {
        return Err(TensorError::contract(
            "adam_step",
            format!("{} parameters but optimizer state holds {}", params.len(), state.first.len()),
        ));
    }
    for (i, p) in params.iter().enumerate() {
        if p.grad().is_none() {
            return Err(TensorError::contract("adam_step", format!("parameter {i} has no gradient")));
        }
        if state.first[i].len() != p.numel() || state.second[i].len() != p.numel() {
            return Err(TensorError::shape(
                "adam_step",
                format!("moment buffers for parameter {i} do not match its {} elements", p.numel()),
            ));
        }
    }
    state.step += 1;
    let (b1, b2) = (cfg.betas.0 as f64, cfg.betas.1 as f64);
    let t = state.step as i32;
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    let lr = cfg.lr as f64;
    let eps = cfg.eps as f64;
    for (i, p) in params.iter_mut().enumerate() {
        let (data, grad) = p.data_and_grad_mut();
        let grad = grad.expect("checked above");
        let m = &mut state.first[i];
        let v = &mut state.second[i];
        for j in 0..data.len() {
            let g = grad[j] as f64;
            let mj = b1 * m[j] as f64 + (1.0 - b1) * g;
            let vj = b2 * v[j] as f64 + (1.0 - b2) * g * g;
            m[j] = mj as f32;
            v[j] = vj as f32;
            let update = lr * (mj / c1) / ((vj / c2).sqrt() + eps);
            data[j] = (data[j] as f64 - update) as f32;
            grad[j] = 0.0;
        }
    }
    Ok(())
}

/// lr(epoch) = base · factor^⌊epoch / every⌋.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepDecay {
    pub base: f64,
    pub factor: f64,
    pub every: usize,
}

impl StepDecay {
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.base * self.factor.powi((epoch / self.every.max(1)) as i32)
    }
}
