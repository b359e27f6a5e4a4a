//! Adam with cosine-annealed learning rate.

use crate::tensor::Tensor;
use pmr_core::Scalar;

pub struct Adam<S> {
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
    m: Vec<Tensor<S>>,
    v: Vec<Tensor<S>>,
}

impl<S: Scalar> Adam<S> {
    pub fn new(param_shapes: &[Vec<usize>]) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: param_shapes.iter().map(|s| Tensor::zeros(s)).collect(),
            v: param_shapes.iter().map(|s| Tensor::zeros(s)).collect(),
        }
    }

    /// One update over parameters zipped positionally with their gradients;
    /// a `None` gradient leaves the parameter (and its moments) untouched.
    pub fn step(
        &mut self,
        lr: f64,
        params: Vec<(String, &mut Tensor<S>)>,
        grads: &[Option<Tensor<S>>],
    ) {
        assert_eq!(params.len(), self.m.len(), "optimizer/param arity mismatch");
        assert_eq!(params.len(), grads.len(), "gradient/param arity mismatch");
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (i, (_, param)) in params.into_iter().enumerate() {
            let Some(grad) = &grads[i] else { continue };
            assert_eq!(grad.shape(), param.shape(), "gradient shape mismatch at index {i}");
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            for j in 0..param.numel() {
                let g = grad.data()[j].f64();
                let mj = self.beta1 * m.data()[j].f64() + (1.0 - self.beta1) * g;
                let vj = self.beta2 * v.data()[j].f64() + (1.0 - self.beta2) * g * g;
                m.data_mut()[j] = S::of(mj);
                v.data_mut()[j] = S::of(vj);
                let update = lr * (mj / bc1) / ((vj / bc2).sqrt() + self.eps);
                param.data_mut()[j] = param.data_mut()[j] - S::of(update);
            }
        }
    }
}

/// Cosine annealing from `lr_init` to exactly `lr_final` at the last epoch.
#[derive(Debug, Clone, Copy)]
pub struct CosineSchedule {
    pub lr_init: f64,
    pub lr_final: f64,
    pub epochs: usize,
}

impl CosineSchedule {
    pub fn lr_at(&self, epoch: usize) -> f64 {
        if self.epochs <= 1 {
            return self.lr_init;
        }
        let progress = epoch.min(self.epochs - 1) as f64 / (self.epochs - 1) as f64;
        self.lr_final
            + 0.5 * (self.lr_init - self.lr_final) * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}
