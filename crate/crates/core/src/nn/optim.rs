use serde::{Deserialize, Serialize};

use super::{ParamKind, Parameterized};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd { momentum: f32 },
    Adam { beta1: f32, beta2: f32, eps: f32 },
}

/// SGD-with-momentum or Adam over the parameters of a model.
///
/// Weight decay is added to the gradient (L2) for `Weight` and `Arch`
/// parameters only. Moment buffers are keyed by visit order, so a model must
/// always be stepped with the same selection.
#[derive(Debug, Clone)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    pub learning_rate: f32,
    pub weight_decay: f32,
    first: Vec<Vec<f32>>,
    second: Vec<Vec<f32>>,
    step_count: u64,
}

impl Optimizer {
    pub fn sgd(learning_rate: f32, momentum: f32, weight_decay: f32) -> Self {
        Self::new(OptimizerKind::Sgd { momentum }, learning_rate, weight_decay)
    }

    pub fn adam(learning_rate: f32, beta1: f32, beta2: f32, weight_decay: f32) -> Self {
        Self::new(OptimizerKind::Adam { beta1, beta2, eps: 1e-8 }, learning_rate, weight_decay)
    }

    pub fn new(kind: OptimizerKind, learning_rate: f32, weight_decay: f32) -> Self {
        Optimizer { kind, learning_rate, weight_decay, first: Vec::new(), second: Vec::new(), step_count: 0 }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// Updates every trainable parameter of `model` whose kind passes `select`.
    pub fn step<M: Parameterized + ?Sized>(&mut self, model: &mut M, select: &dyn Fn(ParamKind) -> bool) -> Result<()> {
        let mut err = None;
        let mut slot = 0usize;
        self.step_count += 1;
        let t = self.step_count;
        let this = &mut *self;
        model.visit_params(&mut |tensor, kind| {
            if err.is_some() || !select(kind) || !tensor.requires_grad() {
                return;
            }
            if let Err(e) = this.update_one(slot, tensor, kind, t) {
                err = Some(e);
            }
            slot += 1;
        });
        match err {
            Some(e) => Err(e),
            None => Ok(()),
        }
    }

    /// Steps an explicit list of tensors, all treated as `kind`.
    pub fn step_tensors(&mut self, tensors: &mut [&mut Tensor], kind: ParamKind) -> Result<()> {
        self.step_count += 1;
        let t = self.step_count;
        for (slot, tensor) in tensors.iter_mut().enumerate() {
            if tensor.requires_grad() {
                self.update_one(slot, tensor, kind, t)?;
            }
        }
        Ok(())
    }

    fn update_one(&mut self, slot: usize, tensor: &mut Tensor, kind: ParamKind, t: u64) -> Result<()> {
        let shape = tensor.shape().to_vec();
        let n = tensor.numel();
        if self.first.len() <= slot {
            self.first.resize_with(slot + 1, Vec::new);
            self.second.resize_with(slot + 1, Vec::new);
        }
        if self.first[slot].is_empty() {
            self.first[slot] = vec![0.0; n];
            if matches!(self.kind, OptimizerKind::Adam { .. }) {
                self.second[slot] = vec![0.0; n];
            }
        }
        if self.first[slot].len() != n {
            return Err(Error::shape("optimizer_step", format!("buffer {} vs param {:?}", self.first[slot].len(), shape)));
        }
        let decay = match kind {
            ParamKind::Weight | ParamKind::Arch => self.weight_decay,
            ParamKind::Bias | ParamKind::Norm => 0.0,
        };
        let lr = self.learning_rate;
        let (w, g) = tensor.split_mut();
        let g = g.ok_or(Error::MissingGradient(shape))?;
        match self.kind {
            OptimizerKind::Sgd { momentum } => {
                let buf = &mut self.first[slot];
                for i in 0..n {
                    let grad = g[i] + decay * w[i];
                    buf[i] = momentum * buf[i] + grad;
                    w[i] -= lr * buf[i];
                }
            }
            OptimizerKind::Adam { beta1, beta2, eps } => {
                let (m, v) = (&mut self.first[slot], &mut self.second[slot]);
                let c1 = 1.0 - beta1.powi(t as i32);
                let c2 = 1.0 - beta2.powi(t as i32);
                for i in 0..n {
                    let grad = g[i] + decay * w[i];
                    m[i] = beta1 * m[i] + (1.0 - beta1) * grad;
                    v[i] = beta2 * v[i] + (1.0 - beta2) * grad * grad;
                    let mhat = m[i] / c1;
                    let vhat = v[i] / c2;
                    w[i] -= lr * mhat / (vhat.sqrt() + eps);
                }
            }
        }
        Ok(())
    }
}

/// `lr(step) = initial · ½ · (1 + cos(π·step/total))`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CosineSchedule {
    pub initial_lr: f32,
    pub total_steps: usize,
}

impl CosineSchedule {
    pub fn new(initial_lr: f32, total_steps: usize) -> Result<Self> {
        if total_steps == 0 {
            return Err(Error::Invalid("cosine schedule needs total_steps >= 1".into()));
        }
        Ok(CosineSchedule { initial_lr, total_steps })
    }

    pub fn lr(&self, step: usize) -> Result<f32> {
        if step > self.total_steps {
            return Err(Error::Invalid(format!("step {step} beyond {}", self.total_steps)));
        }
        if step == self.total_steps {
            return Ok(0.0);
        }
        let phase = std::f64::consts::PI * step as f64 / self.total_steps as f64;
        Ok((self.initial_lr as f64 * 0.5 * (1.0 + phase.cos())) as f32)
    }
}

/// Piecewise-constant schedule dividing the rate by `factor` at each
/// milestone, given as fractions of the total step count.
#[derive(Debug, Clone, PartialEq)]
pub struct DecaySchedule {
    pub initial_lr: f32,
    pub total_steps: usize,
    pub milestones: Vec<f32>,
    pub factor: f32,
}

impl DecaySchedule {
    pub fn lr(&self, step: usize) -> f32 {
        let frac = step as f32 / self.total_steps.max(1) as f32;
        let drops = self.milestones.iter().filter(|&&m| frac >= m).count();
        self.initial_lr / self.factor.powi(drops as i32)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_param(w: f32, g: f32) -> Tensor {
        let mut t = Tensor::scalar(w).trainable(true);
        t.accumulate(&[g]).unwrap();
        t
    }

    #[test]
    fn sgd_one_step() {
        let mut w = scalar_param(1.0, 1.0);
        let mut opt = Optimizer::sgd(0.1, 0.0, 0.0);
        opt.step_tensors(&mut [&mut w], ParamKind::Weight).unwrap();
        assert!((w.data()[0] - 0.9).abs() < 1e-7);
        assert_eq!(opt.step_count(), 1);
    }

    #[test]
    fn zero_gradient_leaves_weights() {
        for mut opt in [Optimizer::sgd(0.1, 0.9, 0.0), Optimizer::adam(0.1, 0.9, 0.999, 0.0)] {
            let mut w = scalar_param(0.7, 0.0);
            opt.step_tensors(&mut [&mut w], ParamKind::Weight).unwrap();
            assert_eq!(w.data()[0], 0.7);
        }
    }

    #[test]
    fn missing_gradient_is_reported() {
        let mut w = Tensor::scalar(1.0).trainable(true);
        let mut opt = Optimizer::sgd(0.1, 0.0, 0.0);
        assert!(matches!(
            opt.step_tensors(&mut [&mut w], ParamKind::Weight),
            Err(Error::MissingGradient(_))
        ));
    }

    #[test]
    fn buffer_shape_mismatch_is_reported() {
        let mut opt = Optimizer::sgd(0.1, 0.9, 0.0);
        let mut a = scalar_param(1.0, 1.0);
        opt.step_tensors(&mut [&mut a], ParamKind::Weight).unwrap();
        let mut b = Tensor::zeros(&[2]).trainable(true);
        b.accumulate(&[1.0, 1.0]).unwrap();
        assert!(opt.step_tensors(&mut [&mut b], ParamKind::Weight).is_err());
    }

    #[test]
    fn weight_decay_skips_bias_and_norm() {
        let mut opt = Optimizer::sgd(0.1, 0.0, 0.5);
        let mut w = scalar_param(2.0, 0.0);
        opt.step_tensors(&mut [&mut w], ParamKind::Bias).unwrap();
        assert_eq!(w.data()[0], 2.0);
        opt.step_tensors(&mut [&mut w], ParamKind::Weight).unwrap();
        assert!((w.data()[0] - 1.9).abs() < 1e-6);
    }

    /// Reference Adam written in f64, independent of the optimizer above.
    fn reference_adam_bowl(w0: f64, lr: f64, b1: f64, b2: f64, steps: usize) -> f64 {
        let (mut w, mut m, mut v) = (w0, 0.0, 0.0);
        for t in 1..=steps {
            let g = 2.0 * w;
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1.powi(t as i32));
            let vh = v / (1.0 - b2.powi(t as i32));
            w -= lr * mh / (vh.sqrt() + 1e-8);
        }
        w
    }

    #[test]
    fn adam_descends_quadratic_bowl() {
        let mut w = Tensor::scalar(5.0).trainable(true);
        let mut opt = Optimizer::adam(0.1, 0.9, 0.999, 0.0);
        for _ in 0..200 {
            w.zero_grad();
            let g = 2.0 * w.data()[0];
            w.accumulate(&[g]).unwrap();
            opt.step_tensors(&mut [&mut w], ParamKind::Weight).unwrap();
        }
        let reference = reference_adam_bowl(5.0, 0.1, 0.9, 0.999, 200);
        assert!(reference.abs() < 0.1, "reference {reference}");
        assert!(w.data()[0].abs() < 0.1, "{}", w.data()[0]);
        assert!((w.data()[0] as f64 - reference).abs() < 1e-3);
    }

    #[test]
    fn cosine_endpoints_and_midpoint() {
        let s = CosineSchedule::new(0.2, 100).unwrap();
        assert_eq!(s.lr(0).unwrap(), 0.2);
        assert_eq!(s.lr(100).unwrap(), 0.0);
        assert!((s.lr(50).unwrap() - 0.1).abs() < 1e-7);
        assert!(s.lr(101).is_err());
        let mut prev = f32::INFINITY;
        for step in 0..=100 {
            let lr = s.lr(step).unwrap();
            assert!(lr <= prev);
            prev = lr;
        }
    }

    #[test]
    fn decay_schedule_drops_by_decades() {
        let s = DecaySchedule { initial_lr: 5e-3, total_steps: 80, milestones: vec![0.25, 0.5, 0.75], factor: 10.0 };
        assert_eq!(s.lr(0), 5e-3);
        assert!((s.lr(20) - 5e-4).abs() < 1e-10);
        assert!((s.lr(79) - 5e-6).abs() < 1e-12);
    }
}
