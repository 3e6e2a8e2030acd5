//! Layers, losses and optimizers shared by the trunk, adapters and heads.

mod layers;
mod loss;
mod optim;

#[cfg(test)]
pub(crate) use layers::normal_vec;
pub use layers::{BatchNormLayer, Conv2dLayer, Linear};
pub use loss::{loss, LossKind};
pub use optim::{CosineSchedule, DecaySchedule, Optimizer, OptimizerKind};

use crate::autodiff::{Tape, Tensor};
use crate::error::Result;

/// Role of a parameter, used to route optimizers and weight decay.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    /// Conv kernels and linear matrices; weight-decayed.
    Weight,
    Bias,
    /// BatchNorm affine parameters.
    Norm,
    /// Architecture logits (α, β).
    Arch,
}

/// Forward-pass mode for layers with batch statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics; running estimates are refreshed only when
    /// `update_stats` is set.
    Train { update_stats: bool },
    Eval,
}

impl Mode {
    pub const TRAIN: Mode = Mode::Train { update_stats: true };
}

pub trait Parameterized {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Tensor, ParamKind));
    fn visit_params_ref(&self, f: &mut dyn FnMut(&Tensor, ParamKind));

    fn zero_grad(&mut self) {
        self.visit_params(&mut |t, _| t.zero_grad());
    }

    /// Pulls gradients recorded on `tape` into the owned tensors.
    fn collect_grads(&mut self, tape: &Tape) -> Result<()> {
        let mut res = Ok(());
        self.visit_params(&mut |t, _| {
            if res.is_ok() {
                res = tape.accumulate_grad(t);
            }
        });
        res
    }

    fn param_count_where(&self, keep: &dyn Fn(ParamKind) -> bool) -> usize {
        let mut n = 0;
        self.visit_params_ref(&mut |t, k| {
            if keep(k) {
                n += t.numel();
            }
        });
        n
    }

    fn set_trainable(&mut self, trainable: bool) {
        self.visit_params(&mut |t, _| t.set_requires_grad(trainable));
    }
}

impl<A: Parameterized + ?Sized, B: Parameterized + ?Sized> Parameterized for (&mut A, &mut B) {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Tensor, ParamKind)) {
        self.0.visit_params(f);
        self.1.visit_params(f);
    }
    fn visit_params_ref(&self, f: &mut dyn FnMut(&Tensor, ParamKind)) {
        self.0.visit_params_ref(f);
        self.1.visit_params_ref(f);
    }
}
