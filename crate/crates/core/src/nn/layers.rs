use rand_distr::{Distribution, Normal};

use super::{Mode, ParamKind, Parameterized};
use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::rng::Rng;

pub(crate) fn normal_vec(rng: &mut Rng, n: usize, std: f32) -> Vec<f32> {
    let dist = Normal::new(0.0f32, std).expect("positive std");
    (0..n).map(|_| dist.sample(rng)).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Conv2dLayer {
    pub weight: Tensor,
    pub bias: Tensor,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2dLayer {
    /// He-initialized kernel, zero bias.
    pub fn new(in_ch: usize, out_ch: usize, k: usize, stride: usize, padding: usize, rng: &mut Rng) -> Result<Self> {
        let std = (2.0 / (in_ch * k * k) as f32).sqrt();
        let weight = normal_vec(rng, out_ch * in_ch * k * k, std);
        Self::from_parts(weight, vec![0.0; out_ch], [out_ch, in_ch, k], stride, padding)
    }

    /// 1×1 convolution with kernel entries drawn at the given scale.
    pub fn pointwise(channels: usize, scale: f32, identity: bool, rng: &mut Rng) -> Result<Self> {
        let mut w = normal_vec(rng, channels * channels, scale);
        if identity {
            for c in 0..channels {
                w[c * channels + c] += 1.0;
            }
        }
        Self::from_parts(w, vec![0.0; channels], [channels, channels, 1], 1, 0)
    }

    pub fn from_parts(
        weight: Vec<f32>,
        bias: Vec<f32>,
        [out_ch, in_ch, k]: [usize; 3],
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        if k != 1 && k != 3 {
            return Err(Error::Invalid(format!("kernel size {k} not in {{1, 3}}")));
        }
        if stride == 0 {
            return Err(Error::Invalid("stride must be positive".into()));
        }
        Ok(Conv2dLayer {
            weight: Tensor::new(vec![out_ch, in_ch, k, k], weight)?.trainable(true),
            bias: Tensor::new(vec![out_ch], bias)?.trainable(true),
            stride,
            padding,
        })
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn kernel(&self) -> usize {
        self.weight.shape()[2]
    }

    pub fn output_hw(&self, h: usize, w: usize) -> (usize, usize) {
        let k = self.kernel();
        (
            (h + 2 * self.padding - k) / self.stride + 1,
            (w + 2 * self.padding - k) / self.stride + 1,
        )
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let shape = tape.shape(x);
        if shape.len() != 4 || shape[1] != self.in_channels() {
            return Err(Error::shape(
                "conv2d",
                format!("input {:?} for {} input channels", shape, self.in_channels()),
            ));
        }
        let w = tape.param(&self.weight);
        let b = tape.param(&self.bias);
        tape.conv2d(x, w, Some(b), self.stride, self.padding)
    }
}

impl Parameterized for Conv2dLayer {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Tensor, ParamKind)) {
        f(&mut self.weight, ParamKind::Weight);
        f(&mut self.bias, ParamKind::Bias);
    }
    fn visit_params_ref(&self, f: &mut dyn FnMut(&Tensor, ParamKind)) {
        f(&self.weight, ParamKind::Weight);
        f(&self.bias, ParamKind::Bias);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormLayer {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Vec<f32>,
    pub running_var: Vec<f32>,
    pub momentum: f32,
    pub eps: f32,
}

impl BatchNormLayer {
    pub const DEFAULT_EPS: f32 = 1e-5;
    pub const DEFAULT_MOMENTUM: f32 = 0.1;

    pub fn new(channels: usize) -> Self {
        BatchNormLayer {
            gamma: Tensor::full(&[channels], 1.0).trainable(true),
            beta: Tensor::zeros(&[channels]).trainable(true),
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            momentum: Self::DEFAULT_MOMENTUM,
            eps: Self::DEFAULT_EPS,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.numel()
    }

    pub fn reset_running_stats(&mut self) {
        self.running_mean.iter_mut().for_each(|v| *v = 0.0);
        self.running_var.iter_mut().for_each(|v| *v = 1.0);
    }

    /// Per-channel `(scale, shift)` of the eval-mode map.
    pub fn eval_affine(&self) -> (Vec<f32>, Vec<f32>) {
        let scale: Vec<f32> = (0..self.channels())
            .map(|c| self.gamma.data()[c] / (self.running_var[c] + self.eps).sqrt())
            .collect();
        let shift = (0..self.channels())
            .map(|c| self.beta.data()[c] - self.running_mean[c] * scale[c])
            .collect();
        (scale, shift)
    }

    pub fn forward(&mut self, tape: &mut Tape, x: Var, mode: Mode) -> Result<Var> {
        let shape = tape.shape(x).to_vec();
        if shape.len() < 2 || shape[1] != self.channels() {
            return Err(Error::shape(
                "batchnorm",
                format!("input {:?} for {} channels", shape, self.channels()),
            ));
        }
        let c = self.channels();
        match mode {
            Mode::Train { update_stats } => {
                if shape[0] < 2 {
                    return Err(Error::Invalid("batchnorm in train mode needs batch size >= 2".into()));
                }
                let g = tape.param(&self.gamma);
                let b = tape.param(&self.beta);
                let (y, stats) = tape.batch_norm(x, g, b, self.eps)?;
                if update_stats {
                    let unbias = stats.count as f32 / (stats.count as f32 - 1.0).max(1.0);
                    for ch in 0..c {
                        self.running_mean[ch] =
                            (1.0 - self.momentum) * self.running_mean[ch] + self.momentum * stats.mean[ch];
                        self.running_var[ch] =
                            (1.0 - self.momentum) * self.running_var[ch] + self.momentum * stats.var[ch] * unbias;
                    }
                }
                Ok(y)
            }
            Mode::Eval => self.forward_eval(tape, x),
        }
    }

    /// Eval-mode forward; never touches the running statistics.
    pub fn forward_eval(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let shape = tape.shape(x);
        let c = self.channels();
        if shape.len() < 2 || shape[1] != c {
            return Err(Error::shape("batchnorm", format!("input {:?} for {} channels", shape, c)));
        }
        if !self.gamma.requires_grad() && !self.beta.requires_grad() {
            let (scale, shift) = self.eval_affine();
            let s = tape.constant(&[c], scale)?;
            let t = tape.constant(&[c], shift)?;
            return tape.channel_affine(x, s, t);
        }
        let inv: Vec<f32> = self.running_var.iter().map(|v| 1.0 / (v + self.eps).sqrt()).collect();
        let shift: Vec<f32> = self.running_mean.iter().zip(&inv).map(|(m, s)| -m * s).collect();
        let s = tape.constant(&[c], inv)?;
        let t = tape.constant(&[c], shift)?;
        let normed = tape.channel_affine(x, s, t)?;
        let g = tape.param(&self.gamma);
        let b = tape.param(&self.beta);
        tape.channel_affine(normed, g, b)
    }
}

impl Parameterized for BatchNormLayer {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Tensor, ParamKind)) {
        f(&mut self.gamma, ParamKind::Norm);
        f(&mut self.beta, ParamKind::Norm);
    }
    fn visit_params_ref(&self, f: &mut dyn FnMut(&Tensor, ParamKind)) {
        f(&self.gamma, ParamKind::Norm);
        f(&self.beta, ParamKind::Norm);
    }
}

/// Affine map `x·W + b` with `W: [in, out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    pub fn new(input: usize, output: usize, rng: &mut Rng) -> Result<Self> {
        let std = (1.0 / input as f32).sqrt();
        Self::from_parts(normal_vec(rng, input * output, std), vec![0.0; output], input, output)
    }

    pub fn from_parts(weight: Vec<f32>, bias: Vec<f32>, input: usize, output: usize) -> Result<Self> {
        Ok(Linear {
            weight: Tensor::new(vec![input, output], weight)?.trainable(true),
            bias: Tensor::new(vec![output], bias)?.trainable(true),
        })
    }

    pub fn input_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn output_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let shape = tape.shape(x);
        if shape.len() != 2 || shape[1] != self.input_dim() {
            return Err(Error::shape("linear", format!("input {:?} for {} features", shape, self.input_dim())));
        }
        let w = tape.param(&self.weight);
        let b = tape.param(&self.bias);
        let xw = tape.matmul(x, w)?;
        tape.add_row(xw, b)
    }
}

impl Parameterized for Linear {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Tensor, ParamKind)) {
        f(&mut self.weight, ParamKind::Weight);
        f(&mut self.bias, ParamKind::Bias);
    }
    fn visit_params_ref(&self, f: &mut dyn FnMut(&Tensor, ParamKind)) {
        f(&self.weight, ParamKind::Weight);
        f(&self.bias, ParamKind::Bias);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad_check_many;
    use crate::rng::seeded;

    fn random(rng: &mut Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), normal_vec(rng, n, 1.0)).unwrap()
    }

    #[test]
    fn identity_pointwise_conv_is_exact() {
        let mut rng = seeded(1);
        let conv = Conv2dLayer::pointwise(3, 0.0, true, &mut rng).unwrap();
        let x = random(&mut rng, &[2, 3, 4, 4]);
        let mut tape = Tape::new();
        let xv = tape.param(&x);
        let y = conv.forward(&mut tape, xv).unwrap();
        assert_eq!(tape.value(y), x.data());
    }

    #[test]
    fn zero_kernel_gives_bias() {
        let conv = Conv2dLayer::from_parts(vec![0.0; 2 * 3 * 9], vec![0.5, -1.5], [2, 3, 3], 1, 1).unwrap();
        let x = random(&mut seeded(2), &[1, 3, 5, 5]);
        let mut tape = Tape::new();
        let xv = tape.param(&x);
        let y = conv.forward(&mut tape, xv).unwrap();
        let out = tape.value(y);
        assert!(out[..25].iter().all(|&v| v == 0.5));
        assert!(out[25..].iter().all(|&v| v == -1.5));
    }

    #[test]
    fn conv_rejects_channel_mismatch_and_bad_kernel() {
        let mut rng = seeded(3);
        let conv = Conv2dLayer::new(4, 2, 3, 1, 1, &mut rng).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(&[1, 3, 5, 5], vec![0.0; 75]).unwrap();
        assert!(conv.forward(&mut tape, x).is_err());
        assert!(Conv2dLayer::new(4, 2, 5, 1, 1, &mut rng).is_err());
        assert_eq!(conv.output_hw(16, 16), (16, 16));
        let strided = Conv2dLayer::new(4, 2, 3, 2, 1, &mut rng).unwrap();
        assert_eq!(strided.output_hw(16, 16), (8, 8));
    }

    #[test]
    fn conv3x3_gradcheck() {
        let mut rng = seeded(4);
        let x = random(&mut rng, &[1, 2, 5, 5]);
        let w = Tensor::new(vec![3, 2, 3, 3], normal_vec(&mut rng, 54, 0.3)).unwrap();
        let b = random(&mut rng, &[3]);
        let err = grad_check_many(
            |t, v| {
                let y = t.conv2d(v[0], v[1], Some(v[2]), 1, 1)?;
                let y2 = t.mul(y, y)?;
                t.mean(y2)
            },
            &[x, w, b],
            1e-3,
        )
        .unwrap();
        assert!(err < 1e-3, "{err}");
    }

    #[test]
    fn batchnorm_fixed_point_and_gamma_zero() {
        // two samples per channel at ±1: zero mean, unit variance
        let x = Tensor::new(vec![2, 2, 1, 1], vec![1.0, -1.0, -1.0, 1.0]).unwrap();
        let mut bn = BatchNormLayer::new(2);
        let mut tape = Tape::new();
        let xv = tape.param(&x);
        let y = bn.forward(&mut tape, xv, Mode::TRAIN).unwrap();
        for (a, b) in tape.value(y).iter().zip(x.data()) {
            assert!((a - b).abs() < 1e-3);
        }
        let mut bn = BatchNormLayer::new(2);
        bn.gamma.data_mut().fill(0.0);
        bn.beta.data_mut().copy_from_slice(&[0.25, -2.0]);
        let y = bn.forward(&mut tape, xv, Mode::TRAIN).unwrap();
        assert_eq!(tape.value(y), &[0.25, -2.0, 0.25, -2.0]);
    }

    #[test]
    fn batchnorm_train_output_has_zero_batch_mean() {
        let mut rng = seeded(5);
        let x = random(&mut rng, &[4, 3, 3, 3]);
        let mut bn = BatchNormLayer::new(3);
        bn.gamma.data_mut().copy_from_slice(&[0.5, 2.0, -1.0]);
        let mut tape = Tape::new();
        let xv = tape.param(&x);
        let y = bn.forward(&mut tape, xv, Mode::TRAIN).unwrap();
        let out = tape.value(y);
        for c in 0..3 {
            let mut s = 0.0f64;
            for n in 0..4 {
                s += out[(n * 3 + c) * 9..(n * 3 + c + 1) * 9].iter().map(|&v| v as f64).sum::<f64>();
            }
            assert!((s / 36.0).abs() < 1e-5);
        }
        // running stats moved by momentum toward the batch stats
        assert!(bn.running_var.iter().all(|&v| v >= 0.0));
        assert!(bn.running_mean.iter().any(|&m| m != 0.0));
    }

    #[test]
    fn batchnorm_rejects_single_sample_training() {
        let mut bn = BatchNormLayer::new(2);
        let mut tape = Tape::new();
        let x = tape.constant(&[1, 2, 2, 2], vec![1.0; 8]).unwrap();
        assert!(bn.forward(&mut tape, x, Mode::TRAIN).is_err());
        assert!(bn.forward(&mut tape, x, Mode::Eval).is_ok());
    }

    #[test]
    fn batchnorm_eval_is_affine() {
        let mut bn = BatchNormLayer::new(2);
        bn.running_mean = vec![0.5, -1.0];
        bn.running_var = vec![4.0, 0.25];
        bn.gamma.data_mut().copy_from_slice(&[1.5, -0.5]);
        bn.beta.data_mut().copy_from_slice(&[0.1, 0.2]);
        let (scale, shift) = bn.eval_affine();
        let mut tape = Tape::new();
        let x = tape.constant(&[1, 2, 1, 2], vec![1.0, 2.0, 3.0, -4.0]).unwrap();
        let y = bn.forward(&mut tape, x, Mode::Eval).unwrap();
        let out = tape.value(y).to_vec();
        let expect = [
            1.0 * scale[0] + shift[0],
            2.0 * scale[0] + shift[0],
            3.0 * scale[1] + shift[1],
            -4.0 * scale[1] + shift[1],
        ];
        for (a, b) in out.iter().zip(&expect) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn batchnorm_train_gradcheck() {
        let mut rng = seeded(6);
        let x = random(&mut rng, &[3, 2, 2, 2]);
        let g = random(&mut rng, &[2]);
        let b = random(&mut rng, &[2]);
        let weights = random(&mut rng, &[3, 2, 2, 2]);
        let err = grad_check_many(
            |t, v| {
                let (y, _) = t.batch_norm(v[0], v[1], v[2], 1e-5)?;
                let w = t.constant(weights.shape(), weights.data().to_vec())?;
                let yw = t.mul(y, w)?;
                t.sum(yw)
            },
            &[x, g, b],
            1e-3,
        )
        .unwrap();
        assert!(err < 1e-3, "{err}");
    }

    #[test]
    fn linear_identity_and_zero() {
        let x = Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let eye = Linear::from_parts(vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0], vec![0.0; 3], 3, 3).unwrap();
        let mut tape = Tape::new();
        let xv = tape.param(&x);
        let y = eye.forward(&mut tape, xv).unwrap();
        assert_eq!(tape.value(y), x.data());
        let zero = Linear::from_parts(vec![0.0; 6], vec![7.0, 8.0], 3, 2).unwrap();
        let y = zero.forward(&mut tape, xv).unwrap();
        assert_eq!(tape.value(y), &[7.0, 8.0, 7.0, 8.0]);
    }

    #[test]
    fn linear_gradcheck() {
        let mut rng = seeded(7);
        let x = random(&mut rng, &[4, 3]);
        let w = random(&mut rng, &[3, 5]);
        let b = random(&mut rng, &[5]);
        let err = grad_check_many(
            |t, v| {
                let xw = t.matmul(v[0], v[1])?;
                let y = t.add_row(xw, v[2])?;
                t.softmax_cross_entropy(y, &[0, 4, 2, 1])
            },
            &[x, w, b],
            1e-3,
        )
        .unwrap();
        assert!(err < 1e-3, "{err}");
    }
}
