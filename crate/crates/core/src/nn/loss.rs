use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossKind {
    /// Softmax cross-entropy on logits.
    #[default]
    CrossEntropy,
    /// Mean over the batch of `||logits - onehot(label)||²`.
    SquaredError,
}

pub fn loss(tape: &mut Tape, logits: Var, labels: &[usize], kind: LossKind) -> Result<Var> {
    match kind {
        LossKind::CrossEntropy => tape.softmax_cross_entropy(logits, labels),
        LossKind::SquaredError => {
            let shape = tape.shape(logits).to_vec();
            if shape.len() != 2 || shape[0] != labels.len() {
                return Err(Error::shape(
                    "squared_error",
                    format!("logits {shape:?} vs {} labels", labels.len()),
                ));
            }
            let k = shape[1];
            let mut onehot = vec![0.0; shape[0] * k];
            for (i, &l) in labels.iter().enumerate() {
                if l >= k {
                    return Err(Error::Invalid(format!("label {l} out of range for {k} classes")));
                }
                onehot[i * k + l] = 1.0;
            }
            let target = tape.constant(&shape, onehot)?;
            let diff = tape.sub(logits, target)?;
            let sq = tape.mul(diff, diff)?;
            let total = tape.sum(sq)?;
            tape.scale(total, 1.0 / labels.len() as f32)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{grad_check, Tensor};

    #[test]
    fn uniform_logits_give_ln_k() {
        let mut t = Tape::new();
        let z = t.constant(&[3, 4], vec![0.0; 12]).unwrap();
        let l = loss(&mut t, z, &[0, 1, 2], LossKind::CrossEntropy).unwrap();
        assert!((t.value(l)[0] - 1.3863).abs() < 1e-4);
    }

    #[test]
    fn confident_correct_logit_loss_vanishes() {
        let mut t = Tape::new();
        let z = t.constant(&[1, 4], vec![0.0, 0.0, 80.0, 0.0]).unwrap();
        let l = loss(&mut t, z, &[2], LossKind::CrossEntropy).unwrap();
        assert!(t.value(l)[0] < 1e-6);
    }

    #[test]
    fn label_out_of_range() {
        let mut t = Tape::new();
        let z = t.constant(&[1, 4], vec![0.0; 4]).unwrap();
        for kind in [LossKind::CrossEntropy, LossKind::SquaredError] {
            assert!(loss(&mut t, z, &[4], kind).is_err());
        }
    }

    #[test]
    fn cross_entropy_gradcheck_random_logits() {
        use rand::Rng as _;
        let mut rng = crate::rng::seeded(11);
        let data: Vec<f32> = (0..20).map(|_| rng.random_range(-2.0..2.0)).collect();
        let p = Tensor::new(vec![5, 4], data).unwrap();
        let err = grad_check(|t, x| loss(t, x, &[0, 3, 1, 2, 3], LossKind::CrossEntropy), &p, 1e-3).unwrap();
        assert!(err < 1e-3, "{err}");
    }

    #[test]
    fn squared_error_value_and_gradient() {
        let p = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.5, 0.5]).unwrap();
        let mut t = Tape::new();
        let z = t.param(&p);
        let l = loss(&mut t, z, &[0, 1], LossKind::SquaredError).unwrap();
        // (0 + 0 + 0.25 + 0.25) / 2
        assert!((t.value(l)[0] - 0.25).abs() < 1e-7);
        let err = grad_check(|t, x| loss(t, x, &[0, 1], LossKind::SquaredError), &p, 1e-3).unwrap();
        assert!(err < 1e-3);
    }
}
