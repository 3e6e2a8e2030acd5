use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Central-difference gradient check of a scalar function of one tensor.
///
/// Returns `max |analytic - numeric| / max(1, |numeric|)` over coordinates.
pub fn grad_check<F>(f: F, point: &Tensor, eps: f32) -> Result<f32>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    grad_check_many(|tape, vars| f(tape, vars[0]), std::slice::from_ref(point), eps)
}

/// As [`grad_check`], over every coordinate of several inputs at once.
pub fn grad_check_many<F>(f: F, points: &[Tensor], eps: f32) -> Result<f32>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(eps > 1e-5 && eps < 1e-2) {
        return Err(Error::Invalid(format!("eps {eps} outside (1e-5, 1e-2)")));
    }
    let eval = |values: &[Vec<f32>], track: bool| -> Result<(Tape, Vec<Var>, Var)> {
        let mut tape = Tape::new();
        let vars = points
            .iter()
            .zip(values)
            .map(|(p, v)| tape.leaf(p.shape(), v.clone(), track))
            .collect::<Result<Vec<_>>>()?;
        let out = f(&mut tape, &vars)?;
        let y = tape.value(out);
        if y.len() != 1 {
            return Err(Error::NonScalarLoss(tape.shape(out).to_vec()));
        }
        if !y[0].is_finite() {
            return Err(Error::NonFinite(format!("function value {}", y[0])));
        }
        Ok((tape, vars, out))
    };

    let mut values: Vec<Vec<f32>> = points.iter().map(|p| p.data().to_vec()).collect();
    let (mut tape, vars, out) = eval(&values, true)?;
    tape.backward(out)?;
    let analytic: Vec<Vec<f32>> = vars
        .iter()
        .zip(points)
        .map(|(&v, p)| tape.grad(v).map(<[f32]>::to_vec).unwrap_or_else(|| vec![0.0; p.numel()]))
        .collect();

    let mut worst = 0.0f32;
    for t in 0..points.len() {
        for i in 0..values[t].len() {
            let orig = values[t][i];
            values[t][i] = orig + eps;
            let (tp, _, op) = eval(&values, false)?;
            let plus = tp.value(op)[0] as f64;
            values[t][i] = orig - eps;
            let (tm, _, om) = eval(&values, false)?;
            let minus = tm.value(om)[0] as f64;
            values[t][i] = orig;
            let numeric = ((plus - minus) / (2.0 * eps as f64)) as f32;
            let err = (analytic[t][i] - numeric).abs() / numeric.abs().max(1.0);
            if !err.is_finite() {
                return Err(Error::NonFinite(format!("gradient error at coordinate {i}")));
            }
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_function_has_zero_error() {
        let p = Tensor::new(vec![3], vec![0.3, -0.2, 1.0]).unwrap();
        let err = grad_check(
            |t, _x| t.constant(&[1], vec![2.5]),
            &p,
            1e-3,
        )
        .unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn rejects_out_of_range_eps() {
        let p = Tensor::zeros(&[2]);
        assert!(grad_check(|t, x| t.sum(x), &p, 0.1).is_err());
        assert!(grad_check(|t, x| t.sum(x), &p, 1e-6).is_err());
    }

    #[test]
    fn non_finite_output_is_an_error() {
        let p = Tensor::new(vec![2], vec![-1.0, 1.0]).unwrap();
        let r = grad_check(
            |t, x| {
                let l = t.log(x)?;
                t.sum(l)
            },
            &p,
            1e-3,
        );
        assert!(matches!(r, Err(Error::NonFinite(_))));
    }
}
