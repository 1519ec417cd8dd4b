//! Central finite-difference verification of tape gradients.

use super::autograd::{Tape, Var};
use super::dense::Tensor;
use crate::error::{Error, Result};

pub const DEFAULT_STEP: f64 = 1e-5;

/// Relative error between an analytic and a numeric derivative.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(1e-8);
    (analytic - numeric).abs() / denom
}

/// Maximum relative error over every coordinate of every input between the
/// tape gradient of `f` and central differences with step `h`.
pub fn check_gradients<F>(f: F, points: &[Tensor], h: f64) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let eval = |inputs: &[Tensor]| -> Result<f64> {
        let tape = Tape::eval();
        let vars: Vec<Var<'_>> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = f(&tape, &vars)?;
        Ok(out.value().item())
    };

    let tape = Tape::eval();
    let vars: Vec<Var<'_>> = points.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&tape, &vars)?;
    if out.value().numel() != 1 {
        return Err(Error::contract("gradient check needs a scalar function"));
    }
    let grads = tape.backward(out)?;
    let analytic: Vec<Tensor> = vars.iter().map(|v| grads.get_or_zeros(*v)).collect();

    let mut worst = 0.0f64;
    let mut work: Vec<Tensor> = points.to_vec();
    for (k, point) in points.iter().enumerate() {
        for i in 0..point.numel() {
            let x = point.data()[i];
            work[k].data_mut()[i] = x + h;
            let plus = eval(&work)?;
            work[k].data_mut()[i] = x - h;
            let minus = eval(&work)?;
            work[k].data_mut()[i] = x;
            let numeric = (plus - minus) / (2.0 * h);
            worst = worst.max(relative_error(analytic[k].data()[i], numeric));
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    use super::*;

    fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::from_fn(shape.to_vec(), |_| StandardNormal.sample(rng))
    }

    #[test]
    fn sum_of_squares() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let err = check_gradients(
            |_, v| Ok(v[0].mul(&v[0])?.sum()),
            &[randn(&[4, 3], &mut rng)],
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn sigmoid_matmul_chain() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let err = check_gradients(
            |_, v| Ok(v[0].matmul(&v[1])?.sigmoid().sum()),
            &[randn(&[3, 4], &mut rng), randn(&[4, 2], &mut rng)],
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn constant_function_has_zero_error() {
        let err = check_gradients(
            |t, _| Ok(t.constant(Tensor::scalar(4.0)).sum()),
            &[Tensor::ones([3])],
            DEFAULT_STEP,
        )
        .unwrap();
        assert_eq!(err, 0.0);
    }
}
