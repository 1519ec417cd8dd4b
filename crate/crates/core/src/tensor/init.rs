use rand::Rng;

use super::dense::Tensor;
use crate::error::{Error, Result};

/// Default gain for every weight matrix of the graph VAE.
pub const DEFAULT_GAIN: f64 = 0.01;

/// Bound `b` of the Xavier uniform distribution `U(-b, b)`.
pub fn xavier_bound(fan_in: usize, fan_out: usize, gain: f64) -> f64 {
    gain * (6.0 / (fan_in + fan_out) as f64).sqrt()
}

/// Xavier/Glorot uniform initialisation of a `(fan_in, fan_out)` matrix.
pub fn xavier_uniform<R: Rng + ?Sized>(shape: &[usize], gain: f64, rng: &mut R) -> Result<Tensor> {
    if shape.len() != 2 {
        return Err(Error::contract(format!(
            "xavier initialisation needs a rank-2 shape, got {shape:?}"
        )));
    }
    let b = xavier_bound(shape[0], shape[1], gain);
    if b == 0.0 {
        return Ok(Tensor::zeros(shape.to_vec()));
    }
    Ok(Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-b..=b)))
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn bound_arithmetic() {
        let b = xavier_bound(512, 512, 0.01);
        assert!((b - 0.01 * (6.0f64 / 1024.0).sqrt()).abs() < 1e-18);
        assert!((b - 7.654e-4).abs() < 1e-7);
    }

    #[test]
    fn entries_within_bound_and_seeded() {
        let mut r1 = ChaCha8Rng::seed_from_u64(5);
        let mut r2 = ChaCha8Rng::seed_from_u64(5);
        let a = xavier_uniform(&[512, 512], 0.01, &mut r1).unwrap();
        let b = xavier_uniform(&[512, 512], 0.01, &mut r2).unwrap();
        assert_eq!(a, b);
        let bound = xavier_bound(512, 512, 0.01);
        assert!(a.data().iter().all(|x| x.abs() <= bound));
    }

    #[test]
    fn zero_gain_gives_zeros() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let t = xavier_uniform(&[3, 4], 0.0, &mut rng).unwrap();
        assert!(t.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn rank_checked() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(xavier_uniform(&[3], 1.0, &mut rng).is_err());
        assert!(xavier_uniform(&[3, 3, 3], 1.0, &mut rng).is_err());
    }
}
