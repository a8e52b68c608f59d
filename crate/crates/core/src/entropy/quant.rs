//! Scalar quantization of latents.

use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;

use crate::autodiff::Var;
use crate::entropy::tables::{SYMBOL_MAX, SYMBOL_MIN};
use crate::error::{contract, Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum QuantMode {
    /// `y + u`, `u ~ U(-0.5, 0.5)`: the differentiable training proxy.
    AdditiveNoise,
    /// Nearest integer, ties away from zero.
    Round,
}

/// Nearest integer with ties away from zero (`f64::round` semantics).
pub fn round_half_away(x: f64) -> f64 {
    x.round()
}

pub fn quantize(y: &Tensor, mode: QuantMode, seed: u64) -> Tensor {
    match mode {
        QuantMode::Round => y.map(round_half_away),
        QuantMode::AdditiveNoise => {
            let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
            let noise = uniform_noise(y.shape(), &mut rng);
            y.zip_map(&noise, |a, b| a + b).expect("same shape")
        }
    }
}

pub fn uniform_noise<R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Tensor {
    Tensor::uniform(shape, -0.5, 0.5, rng)
}

/// Graph-level quantization. Rounding has no useful gradient, so it is only
/// allowed on values that do not require one.
pub fn quantize_var<'g, R: Rng + ?Sized>(y: Var<'g>, mode: QuantMode, rng: &mut R) -> Result<Var<'g>> {
    match mode {
        QuantMode::Round => {
            contract!(
                !y.requires_grad(),
                "rounding quantization on a value that requires gradients"
            );
            Ok(y.graph().constant(y.value().map(round_half_away)))
        }
        QuantMode::AdditiveNoise => {
            let noise = y.graph().constant(uniform_noise(&y.shape(), rng));
            y.add(noise)
        }
    }
}

/// Converts an integer-valued tensor to codable symbols.
pub fn to_symbols(t: &Tensor) -> Result<Vec<i32>> {
    t.data()
        .iter()
        .map(|&v| {
            if v.fract() != 0.0 || v < SYMBOL_MIN as f64 || v > SYMBOL_MAX as f64 {
                Err(Error::Encode(format!("latent value {v} is not a codable integer")))
            } else {
                Ok(v as i32)
            }
        })
        .collect()
}

pub fn from_symbols(shape: &[usize], syms: &[i32]) -> Result<Tensor> {
    Tensor::new(shape, syms.iter().map(|&v| v as f64).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Graph;

    #[test]
    fn ties_round_away_from_zero() {
        assert_eq!(round_half_away(0.4), 0.0);
        assert_eq!(round_half_away(-1.5), -2.0);
        assert_eq!(round_half_away(2.5), 3.0);
        assert_eq!(round_half_away(-0.5), -1.0);
    }

    #[test]
    fn noise_stays_within_half_bin() {
        let y = Tensor::new(&[5], vec![-3.0, -0.2, 0.0, 0.7, 10.0]).unwrap();
        let q = quantize(&y, QuantMode::AdditiveNoise, 9);
        for (a, b) in y.data().iter().zip(q.data()) {
            assert!((a - b).abs() <= 0.5);
        }
    }

    #[test]
    fn noise_is_centered() {
        let q = quantize(&Tensor::zeros(&[1_000_000]), QuantMode::AdditiveNoise, 3);
        assert!(q.mean().abs() < 2e-3);
    }

    #[test]
    fn rounding_a_trainable_value_is_rejected() {
        let g = Graph::new();
        let x = g.param(Tensor::zeros(&[2]));
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(0);
        assert!(matches!(
            quantize_var(x, QuantMode::Round, &mut rng),
            Err(Error::Contract(_))
        ));
        let c = g.constant(Tensor::full(&[2], 1.5));
        assert_eq!(quantize_var(c, QuantMode::Round, &mut rng).unwrap().value().data(), &[2.0, 2.0]);
    }

    #[test]
    fn symbols_reject_fractions() {
        assert!(to_symbols(&Tensor::full(&[1], 0.5)).is_err());
        assert_eq!(to_symbols(&Tensor::full(&[2], -3.0)).unwrap(), vec![-3, -3]);
    }
}
