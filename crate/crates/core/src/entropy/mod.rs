//! Quantization, learned entropy models, range coding and the container.

pub mod bitstream;
pub mod context;
pub mod factorized;
pub mod gaussian;
pub mod quant;
pub mod range_coder;
pub mod tables;

pub use bitstream::{Bitstream, Header};
pub use quant::{quantize, QuantMode};
pub use tables::{range_decode, range_encode, CdfProvider, SymbolTable};

/// Smallest probability any integer bin may receive.
pub const P_FLOOR: f64 = 1.0 / 65536.0;
/// Lower bound on Gaussian scales.
pub const SIGMA_MIN: f64 = 0.11;

/// `-Σ log2 p` over a slice of likelihoods.
pub fn bits_of(likelihoods: &[f64]) -> f64 {
    likelihoods.iter().map(|p| -p.log2()).sum()
}

/// Estimated against actual payload size of one coded latent.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RateCheck {
    pub elements: usize,
    /// `-Σ log2 p` of the coded symbols.
    pub estimate: f64,
    /// Payload bytes times eight.
    pub actual: usize,
}

impl RateCheck {
    /// Whether `|estimate - actual| <= rel * estimate + abs`.
    pub fn within(&self, rel: f64, abs: f64) -> bool {
        (self.estimate - self.actual as f64).abs() <= rel * self.estimate + abs
    }
}
