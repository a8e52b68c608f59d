//! Linear-β diffusion noise schedule and uniformly spaced sampling steps.

use crate::error::{contract, Result};
use crate::tensor::Tensor;

pub const DEFAULT_STEPS: usize = 1000;
pub const BETA_START: f64 = 1e-4;
pub const BETA_END: f64 = 0.02;

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        NoiseSchedule::linear(DEFAULT_STEPS, BETA_START, BETA_END).expect("default schedule")
    }
}

impl NoiseSchedule {
    /// `β_t` linear from `start` at `t = 1` to `end` at `t = steps`.
    pub fn linear(steps: usize, start: f64, end: f64) -> Result<Self> {
        contract!(steps >= 2, "a schedule needs at least two steps");
        contract!(
            0.0 < start && start < end && end < 1.0,
            "betas must satisfy 0 < start < end < 1, got {start}..{end}"
        );
        let betas: Vec<f64> = (0..steps)
            .map(|i| start + (end - start) * i as f64 / (steps - 1) as f64)
            .collect();
        let mut acc = 1.0;
        let alpha_bars = betas
            .iter()
            .map(|b| {
                acc *= 1.0 - b;
                acc
            })
            .collect();
        Ok(NoiseSchedule { betas, alpha_bars })
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    /// `ᾱ_t`, with `ᾱ_0 = 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }

    pub fn check_t(&self, t: usize) -> Result<()> {
        contract!(
            (1..=self.steps()).contains(&t),
            "timestep {t} outside [1, {}]",
            self.steps()
        );
        Ok(())
    }

    /// `z_t = √ᾱ_t z_0 + √(1 - ᾱ_t) ε`.
    pub fn add_noise(&self, z0: &Tensor, eps: &Tensor, t: usize) -> Result<Tensor> {
        self.check_t(t)?;
        let ab = self.alpha_bar(t);
        let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
        z0.zip_map(eps, |z, e| a * z + b * e)
    }

    /// `k` timesteps `round(i T / k)`, `i = 1..=k`, ascending.
    pub fn spaced(&self, k: usize) -> Result<Vec<usize>> {
        let n = self.steps();
        contract!(k >= 1 && k <= n, "sampling with {k} steps on a {n}-step schedule");
        Ok((1..=k)
            .map(|i| ((i * n) as f64 / k as f64).round() as usize)
            .collect())
    }
}

/// Sinusoidal embedding of timestep `t` with `dim` (even) entries, shaped
/// `[1, dim, 1, 1]`.
pub fn timestep_embedding(t: usize, dim: usize) -> Tensor {
    let half = dim / 2;
    let mut v = vec![0.0; dim];
    for i in 0..half {
        let freq = (-(i as f64) / half as f64 * 10000f64.ln()).exp();
        v[i] = (t as f64 * freq).sin();
        v[half + i] = (t as f64 * freq).cos();
    }
    Tensor::from_parts(vec![1, dim, 1, 1], v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_xoshiro::Xoshiro256PlusPlus;

    #[test]
    fn betas_increase_and_alpha_bar_decreases() {
        let s = NoiseSchedule::default();
        assert_eq!(s.beta(1), 1e-4);
        assert!((s.beta(1000) - 0.02).abs() < 1e-15);
        for t in 2..=1000 {
            assert!(s.beta(t) > s.beta(t - 1));
            assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
        }
        assert!(s.alpha_bar(1) > 0.9998);
    }

    #[test]
    fn final_alpha_bar_matches_product() {
        // Independent evaluation of Π(1 - β_t) in log space.
        let log_sum: f64 = (0..1000)
            .map(|i| (1.0 - (1e-4 + (0.02 - 1e-4) * i as f64 / 999.0)).ln())
            .sum();
        let s = NoiseSchedule::default();
        assert!((s.alpha_bar(1000) - log_sum.exp()).abs() < 1e-12);
        assert!((s.alpha_bar(1000) - 4.0e-5).abs() < 0.1e-5);
    }

    #[test]
    fn zero_noise_at_final_step_scales_signal() {
        let s = NoiseSchedule::default();
        let z = Tensor::new(&[4], vec![1.0, -2.0, 0.5, 3.0]).unwrap();
        let zt = s.add_noise(&z, &Tensor::zeros(&[4]), 1000).unwrap();
        let k = s.alpha_bar(1000).sqrt();
        for (a, b) in zt.data().iter().zip(z.data()) {
            assert!((a - k * b).abs() < 1e-15);
        }
        assert!(s.add_noise(&z, &z, 0).is_err());
        assert!(s.add_noise(&z, &z, 1001).is_err());
    }

    #[test]
    fn noised_unit_latents_approach_unit_variance() {
        let s = NoiseSchedule::default();
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(0);
        let z = Tensor::randn(&[20000], 1.0, &mut rng);
        let e = Tensor::randn(&[20000], 1.0, &mut rng);
        let zt = s.add_noise(&z, &e, 1000).unwrap();
        let var = zt.data().iter().map(|v| v * v).sum::<f64>() / zt.len() as f64;
        assert!((var - 1.0).abs() < 0.05, "variance {var}");
    }

    #[test]
    fn spacing() {
        let s = NoiseSchedule::default();
        assert_eq!(s.spaced(5).unwrap(), vec![200, 400, 600, 800, 1000]);
        assert_eq!(s.spaced(1).unwrap(), vec![1000]);
        let all = s.spaced(1000).unwrap();
        assert_eq!(all.len(), 1000);
        assert_eq!(all[0], 1);
        assert!(s.spaced(1001).is_err());
        assert!(s.spaced(0).is_err());
    }

    #[test]
    fn embedding_at_zero() {
        let e = timestep_embedding(0, 8);
        assert_eq!(e.data(), &[0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0]);
        assert_eq!(e.shape(), &[1, 8, 1, 1]);
    }
}
