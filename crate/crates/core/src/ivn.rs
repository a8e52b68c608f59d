//! Implicit variable normalization: min-max scaling of the codec input whose
//! scale factor `s` steers the bitrate of a single trained model.
//!
//! Training normalizes with the extremes of the whole batch pyramid; inference
//! uses fixed global bounds and the scale factor:
//! `P̄ = (P/s - c_min) / (c_max - c_min)`, inverted by
//! `P̂ = (P̃ (c_max - c_min) + c_min) s`.

use crate::error::{contract, Result};
use crate::pyramid::FeaturePyramid;
use crate::tensor::Tensor;

/// Denominator guard for degenerate batches.
pub const EPS: f64 = 1e-9;

/// Percentiles used for the global bounds.
pub const CALIBRATION_LOW: f64 = 0.5;
pub const CALIBRATION_HIGH: f64 = 99.5;
pub const MIN_CALIBRATION_SAMPLES: usize = 100;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BatchNormStats {
    pub min_val: f64,
    pub max_val: f64,
}

impl BatchNormStats {
    /// Normalized value of a zero feature.
    pub fn zero_point(&self) -> f64 {
        -self.min_val / (self.max_val - self.min_val + EPS)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GlobalNormParams {
    pub c_min: f64,
    pub c_max: f64,
    pub s: f64,
}

impl GlobalNormParams {
    pub fn new(c_min: f64, c_max: f64, s: f64) -> Result<Self> {
        let p = GlobalNormParams { c_min, c_max, s };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        contract!(
            self.c_max > self.c_min,
            "c_max ({}) must exceed c_min ({})",
            self.c_max,
            self.c_min
        );
        contract!(
            self.s > 0.0 && self.s.is_finite(),
            "scale factor must be positive, got {}",
            self.s
        );
        Ok(())
    }

    /// Normalized value of a zero feature; independent of `s`.
    pub fn zero_point(&self) -> f64 {
        -self.c_min / (self.c_max - self.c_min)
    }

    pub fn with_scale(self, s: f64) -> Self {
        GlobalNormParams { s, ..self }
    }
}

/// Batch-level min-max normalization over every level of every pyramid.
pub fn train_normalize(batch: &[FeaturePyramid]) -> Result<(Vec<FeaturePyramid>, BatchNormStats)> {
    contract!(!batch.is_empty(), "normalizing an empty batch");
    let stats = batch_stats(batch);
    if stats.max_val == stats.min_val {
        log::warn!("constant batch ({}); normalized values collapse to zero", stats.min_val);
    }
    let out = batch.iter().map(|p| apply_stats(p, stats)).collect();
    Ok((out, stats))
}

pub fn batch_stats(batch: &[FeaturePyramid]) -> BatchNormStats {
    let mut min_val = f64::INFINITY;
    let mut max_val = f64::NEG_INFINITY;
    for p in batch {
        for l in p.levels() {
            min_val = min_val.min(l.min());
            max_val = max_val.max(l.max());
        }
    }
    BatchNormStats { min_val, max_val }
}

pub fn apply_stats(p: &FeaturePyramid, stats: BatchNormStats) -> FeaturePyramid {
    let denom = stats.max_val - stats.min_val + EPS;
    p.map(|x| (x - stats.min_val) / denom)
}

pub fn infer_normalize_tensor(t: &Tensor, params: GlobalNormParams) -> Result<Tensor> {
    params.validate()?;
    let range = params.c_max - params.c_min;
    Ok(t.map(|x| (x / params.s - params.c_min) / range))
}

pub fn infer_normalize(p: &FeaturePyramid, params: GlobalNormParams) -> Result<FeaturePyramid> {
    params.validate()?;
    let range = params.c_max - params.c_min;
    Ok(p.map(|x| (x / params.s - params.c_min) / range))
}

pub fn denormalize_tensor(t: &Tensor, params: GlobalNormParams) -> Tensor {
    let range = params.c_max - params.c_min;
    t.map(|x| (x * range + params.c_min) * params.s)
}

pub fn denormalize(p: &FeaturePyramid, params: GlobalNormParams) -> FeaturePyramid {
    let range = params.c_max - params.c_min;
    p.map(|x| (x * range + params.c_min) * params.s)
}

/// Robust global bounds: the 0.5th and 99.5th percentiles of every value of
/// every level.
pub fn calibrate_global_stats(pyramids: &[FeaturePyramid]) -> Result<(f64, f64)> {
    contract!(!pyramids.is_empty(), "calibrating global statistics on no pyramids");
    if pyramids.len() < MIN_CALIBRATION_SAMPLES {
        log::warn!(
            "calibrating on {} pyramids (fewer than {MIN_CALIBRATION_SAMPLES})",
            pyramids.len()
        );
    }
    let mut all: Vec<f64> = pyramids
        .iter()
        .flat_map(|p| p.levels().iter().flat_map(|l| l.data().iter().copied()))
        .collect();
    all.sort_by(f64::total_cmp);
    let lo = percentile_sorted(&all, CALIBRATION_LOW);
    let mut hi = percentile_sorted(&all, CALIBRATION_HIGH);
    if hi <= lo {
        hi = lo + 1.0;
    }
    Ok((lo, hi))
}

/// Linear-interpolated percentile of sorted data, `q` in `[0, 100]`.
pub fn percentile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = q / 100.0 * (sorted.len() - 1) as f64;
    let i = pos.floor() as usize;
    let frac = pos - i as f64;
    if i + 1 >= sorted.len() {
        sorted[sorted.len() - 1]
    } else {
        sorted[i] + frac * (sorted[i + 1] - sorted[i])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_xoshiro::Xoshiro256PlusPlus;

    fn random_pyramid(seed: u64) -> FeaturePyramid {
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
        FeaturePyramid::random(&mut rng, 2.0)
    }

    #[test]
    fn batch_midpoint_maps_to_half() {
        let mut p = FeaturePyramid::zeros();
        p.level_mut(0).data_mut()[0] = -2.0;
        p.level_mut(1).data_mut()[0] = 6.0;
        p.level_mut(2).data_mut()[0] = 2.0;
        let (out, stats) = train_normalize(&[p]).unwrap();
        assert_eq!((stats.min_val, stats.max_val), (-2.0, 6.0));
        assert!((out[0].level(2).data()[0] - 0.5).abs() < 1e-9);
    }

    #[test]
    fn constant_batch_is_all_zero() {
        let p = FeaturePyramid::zeros().map(|_| 3.0);
        let (out, _) = train_normalize(&[p]).unwrap();
        assert!(out[0].levels().iter().all(|l| l.data().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn random_batch_spans_unit_interval() {
        let batch: Vec<_> = (0..3).map(random_pyramid).collect();
        let (out, _) = train_normalize(&batch).unwrap();
        let st = batch_stats(&out);
        assert_eq!(st.min_val, 0.0);
        assert!((1.0 - st.max_val).abs() < 1e-9);
    }

    #[test]
    fn scale_equivalence_and_round_trip() {
        let p = random_pyramid(4);
        for &s in &[0.4, 0.8, 1.2] {
            let params = GlobalNormParams::new(-1.5, 2.5, s).unwrap();
            let scaled = p.map(|x| x / s);
            let a = infer_normalize(&p, params).unwrap();
            let b = infer_normalize(&scaled, params.with_scale(1.0)).unwrap();
            for (x, y) in a.levels().iter().zip(b.levels()) {
                assert!(x.max_abs_diff(y) <= 1e-12);
            }
            let back = denormalize(&a, params);
            for (x, y) in back.levels().iter().zip(p.levels()) {
                assert!(x.max_abs_diff(y) < 1e-9);
            }
        }
    }

    #[test]
    fn identity_and_degenerate_params() {
        let p = random_pyramid(5);
        let id = infer_normalize(&p, GlobalNormParams::new(0.0, 1.0, 1.0).unwrap()).unwrap();
        assert_eq!(id, p);
        assert!(GlobalNormParams::new(1.0, 1.0, 1.0).is_err());
        let params = GlobalNormParams::new(-1.0, 3.0, 0.8).unwrap();
        let flat = FeaturePyramid::zeros().map(|_| -0.8);
        let z = infer_normalize(&flat, params).unwrap();
        assert!(z.levels().iter().all(|l| l.data().iter().all(|&v| v.abs() < 1e-15)));
        let d = denormalize(&FeaturePyramid::zeros(), params);
        assert!(d.levels().iter().all(|l| l.data().iter().all(|&v| (v + 0.8).abs() < 1e-15)));
    }

    #[test]
    fn larger_scale_narrows_spread() {
        let p = random_pyramid(6);
        let params = GlobalNormParams::new(-1.0, 3.0, 1.0).unwrap();
        let std = |s: f64| {
            let n = infer_normalize(&p, params.with_scale(s)).unwrap();
            let v: Vec<f64> = n.levels().iter().flat_map(|l| l.data().to_vec()).collect();
            let m = v.iter().sum::<f64>() / v.len() as f64;
            (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64).sqrt()
        };
        assert!(std(1.2) < std(0.4));
    }

    #[test]
    fn percentiles_interpolate() {
        let v: Vec<f64> = (0..=100).map(|i| i as f64).collect();
        assert_eq!(percentile_sorted(&v, 0.5), 0.5);
        assert_eq!(percentile_sorted(&v, 99.5), 99.5);
        assert!(calibrate_global_stats(&[]).is_err());
    }
}
