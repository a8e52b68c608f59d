//! Bjøntegaard delta metrics between two rate-quality curves.
//!
//! Each curve is fitted with a least-squares cubic (metric over log10 bpp
//! for quality deltas, log10 bpp over metric for rate deltas) and the fits
//! are integrated analytically over the overlapping interval.

use crate::error::{contract, Error, Result};

use super::curve::RateQualityCurve;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BdMode {
    /// Average rate change at equal quality, in percent.
    Rate,
    /// Average quality change at equal rate, in metric units.
    Quality,
}

/// Cubic polynomial in `u = (x - center) / half`, the fitted abscissa
/// mapped to `[-1, 1]` so the normal equations stay well conditioned.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CubicFit {
    pub coef: [f64; 4],
    pub center: f64,
    pub half: f64,
}

impl CubicFit {
    /// Least-squares cubic through `(x, y)`; needs at least four distinct
    /// abscissae.
    pub fn fit(xs: &[f64], ys: &[f64]) -> Result<Self> {
        contract!(xs.len() == ys.len(), "{} abscissae for {} ordinates", xs.len(), ys.len());
        contract!(xs.len() >= 4, "cubic fit needs at least 4 points, got {}", xs.len());
        let lo = xs.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        contract!(hi > lo, "cubic fit over a single abscissa");
        let (center, half) = (0.5 * (lo + hi), 0.5 * (hi - lo));
        let mut ata = [[0.0; 4]; 4];
        let mut aty = [0.0; 4];
        for (&x, &y) in xs.iter().zip(ys) {
            let u = (x - center) / half;
            let row = [1.0, u, u * u, u * u * u];
            for i in 0..4 {
                aty[i] += row[i] * y;
                for j in 0..4 {
                    ata[i][j] += row[i] * row[j];
                }
            }
        }
        let coef = solve4(ata, aty).ok_or_else(|| Error::Contract("degenerate cubic fit".into()))?;
        Ok(CubicFit { coef, center, half })
    }

    pub fn eval(&self, x: f64) -> f64 {
        let u = (x - self.center) / self.half;
        let c = &self.coef;
        c[0] + u * (c[1] + u * (c[2] + u * c[3]))
    }

    /// `∫_a^b p(x) dx`.
    pub fn integral(&self, a: f64, b: f64) -> f64 {
        let anti = |x: f64| {
            let u = (x - self.center) / self.half;
            let c = &self.coef;
            self.half * u * (c[0] + u * (c[1] / 2.0 + u * (c[2] / 3.0 + u * c[3] / 4.0)))
        };
        anti(b) - anti(a)
    }
}

/// Gaussian elimination with partial pivoting.
fn solve4(mut a: [[f64; 4]; 4], mut b: [f64; 4]) -> Option<[f64; 4]> {
    for col in 0..4 {
        let piv = (col..4).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))?;
        if a[piv][col].abs() < 1e-12 {
            return None;
        }
        a.swap(col, piv);
        b.swap(col, piv);
        for r in col + 1..4 {
            let f = a[r][col] / a[col][col];
            for c in col..4 {
                a[r][c] -= f * a[col][c];
            }
            b[r] -= f * b[col];
        }
    }
    let mut x = [0.0; 4];
    for r in (0..4).rev() {
        let s: f64 = (r + 1..4).map(|c| a[r][c] * x[c]).sum();
        x[r] = (b[r] - s) / a[r][r];
    }
    Some(x)
}

/// The two fits and the interval a BD computation integrates over.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BdFits {
    pub anchor: CubicFit,
    pub test: CubicFit,
    pub lo: f64,
    pub hi: f64,
}

pub fn bd_fits(anchor: &RateQualityCurve, test: &RateQualityCurve, mode: BdMode) -> Result<BdFits> {
    for c in [anchor, test] {
        contract!(c.points.len() >= 4, "curve {} has {} points, BD needs 4", c.label, c.points.len());
        if !c.is_monotone() {
            log::warn!("curve {} is not monotone in quality; BD result may be unreliable", c.label);
        }
    }
    let axes = |c: &RateQualityCurve| -> (Vec<f64>, Vec<f64>) {
        let lr: Vec<f64> = c.points.iter().map(|p| p.0.log10()).collect();
        let m: Vec<f64> = c.points.iter().map(|p| p.1).collect();
        match mode {
            BdMode::Rate => (m, lr),
            BdMode::Quality => (lr, m),
        }
    };
    let (xa, ya) = axes(anchor);
    let (xt, yt) = axes(test);
    let range = |v: &[f64]| {
        (
            v.iter().copied().fold(f64::INFINITY, f64::min),
            v.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        )
    };
    let (a0, a1) = range(&xa);
    let (t0, t1) = range(&xt);
    let (lo, hi) = (a0.max(t0), a1.min(t1));
    if hi <= lo {
        let what = match mode {
            BdMode::Rate => "metric",
            BdMode::Quality => "rate",
        };
        return Err(Error::NoOverlap(format!(
            "{what} ranges [{a0}, {a1}] of {} and [{t0}, {t1}] of {} are disjoint",
            anchor.label, test.label
        )));
    }
    Ok(BdFits {
        anchor: CubicFit::fit(&xa, &ya)?,
        test: CubicFit::fit(&xt, &yt)?,
        lo,
        hi,
    })
}

/// BD-rate in percent (`Rate`) or BD-quality in metric units (`Quality`)
/// of `test` against `anchor`.
pub fn bd_metric(anchor: &RateQualityCurve, test: &RateQualityCurve, mode: BdMode) -> Result<f64> {
    let f = bd_fits(anchor, test, mode)?;
    let avg = (f.test.integral(f.lo, f.hi) - f.anchor.integral(f.lo, f.hi)) / (f.hi - f.lo);
    Ok(match mode {
        BdMode::Rate => (10f64.powf(avg) - 1.0) * 100.0,
        BdMode::Quality => avg,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::curve::MetricKind;
    use proptest::prelude::*;

    fn curve(label: &str, pts: &[(f64, f64)]) -> RateQualityCurve {
        RateQualityCurve::new(label, MetricKind::Psnr, pts.to_vec()).unwrap()
    }

    fn anchor() -> RateQualityCurve {
        curve("a", &[(0.1, 28.0), (0.2, 31.0), (0.4, 33.5), (0.8, 35.0)])
    }

    #[test]
    fn fit_reproduces_a_cubic() {
        let f = |x: f64| 1.0 - 2.0 * x + 0.5 * x * x + 0.25 * x * x * x;
        let xs = [-1.0, 0.0, 0.5, 2.0, 3.0];
        let ys: Vec<f64> = xs.iter().map(|&x| f(x)).collect();
        let c = CubicFit::fit(&xs, &ys).unwrap();
        for x in [-0.5, 1.0, 2.5] {
            assert!((c.eval(x) - f(x)).abs() < 1e-10);
        }
        // ∫_0^2 f = 2 - 4 + 4/3 + 1
        assert!((c.integral(0.0, 2.0) - (1.0 / 3.0)).abs() < 1e-10);
    }

    #[test]
    fn identical_curves_have_zero_delta() {
        let a = anchor();
        assert!(bd_metric(&a, &a, BdMode::Rate).unwrap().abs() < 1e-12);
        assert!(bd_metric(&a, &a, BdMode::Quality).unwrap().abs() < 1e-12);
    }

    #[test]
    fn halved_rate_is_minus_fifty_percent() {
        let a = anchor();
        let t = curve("t", &a.points.iter().map(|&(r, m)| (r / 2.0, m)).collect::<Vec<_>>());
        assert!((bd_metric(&a, &t, BdMode::Rate).unwrap() + 50.0).abs() < 1e-9);
    }

    #[test]
    fn disjoint_curves_are_an_overlap_error() {
        let a = anchor();
        let t = curve("t", &[(0.1, 40.0), (0.2, 41.0), (0.4, 42.0), (0.8, 43.0)]);
        assert!(matches!(bd_metric(&a, &t, BdMode::Rate), Err(Error::NoOverlap(_))));
        let far = curve("f", &[(10.0, 28.0), (20.0, 31.0), (40.0, 33.5), (80.0, 35.0)]);
        assert!(matches!(bd_metric(&a, &far, BdMode::Quality), Err(Error::NoOverlap(_))));
    }

    #[test]
    fn too_few_points_rejected() {
        let a = anchor();
        let t = curve("t", &[(0.1, 28.0), (0.2, 31.0), (0.4, 33.5)]);
        assert!(bd_metric(&a, &t, BdMode::Rate).is_err());
    }

    fn monotone() -> impl Strategy<Value = Vec<(f64, f64)>> {
        (0.01f64..0.5, proptest::collection::vec((0.2f64..1.0, 0.3f64..3.0), 4..7), 20.0f64..30.0).prop_map(
            |(r0, steps, m0)| {
                let (mut r, mut m) = (r0, m0);
                steps
                    .into_iter()
                    .map(|(dr, dm)| {
                        r *= 1.0 + dr;
                        m += dm;
                        (r, m)
                    })
                    .collect()
            },
        )
    }

    proptest! {
        #[test]
        fn quality_delta_is_antisymmetric(a in monotone(), b in monotone()) {
            let (a, b) = (curve("a", &a), curve("b", &b));
            if let (Ok(x), Ok(y)) = (bd_metric(&a, &b, BdMode::Quality), bd_metric(&b, &a, BdMode::Quality)) {
                prop_assert!((x + y).abs() < 1e-9);
            }
        }

        #[test]
        fn rate_delta_is_scale_invariant(a in monotone(), b in monotone(), k in 0.01f64..100.0) {
            let (ca, cb) = (curve("a", &a), curve("b", &b));
            let scale = |p: &[(f64, f64)]| curve("s", &p.iter().map(|&(r, m)| (r * k, m)).collect::<Vec<_>>());
            if let Ok(x) = bd_metric(&ca, &cb, BdMode::Rate) {
                let y = bd_metric(&scale(&a), &scale(&b), BdMode::Rate).unwrap();
                prop_assert!((x - y).abs() < 1e-7 * x.abs().max(1.0));
            }
        }
    }
}
