//! Discretized Gaussian conditional: integer-bin masses of N(μ, σ²) with a
//! lower bound on σ, as a fused differentiable op and as coding tables.

use crate::autodiff::{softplus, std_normal_cdf, std_normal_pdf, Var};
use crate::entropy::tables::{window_around, SymbolTable, MAX_HALF_WIDTH};
use crate::entropy::{P_FLOOR, SIGMA_MIN};
use crate::error::{dim_check, Result};
use crate::tensor::Tensor;

/// Scale used by the codec for a raw network output.
pub fn sigma_from_raw(raw: f64) -> f64 {
    softplus(raw).max(SIGMA_MIN)
}

/// Graph counterpart of [`sigma_from_raw`].
pub fn sigma_from_raw_var(raw: Var<'_>) -> Var<'_> {
    raw.softplus().lower_bound(SIGMA_MIN)
}

/// Unfloored mass of the bin `[v - 0.5, v + 0.5]`. Evaluated on the lower
/// side of the mean so the two CDF values never cancel catastrophically.
pub fn bin_mass(v: f64, mu: f64, sigma: f64) -> f64 {
    let d = (v - mu).abs();
    std_normal_cdf((0.5 - d) / sigma) - std_normal_cdf((-0.5 - d) / sigma)
}

pub fn likelihood(v: f64, mu: f64, sigma: f64) -> f64 {
    bin_mass(v, mu, sigma).max(P_FLOOR)
}

/// Coding table centered on `round(μ)` spanning about six standard
/// deviations, plus escape.
pub fn table(mu: f64, sigma: f64) -> Result<SymbolTable> {
    let center = mu.round().clamp(i32::MIN as f64, i32::MAX as f64) as i32;
    let hw = ((6.0 * sigma).ceil() as i64 + 1).min(MAX_HALF_WIDTH as i64) as i32;
    let (lo, hi) = window_around(center, hw);
    let pmf: Vec<f64> = (lo..=hi).map(|k| bin_mass(k as f64, mu, sigma)).collect();
    let below = std_normal_cdf((lo as f64 - 0.5 - mu) / sigma);
    let above = std_normal_cdf((mu - hi as f64 - 0.5) / sigma);
    SymbolTable::from_pmf(lo, &pmf, below + above)
}

/// Floored bin likelihoods of `y` under per-element `mu` and `sigma`, all
/// three differentiable.
pub fn likelihood_op<'g>(y: Var<'g>, mu: Var<'g>, sigma: Var<'g>) -> Result<Var<'g>> {
    let (yv, mv, sv) = (y.value(), mu.value(), sigma.value());
    dim_check!(
        yv.shape() == mv.shape() && yv.shape() == sv.shape(),
        "gaussian likelihood shapes {:?} {:?} {:?}",
        yv.shape(),
        mv.shape(),
        sv.shape()
    );
    let out: Vec<f64> = (0..yv.len())
        .map(|i| likelihood(yv.data()[i], mv.data()[i], sv.data()[i]))
        .collect();
    let pass = !y.graph().is_exact();
    Ok(y.graph().custom(
        &[y, mu, sigma],
        Tensor::new(yv.shape(), out)?,
        "gaussian_likelihood",
        Box::new(move |g, inp, _, need| {
            let n = g.len();
            let (mut gy, mut gs) = (vec![0.0; n], vec![0.0; n]);
            for i in 0..n {
                let (v, m, s, gv) = (inp[0].data()[i], inp[1].data()[i], inp[2].data()[i], g.data()[i]);
                let r = v - m;
                let d = r.abs();
                let (u, l) = ((0.5 - d) / s, (-0.5 - d) / s);
                let mass = std_normal_cdf(u) - std_normal_cdf(l);
                if mass < P_FLOOR && (gv >= 0.0 || !pass) {
                    continue;
                }
                let (pu, pl) = (std_normal_pdf(u), std_normal_pdf(l));
                let dd = (pl - pu) / s;
                let sign = if r >= 0.0 { 1.0 } else { -1.0 };
                gy[i] = gv * dd * sign;
                gs[i] = gv * (pl * l - pu * u) / s;
            }
            let shape = g.shape().to_vec();
            let gm: Vec<f64> = gy.iter().map(|v| -v).collect();
            vec![
                need[0].then(|| Tensor::from_parts(shape.clone(), gy)),
                need[1].then(|| Tensor::from_parts(shape.clone(), gm)),
                need[2].then(|| Tensor::from_parts(shape, gs)),
            ]
        }),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Graph;
    use crate::gradcheck::rel_err;

    #[test]
    fn unit_gaussian_zero_bin() {
        // erf(0.5 / sqrt 2) computed independently by series expansion.
        let x: f64 = 0.5 / std::f64::consts::SQRT_2;
        let mut term = x;
        let mut sum = x;
        for k in 1..40 {
            term *= -x * x / k as f64;
            sum += term / (2 * k + 1) as f64;
        }
        let oracle = 2.0 / std::f64::consts::PI.sqrt() * sum;
        assert!((likelihood(0.0, 0.0, 1.0) - oracle).abs() < 1e-12);
        assert!((oracle - 0.38292).abs() < 1e-5);
    }

    #[test]
    fn symmetric_and_normalized() {
        for &s in &[0.11, 0.7, 1.0, 4.0] {
            for k in 0..10 {
                let k = k as f64;
                assert_eq!(likelihood(k, 0.0, s), likelihood(-k, 0.0, s));
            }
        }
        let total: f64 = (-30..=30).map(|k| bin_mass(k as f64, 0.0, 1.0)).sum();
        assert!((total - 1.0).abs() < 1e-9);
    }

    #[test]
    fn floored_far_in_the_tail() {
        assert_eq!(likelihood(50.0, 0.0, 0.11), P_FLOOR);
    }

    #[test]
    fn table_mass_concentrates_near_mean() {
        let t = table(2.3, 0.5).unwrap();
        assert!(t.coded_probability(2) > 0.6);
        assert!(t.coded_probability(40) < 1e-3);
    }

    #[test]
    fn fused_gradients_match_finite_differences() {
        let ys = [0.0, 1.0, -2.0, 3.0, 0.0];
        let ms = [0.3, -0.4, -1.2, 0.1, 0.0];
        let ss = [0.8, 1.7, 0.3, 2.5, 0.2];
        let f = |y: &[f64], m: &[f64], s: &[f64]| -> f64 {
            (0..5).map(|i| likelihood(y[i], m[i], s[i]).ln()).sum()
        };
        let g = Graph::new();
        let (yv, mv, sv) = (
            g.param(Tensor::new(&[5], ys.to_vec()).unwrap()),
            g.param(Tensor::new(&[5], ms.to_vec()).unwrap()),
            g.param(Tensor::new(&[5], ss.to_vec()).unwrap()),
        );
        let l = likelihood_op(yv, mv, sv).unwrap().log().sum();
        let gr = g.backward(l).unwrap();
        let h = 1e-6;
        for i in 0..5 {
            // The derivative in y is undefined exactly at the mean; skip ties.
            let mut mp = ms;
            mp[i] += h;
            let mut mm = ms;
            mm[i] -= h;
            let num = (f(&ys, &mp, &ss) - f(&ys, &mm, &ss)) / (2.0 * h);
            assert!(rel_err(gr.wrt(mv).unwrap().data()[i], num) < 1e-6);
            let mut sp = ss;
            sp[i] += h;
            let mut sm = ss;
            sm[i] -= h;
            let num = (f(&ys, &ms, &sp) - f(&ys, &ms, &sm)) / (2.0 * h);
            assert!(rel_err(gr.wrt(sv).unwrap().data()[i], num) < 1e-6);
            assert_eq!(gr.wrt(yv).unwrap().data()[i], -gr.wrt(mv).unwrap().data()[i]);
        }
    }
}
