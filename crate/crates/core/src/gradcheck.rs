//! Central finite-difference validation of reverse-mode gradients.

use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;

use crate::autodiff::{Graph, Var};
use crate::error::{contract, Result};
use crate::params::{Bound, ParamStore};
use crate::tensor::Tensor;

/// Relative error used by all gradient checks: `|a - n| / max(1, |a|)`.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(1.0)
}

/// Checks the gradient of a scalar function at `x` over every coordinate.
pub fn grad_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: for<'g> Fn(&'g Graph, Var<'g>) -> Result<Var<'g>>,
{
    let coords: Vec<usize> = (0..x.len()).collect();
    grad_check_coords(f, x, h, &coords)
}

/// Like [`grad_check`] but only perturbs the listed coordinates.
pub fn grad_check_coords<F>(f: F, x: &Tensor, h: f64, coords: &[usize]) -> Result<f64>
where
    F: for<'g> Fn(&'g Graph, Var<'g>) -> Result<Var<'g>>,
{
    let analytic = {
        let g = Graph::exact();
        let xv = g.param(x.clone());
        let loss = f(&g, xv)?;
        g.backward(loss)?.wrt_or_zeros(xv)
    };
    let eval = |t: Tensor| -> Result<f64> {
        let g = Graph::new();
        let xv = g.constant(t);
        Ok(f(&g, xv)?.item())
    };
    let mut worst: f64 = 0.0;
    for &i in coords {
        let mut plus = x.clone();
        plus.data_mut()[i] += h;
        let mut minus = x.clone();
        minus.data_mut()[i] -= h;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * h);
        worst = worst.max(rel_err(analytic.data()[i], numeric));
    }
    Ok(worst)
}

/// Checks gradients of a scalar loss built from a parameter store. Every
/// tensor whose name starts with one of `prefixes` is checked at up to
/// `per_tensor` coordinates drawn with `seed`. Returns the worst relative
/// error per prefix.
pub fn grad_check_params<F>(
    f: F,
    store: &ParamStore,
    prefixes: &[&str],
    per_tensor: usize,
    h: f64,
    seed: u64,
) -> Result<Vec<(String, f64)>>
where
    F: for<'g, 's> Fn(&Bound<'g, 's>) -> Result<Var<'g>>,
{
    let analytic = {
        let g = Graph::exact();
        let b = Bound::all(&g, store);
        let loss = f(&b)?;
        b.grads(&g.backward(loss)?)
    };
    let eval = |s: &ParamStore| -> Result<f64> {
        let g = Graph::new();
        let b = Bound::frozen(&g, s);
        Ok(f(&b)?.item())
    };
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
    let mut out = Vec::with_capacity(prefixes.len());
    for prefix in prefixes {
        let mut worst: f64 = 0.0;
        let names: Vec<String> = store
            .names()
            .filter(|n| n.starts_with(prefix))
            .cloned()
            .collect();
        contract!(!names.is_empty(), "no parameters under {prefix}");
        for name in names {
            let len = store.get(&name)?.len();
            let zeros = Tensor::zeros(store.get(&name)?.shape());
            let grad = analytic.0.get(&name).unwrap_or(&zeros);
            let coords: Vec<usize> = if len <= per_tensor {
                (0..len).collect()
            } else {
                (0..per_tensor).map(|_| rng.gen_range(0..len)).collect()
            };
            for i in coords {
                let mut s = store.clone();
                s.get_mut(&name).expect("listed name").data_mut()[i] += h;
                let up = eval(&s)?;
                s.get_mut(&name).expect("listed name").data_mut()[i] -= 2.0 * h;
                let down = eval(&s)?;
                let numeric = (up - down) / (2.0 * h);
                worst = worst.max(rel_err(grad.data()[i], numeric));
            }
        }
        out.push((prefix.to_string(), worst));
    }
    Ok(out)
}
