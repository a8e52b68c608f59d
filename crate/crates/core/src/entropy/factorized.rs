//! Per-channel learned CDF for latents coded without side information.
//!
//! Each channel owns a small monotone network `x ↦ logit`, built from four
//! affine layers (widths 1→3→3→3→1) whose weights pass through softplus and
//! whose hidden layers add a `tanh(a)·tanh(v)` gate with `tanh(a) > -1`, so
//! the network is strictly increasing in `x`. The CDF is `sigmoid(logit)`.

use std::rc::Rc;

use rand::Rng;

use crate::autodiff::{sigmoid, softplus, Var};
use crate::entropy::tables::{window_around, SymbolTable, MAX_HALF_WIDTH};
use crate::entropy::P_FLOOR;
use crate::error::{dim_check, Result};
use crate::params::{Bound, ParamStore};
use crate::tensor::Tensor;

/// Layer widths of the per-channel network.
const WIDTHS: [usize; 5] = [1, 3, 3, 3, 1];
const LAYERS: usize = 4;
const INIT_SCALE: f64 = 10.0;
/// Mass allowed outside a coding window on each side.
const TAIL_MASS: f64 = 1e-7;

fn dims(k: usize) -> (usize, usize) {
    (WIDTHS[k + 1], WIDTHS[k])
}

/// Parameter names under `prefix`, in the order the fused op expects them.
pub fn param_names(prefix: &str) -> Vec<String> {
    let mut v = Vec::new();
    for k in 0..LAYERS {
        v.push(format!("{prefix}.h{k}"));
        v.push(format!("{prefix}.b{k}"));
        if k + 1 < LAYERS {
            v.push(format!("{prefix}.a{k}"));
        }
    }
    v
}

pub fn init<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, channels: usize, rng: &mut R) {
    let scale = INIT_SCALE.powf(1.0 / LAYERS as f64);
    for k in 0..LAYERS {
        let (dout, din) = dims(k);
        let h0 = (1.0 / scale / dout as f64).exp_m1().ln();
        store.insert(format!("{prefix}.h{k}"), Tensor::full(&[channels, dout, din], h0));
        store.insert(
            format!("{prefix}.b{k}"),
            Tensor::uniform(&[channels, dout], -0.5, 0.5, rng),
        );
        if k + 1 < LAYERS {
            store.insert(format!("{prefix}.a{k}"), Tensor::zeros(&[channels, dout]));
        }
    }
}

/// Inference-time view with the nonlinear reparameterizations applied.
#[derive(Clone, Debug)]
pub struct FactorizedPrior {
    channels: usize,
    w: Vec<Vec<f64>>,
    b: Vec<Vec<f64>>,
    ta: Vec<Vec<f64>>,
}

/// Intermediate values of one scalar forward pass, kept for backward.
struct Trace {
    /// Input of each layer.
    inputs: [[f64; 3]; LAYERS],
    /// Pre-gate affine output of each layer.
    pre: [[f64; 3]; LAYERS],
    logit: f64,
}

impl FactorizedPrior {
    pub fn from_store(store: &ParamStore, prefix: &str) -> Result<Self> {
        let raw: Vec<Tensor> = param_names(prefix)
            .iter()
            .map(|n| store.get(n).cloned())
            .collect::<Result<_>>()?;
        Self::from_tensors(&raw)
    }

    fn from_tensors(raw: &[Tensor]) -> Result<Self> {
        let channels = raw[0].shape()[0];
        let (mut w, mut b, mut ta) = (vec![], vec![], vec![]);
        let mut it = raw.iter();
        for k in 0..LAYERS {
            let (dout, din) = dims(k);
            let h = it.next().unwrap();
            dim_check!(
                h.shape() == [channels, dout, din],
                "prior layer {k} weight shape {:?}",
                h.shape()
            );
            w.push(h.data().iter().map(|&v| softplus(v)).collect());
            let bias = it.next().unwrap();
            dim_check!(bias.shape() == [channels, dout], "prior layer {k} bias shape");
            b.push(bias.data().to_vec());
            if k + 1 < LAYERS {
                let a = it.next().unwrap();
                dim_check!(a.shape() == [channels, dout], "prior layer {k} gate shape");
                ta.push(a.data().iter().map(|&v| v.tanh()).collect());
            }
        }
        Ok(FactorizedPrior { channels, w, b, ta })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    fn trace(&self, c: usize, x: f64) -> Trace {
        let mut t = Trace {
            inputs: [[0.0; 3]; LAYERS],
            pre: [[0.0; 3]; LAYERS],
            logit: 0.0,
        };
        let mut v = [x, 0.0, 0.0];
        for k in 0..LAYERS {
            let (dout, din) = dims(k);
            t.inputs[k] = v;
            let w = &self.w[k][c * dout * din..(c + 1) * dout * din];
            let b = &self.b[k][c * dout..(c + 1) * dout];
            let mut out = [0.0; 3];
            for o in 0..dout {
                let mut acc = b[o];
                for i in 0..din {
                    acc += w[o * din + i] * v[i];
                }
                t.pre[k][o] = acc;
                out[o] = if k + 1 < LAYERS {
                    acc + self.ta[k][c * dout + o] * acc.tanh()
                } else {
                    acc
                };
            }
            v = out;
        }
        t.logit = v[0];
        t
    }

    pub fn logit(&self, c: usize, x: f64) -> f64 {
        self.trace(c, x).logit
    }

    pub fn cdf(&self, c: usize, x: f64) -> f64 {
        sigmoid(self.logit(c, x))
    }

    /// Unfloored mass of the integer bin around `v` in channel `c`.
    pub fn bin_mass(&self, c: usize, v: f64) -> f64 {
        bin_from_logits(self.logit(c, v - 0.5), self.logit(c, v + 0.5))
    }

    pub fn likelihood(&self, c: usize, v: f64) -> f64 {
        self.bin_mass(c, v).max(P_FLOOR)
    }

    /// Point where the channel CDF crosses one half.
    pub fn median(&self, c: usize) -> f64 {
        let (mut lo, mut hi) = (-4096.0, 4096.0);
        for _ in 0..64 {
            let mid = 0.5 * (lo + hi);
            if self.logit(c, mid) < 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }

    /// Coding table for channel `c`: a window around the median wide enough
    /// to leave at most the tail mass on each side (capped), plus escape.
    pub fn table(&self, c: usize) -> Result<SymbolTable> {
        let m = self.median(c).round() as i32;
        let mut lo = m;
        while m - lo < MAX_HALF_WIDTH && self.cdf(c, lo as f64 - 0.5) > TAIL_MASS {
            lo -= 1;
        }
        let mut hi = m;
        while hi - m < MAX_HALF_WIDTH && 1.0 - self.cdf(c, hi as f64 + 0.5) > TAIL_MASS {
            hi += 1;
        }
        let hw = (m - lo).max(hi - m);
        let (lo, hi) = window_around(m, hw);
        let pmf: Vec<f64> = (lo..=hi).map(|k| self.bin_mass(c, k as f64)).collect();
        let escape = self.cdf(c, lo as f64 - 0.5) + (1.0 - self.cdf(c, hi as f64 + 0.5));
        SymbolTable::from_pmf(lo, &pmf, escape)
    }

    pub fn tables(&self) -> Result<Vec<SymbolTable>> {
        (0..self.channels).map(|c| self.table(c)).collect()
    }

    /// Adds into `grads` the gradient of `g_logit · logit(c, x)` and returns
    /// its derivative in `x`. `grads` is laid out like `param_names`.
    fn backward(&self, c: usize, t: &Trace, g_logit: f64, grads: &mut [Vec<f64>]) -> f64 {
        let mut g = [g_logit, 0.0, 0.0];
        for k in (0..LAYERS).rev() {
            let (dout, din) = dims(k);
            let slot = 3 * k;
            let mut g_pre = [0.0; 3];
            for o in 0..dout {
                if k + 1 < LAYERS {
                    let ta = self.ta[k][c * dout + o];
                    let th = t.pre[k][o].tanh();
                    g_pre[o] = g[o] * (1.0 + ta * (1.0 - th * th));
                    grads[slot + 2][c * dout + o] += g[o] * th * (1.0 - ta * ta);
                } else {
                    g_pre[o] = g[o];
                }
                grads[slot + 1][c * dout + o] += g_pre[o];
            }
            let w = &self.w[k][c * dout * din..(c + 1) * dout * din];
            let mut g_in = [0.0; 3];
            for o in 0..dout {
                for i in 0..din {
                    let idx = o * din + i;
                    // d softplus(h) / dh = sigmoid(h) = 1 - exp(-softplus(h)).
                    let dsp = -(-w[idx]).exp_m1();
                    grads[slot][c * dout * din + idx] += g_pre[o] * t.inputs[k][i] * dsp;
                    g_in[i] += w[idx] * g_pre[o];
                }
            }
            g = g_in;
        }
        g[0]
    }
}

/// `sigmoid(upper) - sigmoid(lower)` evaluated on the side of the logistic
/// curve where it does not cancel.
fn bin_from_logits(lower: f64, upper: f64) -> f64 {
    if lower + upper > 0.0 {
        sigmoid(-lower) - sigmoid(-upper)
    } else {
        sigmoid(upper) - sigmoid(lower)
    }
}

fn dsigmoid(x: f64) -> f64 {
    sigmoid(x) * sigmoid(-x)
}

/// Floored bin likelihoods of `y` ([1, C, H, W]) under the prior stored at
/// `prefix`, as a differentiable op in `y` and in the prior parameters.
pub fn likelihood<'g>(bound: &Bound<'g, '_>, prefix: &str, y: Var<'g>) -> Result<Var<'g>> {
    let names = param_names(prefix);
    let pvars: Vec<Var<'g>> = names.iter().map(|n| bound.get(n)).collect::<Result<_>>()?;
    let yv = y.value();
    let (n, c, h, w) = yv.dims4()?;
    let raw: Vec<Tensor> = pvars.iter().map(|v| (*v.value()).clone()).collect();
    let prior = Rc::new(FactorizedPrior::from_tensors(&raw)?);
    dim_check!(
        n == 1 && c == prior.channels,
        "prior with {} channels applied to {:?}",
        prior.channels,
        yv.shape()
    );
    let hw = h * w;
    let out: Vec<f64> = yv
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| prior.likelihood(i / hw, v))
        .collect();
    let mut inputs = vec![y];
    inputs.extend(pvars);
    let graph = y.graph();
    let pass = !graph.is_exact();
    Ok(graph.custom(
        &inputs,
        Tensor::new(yv.shape(), out)?,
        "factorized_likelihood",
        Box::new(move |g, inp, out, need| {
            let y = &inp[0];
            let mut pg: Vec<Vec<f64>> = inp[1..].iter().map(|t| vec![0.0; t.len()]).collect();
            let mut gy = vec![0.0; y.len()];
            for (i, (&v, (&gv, &p))) in y.data().iter().zip(g.data().iter().zip(out.data())).enumerate() {
                let ch = i / hw;
                let lo = prior.trace(ch, v - 0.5);
                let up = prior.trace(ch, v + 0.5);
                let mass = bin_from_logits(lo.logit, up.logit);
                // Floored entries only pass gradients that push them back up.
                if mass < P_FLOOR && (gv >= 0.0 || !pass) {
                    continue;
                }
                debug_assert!(p >= P_FLOOR);
                let gu = gv * dsigmoid(up.logit);
                let gl = -gv * dsigmoid(lo.logit);
                gy[i] = prior.backward(ch, &up, gu, &mut pg) + prior.backward(ch, &lo, gl, &mut pg);
            }
            let mut res = vec![need[0].then(|| Tensor::from_parts(y.shape().to_vec(), gy))];
            for (t, d) in inp[1..].iter().zip(pg) {
                res.push(Some(Tensor::from_parts(t.shape().to_vec(), d)));
            }
            res
        }),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Graph;
    use crate::gradcheck::rel_err;
    use rand::SeedableRng;
    use rand_xoshiro::Xoshiro256PlusPlus;

    fn prior_store(seed: u64) -> ParamStore {
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
        let mut s = ParamStore::new();
        init(&mut s, "p", 3, &mut rng);
        // Move away from the symmetric init so gates and weights all matter.
        for name in param_names("p") {
            let t = s.get_mut(&name).unwrap();
            for v in t.data_mut() {
                *v += rng.gen_range(-0.3..0.3);
            }
        }
        s
    }

    #[test]
    fn cdf_is_monotone_with_unit_limits() {
        let s = prior_store(1);
        let p = FactorizedPrior::from_store(&s, "p").unwrap();
        for c in 0..3 {
            let mut prev = 0.0;
            for i in -400..=400 {
                let v = p.cdf(c, i as f64 * 0.25);
                assert!(v >= prev);
                prev = v;
            }
            assert!(p.cdf(c, -1e4) < 1e-6);
            assert!(p.cdf(c, 1e4) > 1.0 - 1e-6);
        }
    }

    #[test]
    fn bin_masses_sum_to_one() {
        let s = prior_store(2);
        let p = FactorizedPrior::from_store(&s, "p").unwrap();
        for c in 0..3 {
            let total: f64 = (-200..=200).map(|k| p.bin_mass(c, k as f64)).sum();
            assert!((total - 1.0).abs() < 1e-6, "{total}");
        }
    }

    #[test]
    fn table_window_covers_median() {
        let s = prior_store(3);
        let p = FactorizedPrior::from_store(&s, "p").unwrap();
        for c in 0..3 {
            let t = p.table(c).unwrap();
            let m = p.median(c).round() as i32;
            assert!(t.offset() <= m && m < t.offset() + t.window() as i32);
        }
    }

    #[test]
    fn fused_gradients_match_finite_differences() {
        let store = prior_store(4);
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(5);
        let y = Tensor::randn(&[1, 3, 2, 2], 1.5, &mut rng);
        let loss = |store: &ParamStore, y: &Tensor| -> f64 {
            let g = Graph::new();
            let b = Bound::frozen(&g, store);
            let yv = g.constant(y.clone());
            likelihood(&b, "p", yv).unwrap().log().sum().item()
        };
        let g = Graph::new();
        let b = Bound::all(&g, &store);
        let yv = g.param(y.clone());
        let l = likelihood(&b, "p", yv).unwrap().log().sum();
        let grads = g.backward(l).unwrap();
        let gy = grads.wrt_or_zeros(yv);
        let pgrads = b.grads(&grads);
        let h = 1e-6;
        for i in 0..y.len() {
            let (mut a, mut c) = (y.clone(), y.clone());
            a.data_mut()[i] += h;
            c.data_mut()[i] -= h;
            let num = (loss(&store, &a) - loss(&store, &c)) / (2.0 * h);
            assert!(rel_err(gy.data()[i], num) < 1e-6, "y[{i}]");
        }
        for name in param_names("p") {
            let an = &pgrads.0[&name];
            for i in 0..an.len() {
                let (mut a, mut c) = (store.clone(), store.clone());
                a.get_mut(&name).unwrap().data_mut()[i] += h;
                c.get_mut(&name).unwrap().data_mut()[i] -= h;
                let num = (loss(&a, &y) - loss(&c, &y)) / (2.0 * h);
                assert!(rel_err(an.data()[i], num) < 1e-6, "{name}[{i}]");
            }
        }
    }
}
