//! Autoregressive context model for the main latent.
//!
//! Positions are coded in raster order with all channels of a position coded
//! together. A 5×5 convolution masked to the twelve taps strictly before the
//! center sees only decoded positions; its output is concatenated with the
//! hyper-decoder features and mapped by three 1×1 layers to `(μ, raw σ)`.
//!
//! The per-position coding path repeats the tensor path's arithmetic in the
//! same order (bias first, then input channel, kernel row, kernel column), so
//! encoder, decoder and the full-tensor reference agree bit for bit.

use rand::Rng;

use crate::autodiff::{concat, Var, LEAKY_SLOPE};
use crate::entropy::gaussian::{self, sigma_from_raw, sigma_from_raw_var};
use crate::entropy::quant::from_symbols;
use crate::entropy::tables::{range_decode, range_encode, CdfProvider, SymbolTable};
use crate::error::{contract, dim_check, Result};
use crate::params::{init_conv, kaiming, Bound, ParamStore};
use crate::tensor::Tensor;

pub const KERNEL: usize = 5;
const HALF: usize = KERNEL / 2;

/// Channel widths of a context model.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ContextDims {
    pub latent: usize,
    pub context: usize,
    pub hyper: usize,
    pub hidden: [usize; 2],
}

/// `true` for kernel taps strictly before the center in raster order.
pub fn tap_is_causal(ky: usize, kx: usize) -> bool {
    ky < HALF || (ky == HALF && kx < HALF)
}

pub fn mask_tensor(cout: usize, cin: usize) -> Tensor {
    let mut m = Tensor::zeros(&[cout, cin, KERNEL, KERNEL]);
    for (i, v) in m.data_mut().iter_mut().enumerate() {
        let tap = i % (KERNEL * KERNEL);
        if tap_is_causal(tap / KERNEL, tap % KERNEL) {
            *v = 1.0;
        }
    }
    m
}

pub fn init<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, d: ContextDims, rng: &mut R) {
    let causal_taps = KERNEL * KERNEL / 2;
    store.insert(
        format!("{prefix}.mask.w"),
        kaiming(&[d.context, d.latent, KERNEL, KERNEL], d.latent * causal_taps, rng),
    );
    store.insert(format!("{prefix}.mask.b"), Tensor::zeros(&[d.context]));
    init_conv(store, &format!("{prefix}.agg1"), d.context + d.hyper, d.hidden[0], 1, rng);
    init_conv(store, &format!("{prefix}.agg2"), d.hidden[0], d.hidden[1], 1, rng);
    init_conv(store, &format!("{prefix}.agg3"), d.hidden[1], 2 * d.latent, 1, rng);
}

/// Tensor path: `(μ, σ)` for every position of `y_hat` ([1, C, H, W]) given
/// hyper features ([1, Hc, H, W]).
pub fn predict<'g>(
    bound: &Bound<'g, '_>,
    prefix: &str,
    y_hat: Var<'g>,
    hyper: Var<'g>,
) -> Result<(Var<'g>, Var<'g>)> {
    let w = bound.w(&format!("{prefix}.mask"))?;
    let ws = w.shape();
    let mask = bound.graph().constant(mask_tensor(ws[0], ws[1]));
    let w_eff = w.mul(mask)?;
    let ctx = y_hat.conv2d(w_eff, bound.b(&format!("{prefix}.mask"))?, 1, HALF)?;
    let mut h = concat(&[ctx, hyper], 1)?;
    for (i, layer) in ["agg1", "agg2", "agg3"].iter().enumerate() {
        let name = format!("{prefix}.{layer}");
        h = h.conv2d(bound.w(&name)?, bound.b(&name)?, 1, 0)?;
        if i < 2 {
            h = h.leaky_relu();
        }
    }
    let c = y_hat.shape()[1];
    let mu = h.slice(1, 0, c)?;
    let sigma = sigma_from_raw_var(h.slice(1, c, c)?);
    Ok((mu, sigma))
}

/// Flattened weights for the per-position coding path.
#[derive(Clone, Debug)]
pub struct ContextModel {
    dims: ContextDims,
    mask_w: Vec<f64>,
    mask_b: Vec<f64>,
    agg: Vec<(Vec<f64>, Vec<f64>, usize, usize)>,
}

impl ContextModel {
    pub fn from_store(store: &ParamStore, prefix: &str) -> Result<Self> {
        let w = store.get(&format!("{prefix}.mask.w"))?;
        let s = w.shape().to_vec();
        dim_check!(
            s.len() == 4 && s[2] == KERNEL && s[3] == KERNEL,
            "context kernel shape {s:?}"
        );
        let w_eff = w.zip_map(&mask_tensor(s[0], s[1]), |a, b| a * b)?;
        let mask_b = store.get(&format!("{prefix}.mask.b"))?.data().to_vec();
        let mut agg = Vec::new();
        for layer in ["agg1", "agg2", "agg3"] {
            let aw = store.get(&format!("{prefix}.{layer}.w"))?;
            let ab = store.get(&format!("{prefix}.{layer}.b"))?;
            let (o, i) = (aw.shape()[0], aw.shape()[1]);
            dim_check!(aw.shape()[2] == 1 && ab.len() == o, "{layer} must be a 1x1 layer");
            agg.push((aw.data().to_vec(), ab.data().to_vec(), o, i));
        }
        let dims = ContextDims {
            latent: s[1],
            context: s[0],
            hyper: agg[0].3 - s[0],
            hidden: [agg[0].2, agg[1].2],
        };
        dim_check!(agg[2].2 == 2 * dims.latent, "context output width {}", agg[2].2);
        Self::from_effective(dims, w_eff.into_data(), mask_b, agg)
    }

    /// Builds a model from an already-masked kernel, rejecting any weight on
    /// the center tap or a later one.
    pub fn from_effective(
        dims: ContextDims,
        mask_w: Vec<f64>,
        mask_b: Vec<f64>,
        agg: Vec<(Vec<f64>, Vec<f64>, usize, usize)>,
    ) -> Result<Self> {
        for (i, &v) in mask_w.iter().enumerate() {
            let tap = i % (KERNEL * KERNEL);
            contract!(
                v == 0.0 || tap_is_causal(tap / KERNEL, tap % KERNEL),
                "context kernel reads undecoded tap ({}, {})",
                tap / KERNEL,
                tap % KERNEL
            );
        }
        Ok(ContextModel {
            dims,
            mask_w,
            mask_b,
            agg,
        })
    }

    pub fn dims(&self) -> ContextDims {
        self.dims
    }

    /// `(μ, σ)` for every channel at `(i, j)`; `buf` holds decoded values
    /// ([C, H, W]) and `hyper` the hyper features ([Hc, H, W]).
    pub fn params_at(
        &self,
        buf: &[f64],
        hyper: &[f64],
        (h, w): (usize, usize),
        (i, j): (usize, usize),
    ) -> (Vec<f64>, Vec<f64>) {
        let d = self.dims;
        let hw = h * w;
        let kk = KERNEL * KERNEL;
        let mut input = Vec::with_capacity(d.context + d.hyper);
        for m in 0..d.context {
            let wrow = &self.mask_w[m * d.latent * kk..(m + 1) * d.latent * kk];
            let mut acc = self.mask_b[m];
            for ci in 0..d.latent {
                for ky in 0..KERNEL {
                    let yy = i as isize + ky as isize - HALF as isize;
                    for kx in 0..KERNEL {
                        let xx = j as isize + kx as isize - HALF as isize;
                        let x = if yy < 0 || yy >= h as isize || xx < 0 || xx >= w as isize {
                            0.0
                        } else {
                            buf[ci * hw + yy as usize * w + xx as usize]
                        };
                        acc += wrow[(ci * KERNEL + ky) * KERNEL + kx] * x;
                    }
                }
            }
            input.push(acc);
        }
        for c in 0..d.hyper {
            input.push(hyper[c * hw + i * w + j]);
        }
        for (li, (aw, ab, o, n)) in self.agg.iter().enumerate() {
            let mut out = Vec::with_capacity(*o);
            for oc in 0..*o {
                let mut acc = ab[oc];
                for (ic, &x) in input.iter().enumerate().take(*n) {
                    acc += aw[oc * n + ic] * x;
                }
                if li < 2 && acc < 0.0 {
                    acc *= LEAKY_SLOPE;
                }
                out.push(acc);
            }
            input = out;
        }
        let mu = input[..d.latent].to_vec();
        let sigma = input[d.latent..].iter().map(|&r| sigma_from_raw(r)).collect();
        (mu, sigma)
    }
}

/// Supplies Gaussian tables position by position, filling a buffer with the
/// symbols of each completed position before predicting the next.
struct Provider<F> {
    c: usize,
    h: usize,
    w: usize,
    buf: Vec<f64>,
    tables: Vec<SymbolTable>,
    predict: F,
}

impl<F> CdfProvider for Provider<F>
where
    F: FnMut(&[f64], (usize, usize)) -> Result<(Vec<f64>, Vec<f64>)>,
{
    fn table(&mut self, index: usize, previous: &[i32]) -> Result<&SymbolTable> {
        let (pos, ch) = (index / self.c, index % self.c);
        if ch == 0 {
            if pos > 0 {
                let (pi, pj) = ((pos - 1) / self.w, (pos - 1) % self.w);
                for c in 0..self.c {
                    let v = previous[(pos - 1) * self.c + c];
                    self.buf[c * self.h * self.w + pi * self.w + pj] = v as f64;
                }
            }
            let (mu, sigma) = (self.predict)(&self.buf, (pos / self.w, pos % self.w))?;
            self.tables = mu
                .iter()
                .zip(&sigma)
                .map(|(&m, &s)| gaussian::table(m, s))
                .collect::<Result<_>>()?;
        }
        Ok(&self.tables[ch])
    }
}

fn provider<F>(c: usize, h: usize, w: usize, predict: F) -> Provider<F> {
    Provider {
        c,
        h,
        w,
        buf: vec![0.0; c * h * w],
        tables: Vec::new(),
        predict,
    }
}

/// Reorders a channel-major [1, C, H, W] tensor to position-major symbols.
fn position_major(t: &[i32], c: usize, hw: usize) -> Vec<i32> {
    let mut out = Vec::with_capacity(t.len());
    for p in 0..hw {
        for ch in 0..c {
            out.push(t[ch * hw + p]);
        }
    }
    out
}

fn channel_major(t: &[i32], c: usize, hw: usize) -> Vec<i32> {
    let mut out = vec![0; t.len()];
    for p in 0..hw {
        for ch in 0..c {
            out[ch * hw + p] = t[p * c + ch];
        }
    }
    out
}

fn check_hyper(model: &ContextModel, hyper: &Tensor, h: usize, w: usize) -> Result<()> {
    dim_check!(
        hyper.shape() == [1, model.dims.hyper, h, w],
        "hyper features {:?} for a {}x{h}x{w} latent",
        hyper.shape(),
        model.dims.latent
    );
    Ok(())
}

/// Range-codes an integer latent `symbols` (channel-major, `[C, H, W]`).
pub fn encode(
    model: &ContextModel,
    symbols: &[i32],
    hyper: &Tensor,
    (h, w): (usize, usize),
) -> Result<Vec<u8>> {
    let c = model.dims.latent;
    dim_check!(symbols.len() == c * h * w, "latent of {} symbols", symbols.len());
    check_hyper(model, hyper, h, w)?;
    let hd = hyper.data();
    let mut p = provider(c, h, w, |buf: &[f64], pos| Ok(model.params_at(buf, hd, (h, w), pos)));
    range_encode(&position_major(symbols, c, h * w), &mut p)
}

/// Serial decoder matching [`encode`]; returns channel-major symbols.
pub fn decode(
    model: &ContextModel,
    bytes: &[u8],
    hyper: &Tensor,
    (h, w): (usize, usize),
) -> Result<Vec<i32>> {
    let c = model.dims.latent;
    check_hyper(model, hyper, h, w)?;
    let hd = hyper.data();
    let mut p = provider(c, h, w, |buf: &[f64], pos| Ok(model.params_at(buf, hd, (h, w), pos)));
    let syms = range_decode(bytes, &mut p, c * h * w)?;
    Ok(channel_major(&syms, c, h * w))
}

/// Slow decoder that re-runs the full tensor path at every position and
/// reads off that position's parameters.
pub fn decode_reference(
    store: &ParamStore,
    prefix: &str,
    bytes: &[u8],
    hyper: &Tensor,
    (c, h, w): (usize, usize, usize),
) -> Result<Vec<i32>> {
    let hw = h * w;
    let mut p = provider(c, h, w, |buf: &[f64], (i, j): (usize, usize)| {
        let g = crate::autodiff::Graph::new();
        let b = Bound::frozen(&g, store);
        let y = g.constant(Tensor::new(&[1, c, h, w], buf.to_vec())?);
        let hv = g.constant(hyper.clone());
        let (mu, sigma) = predict(&b, prefix, y, hv)?;
        let (mu, sigma) = (mu.value(), sigma.value());
        let at = |t: &Tensor| (0..c).map(|ch| t.data()[ch * hw + i * w + j]).collect();
        Ok((at(&mu), at(&sigma)))
    });
    let syms = range_decode(bytes, &mut p, c * hw)?;
    Ok(channel_major(&syms, c, hw))
}

/// Estimated bits of `symbols` under the context model (floored
/// likelihoods of the tensor path).
pub fn estimate_bits(store: &ParamStore, prefix: &str, y_hat: &Tensor, hyper: &Tensor) -> Result<f64> {
    let g = crate::autodiff::Graph::new();
    let b = Bound::frozen(&g, store);
    let y = g.constant(y_hat.clone());
    let (mu, sigma) = predict(&b, prefix, y, g.constant(hyper.clone()))?;
    let p = gaussian::likelihood_op(y, mu, sigma)?;
    Ok(p.value().data().iter().map(|v| -v.log2()).sum())
}

/// Decodes into a [1, C, H, W] tensor.
pub fn decode_tensor(
    model: &ContextModel,
    bytes: &[u8],
    hyper: &Tensor,
    (h, w): (usize, usize),
) -> Result<Tensor> {
    let syms = decode(model, bytes, hyper, (h, w))?;
    from_symbols(&[1, model.dims.latent, h, w], &syms)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Graph;
    use crate::error::Error;
    use rand::SeedableRng;
    use rand_xoshiro::Xoshiro256PlusPlus;

    const D: ContextDims = ContextDims {
        latent: 4,
        context: 6,
        hyper: 5,
        hidden: [8, 8],
    };

    fn setup(seed: u64) -> (ParamStore, Tensor, Vec<i32>) {
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
        let mut s = ParamStore::new();
        init(&mut s, "ctx", D, &mut rng);
        for name in ["ctx.mask.b", "ctx.agg1.b", "ctx.agg3.b"] {
            let n = s.get(name).unwrap().len();
            s.insert(name, Tensor::randn(&[n], 0.5, &mut rng));
        }
        let hyper = Tensor::randn(&[1, D.hyper, 6, 5], 1.0, &mut rng);
        let syms: Vec<i32> = (0..D.latent * 30).map(|_| rng.gen_range(-6..=6)).collect();
        (s, hyper, syms)
    }

    fn tensor_params(s: &ParamStore, y: &Tensor, hyper: &Tensor) -> (Tensor, Tensor) {
        let g = Graph::new();
        let b = Bound::frozen(&g, s);
        let (m, sg) = predict(&b, "ctx", g.constant(y.clone()), g.constant(hyper.clone())).unwrap();
        ((*m.value()).clone(), (*sg.value()).clone())
    }

    #[test]
    fn zero_inputs_give_bias_constant() {
        let (s, _, _) = setup(1);
        let (mu, sigma) = tensor_params(&s, &Tensor::zeros(&[1, 4, 6, 5]), &Tensor::zeros(&[1, 5, 6, 5]));
        for c in 0..4 {
            let ch = &mu.data()[c * 30..(c + 1) * 30];
            assert!(ch.iter().all(|&v| v == ch[0]));
            let ch = &sigma.data()[c * 30..(c + 1) * 30];
            assert!(ch.iter().all(|&v| v == ch[0]));
        }
    }

    #[test]
    fn perturbing_a_position_leaves_earlier_positions_unchanged() {
        let (s, hyper, syms) = setup(2);
        let y = from_symbols(&[1, 4, 6, 5], &syms).unwrap();
        let (mu0, sg0) = tensor_params(&s, &y, &hyper);
        for p in [0usize, 7, 13, 29] {
            let mut y2 = y.clone();
            for c in 0..4 {
                y2.data_mut()[c * 30 + p] += 3.0;
            }
            let (mu1, sg1) = tensor_params(&s, &y2, &hyper);
            for q in 0..=p {
                for c in 0..4 {
                    assert_eq!(mu0.data()[c * 30 + q], mu1.data()[c * 30 + q]);
                    assert_eq!(sg0.data()[c * 30 + q], sg1.data()[c * 30 + q]);
                }
            }
        }
    }

    #[test]
    fn coding_path_matches_tensor_path_bitwise() {
        let (s, hyper, syms) = setup(3);
        let model = ContextModel::from_store(&s, "ctx").unwrap();
        let y = from_symbols(&[1, 4, 6, 5], &syms).unwrap();
        let (mu, sigma) = tensor_params(&s, &y, &hyper);
        for i in 0..6 {
            for j in 0..5 {
                let (m, sg) = model.params_at(y.data(), hyper.data(), (6, 5), (i, j));
                for c in 0..4 {
                    assert_eq!(m[c].to_bits(), mu.data()[c * 30 + i * 5 + j].to_bits());
                    assert_eq!(sg[c].to_bits(), sigma.data()[c * 30 + i * 5 + j].to_bits());
                }
            }
        }
    }

    #[test]
    fn serial_and_reference_decoders_reproduce_latent() {
        let (s, hyper, syms) = setup(4);
        let model = ContextModel::from_store(&s, "ctx").unwrap();
        let bytes = encode(&model, &syms, &hyper, (6, 5)).unwrap();
        assert_eq!(decode(&model, &bytes, &hyper, (6, 5)).unwrap(), syms);
        assert_eq!(
            decode_reference(&s, "ctx", &bytes, &hyper, (4, 6, 5)).unwrap(),
            syms
        );
    }

    #[test]
    fn unmasked_kernel_is_rejected() {
        let (s, _, _) = setup(5);
        let model = ContextModel::from_store(&s, "ctx").unwrap();
        let mut w = model.mask_w.clone();
        w[HALF * KERNEL + HALF] = 0.3;
        let r = ContextModel::from_effective(model.dims, w, model.mask_b.clone(), model.agg.clone());
        assert!(matches!(r, Err(Error::Contract(_))));
    }
}
