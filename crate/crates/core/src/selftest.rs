//! Built-in checks shared by the `selftest` command and the test suites:
//! a range-coder fuzz over all three entropy models and finite-difference
//! gradient checks of both training objectives.

use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;

use crate::autodiff::Var;
use crate::entropy::context::{self, ContextDims, ContextModel};
use crate::entropy::factorized::{self, FactorizedPrior};
use crate::entropy::gaussian;
use crate::entropy::tables::{range_decode, range_encode, ChannelTables, SYMBOL_MAX, SYMBOL_MIN};
use crate::error::Result;
use crate::gradcheck::grad_check_params;
use crate::hvcn::{self, HvcnSample, NoiseDraw, NoiseSchedule};
use crate::ivn;
use crate::params::ParamStore;
use crate::pyramid::FeaturePyramid;
use crate::tensor::Tensor;
use crate::vfcn;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct FuzzReport {
    /// Cases per model: factorized, Gaussian, context.
    pub cases: [usize; 3],
    pub failures: usize,
    pub symbols: usize,
}

/// Random integer latent: mostly Gaussian around zero at a random scale,
/// with occasional extreme values that force escape coding.
fn fuzz_symbols<R: Rng>(n: usize, rng: &mut R) -> Vec<i32> {
    let scale = 10f64.powf(rng.gen_range(-1.0..2.0));
    (0..n)
        .map(|_| match rng.gen_range(0..100) {
            0 => SYMBOL_MAX,
            1 => SYMBOL_MIN,
            2 => rng.gen_range(-3000..3000),
            _ => (rng.sample::<f64, _>(rand_distr::StandardNormal) * scale).round() as i32,
        })
        .collect()
}

/// Round-trips `cases` random latents, cycling through the factorized,
/// Gaussian-conditional and context models with random shapes and
/// parameters. A case fails when the decoded symbols differ or coding
/// errors out.
pub fn codec_fuzz(cases: usize, seed: u64) -> FuzzReport {
    let mut report = FuzzReport::default();
    for i in 0..cases {
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed ^ (i as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let kind = i % 3;
        report.cases[kind] += 1;
        let ok = match kind {
            0 => fuzz_factorized(&mut rng),
            1 => fuzz_gaussian(&mut rng),
            _ => fuzz_context(&mut rng),
        };
        match ok {
            Ok((true, n)) => report.symbols += n,
            Ok((false, _)) | Err(_) => report.failures += 1,
        }
    }
    report
}

fn fuzz_factorized(rng: &mut Xoshiro256PlusPlus) -> Result<(bool, usize)> {
    let c = rng.gen_range(1..9);
    let per = rng.gen_range(1..65);
    let mut store = ParamStore::new();
    factorized::init(&mut store, "p", c, rng);
    for name in factorized::param_names("p") {
        let t = store.get_mut(&name).expect("prior parameter");
        for v in t.data_mut() {
            *v += rng.gen_range(-0.5..0.5);
        }
    }
    let tables = FactorizedPrior::from_store(&store, "p")?.tables()?;
    let syms = fuzz_symbols(c * per, rng);
    let mut p = ChannelTables { tables, per_channel: per };
    let bytes = range_encode(&syms, &mut p)?;
    Ok((range_decode(&bytes, &mut p, syms.len())? == syms, syms.len()))
}

fn fuzz_gaussian(rng: &mut Xoshiro256PlusPlus) -> Result<(bool, usize)> {
    let n = rng.gen_range(1..400);
    let mut tables = Vec::with_capacity(n);
    let mut syms = fuzz_symbols(n, rng);
    for s in syms.iter_mut() {
        let mu = rng.gen_range(-50.0..50.0);
        let sigma = 10f64.powf(rng.gen_range(-1.5..2.5)).max(crate::entropy::SIGMA_MIN);
        if rng.gen_bool(0.7) {
            *s = (mu + rng.sample::<f64, _>(rand_distr::StandardNormal) * sigma).round() as i32;
        }
        tables.push(gaussian::table(mu, sigma)?);
    }
    let mut p = ChannelTables { tables, per_channel: 1 };
    let bytes = range_encode(&syms, &mut p)?;
    Ok((range_decode(&bytes, &mut p, n)? == syms, n))
}

fn fuzz_context(rng: &mut Xoshiro256PlusPlus) -> Result<(bool, usize)> {
    let dims = ContextDims {
        latent: rng.gen_range(1..7),
        context: 8,
        hyper: 4,
        hidden: [8, 8],
    };
    let (h, w) = (rng.gen_range(1..7), rng.gen_range(1..7));
    let mut store = ParamStore::new();
    context::init(&mut store, "c", dims, rng);
    let model = ContextModel::from_store(&store, "c")?;
    let hyper = Tensor::randn(&[1, dims.hyper, h, w], 2.0, rng);
    let syms = fuzz_symbols(dims.latent * h * w, rng);
    let bytes = context::encode(&model, &syms, &hyper, (h, w))?;
    Ok((context::decode(&model, &bytes, &hyper, (h, w))? == syms, syms.len()))
}

/// Parameter groups of the feature codec.
pub const VFCN_GROUPS: [&str; 9] = ["dr.", "he.", "hd.", "ctx.", "zprior.", "ur1.", "ur2.", "ur3.", "ur4."];
/// Parameter groups of the reconstruction model.
pub const HVCN_GROUPS: [&str; 5] = ["acn.", "fcn.", "cm.", "unet.", "cm.z"];

/// Worst relative gradient error of the feature-codec objective per group.
pub fn vfcn_gradients(seed: u64, per_tensor: usize) -> Result<Vec<(String, f64)>> {
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
    let params = vfcn::init_params(seed);
    let batch: Vec<FeaturePyramid> = (0..2).map(|_| FeaturePyramid::random(&mut rng, 1.0)).collect();
    let (normed, stats) = ivn::train_normalize(&batch)?;
    let zero = stats.zero_point();
    let target = normed[0].clone();
    let noise = rng.gen();
    grad_check_params(
        |b| -> Result<Var<'_>> { Ok(vfcn::sample_loss(b, &target, zero, vfcn::DEFAULT_LAMBDA_P, noise)?.0) },
        &params,
        &VFCN_GROUPS,
        per_tensor,
        1e-6,
        seed,
    )
}

/// Worst relative gradient error of the reconstruction objective per
/// group. The zero convolutions are moved off zero first so the control
/// module receives gradients.
pub fn hvcn_gradients(seed: u64, per_tensor: usize) -> Result<Vec<(String, f64)>> {
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
    let mut params = hvcn::init_params(seed);
    for z in hvcn::nets::ZERO_CONVS {
        for suffix in ["w", "b"] {
            let t = params.get_mut(&format!("{z}.{suffix}")).expect("zero conv");
            for v in t.data_mut() {
                *v = rng.gen_range(-0.1..0.1);
            }
        }
    }
    let pyramid = FeaturePyramid::random(&mut rng, 1.0);
    let sample = HvcnSample::new(&pyramid, Tensor::randn(&hvcn::latent_shape(), 1.0, &mut rng))?;
    let schedule = NoiseSchedule::default();
    let draw = NoiseDraw::sample(&schedule, rng.gen());
    grad_check_params(
        |b| -> Result<Var<'_>> {
            Ok(hvcn::sample_loss(b, &schedule, &sample, &draw, hvcn::DEFAULT_LAMBDA_A, 1.0)?[0])
        },
        &params,
        &HVCN_GROUPS,
        per_tensor,
        1e-6,
        seed,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_fuzz_passes() {
        let r = codec_fuzz(30, 7);
        assert_eq!(r.failures, 0);
        assert_eq!(r.cases, [10, 10, 10]);
    }
}
