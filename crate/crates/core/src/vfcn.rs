//! Variable-rate feature codec for machine vision.
//!
//! Only P2 is coded. `DR` maps the normalized P2 to a 48×8×8 latent, `HE`
//! derives a 32×4×4 hyper latent coded under a factorized prior, and the main
//! latent is coded under a Gaussian conditional whose parameters come from
//! the hyper decoder and an autoregressive context model. Four restoration
//! heads rebuild every pyramid level from the decoded latent.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_xoshiro::Xoshiro256PlusPlus;

use crate::autodiff::{Graph, Var};
use crate::entropy::bitstream::{Bitstream, Header};
use crate::entropy::context::{self, ContextDims, ContextModel};
use crate::entropy::factorized::{self, FactorizedPrior};
use crate::entropy::gaussian;
use crate::entropy::{bits_of, RateCheck};
use crate::entropy::quant::{from_symbols, quantize_var, to_symbols, QuantMode};
use crate::entropy::tables::{range_decode, range_encode, ChannelTables, SymbolTable};
use crate::error::{contract, dim_check, Result};
use crate::ivn::{self, GlobalNormParams};
use crate::par::Exec;
use crate::params::{init_conv, init_deconv, kaiming, Bound, ParamStore};
use crate::pyramid::dataset::IMAGE_SIZE;
use crate::pyramid::{FeaturePyramid, TaskModel, ToyImage, PYRAMID_CHANNELS};
use crate::tensor::Tensor;
use crate::train::{mean_grads, Trainer};

pub const LATENT_CHANNELS: usize = 48;
pub const LATENT_SIZE: usize = 8;
pub const HYPER_CHANNELS: usize = 32;
pub const HYPER_SIZE: usize = 4;
const HYPER_FEATURES: usize = 64;
pub const CONTEXT_DIMS: ContextDims = ContextDims {
    latent: LATENT_CHANNELS,
    context: 64,
    hyper: HYPER_FEATURES,
    hidden: [96, 96],
};
pub const IMAGE_PIXELS: usize = IMAGE_SIZE * IMAGE_SIZE;
pub const DEFAULT_LAMBDA_P: f64 = 0.013;
/// Feature errors are measured with normalized features on the 0..255 scale
/// of 8-bit images.
const PIXEL_SCALE: f64 = 255.0;
const CTX: &str = "ctx";
const PRIOR: &str = "zprior";

/// Bias-free convolution weights `[out, in, k, k]`.
fn init_linear<R: rand::Rng + ?Sized>(s: &mut ParamStore, name: &str, cin: usize, cout: usize, k: usize, rng: &mut R) {
    s.insert(format!("{name}.w"), kaiming(&[cout, cin, k, k], cin * k * k, rng));
}

fn init_linear_deconv<R: rand::Rng + ?Sized>(s: &mut ParamStore, name: &str, cin: usize, cout: usize, rng: &mut R) {
    s.insert(format!("{name}.w"), kaiming(&[cin, cout, 4, 4], cin * 4, rng));
}

pub fn init_params(seed: u64) -> ParamStore {
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
    let mut s = ParamStore::new();
    let (c, l) = (PYRAMID_CHANNELS, LATENT_CHANNELS);
    init_linear(&mut s, "dr.c1", c, l, 3, &mut rng);
    init_linear(&mut s, "dr.c2", l, l, 3, &mut rng);
    init_linear(&mut s, "dr.c3", l, l, 3, &mut rng);
    init_linear(&mut s, "he.c1", l, HYPER_CHANNELS, 3, &mut rng);
    init_linear(&mut s, "he.c2", HYPER_CHANNELS, HYPER_CHANNELS, 3, &mut rng);
    init_deconv(&mut s, "hd.d1", HYPER_CHANNELS, l, 4, 2, &mut rng);
    init_conv(&mut s, "hd.c2", l, HYPER_FEATURES, 3, &mut rng);
    context::init(&mut s, CTX, CONTEXT_DIMS, &mut rng);
    factorized::init(&mut s, PRIOR, HYPER_CHANNELS, &mut rng);
    init_linear_deconv(&mut s, "ur1.d1", l, l, &mut rng);
    init_linear(&mut s, "ur1.c2", l, c, 3, &mut rng);
    init_linear(&mut s, "ur2.c1", l, l, 3, &mut rng);
    init_linear(&mut s, "ur2.c2", l, c, 3, &mut rng);
    init_linear(&mut s, "ur3.c1", l, l, 3, &mut rng);
    init_linear(&mut s, "ur3.c2", l, c, 3, &mut rng);
    init_linear(&mut s, "ur4.c1", l, l, 3, &mut rng);
    init_linear(&mut s, "ur4.c2", l, l, 3, &mut rng);
    init_linear(&mut s, "ur4.c3", l, c, 3, &mut rng);
    s
}

/// Architecture hash of a freshly initialized store.
pub fn arch_hash() -> u64 {
    init_params(0).arch_hash()
}

fn conv<'g>(b: &Bound<'g, '_>, x: Var<'g>, name: &str, stride: usize) -> Result<Var<'g>> {
    let w = b.w(name)?;
    let pad = w.shape()[2] / 2;
    x.conv2d(w, b.b(name)?, stride, pad)
}

fn deconv<'g>(b: &Bound<'g, '_>, x: Var<'g>, name: &str) -> Result<Var<'g>> {
    x.deconv2d(b.w(name)?, b.b(name)?, 2, 1)
}

fn linear<'g>(b: &Bound<'g, '_>, x: Var<'g>, name: &str, stride: usize) -> Result<Var<'g>> {
    let w = b.w(name)?;
    let (cout, k) = (w.shape()[0], w.shape()[2]);
    let zero = b.graph().constant(Tensor::zeros(&[cout]));
    x.conv2d(w, zero, stride, k / 2)
}

fn linear_deconv<'g>(b: &Bound<'g, '_>, x: Var<'g>, name: &str) -> Result<Var<'g>> {
    let w = b.w(name)?;
    let zero = b.graph().constant(Tensor::zeros(&[w.shape()[1]]));
    x.deconv2d(w, zero, 2, 1)
}

/// `DR`: normalized P2 `[1, 32, 16, 16]` to `y` `[1, 48, 8, 8]`.
///
/// DR and UR work relative to `zero`, the normalized value of a zero
/// feature. Without biases they are then positively homogeneous in the raw
/// features, so dividing the input by `s` scales the latent by `1/s`.
pub fn analysis<'g>(b: &Bound<'g, '_>, p2: Var<'g>, zero: f64) -> Result<Var<'g>> {
    let h = linear(b, p2.add_scalar(-zero), "dr.c1", 1)?.leaky_relu();
    let h = linear(b, h, "dr.c2", 1)?.leaky_relu();
    linear(b, h, "dr.c3", 2)
}

/// `HE`: `y` to `z` `[1, 32, 4, 4]`.
pub fn hyper_analysis<'g>(b: &Bound<'g, '_>, y: Var<'g>) -> Result<Var<'g>> {
    let h = linear(b, y, "he.c1", 1)?.leaky_relu();
    linear(b, h, "he.c2", 2)
}

/// Hyper decoder: `ẑ` to context-model side features `[1, 64, 8, 8]`.
pub fn hyper_synthesis<'g>(b: &Bound<'g, '_>, z_hat: Var<'g>) -> Result<Var<'g>> {
    let h = deconv(b, z_hat, "hd.d1")?.leaky_relu();
    conv(b, h, "hd.c2", 1)
}

/// The four restoration heads: `ŷ` to normalized P̃2..P̃5.
pub fn synthesis<'g>(b: &Bound<'g, '_>, y_hat: Var<'g>, zero: f64) -> Result<Vec<Var<'g>>> {
    let p2 = linear(b, linear_deconv(b, y_hat, "ur1.d1")?.leaky_relu(), "ur1.c2", 1)?;
    let p3 = linear(b, linear(b, y_hat, "ur2.c1", 1)?.leaky_relu(), "ur2.c2", 1)?;
    let p4 = linear(b, linear(b, y_hat, "ur3.c1", 2)?.leaky_relu(), "ur3.c2", 1)?;
    let h = linear(b, y_hat, "ur4.c1", 2)?.leaky_relu();
    let h = linear(b, h, "ur4.c2", 2)?.leaky_relu();
    let p5 = linear(b, h, "ur4.c3", 1)?;
    Ok([p2, p3, p4, p5].into_iter().map(|p| p.add_scalar(zero)).collect())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VfcnLossReport {
    /// Estimated rate in bits per image pixel.
    pub l_r: f64,
    /// Sum over the four levels of the mean squared error of the normalized
    /// features, on the 0..255 scale.
    pub l_p: f64,
    pub l_mv: f64,
    pub lambda_p: f64,
}

/// Graph of the training objective for one normalized pyramid. Returns
/// `L_mv` and its `(L_r, L_p)` parts.
pub fn sample_loss<'g>(
    b: &Bound<'g, '_>,
    target: &FeaturePyramid,
    zero: f64,
    lambda_p: f64,
    noise_seed: u64,
) -> Result<(Var<'g>, Var<'g>, Var<'g>)> {
    loss_with_input(b, target.level(0), target, zero, lambda_p, noise_seed)
}

fn loss_with_input<'g>(
    b: &Bound<'g, '_>,
    input: &Tensor,
    target: &FeaturePyramid,
    zero: f64,
    lambda_p: f64,
    noise_seed: u64,
) -> Result<(Var<'g>, Var<'g>, Var<'g>)> {
    let g = b.graph();
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(noise_seed);
    let y = analysis(b, g.constant(input.clone()), zero)?;
    let z = hyper_analysis(b, y)?;
    let y_t = quantize_var(y, QuantMode::AdditiveNoise, &mut rng)?;
    let z_t = quantize_var(z, QuantMode::AdditiveNoise, &mut rng)?;
    let hyper = hyper_synthesis(b, z_t)?;
    let (mu, sigma) = context::predict(b, CTX, y_t, hyper)?;
    let py = gaussian::likelihood_op(y_t, mu, sigma)?;
    let pz = factorized::likelihood(b, PRIOR, z_t)?;
    let nats = py.log().sum().add(pz.log().sum())?;
    let l_r = nats.mul_scalar(-1.0 / (std::f64::consts::LN_2 * IMAGE_PIXELS as f64));
    let mut parts = Vec::with_capacity(4);
    for (rec, t) in synthesis(b, y_t, zero)?.into_iter().zip(target.levels()) {
        parts.push(rec.mse(g.constant(t.clone()))?.mul_scalar(PIXEL_SCALE * PIXEL_SCALE));
    }
    let l_p = crate::autodiff::add_all(&parts)?;
    let l_mv = l_r.add(l_p.mul_scalar(lambda_p))?;
    Ok((l_mv, l_r, l_p))
}

fn noise_seed(seed: u64, step: usize, i: usize) -> u64 {
    seed ^ (step as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (i as u64).wrapping_mul(0xD1B5_4A32_D192_ED03)
}

/// Batch loss of `params` on raw pyramids (batch-normalized first).
pub fn batch_loss(
    params: &ParamStore,
    batch: &[FeaturePyramid],
    lambda_p: f64,
    seed: u64,
    exec: Exec,
) -> Result<VfcnLossReport> {
    let (normed, stats) = ivn::train_normalize(batch)?;
    let zero = stats.zero_point();
    let parts = exec.map_range(normed.len(), |i| {
        let g = Graph::new();
        let b = Bound::frozen(&g, params);
        let (_, l_r, l_p) = sample_loss(&b, &normed[i], zero, lambda_p, noise_seed(seed, 0, i))?;
        Ok::<_, crate::Error>((l_r.item(), l_p.item()))
    });
    let (mut l_r, mut l_p) = (0.0, 0.0);
    for p in parts {
        let (r, q) = p?;
        l_r += r;
        l_p += q;
    }
    let n = batch.len() as f64;
    Ok(report(l_r / n, l_p / n, lambda_p))
}

fn report(l_r: f64, l_p: f64, lambda_p: f64) -> VfcnLossReport {
    VfcnLossReport {
        l_r,
        l_p,
        l_mv: l_r + lambda_p * l_p,
        lambda_p,
    }
}

#[derive(Clone, Copy, Debug)]
pub struct VfcnTrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub lambda_p: f64,
    pub seed: u64,
}

/// Trains the codec on task-network pyramids. Global normalization bounds
/// are calibrated on the same pyramids and stored with the parameters.
pub fn train(
    pyramids: &[FeaturePyramid],
    cfg: VfcnTrainConfig,
    exec: Exec,
) -> Result<(VfcnModel, Vec<VfcnLossReport>)> {
    contract!(!pyramids.is_empty(), "training the feature codec on no pyramids");
    contract!(cfg.batch > 0, "batch size must be positive");
    let (c_min, c_max) = ivn::calibrate_global_stats(pyramids)?;
    let mut params = init_params(cfg.seed);
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(cfg.seed.wrapping_add(1));
    let mut trainer = Trainer::new(cfg.lr, cfg.steps, 10.0);
    let mut order: Vec<usize> = (0..pyramids.len()).collect();
    let mut cursor = order.len();
    let mut log = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let mut batch = Vec::with_capacity(cfg.batch);
        while batch.len() < cfg.batch {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(pyramids[order[cursor]].clone());
            cursor += 1;
        }
        let (normed, stats) = ivn::train_normalize(&batch)?;
        let zero = stats.zero_point();
        let (l, grads) = mean_grads(exec, normed.len(), |i| {
            let g = Graph::new();
            let b = Bound::all(&g, &params);
            let seed = noise_seed(cfg.seed, step, i);
            let (l_mv, l_r, l_p) = sample_loss(&b, &normed[i], zero, cfg.lambda_p, seed)?;
            Ok((vec![l_r.item(), l_p.item()], b.grads(&g.backward(l_mv)?)))
        })?;
        let r = report(l[0], l[1], cfg.lambda_p);
        trainer.apply(&mut params, r.l_mv, &grads)?;
        if step % 100 == 0 {
            log::info!(
                "vfcn step {step}: L_mv {:.4} (rate {:.4} bpp, feature SSE {:.3})",
                r.l_mv,
                r.l_r,
                r.l_p
            );
        }
        log.push(r);
    }
    params.set_meta("c_min", c_min);
    params.set_meta("c_max", c_max);
    params.set_meta("lambda_p", cfg.lambda_p);
    params.set_tag("arch", params.arch_hash());
    params.round_to_f32();
    Ok((VfcnModel::from_params(params)?, log))
}

/// A trained codec with its coding tables prepared.
#[derive(Clone, Debug)]
pub struct VfcnModel {
    pub params: ParamStore,
    ctx: ContextModel,
    z_tables: Vec<SymbolTable>,
}

/// Intermediate values of an encode, for analysis.
#[derive(Clone, Debug)]
pub struct Encoded {
    pub stream: Bitstream,
    pub y_hat: Tensor,
    pub z_hat: Tensor,
    pub hyper: Tensor,
}

impl VfcnModel {
    pub fn from_params(params: ParamStore) -> Result<Self> {
        params.check_arch(arch_hash(), "feature codec")?;
        let ctx = ContextModel::from_store(&params, CTX)?;
        let z_tables = FactorizedPrior::from_store(&params, PRIOR)?.tables()?;
        Ok(VfcnModel {
            params,
            ctx,
            z_tables,
        })
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        Self::from_params(ParamStore::load(path)?)
    }

    /// Global normalization at scale `s`, rounded to what the header stores.
    pub fn norm(&self, s: f64) -> Result<GlobalNormParams> {
        GlobalNormParams::new(
            self.params.meta("c_min")?,
            self.params.meta("c_max")?,
            s as f32 as f64,
        )
    }

    fn z_provider(&self) -> ChannelTables {
        ChannelTables {
            tables: self.z_tables.clone(),
            per_channel: HYPER_SIZE * HYPER_SIZE,
        }
    }

    fn hyper_features(&self, z_hat: &Tensor) -> Result<Tensor> {
        let g = Graph::new();
        let b = Bound::frozen(&g, &self.params);
        Ok((*hyper_synthesis(&b, g.constant(z_hat.clone()))?.value()).clone())
    }

    pub fn encode_full(&self, p: &FeaturePyramid, norm: GlobalNormParams) -> Result<Encoded> {
        let p2 = ivn::infer_normalize_tensor(p.level(0), norm)?;
        p2.check_finite("normalized P2")?;
        let (y_hat, z_hat) = {
            let g = Graph::new();
            let b = Bound::frozen(&g, &self.params);
            let y = analysis(&b, g.constant(p2), norm.zero_point())?;
            let z = hyper_analysis(&b, y)?;
            let mut rng = Xoshiro256PlusPlus::seed_from_u64(0);
            let y_hat = quantize_var(y, QuantMode::Round, &mut rng)?;
            let z_hat = quantize_var(z, QuantMode::Round, &mut rng)?;
            ((*y_hat.value()).clone(), (*z_hat.value()).clone())
        };
        let hyper_bytes = range_encode(&to_symbols(&z_hat)?, &mut self.z_provider())?;
        let hyper = self.hyper_features(&z_hat)?;
        let main = context::encode(&self.ctx, &to_symbols(&y_hat)?, &hyper, (LATENT_SIZE, LATENT_SIZE))?;
        let header = Header {
            s: norm.s as f32,
            c_min: norm.c_min as f32,
            c_max: norm.c_max as f32,
            image_hw: (IMAGE_SIZE as u16, IMAGE_SIZE as u16),
            latent_dims: (LATENT_CHANNELS as u16, LATENT_SIZE as u16, LATENT_SIZE as u16),
        };
        Ok(Encoded {
            stream: Bitstream {
                header,
                hyper: hyper_bytes,
                main,
                color: None,
            },
            y_hat,
            z_hat,
            hyper,
        })
    }

    /// Rate estimate and actual payload of the main and hyper latents for a
    /// raw P2-like map `[1, 32, H, W]` with `H` and `W` multiples of 4,
    /// such as a mosaic of several feature maps.
    pub fn rate_check(&self, p2: &Tensor, norm: GlobalNormParams) -> Result<(RateCheck, RateCheck)> {
        let (_, c, h, w) = p2.dims4()?;
        dim_check!(c == PYRAMID_CHANNELS && h % 4 == 0 && w % 4 == 0, "rate check on {:?}", p2.shape());
        let x = ivn::infer_normalize_tensor(p2, norm)?;
        let g = Graph::new();
        let b = Bound::frozen(&g, &self.params);
        let y = analysis(&b, g.constant(x), norm.zero_point())?;
        let z = hyper_analysis(&b, y)?;
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(0);
        let y_hat = quantize_var(y, QuantMode::Round, &mut rng)?;
        let z_hat = quantize_var(z, QuantMode::Round, &mut rng)?;
        let hyper = hyper_synthesis(&b, z_hat)?;
        let (mu, sigma) = context::predict(&b, CTX, y_hat, hyper)?;
        let py = gaussian::likelihood_op(y_hat, mu, sigma)?;
        let pz = factorized::likelihood(&b, PRIOR, z_hat)?;

        let (yh, zh) = (y_hat.value(), z_hat.value());
        let (ly, lz) = ((h / 2, w / 2), (h / 4, w / 4));
        let main = context::encode(&self.ctx, &to_symbols(&yh)?, &hyper.value(), ly)?;
        let mut zp = ChannelTables {
            tables: self.z_tables.clone(),
            per_channel: lz.0 * lz.1,
        };
        let side = range_encode(&to_symbols(&zh)?, &mut zp)?;
        Ok((
            RateCheck {
                elements: yh.len(),
                estimate: bits_of(py.value().data()),
                actual: main.len() * 8,
            },
            RateCheck {
                elements: zh.len(),
                estimate: bits_of(pz.value().data()),
                actual: side.len() * 8,
            },
        ))
    }

    pub fn encode(&self, p: &FeaturePyramid, norm: GlobalNormParams) -> Result<Bitstream> {
        Ok(self.encode_full(p, norm)?.stream)
    }

    fn check_header(&self, h: &Header) -> Result<GlobalNormParams> {
        dim_check!(
            h.latent_dims == (LATENT_CHANNELS as u16, LATENT_SIZE as u16, LATENT_SIZE as u16),
            "stream latent {:?} does not match the model",
            h.latent_dims
        );
        GlobalNormParams::new(h.c_min as f64, h.c_max as f64, h.s as f64)
    }

    fn decode_hyper(&self, stream: &Bitstream) -> Result<(Tensor, Tensor)> {
        let n = HYPER_CHANNELS * HYPER_SIZE * HYPER_SIZE;
        let syms = range_decode(&stream.hyper, &mut self.z_provider(), n)?;
        let z_hat = from_symbols(&[1, HYPER_CHANNELS, HYPER_SIZE, HYPER_SIZE], &syms)?;
        let hyper = self.hyper_features(&z_hat)?;
        Ok((z_hat, hyper))
    }

    /// Decoded latent `ŷ` of a stream.
    pub fn decode_latent(&self, stream: &Bitstream) -> Result<Tensor> {
        self.check_header(&stream.header)?;
        let (_, hyper) = self.decode_hyper(stream)?;
        context::decode_tensor(&self.ctx, &stream.main, &hyper, (LATENT_SIZE, LATENT_SIZE))
    }

    /// Decodes with the slow full-tensor context path.
    pub fn decode_latent_reference(&self, stream: &Bitstream) -> Result<Tensor> {
        self.check_header(&stream.header)?;
        let (_, hyper) = self.decode_hyper(stream)?;
        let dims = (LATENT_CHANNELS, LATENT_SIZE, LATENT_SIZE);
        let syms = context::decode_reference(&self.params, CTX, &stream.main, &hyper, dims)?;
        from_symbols(&[1, LATENT_CHANNELS, LATENT_SIZE, LATENT_SIZE], &syms)
    }

    /// Restored pyramid from a decoded latent, denormalized with `norm`.
    pub fn reconstruct(&self, y_hat: &Tensor, norm: GlobalNormParams) -> Result<FeaturePyramid> {
        let g = Graph::new();
        let b = Bound::frozen(&g, &self.params);
        let levels = synthesis(&b, g.constant(y_hat.clone()), norm.zero_point())?;
        let p = FeaturePyramid::new(levels.iter().map(|v| (*v.value()).clone()).collect())?;
        Ok(ivn::denormalize(&p, norm))
    }

    pub fn decode(&self, stream: &Bitstream) -> Result<FeaturePyramid> {
        let norm = self.check_header(&stream.header)?;
        let y_hat = self.decode_latent(stream)?;
        self.reconstruct(&y_hat, norm)
    }

    /// Estimated bits of the main latent at every element (`[1, C, H, W]`)
    /// and the total estimated bits of the hyper latent, both from the
    /// rounded latents of `encoded`.
    pub fn estimated_bits(&self, encoded: &Encoded) -> Result<(Tensor, f64)> {
        let g = Graph::new();
        let b = Bound::frozen(&g, &self.params);
        let y = g.constant(encoded.y_hat.clone());
        let (mu, sigma) = context::predict(&b, CTX, y, g.constant(encoded.hyper.clone()))?;
        let py = gaussian::likelihood_op(y, mu, sigma)?;
        let pz = factorized::likelihood(&b, PRIOR, g.constant(encoded.z_hat.clone()))?;
        let z_bits = pz.value().data().iter().map(|p| -p.log2()).sum();
        Ok((py.value().map(|p| -p.log2()), z_bits))
    }
}

/// One point of a rate sweep.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SweepPoint {
    pub s: f64,
    /// Mean stream size in bits per image pixel.
    pub bpp: f64,
    pub class_acc: f64,
    pub loc_hit: f64,
}

impl SweepPoint {
    pub fn accuracy(&self) -> f64 {
        0.5 * (self.class_acc + self.loc_hit)
    }
}

/// Codes every pyramid at each scale factor and evaluates the task tail on
/// the decoded features.
pub fn rate_sweep(
    model: &VfcnModel,
    task: &TaskModel,
    pyramids: &[FeaturePyramid],
    images: &[ToyImage],
    s_values: &[f64],
    exec: Exec,
) -> Result<Vec<SweepPoint>> {
    contract!(pyramids.len() == images.len(), "pyramid and image counts differ");
    contract!(!pyramids.is_empty(), "rate sweep over no samples");
    let mut out = Vec::with_capacity(s_values.len());
    for &s in s_values {
        let norm = model.norm(s)?;
        let coded = exec.try_map(pyramids, |p| {
            let stream = model.encode(p, norm)?;
            let bits = stream.to_bytes()?.len() * 8;
            Ok::<_, crate::Error>((bits, model.decode(&stream)?))
        })?;
        let bits: usize = coded.iter().map(|(b, _)| b).sum();
        let decoded: Vec<FeaturePyramid> = coded.into_iter().map(|(_, p)| p).collect();
        let acc = task.evaluate(&decoded, images, exec)?;
        let bpp = bits as f64 / (pyramids.len() * IMAGE_PIXELS) as f64;
        log::info!("sweep s={s}: {bpp:.4} bpp, class {:.3}, loc {:.3}", acc.class_acc, acc.loc_hit);
        out.push(SweepPoint {
            s,
            bpp,
            class_acc: acc.class_acc,
            loc_hit: acc.loc_hit,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pyramid::level_shape;

    fn untrained() -> VfcnModel {
        let mut p = init_params(3);
        p.set_meta("c_min", -2.0);
        p.set_meta("c_max", 3.0);
        p.set_tag("arch", arch_hash());
        VfcnModel::from_params(p).unwrap()
    }

    fn pyramid(seed: u64) -> FeaturePyramid {
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
        FeaturePyramid::random(&mut rng, 1.0)
    }

    #[test]
    fn shapes_through_the_codec() {
        let g = Graph::new();
        let p = init_params(0);
        let b = Bound::frozen(&g, &p);
        let y = analysis(&b, g.constant(Tensor::zeros(&level_shape(0))), 0.5).unwrap();
        assert_eq!(y.shape(), [1, 48, 8, 8]);
        let z = hyper_analysis(&b, y).unwrap();
        assert_eq!(z.shape(), [1, 32, 4, 4]);
        assert_eq!(hyper_synthesis(&b, z).unwrap().shape(), [1, 64, 8, 8]);
        for (i, l) in synthesis(&b, y, 0.5).unwrap().iter().enumerate() {
            assert_eq!(l.shape(), level_shape(i));
        }
    }

    #[test]
    fn round_trip_matches_reference_decoder() {
        let m = untrained();
        let norm = m.norm(0.8).unwrap();
        let enc = m.encode_full(&pyramid(1), norm).unwrap();
        let bytes = enc.stream.to_bytes().unwrap();
        let stream = Bitstream::from_bytes(&bytes).unwrap();
        let fast = m.decode_latent(&stream).unwrap();
        assert_eq!(fast, enc.y_hat);
        assert_eq!(m.decode_latent_reference(&stream).unwrap(), fast);
        let p = m.decode(&stream).unwrap();
        for (i, l) in p.levels().iter().enumerate() {
            assert_eq!(l.shape(), level_shape(i));
        }
        assert_eq!(m.encode(&pyramid(1), norm).unwrap().to_bytes().unwrap(), bytes);
    }

    #[test]
    fn header_scale_is_applied() {
        let m = untrained();
        let enc = m.encode_full(&pyramid(2), m.norm(0.8).unwrap()).unwrap();
        let p = m.decode(&enc.stream).unwrap();
        let unit = m.reconstruct(&enc.y_hat, m.norm(1.0).unwrap()).unwrap();
        for (a, b) in p.levels().iter().zip(unit.levels()) {
            let scaled = b.scale(0.8f32 as f64);
            assert!(a.max_abs_diff(&scaled) < 1e-12);
        }
    }

    #[test]
    fn zero_pyramid_codes() {
        let m = untrained();
        let s = m.encode(&FeaturePyramid::zeros(), m.norm(1.0).unwrap()).unwrap();
        let p = m.decode(&s).unwrap();
        assert!(p.levels().iter().all(|l| l.all_finite()));
    }

    #[test]
    fn loss_parts_and_zero_lambda() {
        let p = init_params(4);
        let batch = vec![pyramid(5), pyramid(6)];
        let r = batch_loss(&p, &batch, 0.013, 9, Exec::Serial).unwrap();
        assert_eq!(r.l_mv, r.l_r + 0.013 * r.l_p);
        assert!(r.l_r > 0.0 && r.l_p > 0.0);
        let r0 = batch_loss(&p, &batch, 0.0, 9, Exec::Serial).unwrap();
        assert_eq!(r0.l_mv, r0.l_r);
        assert_eq!(r0.l_r, r.l_r);
    }

    #[test]
    fn copying_heads_give_zero_feature_loss() {
        let p = init_params(4);
        let (normed, _) = ivn::train_normalize(&[pyramid(7)]).unwrap();
        let g = Graph::new();
        let b = Bound::frozen(&g, &p);
        let (_, _, l_p) = sample_loss(&b, &normed[0], 0.4, 1.0, 0).unwrap();
        let y = analysis(&b, g.constant(normed[0].level(0).clone()), 0.4).unwrap();
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(0);
        let y_t = quantize_var(y, QuantMode::AdditiveNoise, &mut rng).unwrap();
        let rec: Vec<Tensor> = synthesis(&b, y_t, 0.4).unwrap().iter().map(|v| (*v.value()).clone()).collect();
        let copied = FeaturePyramid::new(rec).unwrap();
        let (_, _, l_p0) = loss_with_input(&b, normed[0].level(0), &copied, 0.4, 1.0, 0).unwrap();
        assert_eq!(l_p0.item(), 0.0);
        assert!(l_p.item() > 0.0);
    }

    #[test]
    fn wrong_architecture_is_rejected() {
        let mut p = init_params(0);
        p.set_meta("c_min", 0.0);
        p.set_meta("c_max", 1.0);
        p.set_tag("arch", arch_hash());
        p.insert("dr.c1.w", Tensor::zeros(&[47, 32, 3, 3]));
        assert!(matches!(VfcnModel::from_params(p), Err(crate::Error::Format { .. })));
    }
}
