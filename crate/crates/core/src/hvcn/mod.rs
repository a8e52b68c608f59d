//! Human-vision reconstruction from the machine stream.
//!
//! The colour latent `z_s` of the autoencoder is coded by a small factorized
//! codec (LE/LD). A latent diffusion model, conditioned through a control
//! module on the decoded features P̂2, P̂3 and the decoded colour latent,
//! samples `z_0`, which the autoencoder decodes to an image.

pub mod nets;
pub mod schedule;
pub mod vae;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;

use crate::autodiff::Graph;
use crate::entropy::factorized::{self, FactorizedPrior};
use crate::entropy::RateCheck;
use crate::entropy::quant::{from_symbols, quantize_var, to_symbols, QuantMode};
use crate::entropy::tables::{range_decode, range_encode, ChannelTables, SymbolTable};
use crate::error::{contract, dim_check, Result};
use crate::par::Exec;
use crate::params::{Bound, ParamStore};
use crate::pyramid::{level_shape, FeaturePyramid};
use crate::tensor::Tensor;
use crate::train::{mean_grads, Trainer};
use crate::vfcn::IMAGE_PIXELS;

pub use nets::{code_shape, CONDITION_CHANNELS, FUSION_CHANNELS};
pub use schedule::NoiseSchedule;
pub use vae::{latent_shape, VaeModel};

pub const DEFAULT_LAMBDA_A: f64 = 2.0;
pub const LAMBDA_RS_VARIANTS: [f64; 4] = [0.1, 0.5, 1.0, 3.0];
/// Machine-stream scale factor used for the decoded features during
/// training.
pub const TRAIN_SCALE: f64 = 0.8;
pub const DEFAULT_SAMPLING_STEPS: usize = 20;

pub fn init_params(seed: u64) -> ParamStore {
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
    let mut s = ParamStore::new();
    nets::init(&mut s, &mut rng);
    s
}

pub fn arch_hash() -> u64 {
    init_params(0).arch_hash()
}

/// One training or test item: decoded machine features and the clean
/// unit-variance colour latent.
#[derive(Clone, Debug, PartialEq)]
pub struct HvcnSample {
    pub p2: Tensor,
    pub p3: Tensor,
    pub z_s: Tensor,
}

impl HvcnSample {
    pub fn new(decoded: &FeaturePyramid, z_s: Tensor) -> Result<Self> {
        dim_check!(z_s.shape() == latent_shape(), "colour latent of shape {:?}", z_s.shape());
        Ok(HvcnSample {
            p2: decoded.level(0).clone(),
            p3: decoded.level(1).clone(),
            z_s,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HvcnLossReport {
    pub l_s: f64,
    pub l_a: f64,
    /// Colour-stream rate estimate in bits per image pixel.
    pub l_rs: f64,
    pub l_hv: f64,
}

/// Random draws of one training sample.
#[derive(Clone, Debug)]
pub struct NoiseDraw {
    pub t: usize,
    pub eps: Tensor,
    pub quant: Tensor,
}

impl NoiseDraw {
    pub fn sample(schedule: &NoiseSchedule, seed: u64) -> Self {
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
        let t = rng.gen_range(1..=schedule.steps());
        let eps = Tensor::randn(&latent_shape(), 1.0, &mut rng);
        let quant = Tensor::uniform(&code_shape(), -0.5, 0.5, &mut rng);
        NoiseDraw { t, eps, quant }
    }
}

/// Graph of the training objective for one sample. Returns
/// `(L_hv, L_s, L_a, L_rs)`.
pub fn sample_loss<'g>(
    b: &Bound<'g, '_>,
    schedule: &NoiseSchedule,
    sample: &HvcnSample,
    draw: &NoiseDraw,
    lambda_a: f64,
    lambda_rs: f64,
) -> Result<[crate::autodiff::Var<'g>; 4]> {
    let g = b.graph();
    let z_s = g.constant(sample.z_s.clone());
    let y = nets::latent_encoder(b, z_s)?;
    let y_t = y.add(g.constant(draw.quant.clone()))?;
    let z_hat = nets::latent_decoder(b, y_t)?;
    let p = factorized::likelihood(b, nets::PRIOR, y_t)?;
    let l_rs = p.log().sum().mul_scalar(-1.0 / (std::f64::consts::LN_2 * IMAGE_PIXELS as f64));
    let fused = nets::fusion(b, g.constant(sample.p2.clone()), g.constant(sample.p3.clone()), z_hat)?;
    let l_a = nets::fusion_projection(b, fused)?.mse(z_s)?;
    let z_t = g.constant(schedule.add_noise(&sample.z_s, &draw.eps, draw.t)?);
    let c_f = nets::condition(fused, z_t)?;
    let eps_hat = nets::predict_noise(b, z_t, draw.t, c_f)?;
    let l_s = eps_hat.mse(g.constant(draw.eps.clone()))?;
    let l_hv = l_s.add(l_a.mul_scalar(lambda_a))?.add(l_rs.mul_scalar(lambda_rs))?;
    Ok([l_hv, l_s, l_a, l_rs])
}

fn draw_seed(seed: u64, step: usize, i: usize) -> u64 {
    seed ^ (step as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (i as u64).wrapping_mul(0xC2B2_AE3D_27D4_EB4F)
}

/// Mean loss of `params` over `samples` with draws from `seed`.
pub fn batch_loss(
    params: &ParamStore,
    samples: &[HvcnSample],
    lambda_a: f64,
    lambda_rs: f64,
    seed: u64,
    exec: Exec,
) -> Result<HvcnLossReport> {
    contract!(!samples.is_empty(), "loss over no samples");
    let schedule = NoiseSchedule::default();
    let parts = exec.map_range(samples.len(), |i| {
        let g = Graph::new();
        let b = Bound::frozen(&g, params);
        let draw = NoiseDraw::sample(&schedule, draw_seed(seed, 0, i));
        let l = sample_loss(&b, &schedule, &samples[i], &draw, lambda_a, lambda_rs)?;
        Ok::<_, crate::Error>(l.map(|v| v.item()))
    });
    let mut acc = [0.0; 4];
    for p in parts {
        for (a, v) in acc.iter_mut().zip(p?) {
            *a += v;
        }
    }
    let n = samples.len() as f64;
    Ok(HvcnLossReport {
        l_hv: acc[0] / n,
        l_s: acc[1] / n,
        l_a: acc[2] / n,
        l_rs: acc[3] / n,
    })
}

#[derive(Clone, Copy, Debug)]
pub struct HvcnTrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub lambda_a: f64,
    pub lambda_rs: f64,
    pub seed: u64,
}

/// Trains every human-vision parameter, starting from `init` when given
/// (rate variants are fine-tuned from a shared base model).
pub fn train(
    samples: &[HvcnSample],
    cfg: HvcnTrainConfig,
    init: Option<&ParamStore>,
    exec: Exec,
) -> Result<(HvcnModel, Vec<HvcnLossReport>)> {
    contract!(!samples.is_empty(), "training the reconstruction model on no samples");
    contract!(cfg.batch > 0, "batch size must be positive");
    let mut params = match init {
        Some(p) => {
            p.check_arch(arch_hash(), "reconstruction model")?;
            p.clone()
        }
        None => init_params(cfg.seed),
    };
    let schedule = NoiseSchedule::default();
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(cfg.seed.wrapping_add(1));
    let mut trainer = Trainer::new(cfg.lr, cfg.steps, 5.0);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut cursor = order.len();
    let mut log = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let mut batch = Vec::with_capacity(cfg.batch);
        while batch.len() < cfg.batch {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(order[cursor]);
            cursor += 1;
        }
        let (l, grads) = mean_grads(exec, batch.len(), |i| {
            let g = Graph::new();
            let b = Bound::all(&g, &params);
            let draw = NoiseDraw::sample(&schedule, draw_seed(cfg.seed, step, i));
            let [l_hv, l_s, l_a, l_rs] =
                sample_loss(&b, &schedule, &samples[batch[i]], &draw, cfg.lambda_a, cfg.lambda_rs)?;
            Ok((vec![l_hv.item(), l_s.item(), l_a.item(), l_rs.item()], b.grads(&g.backward(l_hv)?)))
        })?;
        trainer.apply(&mut params, l[0], &grads)?;
        let r = HvcnLossReport {
            l_hv: l[0],
            l_s: l[1],
            l_a: l[2],
            l_rs: l[3],
        };
        if step % 100 == 0 {
            log::info!(
                "hvcn step {step}: L_hv {:.4} (noise {:.4}, align {:.4}, rate {:.4} bpp)",
                r.l_hv,
                r.l_s,
                r.l_a,
                r.l_rs
            );
        }
        log.push(r);
    }
    params.round_to_f32();
    params.set_meta("lambda_a", cfg.lambda_a);
    params.set_meta("lambda_rs", cfg.lambda_rs);
    params.set_tag("arch", params.arch_hash());
    Ok((HvcnModel::from_params(params)?, log))
}

/// A trained reconstruction model with its colour-latent tables prepared.
#[derive(Clone, Debug)]
pub struct HvcnModel {
    pub params: ParamStore,
    tables: Vec<SymbolTable>,
    schedule: NoiseSchedule,
}

impl HvcnModel {
    pub fn from_params(params: ParamStore) -> Result<Self> {
        params.check_arch(arch_hash(), "reconstruction model")?;
        let tables = FactorizedPrior::from_store(&params, nets::PRIOR)?.tables()?;
        Ok(HvcnModel {
            params,
            tables,
            schedule: NoiseSchedule::default(),
        })
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        Self::from_params(ParamStore::load(path)?)
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    fn provider(&self) -> ChannelTables {
        ChannelTables {
            tables: self.tables.clone(),
            per_channel: nets::CODE_SIZE * nets::CODE_SIZE,
        }
    }

    /// Rounded code `ŷ_s` of a colour latent.
    pub fn code(&self, z_s: &Tensor) -> Result<Tensor> {
        dim_check!(z_s.shape() == latent_shape(), "colour latent of shape {:?}", z_s.shape());
        let g = Graph::new();
        let b = Bound::frozen(&g, &self.params);
        let y = nets::latent_encoder(&b, g.constant(z_s.clone()))?;
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(0);
        Ok((*quantize_var(y, QuantMode::Round, &mut rng)?.value()).clone())
    }

    /// `ẑ_s` from a rounded code.
    pub fn reconstruct_latent(&self, y_hat: &Tensor) -> Result<Tensor> {
        dim_check!(y_hat.shape() == code_shape(), "colour code of shape {:?}", y_hat.shape());
        let g = Graph::new();
        let b = Bound::frozen(&g, &self.params);
        Ok((*nets::latent_decoder(&b, g.constant(y_hat.clone()))?.value()).clone())
    }

    /// Entropy-coded colour payload and the decoder-side `ẑ_s`.
    pub fn compress_latent(&self, z_s: &Tensor) -> Result<(Vec<u8>, Tensor)> {
        let y_hat = self.code(z_s)?;
        let bytes = range_encode(&to_symbols(&y_hat)?, &mut self.provider())?;
        Ok((bytes, self.reconstruct_latent(&y_hat)?))
    }

    pub fn decompress_latent(&self, bytes: &[u8]) -> Result<Tensor> {
        let n = code_shape().iter().product();
        let syms = range_decode(bytes, &mut self.provider(), n)?;
        self.reconstruct_latent(&from_symbols(&code_shape(), &syms)?)
    }

    /// `−Σ log2 p(ŷ_s)` under the prior.
    pub fn estimated_bits(&self, y_hat: &Tensor) -> Result<f64> {
        let g = Graph::new();
        let b = Bound::frozen(&g, &self.params);
        let p = factorized::likelihood(&b, nets::PRIOR, g.constant(y_hat.clone()))?;
        Ok(p.value().data().iter().map(|v| -v.log2()).sum())
    }

    /// Rate estimate and actual payload of several colour codes coded as
    /// one latent, side by side along the width.
    pub fn code_rate_check(&self, y_hats: &[Tensor]) -> Result<RateCheck> {
        contract!(!y_hats.is_empty(), "rate check over no codes");
        let [_, c, h, w] = code_shape();
        let n = y_hats.len();
        let mut joined = vec![0.0; c * h * w * n];
        for (k, y) in y_hats.iter().enumerate() {
            dim_check!(y.shape() == code_shape(), "colour code of shape {:?}", y.shape());
            for (i, row) in y.data().chunks(w).enumerate() {
                let at = i * w * n + k * w;
                joined[at..at + w].copy_from_slice(row);
            }
        }
        let joined = Tensor::new(&[1, c, h, w * n], joined)?;
        let bytes = range_encode(
            &to_symbols(&joined)?,
            &mut ChannelTables {
                tables: self.tables.clone(),
                per_channel: h * w * n,
            },
        )?;
        Ok(RateCheck {
            elements: joined.len(),
            estimate: self.estimated_bits(&joined)?,
            actual: bytes.len() * 8,
        })
    }

    /// Fusion channels for decoded features and colour latent.
    pub fn fuse_features(&self, p2: &Tensor, p3: &Tensor, z_hat: &Tensor) -> Result<Tensor> {
        let g = Graph::new();
        let b = Bound::frozen(&g, &self.params);
        let f = nets::fusion(&b, g.constant(p2.clone()), g.constant(p3.clone()), g.constant(z_hat.clone()))?;
        Ok((*f.value()).clone())
    }

    /// `c_f = FCN(P̂2, P̂3, ẑ_s) ⊕ z_t`, `[1, 36, 16, 16]`.
    pub fn fuse(&self, p2: &Tensor, p3: &Tensor, z_hat: &Tensor, z_t: &Tensor) -> Result<Tensor> {
        let fused = self.fuse_features(p2, p3, z_hat)?;
        let g = Graph::new();
        let c = nets::condition(g.constant(fused), g.constant(z_t.clone()))?;
        Ok((*c.value()).clone())
    }

    /// `ε_θ(z_t, t, c_f)`.
    pub fn predict_noise(&self, z_t: &Tensor, t: usize, c_f: &Tensor) -> Result<Tensor> {
        self.schedule.check_t(t)?;
        let g = Graph::new();
        let b = Bound::frozen(&g, &self.params);
        let e = nets::predict_noise(&b, g.constant(z_t.clone()), t, g.constant(c_f.clone()))?;
        Ok((*e.value()).clone())
    }

    /// Noise prediction of the bare U-Net, without any conditioning.
    pub fn predict_noise_unconditioned(&self, z_t: &Tensor, t: usize) -> Result<Tensor> {
        self.schedule.check_t(t)?;
        let g = Graph::new();
        let b = Bound::frozen(&g, &self.params);
        let time = nets::time_features(&b, t)?;
        Ok((*nets::unet(&b, g.constant(z_t.clone()), time, None)?.value()).clone())
    }

    /// Spaced ancestral sampling over `k` uniformly strided timesteps.
    /// Predicted clean latents are clipped to `±clip`.
    pub fn sample(
        &self,
        decoded: &FeaturePyramid,
        z_hat: &Tensor,
        k: usize,
        seed: u64,
        clip: f64,
    ) -> Result<Tensor> {
        let ts = self.schedule.spaced(k)?;
        dim_check!(decoded.level(0).shape() == level_shape(0), "decoded P2 of shape {:?}", decoded.level(0).shape());
        let fused = self.fuse_features(decoded.level(0), decoded.level(1), z_hat)?;
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
        let mut z = Tensor::randn(&latent_shape(), 1.0, &mut rng);
        for i in (0..ts.len()).rev() {
            let t = ts[i];
            let t_prev = if i == 0 { 0 } else { ts[i - 1] };
            let eps = {
                let g = Graph::new();
                let b = Bound::frozen(&g, &self.params);
                let z_t = g.constant(z.clone());
                let c_f = nets::condition(g.constant(fused.clone()), z_t)?;
                (*nets::predict_noise(&b, z_t, t, c_f)?.value()).clone()
            };
            let ab = self.schedule.alpha_bar(t);
            let ab_prev = self.schedule.alpha_bar(t_prev);
            let beta = 1.0 - ab / ab_prev;
            let (sa, sb) = (ab.sqrt(), (1.0 - ab).sqrt());
            let x0 = z.zip_map(&eps, |zt, e| ((zt - sb * e) / sa).clamp(-clip, clip))?;
            let c0 = ab_prev.sqrt() * beta / (1.0 - ab);
            let ct = (1.0 - beta).sqrt() * (1.0 - ab_prev) / (1.0 - ab);
            let mean = x0.zip_map(&z, |a, b| c0 * a + ct * b)?;
            z = if t_prev > 0 {
                let std = (beta * (1.0 - ab_prev) / (1.0 - ab)).sqrt();
                let noise = Tensor::randn(&latent_shape(), 1.0, &mut rng);
                mean.zip_map(&noise, |m, n| m + std * n)?
            } else {
                mean
            };
        }
        Ok(z)
    }
}
