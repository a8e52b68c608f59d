//! Small convolutional VAE standing in for a frozen latent-diffusion
//! autoencoder: 3×64×64 images to 4×16×16 latents and back.
//!
//! Latents handed to the diffusion model are the encoder means divided by
//! their training-set standard deviation.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_xoshiro::Xoshiro256PlusPlus;

use crate::autodiff::{Graph, Var};
use crate::error::{contract, Error, Result};
use crate::par::Exec;
use crate::params::{init_conv, init_deconv, Bound, ParamStore};
use crate::pyramid::dataset::{CHANNELS, IMAGE_SIZE};
use crate::pyramid::ToyImage;
use crate::tensor::Tensor;
use crate::train::{mean_grads, Trainer};

pub const LATENT_CHANNELS: usize = 4;
pub const LATENT_SIZE: usize = 16;

pub fn latent_shape() -> [usize; 4] {
    [1, LATENT_CHANNELS, LATENT_SIZE, LATENT_SIZE]
}

pub fn init_params(seed: u64) -> ParamStore {
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
    let mut s = ParamStore::new();
    init_conv(&mut s, "vae.e1", CHANNELS, 32, 3, &mut rng);
    init_conv(&mut s, "vae.e2", 32, 48, 3, &mut rng);
    init_conv(&mut s, "vae.e3", 48, 2 * LATENT_CHANNELS, 3, &mut rng);
    init_conv(&mut s, "vae.d1", LATENT_CHANNELS, 48, 3, &mut rng);
    init_deconv(&mut s, "vae.d2", 48, 32, 4, 2, &mut rng);
    init_deconv(&mut s, "vae.d3", 32, 16, 4, 2, &mut rng);
    init_conv(&mut s, "vae.d4", 16, CHANNELS, 3, &mut rng);
    s
}

pub fn arch_hash() -> u64 {
    init_params(0).arch_hash()
}

fn conv<'g>(b: &Bound<'g, '_>, x: Var<'g>, name: &str, stride: usize) -> Result<Var<'g>> {
    let w = b.w(name)?;
    let pad = w.shape()[2] / 2;
    x.conv2d(w, b.b(name)?, stride, pad)
}

/// Encoder mean and log-variance, each `[1, 4, 16, 16]`.
pub fn encode_stats<'g>(b: &Bound<'g, '_>, x: Var<'g>) -> Result<(Var<'g>, Var<'g>)> {
    let h = conv(b, x.add_scalar(-0.5), "vae.e1", 2)?.leaky_relu();
    let h = conv(b, h, "vae.e2", 2)?.leaky_relu();
    let out = conv(b, h, "vae.e3", 1)?;
    Ok((out.slice(1, 0, LATENT_CHANNELS)?, out.slice(1, LATENT_CHANNELS, LATENT_CHANNELS)?))
}

/// Unclamped image from an unscaled latent.
pub fn decode<'g>(b: &Bound<'g, '_>, z: Var<'g>) -> Result<Var<'g>> {
    let h = conv(b, z, "vae.d1", 1)?.leaky_relu();
    let h = h.deconv2d(b.w("vae.d2")?, b.b("vae.d2")?, 2, 1)?.leaky_relu();
    let h = h.deconv2d(b.w("vae.d3")?, b.b("vae.d3")?, 2, 1)?.leaky_relu();
    Ok(conv(b, h, "vae.d4", 1)?.add_scalar(0.5))
}

/// Reconstruction MSE plus `kl_weight` times the mean per-element KL
/// divergence to a unit Gaussian.
fn sample_loss<'g>(
    b: &Bound<'g, '_>,
    img: &Tensor,
    kl_weight: f64,
    seed: u64,
) -> Result<(Var<'g>, Var<'g>, Var<'g>)> {
    let g = b.graph();
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
    let (mu, logvar) = encode_stats(b, g.constant(img.clone()))?;
    let eps = g.constant(Tensor::randn(&latent_shape(), 1.0, &mut rng));
    let z = mu.add(logvar.mul_scalar(0.5).exp().mul(eps)?)?;
    let rec = decode(b, z)?.mse(g.constant(img.clone()))?;
    // KL = ½ (μ² + e^{lv} - 1 - lv), averaged.
    let kl = mu
        .square()
        .add(logvar.exp())?
        .sub(logvar)?
        .add_scalar(-1.0)
        .mean()
        .mul_scalar(0.5);
    let total = rec.add(kl.mul_scalar(kl_weight))?;
    Ok((total, rec, kl))
}

#[derive(Clone, Copy, Debug)]
pub struct VaeTrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub kl_weight: f64,
    pub seed: u64,
}

pub fn train(images: &[ToyImage], cfg: VaeTrainConfig, exec: Exec) -> Result<(VaeModel, Vec<f64>)> {
    contract!(!images.is_empty(), "training the autoencoder on no images");
    let mut params = init_params(cfg.seed);
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(cfg.seed.wrapping_add(1));
    let mut trainer = Trainer::new(cfg.lr, cfg.steps, 5.0);
    let mut order: Vec<usize> = (0..images.len()).collect();
    let mut cursor = order.len();
    let mut losses = Vec::with_capacity(cfg.steps);
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
            let seed = cfg.seed ^ ((step * cfg.batch + i) as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
            let (total, rec, kl) = sample_loss(&b, &images[batch[i]].pixels, cfg.kl_weight, seed)?;
            Ok((vec![total.item(), rec.item(), kl.item()], b.grads(&g.backward(total)?)))
        })?;
        trainer.apply(&mut params, l[0], &grads)?;
        if step % 100 == 0 {
            log::info!("vae step {step}: loss {:.5} (mse {:.5}, kl {:.3})", l[0], l[1], l[2]);
        }
        losses.push(l[0]);
    }
    params.round_to_f32();
    let means = exec.try_map(images, |img| encoder_mean(&params, &img.pixels))?;
    let n: f64 = means.iter().map(|m| m.len() as f64).sum();
    let var = means.iter().flat_map(|m| m.data().iter()).map(|v| v * v).sum::<f64>() / n;
    let scale = var.sqrt().max(1e-6);
    let bound = means.iter().map(|m| m.data().iter().fold(0.0f64, |a, v| a.max(v.abs()))).fold(0.0, f64::max) / scale;
    params.set_meta("z_scale", scale);
    params.set_meta("z_bound", bound);
    params.set_tag("arch", params.arch_hash());
    Ok((VaeModel::from_params(params)?, losses))
}

fn encoder_mean(params: &ParamStore, pixels: &Tensor) -> Result<Tensor> {
    let g = Graph::new();
    let b = Bound::frozen(&g, params);
    let (mu, _) = encode_stats(&b, g.constant(pixels.clone()))?;
    Ok((*mu.value()).clone())
}

#[derive(Clone, Debug)]
pub struct VaeModel {
    pub params: ParamStore,
    scale: f64,
    bound: f64,
}

impl VaeModel {
    pub fn from_params(params: ParamStore) -> Result<Self> {
        params.check_arch(arch_hash(), "autoencoder")?;
        let scale = params
            .meta("z_scale")
            .map_err(|_| Error::State("autoencoder has not been trained".into()))?;
        let bound = params.meta("z_bound")?;
        Ok(VaeModel { params, scale, bound })
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        Self::from_params(ParamStore::load(path)?)
    }

    /// Largest magnitude of any unit-variance training latent.
    pub fn latent_bound(&self) -> f64 {
        self.bound
    }

    /// Unit-variance latent `z_s` of an image `[1, 3, 64, 64]`.
    pub fn encode(&self, pixels: &Tensor) -> Result<Tensor> {
        contract!(
            pixels.shape() == [1, CHANNELS, IMAGE_SIZE, IMAGE_SIZE],
            "image of shape {:?}",
            pixels.shape()
        );
        Ok(encoder_mean(&self.params, pixels)?.scale(1.0 / self.scale))
    }

    /// Image in `[0, 1]` from a unit-variance latent.
    pub fn decode(&self, z: &Tensor) -> Result<Tensor> {
        contract!(z.shape() == latent_shape(), "latent of shape {:?}", z.shape());
        let g = Graph::new();
        let b = Bound::frozen(&g, &self.params);
        let x = decode(&b, g.constant(z.scale(self.scale)))?;
        Ok(x.value().map(|v| v.clamp(0.0, 1.0)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shapes() {
        let p = init_params(1);
        let g = Graph::new();
        let b = Bound::frozen(&g, &p);
        let (mu, lv) = encode_stats(&b, g.constant(Tensor::zeros(&[1, 3, 64, 64]))).unwrap();
        assert_eq!(mu.shape(), latent_shape());
        assert_eq!(lv.shape(), latent_shape());
        assert_eq!(decode(&b, mu).unwrap().shape(), [1, 3, 64, 64]);
    }

    #[test]
    fn untrained_model_is_a_state_error() {
        let mut p = init_params(1);
        p.set_tag("arch", arch_hash());
        assert!(matches!(VaeModel::from_params(p), Err(Error::State(_))));
    }

    #[test]
    fn black_image_decodes_in_range() {
        let mut p = init_params(2);
        p.set_meta("z_scale", 1.0);
        p.set_meta("z_bound", 4.0);
        p.set_tag("arch", arch_hash());
        let m = VaeModel::from_params(p).unwrap();
        let z = m.encode(&Tensor::zeros(&[1, 3, 64, 64])).unwrap();
        assert!(z.all_finite());
        let x = m.decode(&z).unwrap();
        assert!(x.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn kl_vanishes_for_unit_gaussian_posterior() {
        let p = init_params(3);
        let g = Graph::new();
        let b = Bound::frozen(&g, &p);
        let (_, _, kl) = sample_loss(&b, &Tensor::full(&[1, 3, 64, 64], 0.5), 1.0, 0).unwrap();
        assert!(kl.item() >= 0.0);
    }
}
