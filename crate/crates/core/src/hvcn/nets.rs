//! Layers of the human-vision branch: the colour-latent codec (LE/LD), the
//! fusion network, the control module with its zero convolutions and the
//! noise-predicting U-Net.
//!
//! The U-Net works on 4×16×16 latents at two resolutions (16², 8²) with base
//! width 32. The control module mirrors its encoder at width 16 and feeds
//! each resolution through a zero-initialized 1×1 convolution.

use rand::Rng;

use crate::autodiff::{concat, Var};
use crate::entropy::factorized;
use crate::error::{dim_check, Result};
use crate::params::{init_conv, init_deconv, init_zero_conv, Bound, ParamStore};
use crate::pyramid::{level_shape, PYRAMID_CHANNELS};
use crate::tensor::Tensor;

use super::schedule::timestep_embedding;
use super::vae::{latent_shape, LATENT_CHANNELS, LATENT_SIZE};

pub const CODE_CHANNELS: usize = 8;
pub const CODE_SIZE: usize = 8;
pub const FUSION_CHANNELS: usize = 32;
pub const CONDITION_CHANNELS: usize = FUSION_CHANNELS + LATENT_CHANNELS;
pub const UNET_WIDTH: usize = 32;
pub const CONTROL_WIDTH: usize = 16;
pub const TIME_DIMS: usize = 32;
const TIME_FEATURES: usize = 64;
const ACN_HIDDEN: usize = 32;
pub const PRIOR: &str = "acn.prior";
/// Names of the zero convolutions joining the control module to the U-Net.
pub const ZERO_CONVS: [&str; 2] = ["cm.z1", "cm.z2"];

pub fn code_shape() -> [usize; 4] {
    [1, CODE_CHANNELS, CODE_SIZE, CODE_SIZE]
}

fn init_res<R: Rng + ?Sized>(s: &mut ParamStore, name: &str, c: usize, timed: bool, rng: &mut R) {
    init_conv(s, &format!("{name}.c1"), c, c, 3, rng);
    init_conv(s, &format!("{name}.c2"), c, c, 3, rng);
    if timed {
        init_conv(s, &format!("{name}.t"), TIME_FEATURES, c, 1, rng);
    }
}

pub fn init<R: Rng + ?Sized>(s: &mut ParamStore, rng: &mut R) {
    let (w, cw) = (UNET_WIDTH, CONTROL_WIDTH);
    init_conv(s, "acn.e1", LATENT_CHANNELS, ACN_HIDDEN, 3, rng);
    init_conv(s, "acn.e2", ACN_HIDDEN, CODE_CHANNELS, 3, rng);
    init_deconv(s, "acn.d1", CODE_CHANNELS, ACN_HIDDEN, 4, 2, rng);
    init_conv(s, "acn.d2", ACN_HIDDEN, LATENT_CHANNELS, 3, rng);
    factorized::init(s, PRIOR, CODE_CHANNELS, rng);

    let fcn_in = 2 * PYRAMID_CHANNELS + LATENT_CHANNELS;
    init_conv(s, "fcn.in", fcn_in, FUSION_CHANNELS, 3, rng);
    init_res(s, "fcn.r1", FUSION_CHANNELS, false, rng);
    init_conv(s, "fcn.a1", FUSION_CHANNELS, FUSION_CHANNELS / 4, 1, rng);
    init_conv(s, "fcn.a2", FUSION_CHANNELS / 4, FUSION_CHANNELS, 1, rng);
    init_conv(s, "fcn.out", FUSION_CHANNELS, FUSION_CHANNELS, 3, rng);
    init_conv(s, "fcn.proj", FUSION_CHANNELS, LATENT_CHANNELS, 1, rng);

    init_conv(s, "unet.t1", TIME_DIMS, TIME_FEATURES, 1, rng);
    init_conv(s, "unet.t2", TIME_FEATURES, TIME_FEATURES, 1, rng);
    init_conv(s, "unet.in", LATENT_CHANNELS, w, 3, rng);
    init_res(s, "unet.r1", w, true, rng);
    init_conv(s, "unet.down", w, 2 * w, 3, rng);
    init_res(s, "unet.r2", 2 * w, true, rng);
    init_deconv(s, "unet.up", 2 * w, w, 4, 2, rng);
    init_conv(s, "unet.merge", 2 * w, w, 3, rng);
    init_res(s, "unet.r3", w, true, rng);
    init_conv(s, "unet.out", w, LATENT_CHANNELS, 3, rng);

    init_conv(s, "cm.in", CONDITION_CHANNELS, cw, 3, rng);
    init_res(s, "cm.r1", cw, true, rng);
    init_conv(s, "cm.down", cw, 2 * cw, 3, rng);
    init_res(s, "cm.r2", 2 * cw, true, rng);
    init_zero_conv(s, ZERO_CONVS[0], cw, w, 1);
    init_zero_conv(s, ZERO_CONVS[1], 2 * cw, 2 * w, 1);
}

fn conv<'g>(b: &Bound<'g, '_>, x: Var<'g>, name: &str, stride: usize) -> Result<Var<'g>> {
    let w = b.w(name)?;
    let pad = w.shape()[2] / 2;
    x.conv2d(w, b.b(name)?, stride, pad)
}

fn deconv<'g>(b: &Bound<'g, '_>, x: Var<'g>, name: &str) -> Result<Var<'g>> {
    x.deconv2d(b.w(name)?, b.b(name)?, 2, 1)
}

/// Residual block; `time` adds a per-channel projection of the timestep
/// features after the first convolution.
fn res<'g>(b: &Bound<'g, '_>, x: Var<'g>, name: &str, time: Option<Var<'g>>) -> Result<Var<'g>> {
    let mut h = conv(b, x, &format!("{name}.c1"), 1)?;
    if let Some(t) = time {
        h = h.add_channel(conv(b, t, &format!("{name}.t"), 1)?)?;
    }
    let h = conv(b, h.leaky_relu(), &format!("{name}.c2"), 1)?;
    x.add(h)
}

/// LE: `z_s` `[1, 4, 16, 16]` to `y_s` `[1, 8, 8, 8]`.
pub fn latent_encoder<'g>(b: &Bound<'g, '_>, z_s: Var<'g>) -> Result<Var<'g>> {
    let h = conv(b, z_s, "acn.e1", 1)?.leaky_relu();
    conv(b, h, "acn.e2", 2)
}

/// LD: `ŷ_s` to `ẑ_s`.
pub fn latent_decoder<'g>(b: &Bound<'g, '_>, y_hat: Var<'g>) -> Result<Var<'g>> {
    let h = deconv(b, y_hat, "acn.d1")?.leaky_relu();
    conv(b, h, "acn.d2", 1)
}

/// Fusion of the decoded machine features with the colour latent, 32
/// channels at 16×16. P̂3 is nearest-upsampled to the P̂2 grid.
pub fn fusion<'g>(b: &Bound<'g, '_>, p2: Var<'g>, p3: Var<'g>, z_hat: Var<'g>) -> Result<Var<'g>> {
    dim_check!(p2.shape() == level_shape(0), "fusion P2 of shape {:?}", p2.shape());
    dim_check!(p3.shape() == level_shape(1), "fusion P3 of shape {:?}", p3.shape());
    dim_check!(z_hat.shape() == latent_shape(), "fusion latent of shape {:?}", z_hat.shape());
    let x = concat(&[p2, p3.upsample_nearest(2)?, z_hat], 1)?;
    let h = conv(b, x, "fcn.in", 1)?.leaky_relu();
    let h = res(b, h, "fcn.r1", None)?;
    // Channel attention from the spatial means.
    let a = conv(b, h.mean_hw()?, "fcn.a1", 1)?.leaky_relu();
    let a = conv(b, a, "fcn.a2", 1)?.sigmoid();
    conv(b, h.mul_channel(a)?.leaky_relu(), "fcn.out", 1)
}

/// 1×1 projection of the fusion channels onto the latent channels.
pub fn fusion_projection<'g>(b: &Bound<'g, '_>, fused: Var<'g>) -> Result<Var<'g>> {
    conv(b, fused, "fcn.proj", 1)
}

/// `c_f`: fusion channels followed by the noisy latent.
pub fn condition<'g>(fused: Var<'g>, z_t: Var<'g>) -> Result<Var<'g>> {
    dim_check!(z_t.shape() == latent_shape(), "noisy latent of shape {:?}", z_t.shape());
    concat(&[fused, z_t], 1)
}

/// Timestep features `[1, 64, 1, 1]`.
pub fn time_features<'g>(b: &Bound<'g, '_>, t: usize) -> Result<Var<'g>> {
    let e = b.graph().constant(timestep_embedding(t, TIME_DIMS));
    let h = conv(b, e, "unet.t1", 1)?.leaky_relu();
    Ok(conv(b, h, "unet.t2", 1)?.leaky_relu())
}

/// Control residuals for the two U-Net encoder resolutions, each passed
/// through its zero convolution.
pub fn control<'g>(b: &Bound<'g, '_>, c_f: Var<'g>, time: Var<'g>) -> Result<[Var<'g>; 2]> {
    dim_check!(
        c_f.shape() == [1, CONDITION_CHANNELS, LATENT_SIZE, LATENT_SIZE],
        "condition of shape {:?}",
        c_f.shape()
    );
    let h = conv(b, c_f, "cm.in", 1)?.leaky_relu();
    let h1 = res(b, h, "cm.r1", Some(time))?;
    let h = conv(b, h1, "cm.down", 2)?.leaky_relu();
    let h2 = res(b, h, "cm.r2", Some(time))?;
    Ok([conv(b, h1, ZERO_CONVS[0], 1)?, conv(b, h2, ZERO_CONVS[1], 1)?])
}

/// Noise prediction for `z_t`, optionally with control residuals added
/// after each encoder block.
pub fn unet<'g>(b: &Bound<'g, '_>, z_t: Var<'g>, time: Var<'g>, ctrl: Option<[Var<'g>; 2]>) -> Result<Var<'g>> {
    dim_check!(z_t.shape() == latent_shape(), "noisy latent of shape {:?}", z_t.shape());
    let h = conv(b, z_t, "unet.in", 1)?;
    let mut h1 = res(b, h, "unet.r1", Some(time))?;
    if let Some([c1, _]) = ctrl {
        h1 = h1.add(c1)?;
    }
    let h = conv(b, h1, "unet.down", 2)?.leaky_relu();
    let mut h2 = res(b, h, "unet.r2", Some(time))?;
    if let Some([_, c2]) = ctrl {
        h2 = h2.add(c2)?;
    }
    let u = deconv(b, h2, "unet.up")?.leaky_relu();
    let m = conv(b, concat(&[u, h1], 1)?, "unet.merge", 1)?.leaky_relu();
    let m = res(b, m, "unet.r3", Some(time))?;
    conv(b, m.leaky_relu(), "unet.out", 1)
}

/// Full conditioned noise prediction `ε_θ(z_t, t, c_f)`.
pub fn predict_noise<'g>(b: &Bound<'g, '_>, z_t: Var<'g>, t: usize, c_f: Var<'g>) -> Result<Var<'g>> {
    let time = time_features(b, t)?;
    let ctrl = control(b, c_f, time)?;
    unet(b, z_t, time, Some(ctrl))
}

/// True when every zero-convolution weight and bias is exactly zero.
pub fn zero_convs_are_zero(s: &ParamStore) -> Result<bool> {
    for z in ZERO_CONVS {
        for suffix in ["w", "b"] {
            let t: &Tensor = s.get(&format!("{z}.{suffix}"))?;
            if t.data().iter().any(|&v| v != 0.0) {
                return Ok(false);
            }
        }
    }
    Ok(true)
}
