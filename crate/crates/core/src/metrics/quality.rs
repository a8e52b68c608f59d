//! PSNR and three-scale MS-SSIM for `[1, C, H, W]` images.

use crate::error::{dim_check, Result};
use crate::tensor::Tensor;

/// Reported in place of infinity for identical inputs.
pub const PSNR_CAP: f64 = 99.0;

const WINDOW: usize = 11;
const WINDOW_SIGMA: f64 = 1.5;
const K1: f64 = 0.01;
const K2: f64 = 0.03;
/// The first three of the usual five-scale weights, renormalized.
const SCALE_WEIGHTS: [f64; 3] = [0.0448, 0.2856, 0.3001];
pub const SCALES: usize = SCALE_WEIGHTS.len();

pub fn psnr(a: &Tensor, b: &Tensor, peak: f64) -> Result<f64> {
    dim_check!(a.shape() == b.shape(), "psnr of {:?} and {:?}", a.shape(), b.shape());
    let mse = a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (peak * peak / mse).log10()).min(PSNR_CAP))
}

fn gaussian_window() -> [f64; WINDOW] {
    let mut w = [0.0; WINDOW];
    let c = (WINDOW / 2) as f64;
    for (i, v) in w.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-d * d / (2.0 * WINDOW_SIGMA * WINDOW_SIGMA)).exp();
    }
    let s: f64 = w.iter().sum();
    w.map(|v| v / s)
}

/// Separable valid-mode filtering of an `h`×`w` plane.
fn filter(plane: &[f64], h: usize, w: usize, k: &[f64; WINDOW]) -> (Vec<f64>, usize, usize) {
    let (oh, ow) = (h + 1 - WINDOW, w + 1 - WINDOW);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..WINDOW).map(|i| k[i] * plane[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..WINDOW).map(|i| k[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    (out, oh, ow)
}

/// Mean SSIM and mean contrast-structure term of one plane pair.
fn ssim_cs(a: &[f64], b: &[f64], h: usize, w: usize, peak: f64) -> (f64, f64) {
    let k = gaussian_window();
    let (c1, c2) = ((K1 * peak).powi(2), (K2 * peak).powi(2));
    let prod = |f: fn(f64, f64) -> f64| -> Vec<f64> { a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect() };
    let (mu_a, oh, ow) = filter(a, h, w, &k);
    let (mu_b, ..) = filter(b, h, w, &k);
    let (aa, ..) = filter(&prod(|x, _| x * x), h, w, &k);
    let (bb, ..) = filter(&prod(|_, y| y * y), h, w, &k);
    let (ab, ..) = filter(&prod(|x, y| x * y), h, w, &k);
    let (mut ssim, mut cs) = (0.0, 0.0);
    for i in 0..oh * ow {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = aa[i] - ma * ma;
        let vb = bb[i] - mb * mb;
        let cov = ab[i] - ma * mb;
        let c = (2.0 * cov + c2) / (va + vb + c2);
        cs += c;
        ssim += c * (2.0 * ma * mb + c1) / (ma * ma + mb * mb + c1);
    }
    let n = (oh * ow) as f64;
    (ssim / n, cs / n)
}

fn downsample(p: &[f64], h: usize, w: usize) -> Vec<f64> {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            let s = p[2 * y * w + 2 * x] + p[2 * y * w + 2 * x + 1] + p[(2 * y + 1) * w + 2 * x] + p[(2 * y + 1) * w + 2 * x + 1];
            out[y * ow + x] = s / 4.0;
        }
    }
    out
}

/// Single-scale SSIM averaged over channels.
pub fn ssim(a: &Tensor, b: &Tensor, peak: f64) -> Result<f64> {
    dim_check!(a.shape() == b.shape(), "ssim of {:?} and {:?}", a.shape(), b.shape());
    let (n, c, h, w) = a.dims4()?;
    dim_check!(n == 1 && h >= WINDOW && w >= WINDOW, "ssim needs one image of at least {WINDOW}², got {:?}", a.shape());
    let plane = h * w;
    let total: f64 = (0..c)
        .map(|ci| ssim_cs(&a.data()[ci * plane..(ci + 1) * plane], &b.data()[ci * plane..(ci + 1) * plane], h, w, peak).0)
        .sum();
    Ok(total / c as f64)
}

/// Three-scale MS-SSIM with channel-averaged terms. Negative terms are
/// clamped to zero before the weighted product.
pub fn ms_ssim(a: &Tensor, b: &Tensor, peak: f64) -> Result<f64> {
    dim_check!(a.shape() == b.shape(), "ms-ssim of {:?} and {:?}", a.shape(), b.shape());
    let (n, c, h, w) = a.dims4()?;
    let min = WINDOW << (SCALES - 1);
    dim_check!(n == 1 && h >= min && w >= min, "ms-ssim needs one image of at least {min}², got {:?}", a.shape());
    let wsum: f64 = SCALE_WEIGHTS.iter().sum();
    let plane = h * w;
    let mut pa: Vec<Vec<f64>> = (0..c).map(|ci| a.data()[ci * plane..(ci + 1) * plane].to_vec()).collect();
    let mut pb: Vec<Vec<f64>> = (0..c).map(|ci| b.data()[ci * plane..(ci + 1) * plane].to_vec()).collect();
    let (mut hh, mut ww) = (h, w);
    let mut score = 1.0;
    for (s, &wt) in SCALE_WEIGHTS.iter().enumerate() {
        let (mut sv, mut cv) = (0.0, 0.0);
        for ci in 0..c {
            let (x, y) = ssim_cs(&pa[ci], &pb[ci], hh, ww, peak);
            sv += x;
            cv += y;
        }
        let term = if s + 1 == SCALES { sv } else { cv } / c as f64;
        score *= term.max(0.0).powf(wt / wsum);
        if s + 1 < SCALES {
            pa = pa.iter().map(|p| downsample(p, hh, ww)).collect();
            pb = pb.iter().map(|p| downsample(p, hh, ww)).collect();
            hh /= 2;
            ww /= 2;
        }
    }
    Ok(score)
}
